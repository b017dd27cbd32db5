use lipgraph::graphs::*;
use lipgraph::landmarks::{LipTopology, NUM_LANDMARKS};
use lipgraph::synth::{flip, generate_dataset, SynthConfig};
use lipgraph::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_track(seed: u64, t: usize, fs: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[t, NUM_LANDMARKS, 2], |_| rng.random_range(0.0..fs))
}

fn random_feats(seed: u64, n: usize, c: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, c], 1.0, &mut rng)
}

#[test]
fn lcg_degree_by_node_role() {
    let topo = LipTopology::default();
    let raw = lcg_weights(&topo).unwrap();
    let deg: Vec<usize> = raw.data().chunks(20).map(|r| r.iter().filter(|&&v| v > 0.0).count()).collect();
    // corners carry one cross-ring link on top of two ring neighbours and the self-loop
    let corners = [0, 6, 12, 16];
    for (i, d) in deg.iter().enumerate() {
        let want = if corners.contains(&i) { 4 } else { 3 };
        assert_eq!(*d, want, "node {i}");
    }
    for i in 0..20 {
        for j in 0..20 {
            assert_eq!(raw.at(&[i, j]), raw.at(&[j, i]));
        }
    }
}

#[test]
fn lcg_rejects_open_ring() {
    let mut topo = LipTopology::default();
    topo.inner_ring.truncate(2);
    assert!(build_lcg(&topo).is_err());
}

#[test]
fn dag_weight_ratio_follows_inverse_distance() {
    // node 1 sits 3px from node 0, node 2 sits 4px from node 0
    let mut coords = Tensor::zeros(&[3, 3, 2]);
    for t in 0..3 {
        coords.set(&[t, 0, 0], 5.0);
        coords.set(&[t, 0, 1], 5.0);
        coords.set(&[t, 1, 0], 8.0);
        coords.set(&[t, 1, 1], 5.0);
        coords.set(&[t, 2, 0], 5.0);
        coords.set(&[t, 2, 1], 9.0);
    }
    let w = dag_weights(&coords, DAG_EPSILON).unwrap();
    let ratio = w.at(&[0, 1]) / w.at(&[0, 2]);
    assert!((ratio - 4.0 / 3.0).abs() < 1e-3, "{ratio}");
}

#[test]
fn dag_degenerate_track_is_error() {
    let coords = Tensor::full(&[4, NUM_LANDMARKS, 2], 7.0);
    assert!(build_dag(&coords, DAG_EPSILON).is_err());
}

#[test]
fn sag_identical_rows_and_orthogonal_rows() {
    let f = Tensor::new(&[3, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
    let s = sag_similarity(&f).unwrap();
    assert!((s.at(&[0, 1]) - 1.0).abs() < 1e-15);
    let w = sag_weights(&f).unwrap();
    assert_eq!(w.at(&[0, 2]), 0.0);
    assert_eq!(w.at(&[2, 2]), 1.0);
}

#[test]
fn normalize_examples() {
    let id = AdjacencyMatrix { weights: Tensor::eye(20), kind: GraphKind::Lcg, normalized: false };
    assert_eq!(normalize_adjacency(&id).unwrap().weights, Tensor::eye(20));
    let ones = AdjacencyMatrix { weights: Tensor::ones(&[20, 20]), kind: GraphKind::Dag, normalized: false };
    let n = normalize_adjacency(&ones).unwrap();
    assert!(n.weights.data().iter().all(|&v| (v - 0.05).abs() < 1e-15));
    let mut z = Tensor::eye(3);
    z.set(&[1, 1], 0.0);
    let zero_row = AdjacencyMatrix { weights: z, kind: GraphKind::Sag, normalized: false };
    assert!(normalize_adjacency(&zero_row).is_err());
}

#[test]
fn sampling_center_cell_at_half_resolution() {
    assert_eq!(nearest_cell(8.0, 8.0, 16, 8, 8).unwrap(), (4, 4));
    assert!(nearest_cell(-3.0, 2.0, 16, 8, 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dag_is_monotone_and_row_stochastic(seed in 0u64..10_000, t in 3usize..8) {
        let coords = random_track(seed, t, 16.0);
        let d = mean_distances(&coords).unwrap();
        let w = dag_weights(&coords, DAG_EPSILON).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                prop_assert_eq!(w.at(&[i, j]), w.at(&[j, i]));
                for k in 0..20 {
                    if i != j && i != k && d.at(&[i, j]) < d.at(&[i, k]) {
                        prop_assert!(w.at(&[i, j]) > w.at(&[i, k]));
                    }
                }
            }
            prop_assert!(w.at(&[i, i]) > 0.0);
        }
        let m = build_dag(&coords, DAG_EPSILON).unwrap();
        prop_assert!(m.normalized && m.is_row_stochastic(1e-9));
        prop_assert!(m.weights.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sag_symmetric_and_scale_invariant(seed in 0u64..10_000, c in 2usize..12, scales in prop::collection::vec(0.01f64..100.0, 20)) {
        let f = random_feats(seed, 20, c);
        let s = sag_similarity(&f).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                prop_assert!((s.at(&[i, j]) - s.at(&[j, i])).abs() < 1e-12);
            }
        }
        let scaled = Tensor::from_fn(&[20, c], |k| f.data()[k] * scales[k / c]);
        prop_assert!(sag_similarity(&scaled).unwrap().max_abs_diff(&s) < 1e-12);
        let m = build_sag(&f).unwrap();
        prop_assert!(m.is_row_stochastic(1e-9));
        prop_assert!(m.weights.data().iter().all(|&v| v >= 0.0));
        for i in 0..20 {
            prop_assert!(m.weights.at(&[i, i]) > 0.0);
        }
    }

    #[test]
    fn normalization_is_idempotent(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(&[20, 20], |_| rng.random_range(0.01..5.0));
        let m = AdjacencyMatrix { weights: w, kind: GraphKind::Dag, normalized: false };
        let once = normalize_adjacency(&m).unwrap();
        let twice = normalize_adjacency(&once).unwrap();
        prop_assert!(once.weights.max_abs_diff(&twice.weights) < 1e-12);
    }

    #[test]
    fn full_resolution_sampling_is_bitwise_lookup(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fmap = Tensor::uniform(&[2, 3, 4, 16, 16], 1.0, &mut rng);
        let coords = Tensor::from_fn(&[4, NUM_LANDMARKS, 2], |_| rng.random_range(0..16) as f64);
        let s = sample_node_features(&fmap, &coords, 16).unwrap();
        for b in 0..2 {
            for n in 0..20 {
                for t in 0..4 {
                    let (x, y) = (coords.at(&[t, n, 0]) as usize, coords.at(&[t, n, 1]) as usize);
                    for c in 0..3 {
                        prop_assert_eq!(s.at(&[b, n, t, c]).to_bits(), fmap.at(&[b, c, t, y, x]).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn constant_map_samples_constant(v in -5.0f64..5.0, seed in 0u64..1000) {
        let fmap = Tensor::full(&[1, 4, 3, 8, 8], v);
        let coords = random_track(seed, 3, 16.0);
        let s = sample_node_features(&fmap, &coords, 16).unwrap();
        prop_assert!(s.data().iter().all(|&x| x == v));
    }
}

#[test]
fn lcg_depends_only_on_topology_and_survives_flip() {
    let cfg = SynthConfig { classes: 3, speakers: 3, clips_per: 2, val_per: 1, frames: 6, ..SynthConfig::default() };
    let ds = generate_dataset(&cfg, 4).unwrap();
    let topo = LipTopology::default();
    let reference = build_lcg(&topo).unwrap();
    assert!(reference.degrees().iter().all(|d| (3..=5).contains(d)));
    // flipping remaps node i onto perm[i]; the contour wiring must be unchanged under that relabelling
    let perm = topo.mirror_permutation();
    let raw = lcg_weights(&topo).unwrap();
    for i in 0..20 {
        for j in 0..20 {
            assert_eq!(raw.at(&[perm[i], perm[j]]), raw.at(&[i, j]), "edge ({i}, {j})");
        }
    }
    for clip in ds.train.iter().chain(&ds.test) {
        let flipped = flip(clip).unwrap();
        assert_ne!(flipped.landmarks.coords, clip.landmarks.coords);
        assert!(build_dag(&flipped.landmarks.coords, DAG_EPSILON).unwrap().is_row_stochastic(1e-9));
        assert_eq!(build_lcg(&topo).unwrap(), reference);
    }
}
