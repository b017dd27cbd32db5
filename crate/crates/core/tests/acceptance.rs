//! End-to-end acceptance checks, one printed verdict per criterion.
//!
//! Everything runs inside one test so the timed criteria are not measured
//! while other tests compete for the CPU.

use std::time::{Duration, Instant};

use lipgraph::backend::{self, label_smoothed_ce, EvalRecord};
use lipgraph::checkpoint::Checkpoint;
use lipgraph::config::ExperimentConfig;
use lipgraph::fusion::{fuse_composite, FusionMode, FusionSpec};
use lipgraph::graphs::*;
use lipgraph::landmarks::{LipTopology, NUM_LANDMARKS};
use lipgraph::model::{self, ModelConfig, Variant};
use lipgraph::params::{Bound, ParamStore};
use lipgraph::stmgcn::sgc;
use lipgraph::synth::{generate_dataset, SynthConfig};
use lipgraph::train::{self, robustness, run_variant, variant_counts};
use lipgraph::{gradsuite, Activation, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Epochs per training run in the desk-scale protocol.
const PROTOCOL_EPOCHS: usize = 10;
const PROTOCOL_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    id: usize,
    passed: bool,
    detail: String,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

// ---- 1: gradients -------------------------------------------------------

fn gradients() -> Verdict {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..20).collect();
    let report = gradsuite::run(&seeds).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let cases: std::collections::BTreeSet<&str> = report.results.iter().map(|r| r.case.as_str()).collect();
    let covers_model = cases.contains("full_model");
    let passed = report.passed() && covers_model && elapsed < Duration::from_secs(120);
    Verdict {
        id: 1,
        passed,
        detail: format!(
            "{} cases x {} seeds, worst rel err {:.2e}, {:.1}s",
            cases.len(),
            seeds.len(),
            report.worst(),
            elapsed.as_secs_f64()
        ),
    }
}

// ---- 2: oracles ---------------------------------------------------------

fn sgc_oracle(f: &Tensor, m: &Tensor, w: &Tensor) -> Tensor {
    let s = f.shape();
    let (b, n, t, c) = (s[0], s[1], s[2], s[3]);
    let co = w.shape()[1];
    Tensor::from_fn(&[b, n, t, co], |flat| {
        let (bi, i, ti, o) = (flat / (n * t * co), (flat / (t * co)) % n, (flat / co) % t, flat % co);
        let mut v = 0.0;
        for j in 0..n {
            for ci in 0..c {
                v += m.at(&[i, j]) * f.at(&[bi, j, ti, ci]) * w.at(&[ci, o]);
            }
        }
        v.max(0.0)
    })
}

fn conv1d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, d: usize) -> Tensor {
    let (bs, ci, tt) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let half = (k / 2) as isize;
    Tensor::from_fn(&[bs, co, tt], |flat| {
        let (n, o, ti) = (flat / (co * tt), (flat / tt) % co, flat % tt);
        let mut s = b.data()[o];
        for c in 0..ci {
            for j in 0..k {
                let src = ti as isize + (j as isize - half) * d as isize;
                if (0..tt as isize).contains(&src) {
                    s += w.at(&[o, c, j]) * x.at(&[n, c, src as usize]);
                }
            }
        }
        s
    })
}

fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let s = x.shape();
    let (n, ci, h, wd) = (s[0], s[1], s[2], s[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    Tensor::from_fn(&[n, co, oh, ow], |flat| {
        let (bi, o, y, x0) = (flat / (co * oh * ow), (flat / (oh * ow)) % co, (flat / ow) % oh, flat % ow);
        let mut acc = b.data()[o];
        for c in 0..ci {
            for i in 0..kh {
                for j in 0..kw {
                    let sy = (y * stride + i) as isize - (kh / 2) as isize;
                    let sx = (x0 * stride + j) as isize - (kw / 2) as isize;
                    if (0..h as isize).contains(&sy) && (0..wd as isize).contains(&sx) {
                        acc += w.at(&[o, c, i, j]) * x.at(&[bi, c, sy as usize, sx as usize]);
                    }
                }
            }
        }
        acc
    })
}

fn conv3d_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, t, h, wd) = (s[0], s[2], s[3], s[4]);
    let ws = w.shape();
    let (co, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    Tensor::from_fn(&[n, co, t, h, wd], |flat| {
        let per = t * h * wd;
        let (bi, o, r) = (flat / (co * per), (flat / per) % co, flat % per);
        let (ti, y, x0) = (r / (h * wd), (r / wd) % h, r % wd);
        let mut acc = b.data()[o];
        for a in 0..kt {
            for i in 0..kh {
                for j in 0..kw {
                    let st = (ti + a) as isize - (kt / 2) as isize;
                    let sy = (y + i) as isize - (kh / 2) as isize;
                    let sx = (x0 + j) as isize - (kw / 2) as isize;
                    if (0..t as isize).contains(&st) && (0..h as isize).contains(&sy) && (0..wd as isize).contains(&sx) {
                        acc += w.at(&[o, 0, a, i, j]) * x.at(&[bi, 0, st as usize, sy as usize, sx as usize]);
                    }
                }
            }
        }
        acc
    })
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sgc_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let (b, t, c) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=5));
        let f = rand_tensor(&[b, n, t, c], &mut rng);
        let mut m = Tensor::from_fn(&[n, n], |_| rng.random_range(0.0..1.0));
        for row in m.data_mut().chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let w = rand_tensor(&[c, c], &mut rng);
        let mut tape = Tape::new();
        let (fv, mv, wv) = (tape.constant(f.clone()), tape.constant(m.clone()), tape.constant(w.clone()));
        let y = sgc(&mut tape, fv, mv, wv, Activation::Relu).expect("sgc runs");
        sgc_worst = sgc_worst.max(tape.value(y).max_abs_diff(&sgc_oracle(&f, &m, &w)));
    }

    let mut conv_worst = 0.0f64;
    for d in 1..=3 {
        let (x, w, b) = (rand_tensor(&[2, 3, 13], &mut rng), rand_tensor(&[4, 3, 3], &mut rng), rand_tensor(&[4], &mut rng));
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv1d(xv, wv, Some(bv), d).expect("conv1d runs");
        conv_worst = conv_worst.max(tape.value(y).max_abs_diff(&conv1d_oracle(&x, &w, &b, d)));
    }
    for stride in [1, 2] {
        let (x, w, b) = (rand_tensor(&[2, 3, 9, 9], &mut rng), rand_tensor(&[2, 3, 3, 3], &mut rng), rand_tensor(&[2], &mut rng));
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride).expect("conv2d runs");
        let oracle = conv2d_oracle(&x, &w, &b, stride);
        conv_worst = conv_worst.max(if tape.shape(y) == oracle.shape() { tape.value(y).max_abs_diff(&oracle) } else { f64::INFINITY });
    }
    {
        let (x, w, b) = (rand_tensor(&[2, 1, 5, 7, 7], &mut rng), rand_tensor(&[3, 1, 3, 5, 5], &mut rng), rand_tensor(&[3], &mut rng));
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv3d(xv, wv, Some(bv)).expect("conv3d runs");
        conv_worst = conv_worst.max(tape.value(y).max_abs_diff(&conv3d_oracle(&x, &w, &b)));
    }
    Verdict {
        id: 2,
        passed: sgc_worst < 1e-9 && conv_worst < 1e-12,
        detail: format!("sgc max diff {sgc_worst:.1e} over 50 graphs, conv max diff {conv_worst:.1e}"),
    }
}

// ---- 3: graph invariants ------------------------------------------------

fn graph_invariants() -> Verdict {
    let cfg = SynthConfig { classes: 10, speakers: 5, clips_per: 20, val_per: 0, ..SynthConfig::default() };
    let ds = generate_dataset(&cfg, 33).expect("dataset");
    let clips: Vec<_> = ds.train.iter().chain(&ds.test).take(100).collect();
    let store = ModelConfig::default().init_params(3).expect("params");
    let lcg = build_lcg(&LipTopology::default()).expect("lcg");
    let mut failures = Vec::new();
    if !lcg.degrees().iter().all(|d| (3..=5).contains(d)) {
        failures.push("lcg degree".to_string());
    }
    let stochastic = |m: &AdjacencyMatrix| m.row_sums().iter().all(|s| (s - 1.0).abs() <= 1e-9);
    if !stochastic(&lcg) {
        failures.push("lcg rows".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for clip in &clips {
        let coords = &clip.landmarks.coords;
        let d = mean_distances(coords).expect("distances");
        let w = dag_weights(coords, DAG_EPSILON).expect("dag weights");
        for i in 0..NUM_LANDMARKS {
            for j in 0..NUM_LANDMARKS {
                for k in 0..NUM_LANDMARKS {
                    if j != i && k != i && d.at(&[i, j]) < d.at(&[i, k]) && w.at(&[i, j]) <= w.at(&[i, k]) {
                        failures.push(format!("{}: dag not monotone at ({i},{j},{k})", clip.clip_id()));
                    }
                }
            }
        }
        let feats = model::clip_node_features(&store, &clip.frames, coords, clip.frame_size()).expect("features");
        let s = sag_similarity(&feats).expect("similarity");
        let c = feats.shape()[1];
        let scales: Vec<f64> = (0..NUM_LANDMARKS).map(|_| rng.random_range(0.1..10.0)).collect();
        let scaled = Tensor::from_fn(feats.shape(), |k| feats.data()[k] * scales[k / c]);
        let asym = (0..NUM_LANDMARKS)
            .flat_map(|i| (0..NUM_LANDMARKS).map(move |j| (i, j)))
            .map(|(i, j)| (s.at(&[i, j]) - s.at(&[j, i])).abs())
            .fold(0.0, f64::max);
        if asym > 1e-12 {
            failures.push(format!("{}: sag asymmetry {asym:.1e}", clip.clip_id()));
        }
        let scale_diff = sag_similarity(&scaled).expect("similarity").max_abs_diff(&s);
        if scale_diff > 1e-12 {
            failures.push(format!("{}: sag scale drift {scale_diff:.1e}", clip.clip_id()));
        }
        let dag = build_dag(coords, DAG_EPSILON).expect("dag");
        let sag = build_sag(&feats).expect("sag");
        if !stochastic(&dag) || !stochastic(&sag) {
            failures.push(format!("{}: rows", clip.clip_id()));
        }
    }
    Verdict {
        id: 3,
        passed: clips.len() == 100 && failures.is_empty(),
        detail: format!("{} clips, {} violations {:?}", clips.len(), failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    }
}

// ---- 4: loss and metrics ------------------------------------------------

fn ce(logits: &Tensor, labels: &[usize], eps: f64) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = label_smoothed_ce(&mut tape, l, labels, eps).expect("loss");
    tape.value(loss).item()
}

fn record(speaker: &str, correct: bool) -> EvalRecord {
    EvalRecord { clip_id: String::new(), speaker_id: speaker.into(), label: 0, predicted: usize::from(!correct) }
}

fn loss_and_metrics() -> Verdict {
    let c = 10;
    let uniform = Tensor::full(&[4, c], 0.7);
    let labels = [0, 3, 9, 5];
    let uniform_err = [0.0, 0.1, 0.3].iter().map(|&e| (ce(&uniform, &labels, e) - (c as f64).ln()).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Tensor::from_fn(&[4, c], |_| rng.random_range(-3.0..3.0));
    let plain: f64 = (0..4)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[labels[i]]
        })
        .sum::<f64>()
        / 4.0;
    let plain_err = (ce(&logits, &labels, 0.0) - plain).abs();
    // ten clips of one speaker all right, one clip of another all wrong
    let mut recs: Vec<EvalRecord> = (0..10).map(|_| record("a", true)).collect();
    recs.push(record("b", false));
    let (acc, macc) = (backend::accuracy(&recs).expect("acc"), backend::mean_accuracy(&recs).expect("macc"));
    Verdict {
        id: 4,
        passed: uniform_err <= 1e-12 && plain_err <= 1e-12 && acc == 10.0 / 11.0 && macc == 0.5,
        detail: format!("|uniform - ln C| {uniform_err:.1e}, |eps=0 - CE| {plain_err:.1e}, acc {acc:.4}, macc {macc}"),
    }
}

// ---- 5: fusion ----------------------------------------------------------

fn fusion_parity() -> Verdict {
    let d = 8;
    let mut constructed = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mode in FusionMode::ALL {
        let spec = FusionSpec::new(mode, d);
        let mut store = ParamStore::new();
        spec.init_params(&mut store, 1);
        let mut tape = Tape::new();
        let mut params = Bound::new(&store);
        let feats: Vec<Var> = (0..mode.arity()).map(|_| tape.constant(rand_tensor(&[2, 4, d], &mut rng))).collect();
        if store.count() == mode.param_count(d) && spec.apply(&mut tape, &mut params, &feats).is_ok() {
            constructed += 1;
        }
    }

    let mut store = ParamStore::new();
    FusionSpec::new(FusionMode::Composite, d).init_params(&mut store, 2);
    let f: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 5, d], &mut rng)).collect();
    let mut t1 = Tape::new();
    let mut p1 = Bound::new(&store);
    let v: Vec<Var> = f.iter().map(|x| t1.constant(x.clone())).collect();
    let fused = fuse_composite(&mut t1, &mut p1, v[0], v[1], v[2]).expect("composite");
    // by hand: concatenate the distance and similarity features, project, add the coordinate features
    let mut t2 = Tape::new();
    let v: Vec<Var> = f.iter().map(|x| t2.constant(x.clone())).collect();
    let w = t2.constant(store.get("fusion.cat.weight").expect("weight").clone());
    let b = t2.constant(store.get("fusion.cat.bias").expect("bias").clone());
    let cat = t2.concat(&[v[1], v[2]], 2).expect("concat");
    let proj = t2.matmul(cat, w).expect("matmul");
    let proj = t2.add(proj, b).expect("bias");
    let manual = t2.add(v[0], proj).expect("sum");
    let bitwise = t1.value(fused).data().iter().zip(t2.value(manual).data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let (sum, cat, wsum) = (FusionMode::Sum2.param_count(d), FusionMode::Cat2.param_count(d), FusionMode::Wsum3.param_count(d));
    Verdict {
        id: 5,
        passed: constructed == 5 && bitwise && sum == 0 && sum < cat && cat < wsum,
        detail: format!("{constructed}/5 modes, composite bitwise {bitwise}, extra params sum {sum} < cat {cat} < wsum {wsum}"),
    }
}

// ---- 6 and 7: ablation and robustness -----------------------------------

struct SeedRun {
    seed: u64,
    baseline_acc: f64,
    full_acc: f64,
    full_train_acc: f64,
    visual_drop: f64,
    landmark_drop: f64,
    drops_finite: bool,
    rows: usize,
}

fn protocol() -> (Verdict, Verdict) {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = PROTOCOL_EPOCHS;
    cfg.train.val_every = 0;
    let counts = variant_counts(&cfg.model, 0).expect("counts");
    let monotone = counts.windows(2).all(|w| w[0].1.total < w[1].1.total);

    let mut protocol_time = Duration::ZERO;
    let mut runs = Vec::new();
    for seed in PROTOCOL_SEEDS {
        let mut scfg = cfg.clone();
        scfg.seed = seed;
        let start = Instant::now();
        let ds = generate_dataset(&scfg.data, scfg.data_seed).expect("dataset");
        let (base, _) = run_variant(&scfg, Variant::Baseline, &ds).expect("baseline");
        let (full, outcome) = run_variant(&scfg, Variant::DagLcgSag, &ds).expect("full model");
        protocol_time += start.elapsed();
        let mut fcfg = scfg.clone();
        fcfg.model = Variant::DagLcgSag.apply(&scfg.model);
        let report = robustness(&outcome.params, &fcfg, &ds.test).expect("robustness");
        let drop = |name: &str| report.row(name).map_or(f64::NAN, |r| r.acc_drop);
        let run = SeedRun {
            seed,
            baseline_acc: base.acc,
            full_acc: full.acc,
            full_train_acc: full.train_acc,
            visual_drop: drop("visual_noise"),
            landmark_drop: drop("landmark_perturbation"),
            drops_finite: report.rows.iter().all(|r| r.acc_drop.is_finite() && r.macc_drop.is_finite()),
            rows: report.rows.len(),
        };
        println!(
            "  seed {}: baseline {:.4}, full {:.4} (train {:.4}); drops visual {:+.4}, landmark {:+.4}",
            run.seed, run.baseline_acc, run.full_acc, run.full_train_acc, run.visual_drop, run.landmark_drop
        );
        runs.push(run);
    }
    let n = runs.len() as f64;
    let mean = |f: fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let (base, full, train_acc) = (mean(|r| r.baseline_acc), mean(|r| r.full_acc), mean(|r| r.full_train_acc));
    let in_budget = protocol_time < Duration::from_secs(15 * 60);
    let ablation = Verdict {
        id: 6,
        passed: full >= base && train_acc >= 0.99 && in_budget && monotone,
        detail: format!(
            "mean unseen acc full {full:.4} vs baseline {base:.4}, full train acc {train_acc:.4} after {PROTOCOL_EPOCHS} epochs, {:.0}s, params {:?}",
            protocol_time.as_secs_f64(),
            counts.iter().map(|(_, c)| c.total).collect::<Vec<_>>()
        ),
    };
    let favourable = runs.iter().filter(|r| r.landmark_drop <= r.visual_drop).count();
    let structural = runs.iter().all(|r| r.rows == 4 && r.drops_finite);
    let robust = Verdict {
        id: 7,
        passed: structural && favourable >= 2,
        detail: format!("4 finite rows on every seed: {structural}; landmark drop <= visual drop on {favourable}/3 seeds"),
    };
    (ablation, robust)
}

// ---- 8: determinism -----------------------------------------------------

fn determinism() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.data = SynthConfig { classes: 3, speakers: 3, clips_per: 4, val_per: 1, frames: 10, ..SynthConfig::default() };
    cfg.model.backend.classes = 3;
    cfg.augment.mask.max_len = 3;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    let artifacts = || {
        let ds = generate_dataset(&cfg.data, cfg.data_seed).expect("dataset");
        let clips = train::training_set(&cfg, &ds);
        let out = train::train(&cfg, &clips, &ds.val).expect("train");
        let ck = Checkpoint {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            architecture_hash: cfg.architecture_hash(),
            params: out.params,
            optimizer: out.optimizer,
        };
        let (_, report) = train::eval_report(&ck.params, &cfg, &ds.test, None).expect("eval");
        let robust = robustness(&ck.params, &cfg, &ds.test).expect("robust");
        (
            ck.to_bytes(),
            serde_json::to_vec(&out.history).expect("history"),
            serde_json::to_vec(&report).expect("report"),
            serde_json::to_vec(&robust).expect("robust"),
        )
    };
    let (a, b) = (artifacts(), artifacts());
    Verdict {
        id: 8,
        passed: a == b,
        detail: format!("checkpoint {} bytes, history, eval and robustness reports compared", a.0.len()),
    }
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = vec![gradients(), oracles(), graph_invariants(), loss_and_metrics(), fusion_parity()];
    let (ablation, robust) = protocol();
    verdicts.extend([ablation, robust, determinism()]);
    for v in &verdicts {
        println!("criterion {}: {} ({})", v.id, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
