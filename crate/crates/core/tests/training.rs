use std::collections::BTreeMap;

use lipgraph::backend::EvalReport;
use lipgraph::checkpoint::Checkpoint;
use lipgraph::config::ExperimentConfig;
use lipgraph::graphs::GraphKind;
use lipgraph::model::{branch_prefix, ModelConfig, ParamCounts, Variant};
use lipgraph::params::ParamStore;
use lipgraph::synth::{generate_dataset, Dataset, SynthConfig, SyntheticClip};
use lipgraph::train::*;
use lipgraph::{Error, Tensor};

fn tiny_data() -> SynthConfig {
    SynthConfig { classes: 3, speakers: 3, clips_per: 3, val_per: 1, frames: 8, ..SynthConfig::default() }
}

fn tiny_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data = tiny_data();
    cfg.model.backend.classes = 3;
    cfg.augment.mask.max_len = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg
}

fn tiny_dataset(seed: u64) -> Dataset {
    generate_dataset(&tiny_data(), seed).unwrap()
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let cfg = ExperimentConfig::default();
    let mut store = cfg.model.init_params(1).unwrap();
    let before = store.clone();
    let mut tc = cfg.train.clone();
    tc.weight_decay = 0.0;
    let mut opt = AdamW::new(&tc);
    for _ in 0..3 {
        opt.update(&mut store, &BTreeMap::new()).unwrap();
    }
    assert_eq!(store, before);
}

#[test]
fn adamw_zero_gradient_with_decay_shrinks_by_exact_factor() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(&[3], vec![1.0, -2.5, 0.25]).unwrap());
    let mut tc = ExperimentConfig::default().train;
    tc.lr = 0.01;
    tc.weight_decay = 0.1;
    let mut opt = AdamW::new(&tc);
    opt.update(&mut store, &BTreeMap::new()).unwrap();
    let f = 1.0 - 0.01 * 0.1;
    let want = [1.0 * f, -2.5 * f, 0.25 * f];
    assert_eq!(store.get("w").unwrap().data(), &want);
}

#[test]
fn adamw_first_step_moves_by_learning_rate() {
    // bias correction makes the first step lr * sign(g) up to eps
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let mut tc = ExperimentConfig::default().train;
    tc.lr = 0.1;
    tc.weight_decay = 0.0;
    let mut opt = AdamW::new(&tc);
    let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap())]);
    opt.update(&mut store, &grads).unwrap();
    let w = store.get("w").unwrap().data();
    assert!((w[0] + 0.1).abs() < 1e-8 && (w[1] - 0.1).abs() < 1e-8, "{w:?}");
}

#[test]
fn adamw_rejects_gradient_of_wrong_shape() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::zeros(&[2]));
    let mut opt = AdamW::new(&ExperimentConfig::default().train);
    let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
    assert!(matches!(opt.update(&mut store, &grads), Err(Error::Dimension { .. })));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny_cfg();
    cfg.train.lr = 0.0;
    cfg.train.epochs = 1;
    let ds = tiny_dataset(2);
    let init = cfg.model.init_params(cfg.seed).unwrap();
    let out = train(&cfg, &ds.train, &ds.val).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.optimizer.step as usize, ds.train.len().div_ceil(4));
}

#[test]
fn overfits_a_single_clip() {
    let mut cfg = ExperimentConfig::default();
    cfg.model.backend.smoothing = 0.0;
    cfg.train.weight_decay = 0.0;
    let ds = generate_dataset(&SynthConfig { speakers: 3, clips_per: 1, val_per: 0, ..SynthConfig::default() }, 3).unwrap();
    let clip = &ds.train[0];
    let batch = make_batch(&[clip]).unwrap();
    let mut params = cfg.model.init_params(0).unwrap();
    let mut opt = AdamW::new(&cfg.train);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let (loss, _, grads) = batch_gradients(&params, &cfg.model, &batch).unwrap();
        last = loss;
        if loss < 0.01 {
            break;
        }
        opt.update(&mut params, &grads).unwrap();
    }
    assert!(last < 0.01, "loss {last}");
    let records = evaluate(&params, &cfg.model, std::slice::from_ref(clip), None, 1).unwrap();
    assert_eq!(records[0].predicted, clip.label());
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_cfg();
    let ds = tiny_dataset(4);
    let a = train(&cfg, &ds.train, &ds.val).unwrap();
    let b = train(&cfg, &ds.train, &ds.val).unwrap();
    assert_eq!(a.history, b.history);
    let ck = |o: &TrainOutcome| Checkpoint {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        architecture_hash: cfg.architecture_hash(),
        params: o.params.clone(),
        optimizer: o.optimizer.clone(),
    };
    assert_eq!(ck(&a).to_bytes(), ck(&b).to_bytes());
    let other = train(&ExperimentConfig { seed: 5, ..cfg.clone() }, &ds.train, &ds.val).unwrap();
    assert_ne!(other.params, a.params);
}

#[test]
fn history_reports_every_epoch_with_validation() {
    let mut cfg = tiny_cfg();
    cfg.train.val_every = 1;
    let ds = tiny_dataset(5);
    let out = train(&cfg, &ds.train, &ds.val).unwrap();
    assert_eq!(out.history.len(), 2);
    for (i, m) in out.history.iter().enumerate() {
        assert_eq!(m.epoch, i + 1);
        assert!(m.train_loss.is_finite() && (0.0..=1.0).contains(&m.train_acc));
        assert!(m.val_loss.is_some() && m.val_acc.is_some());
    }
    cfg.train.val_every = 0;
    let quiet = train(&cfg, &ds.train, &ds.val).unwrap();
    assert!(quiet.history.iter().all(|m| m.val_acc.is_none()));
}

#[test]
fn empty_training_set_is_data_error() {
    assert!(matches!(train(&tiny_cfg(), &[], &[]), Err(Error::Data(_))));
}

#[test]
fn checkpoint_roundtrips_through_disk() {
    let cfg = tiny_cfg();
    let ds = tiny_dataset(6);
    let out = train(&ExperimentConfig { train: { let mut t = cfg.train.clone(); t.epochs = 1; t }, ..cfg.clone() }, &ds.train, &ds.val).unwrap();
    let ck = Checkpoint {
        seed: 3,
        config_hash: cfg.hash(),
        architecture_hash: cfg.architecture_hash(),
        params: out.params,
        optimizer: out.optimizer,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    let fresh = cfg.model.init_params(9).unwrap();
    back.check_architecture(&fresh, &cfg.architecture_hash()).unwrap();
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let cfg = tiny_cfg();
    let ck = Checkpoint {
        seed: 0,
        config_hash: cfg.hash(),
        architecture_hash: cfg.architecture_hash(),
        params: cfg.model.init_params(0).unwrap(),
        optimizer: AdamW::new(&cfg.train),
    };
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], "mem").is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad, "mem").is_err());
}

#[test]
fn architecture_mismatch_lists_parameter_names() {
    let full = ModelConfig::default();
    let base = Variant::Baseline.apply(&full);
    let ck = Checkpoint {
        seed: 0,
        config_hash: String::new(),
        architecture_hash: lipgraph::config::architecture_hash(&full),
        params: full.init_params(0).unwrap(),
        optimizer: AdamW::new(&ExperimentConfig::default().train),
    };
    let expected = base.init_params(0).unwrap();
    let err = ck.check_architecture(&expected, &lipgraph::config::architecture_hash(&base)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Load(_)));
    assert!(msg.contains("unexpected") && msg.contains("branch.dag"), "{msg}");
    let err = ParamStore::new().check_compatible(&expected).unwrap_err().to_string();
    assert!(err.contains("unexpected") && err.contains("backend"), "{err}");
    let err = expected.check_compatible(&ParamStore::new()).unwrap_err().to_string();
    assert!(err.contains("missing") && err.contains("backend"), "{err}");
}

#[test]
fn every_enabled_branch_receives_gradient() {
    let cfg = ModelConfig::default();
    let store = cfg.init_params(2).unwrap();
    let ds = tiny_dataset(7);
    let refs: Vec<&SyntheticClip> = ds.train.iter().take(3).collect();
    let batch = make_batch(&refs).unwrap();
    let (_, _, grads) = batch_gradients(&store, &cfg, &batch).unwrap();
    let mut prefixes: Vec<String> = [GraphKind::Lcg, GraphKind::Dag, GraphKind::Sag].iter().map(|&k| branch_prefix(k)).collect();
    prefixes.extend(["frontend.".into(), "fusion.".into()]);
    for prefix in &prefixes {
        let norm: f64 = grads
            .iter()
            .filter(|(n, _)| n.starts_with(prefix.as_str()))
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v * v)
            .sum();
        assert!(norm > 0.0, "no gradient reaches {prefix}");
    }
    for name in store.names() {
        assert!(grads.contains_key(name), "{name} is not on the tape");
    }
}

#[test]
fn zero_sigma_perturbation_matches_clean_evaluation() {
    let cfg = ModelConfig { backend: lipgraph::backend::BackendConfig { classes: 3, ..Default::default() }, ..ModelConfig::default() };
    let store = cfg.init_params(3).unwrap();
    let ds = tiny_dataset(8);
    let zero = Perturbation { visual_sigma: 0.0, landmark_sigma: 0.0, seed: 17 };
    let (clean, l0) = evaluate_with_loss(&store, &cfg, &ds.test, None, 4).unwrap();
    let (same, l1) = evaluate_with_loss(&store, &cfg, &ds.test, Some(&zero), 4).unwrap();
    assert_eq!(clean, same);
    assert_eq!(l0.to_bits(), l1.to_bits());
    // batch size never changes a forward-only result
    let (one, l2) = evaluate_with_loss(&store, &cfg, &ds.test, None, 1).unwrap();
    assert_eq!(one, clean);
    assert!((l2 - l0).abs() < 1e-12);
}

#[test]
fn per_speaker_counts_cover_every_record() {
    let mut cfg = tiny_cfg();
    cfg.train.epochs = 1;
    let ds = tiny_dataset(9);
    let store = cfg.model.init_params(0).unwrap();
    let (records, report) = eval_report(&store, &cfg, &ds.test, None).unwrap();
    assert_eq!(report.total(), records.len());
    assert_eq!(report.total(), ds.test.len());
    assert_eq!(report, EvalReport::from_records(&records, &cfg.hash(), cfg.seed).unwrap());
}

#[test]
fn robustness_has_four_finite_rows() {
    let cfg = tiny_cfg();
    let ds = tiny_dataset(10);
    let store = cfg.model.init_params(0).unwrap();
    let r = robustness(&store, &cfg, &ds.test).unwrap();
    let names: Vec<&str> = r.rows.iter().map(|row| row.condition.as_str()).collect();
    assert_eq!(names, CONDITIONS);
    assert_eq!(r.rows[0].acc_drop, 0.0);
    assert!(r.rows.iter().all(|row| row.acc_drop.is_finite() && row.macc_drop.is_finite()));
    let clean = evaluate(&store, &cfg.model, &ds.test, None, cfg.train.batch_size).unwrap();
    assert_eq!(r.rows[0].acc, lipgraph::backend::accuracy(&clean).unwrap());
    assert_eq!(r, robustness(&store, &cfg, &ds.test).unwrap());
}

#[test]
fn variant_parameter_counts_increase() {
    let counts = variant_counts(&ModelConfig::default(), 0).unwrap();
    let base = &counts[0].1;
    assert_eq!(base.graph_branches + base.fusion, 0);
    for w in counts.windows(2) {
        assert!(w[0].1.total < w[1].1.total, "{:?} vs {:?}", w[0], w[1]);
    }
    for (_, c) in &counts {
        assert_eq!(c.total, c.frontend + c.graph_branches + c.fusion + c.backend);
        assert_eq!((c.frontend, c.backend), (base.frontend, base.backend));
    }
    let full = ModelConfig::default().init_params(0).unwrap();
    assert_eq!(ParamCounts::of(&full), counts[3].1);
}

#[test]
fn fusion_arity_must_match_enabled_graphs() {
    let mut cfg = ModelConfig::default();
    cfg.fusion = lipgraph::fusion::FusionMode::Cat2;
    assert!(matches!(cfg.init_params(0), Err(Error::Config(_))));
    cfg.use_sag = false;
    cfg.init_params(0).unwrap();
}

#[test]
fn overrides_resolve_dotted_keys() {
    let base = ExperimentConfig::default();
    let cfg = base.with_overrides(&["train.lr=0.01", "model.use_sag=false", "train.resource=high", "seed=4"]).unwrap();
    assert_eq!(cfg.train.lr, 0.01);
    assert!(!cfg.model.use_sag);
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.train.resource, lipgraph::config::Resource::High);
    assert!(matches!(base.with_overrides(&["train.nope=1"]), Err(Error::Config(_))));
    assert!(matches!(base.with_overrides(&["train.lr"]), Err(Error::Config(_))));
    assert!(matches!(base.with_overrides(&["train.lr=\"fast\""]), Err(Error::Config(_))));
}

#[test]
fn config_json_roundtrip_and_hashes() {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let partial = ExperimentConfig::from_json(r#"{"seed": 9}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.train, cfg.train);
    assert!(ExperimentConfig::from_json("{").is_err());
    assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    // seed changes the run, not the architecture
    let reseeded = cfg.with_overrides(&["seed=11"]).unwrap();
    assert_ne!(reseeded.hash(), cfg.hash());
    assert_eq!(reseeded.architecture_hash(), cfg.architecture_hash());
    let smaller = cfg.with_overrides(&["model.use_lcg=false", "model.fusion=sum2"]).unwrap();
    assert_ne!(smaller.architecture_hash(), cfg.architecture_hash());
}

#[test]
fn invalid_training_config_is_rejected() {
    for o in ["train.batch_size=0", "train.lr=-1", "train.beta1=1.0", "augment.landmark_jitter=-0.5"] {
        let cfg = ExperimentConfig::default().with_overrides(&[o]).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{o}");
    }
}
