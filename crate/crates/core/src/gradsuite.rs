//! The finite-difference suite: every differentiable operation and the
//! fused model, each checked across a range of seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend;
use crate::error::Result;
use crate::fusion::{self, FusionMode, FusionSpec};
use crate::gradcheck::{gradcheck_inputs, GradcheckReport};
use crate::graphs;
use crate::model::{self, ClipBatch, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::stmgcn;
use crate::synth::{self, SpeakerProfile, SynthConfig, WordClassSpec};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-6;

/// The fused model has many ReLU kinks; a smaller step makes crossing one
/// during a difference far less likely.
const MODEL_STEP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    pub results: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Entries bounded away from zero so kinks and poles stay out of reach of
/// the difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn row_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut m = Tensor::from_fn(&[n, n], |_| rng.random_range(0.05..1.0));
    for r in m.data_mut().chunks_mut(n) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// Reduces `out` to a scalar through fixed random weights, so every output
/// entry contributes a distinct amount.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = rand_t(&mut rng, tape.shape(out));
    let r = tape.constant(r);
    let y = tape.mul(out, r)?;
    Ok(tape.sum(y))
}

type CaseFn = fn(u64) -> Result<GradcheckReport>;

/// Checks `f` with respect to every tensor in `store` plus `extra` inputs.
/// `f` receives the bound parameters and the extra input variables.
fn check_with_params<F>(store: &ParamStore, extra: &[Tensor], h: f64, max_entries: Option<usize>, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &mut Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    gradcheck_inputs(
        |tape, vars| {
            let mut bound = Bound::new(store);
            for (n, &v) in names.iter().zip(vars) {
                bound.bind(n, v);
            }
            f(tape, &mut bound, &vars[names.len()..])
        },
        &inputs,
        h,
        max_entries,
    )
}

fn case_elementwise(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = away_from_zero(&mut rng, &[3, 4], 0.1);
    let b = away_from_zero(&mut rng, &[3, 4], 0.3);
    let c = rand_t(&mut rng, &[4]);
    gradcheck_inputs(
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[2])?;
            let m = t.mul(d, v[0])?;
            let q = t.div(m, v[1])?;
            let q = t.scale(q, 0.7);
            let q = t.offset(q, 0.2);
            let r = t.relu(v[0]);
            let g = t.sigmoid(q);
            let h = t.tanh(d);
            let sq = t.mul(v[1], v[1])?;
            let sq = t.offset(sq, 0.1);
            let sq = t.sqrt(sq);
            let mut acc = t.add(g, h)?;
            for x in [r, sq] {
                acc = t.add(acc, x)?;
            }
            probe(t, acc, seed)
        },
        &[a, b, c],
        STEP,
        None,
    )
}

fn case_matmul(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_t(&mut rng, &[2, 3, 4]);
    let b = rand_t(&mut rng, &[4, 5]);
    let c = rand_t(&mut rng, &[2, 5, 3]);
    gradcheck_inputs(
        |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let abc = t.matmul(ab, v[2])?;
            probe(t, abc, seed)
        },
        &[a, b, c],
        STEP,
        None,
    )
}

fn case_shape_ops(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_t(&mut rng, &[2, 3, 4]);
    let b = rand_t(&mut rng, &[2, 3, 2]);
    let index: Vec<usize> = (0..10).map(|_| rng.random_range(0..24)).collect();
    gradcheck_inputs(
        move |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let p = t.reshape(p, &[4, 6])?;
            let n = t.narrow(v[0], 2, 1, 2)?;
            let c = t.concat(&[n, v[1]], 2)?;
            let s = t.sum_axis(c, 1)?;
            let m = t.mean_axis(p, 0)?;
            let g = t.gather(v[0], index.clone(), &[2, 5])?;
            let s = probe(t, s, seed)?;
            let m = probe(t, m, seed + 1)?;
            let g = probe(t, g, seed + 2)?;
            let mm = t.mean(v[1]);
            let x = t.add(s, m)?;
            let x = t.add(x, g)?;
            t.add(x, mm)
        },
        &[a, b],
        STEP,
        None,
    )
}

fn case_softmax(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::uniform(&[3, 5], 3.0, &mut rng);
    gradcheck_inputs(
        |t, v| {
            let s = t.softmax(v[0])?;
            let l = t.log_softmax(v[0])?;
            let s = probe(t, s, seed)?;
            let l = probe(t, l, seed + 1)?;
            t.add(s, l)
        },
        &[a],
        STEP,
        None,
    )
}

fn case_conv1d(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dil = 1 + (seed % 3) as usize;
    let x = rand_t(&mut rng, &[2, 3, 9]);
    let w = rand_t(&mut rng, &[4, 3, 3]);
    let b = rand_t(&mut rng, &[4]);
    gradcheck_inputs(
        move |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), dil)?;
            probe(t, y, seed)
        },
        &[x, w, b],
        STEP,
        None,
    )
}

fn case_conv2d(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = 1 + (seed % 2) as usize;
    let x = rand_t(&mut rng, &[2, 2, 6, 6]);
    let w = rand_t(&mut rng, &[3, 2, 3, 3]);
    let b = rand_t(&mut rng, &[3]);
    gradcheck_inputs(
        move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?;
            probe(t, y, seed)
        },
        &[x, w, b],
        STEP,
        None,
    )
}

fn case_conv3d(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&mut rng, &[1, 2, 4, 5, 5]);
    let w = rand_t(&mut rng, &[2, 2, 3, 3, 3]);
    let b = rand_t(&mut rng, &[2]);
    gradcheck_inputs(
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]))?;
            probe(t, y, seed)
        },
        &[x, w, b],
        STEP,
        None,
    )
}

fn case_sgc(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 + (seed % 6) as usize;
    let m = row_stochastic(&mut rng, n);
    let f = rand_t(&mut rng, &[2, n, 3, 4]);
    let w = rand_t(&mut rng, &[4, 4]);
    gradcheck_inputs(
        |t, v| {
            let mv = t.constant(m.clone());
            let y = stmgcn::sgc(t, v[0], mv, v[1], Activation::Tanh)?;
            probe(t, y, seed)
        },
        &[f, w],
        STEP,
        None,
    )
}

fn case_stgcn_layer(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (5, 3);
    let mut store = ParamStore::new();
    stmgcn::init_layer_params(&mut store, seed, "layer", c, 3);
    let m = row_stochastic(&mut rng, n);
    let f = rand_t(&mut rng, &[2, n, 4, c]);
    check_with_params(&store, &[f], STEP, None, |t, p, x| {
        let mv = t.constant(m.clone());
        let y = stmgcn::stgcn_layer(t, p, "layer", x[0], mv, Activation::Tanh)?;
        probe(t, y, seed)
    })
}

fn case_bigru(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    stmgcn::init_bigru_params(&mut store, seed, "gru", 3, 2);
    let seq = rand_t(&mut rng, &[2, 4, 3]);
    check_with_params(&store, &[seq], STEP, None, |t, p, x| {
        let y = stmgcn::bigru(t, p, "gru", x[0])?;
        probe(t, y, seed)
    })
}

fn case_sag(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rand_t(&mut rng, &[2, 4, 3, 3]);
    let w = rand_t(&mut rng, &[3, 3]);
    gradcheck_inputs(
        |t, v| {
            let m = stmgcn::sag_adjacency(t, v[0])?;
            let y = stmgcn::sgc(t, v[0], m, v[1], Activation::Tanh)?;
            let a = probe(t, m, seed)?;
            let b = probe(t, y, seed + 1)?;
            t.add(a, b)
        },
        &[f, w],
        STEP,
        None,
    )
}

fn case_fusion(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4;
    let mode = FusionMode::ALL[(seed % 5) as usize];
    let spec = FusionSpec::new(mode, d);
    let mut store = ParamStore::new();
    spec.init_params(&mut store, seed);
    // break the identity initialization so every path carries signal
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let feats: Vec<Tensor> = (0..mode.arity() + 1).map(|_| rand_t(&mut rng, &[2, 3, d])).collect();
    check_with_params(&store, &feats, STEP, None, |t, p, x| {
        let k = mode.arity();
        let g = spec.apply(t, p, &x[..k])?;
        let y = fusion::merge_with_visual(t, g, x[k])?;
        probe(t, y, seed)
    })
}

fn case_backend(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = backend::BackendConfig {
        hidden: 6,
        classes: 4,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    cfg.init_params(&mut store, seed, 4);
    let seq = rand_t(&mut rng, &[3, 7, 4]);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let eps = [0.0, 0.1, 0.3][(seed % 3) as usize];
    check_with_params(&store, &[seq], STEP, None, |t, p, x| {
        let s = backend::aggregate(t, p, &cfg, x[0])?;
        let logits = backend::pool_and_classify(t, p, s)?;
        backend::label_smoothed_ce(t, logits, &labels, eps)
    })
}

/// A small clip batch of the synthetic generator.
pub fn tiny_batch(seed: u64, batch: usize, frames: usize) -> Result<ClipBatch> {
    let cfg = SynthConfig {
        frames,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips: Vec<synth::SyntheticClip> = (0..batch)
        .map(|i| {
            let spec = WordClassSpec::sample(i % cfg.classes, &mut rng);
            let prof = SpeakerProfile::sample(&synth::speaker_name(i), cfg.frame_size, &mut rng);
            synth::generate_clip(&cfg, &spec, &prof, &synth::clip_name(i, i, 0), rng.random())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&synth::SyntheticClip> = clips.iter().collect();
    crate::train::make_batch(&refs)
}

fn case_full_model(seed: u64) -> Result<GradcheckReport> {
    let cfg = ModelConfig::default();
    let store = cfg.init_params(seed)?;
    let batch = tiny_batch(seed, 2, 5)?;
    check_with_params(&store, &[], MODEL_STEP, Some(3), |t, p, _| Ok(model::loss(t, p, &cfg, &batch)?.0))
}

/// Every case in the suite, by name.
pub const CASES: [(&str, CaseFn); 15] = [
    ("elementwise", case_elementwise),
    ("matmul", case_matmul),
    ("shape_ops", case_shape_ops),
    ("softmax", case_softmax),
    ("conv1d", case_conv1d),
    ("conv2d", case_conv2d),
    ("conv3d", case_conv3d),
    ("sgc", case_sgc),
    ("stgcn_layer", case_stgcn_layer),
    ("bigru", case_bigru),
    ("sag_adjacency", case_sag),
    ("fusion", case_fusion),
    ("backend", case_backend),
    ("full_model", case_full_model),
    ("graph_sampling", case_sampling),
];

fn case_sampling(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = tiny_batch(seed, 1, 3)?;
    let fmap = rand_t(&mut rng, &[1, 2, 3, 16, 16]);
    let tracks: Vec<&Tensor> = batch.tracks.iter().collect();
    let index = graphs::sampling_index(fmap.shape(), &tracks, batch.frame_size)?;
    gradcheck_inputs(
        move |t, v| {
            let g = t.gather(v[0], index.clone(), &[1, 20, 3, 2])?;
            probe(t, g, seed)
        },
        &[fmap],
        STEP,
        None,
    )
}

/// Runs every case for each seed.
pub fn run(seeds: &[u64]) -> Result<SuiteReport> {
    let mut results = Vec::with_capacity(CASES.len() * seeds.len());
    for &(name, case) in &CASES {
        for &seed in seeds {
            let r = case(seed)?;
            results.push(CaseResult {
                case: name.to_string(),
                seed,
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                passed: r.max_rel_error < TOLERANCE,
            });
        }
    }
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        seeds: seeds.to_vec(),
        results,
    })
}
