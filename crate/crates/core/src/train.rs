//! Optimizer, training loop, evaluation and the experiment protocols.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{self, EvalRecord, EvalReport};
use crate::config::{ExperimentConfig, Resource, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{self, ClipBatch, ModelConfig, ParamCounts, Variant};
use crate::params::{Bound, ParamStore};
use crate::synth::{self, derive_seed, Dataset, SyntheticClip};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `store`. Parameters without an
    /// entry in `grads` see a zero gradient. The decay shrinks parameters
    /// directly and never enters the moment estimates.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let shrink = 1.0 - self.lr * self.weight_decay;
        for (name, p) in store.iter_mut() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::dim("optimizer gradient", g.shape(), p.shape()));
                }
            }
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] = pd[i] * shrink - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Stacks clips into a model batch.
pub fn make_batch(clips: &[&SyntheticClip]) -> Result<ClipBatch> {
    let first = clips.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let sh = first.frames.shape().to_vec();
    let mut frames = Vec::with_capacity(clips.len() * first.frames.len());
    for c in clips {
        if c.frames.shape() != sh.as_slice() {
            return Err(Error::dim("make_batch", &sh, c.frames.shape()));
        }
        frames.extend_from_slice(c.frames.data());
    }
    Ok(ClipBatch {
        frames: Tensor::new(&[clips.len(), 1, sh[0], sh[1], sh[2]], frames)?,
        tracks: clips.iter().map(|c| c.landmarks.coords.clone()).collect(),
        labels: clips.iter().map(|c| c.label()).collect(),
        clip_ids: clips.iter().map(|c| c.clip_id().to_string()).collect(),
        speaker_ids: clips.iter().map(|c| c.speaker_id().to_string()).collect(),
        frame_size: first.frame_size(),
    })
}

/// The clips a run trains on under its resource mode.
pub fn training_set(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<SyntheticClip> {
    match cfg.train.resource {
        Resource::Low => synth::low_resource(&ds.train),
        Resource::High => ds.train.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub history: Vec<EpochMetrics>,
}

/// Gradients of one batch. Returns `(loss, logits, grads)`.
pub fn batch_gradients(
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &ClipBatch,
) -> Result<(f64, Tensor, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let mut params = Bound::new(store);
    let (loss, logits) = model::loss(&mut tape, &mut params, cfg, batch)?;
    let lv = tape.value(loss).item();
    if !lv.is_finite() {
        let culprit = tape.first_non_finite().unwrap_or_else(|| "the loss".into());
        return Err(Error::Numeric(format!("loss is {lv}; first non-finite tensor: {culprit}")));
    }
    tape.backward(loss)?;
    let grads = params.grads(&tape);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Numeric(format!("gradient of `{name}` is not finite")));
    }
    Ok((lv, tape.value(logits).clone(), grads))
}

/// Runs `cfg.train.epochs` epochs of minibatch AdamW from `params`.
pub fn train_from(
    cfg: &ExperimentConfig,
    mut params: ParamStore,
    mut opt: AdamW,
    train_clips: &[SyntheticClip],
    val_clips: &[SyntheticClip],
) -> Result<TrainOutcome> {
    if train_clips.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut order: Vec<usize> = (0..train_clips.len()).collect();
    for epoch in 0..cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["shuffle", &epoch.to_string()]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for idx in order.chunks(cfg.train.batch_size) {
            let clips: Vec<SyntheticClip> = idx
                .iter()
                .map(|&i| {
                    let c = &train_clips[i];
                    let e = epoch.to_string();
                    let s = derive_seed(cfg.seed, &["augment", &e, c.clip_id()]);
                    let a = synth::augment(c, cfg.augment.flip_p, &cfg.augment.mask, s)?;
                    let j = derive_seed(cfg.seed, &["jitter", &e, c.clip_id()]);
                    synth::perturb_landmarks(&a, cfg.augment.landmark_jitter, j)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&SyntheticClip> = clips.iter().collect();
            let batch = make_batch(&refs)?;
            let (loss, logits, grads) = batch_gradients(&params, &cfg.model, &batch)?;
            opt.update(&mut params, &grads)?;
            loss_sum += loss * batch.len() as f64;
            hits += backend::predictions(&logits)
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
        }
        let n = train_clips.len() as f64;
        let mut m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_loss: None,
            val_acc: None,
        };
        if cfg.train.val_every > 0 && (epoch + 1) % cfg.train.val_every == 0 && !val_clips.is_empty() {
            let (records, vloss) = evaluate_with_loss(&params, &cfg.model, val_clips, None, cfg.train.batch_size)?;
            m.val_loss = Some(vloss);
            m.val_acc = Some(backend::accuracy(&records)?);
        }
        history.push(m);
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        history,
    })
}

/// Fresh initialization, then [`train_from`].
pub fn train(cfg: &ExperimentConfig, train_clips: &[SyntheticClip], val_clips: &[SyntheticClip]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = cfg.model.init_params(cfg.seed)?;
    train_from(cfg, params, AdamW::new(&cfg.train), train_clips, val_clips)
}

/// Test-time perturbation of clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub visual_sigma: f64,
    pub landmark_sigma: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn apply(&self, clip: &SyntheticClip) -> Result<SyntheticClip> {
        let id = clip.clip_id();
        let c = synth::perturb_visual(clip, self.visual_sigma, derive_seed(self.seed, &["visual", id]))?;
        synth::perturb_landmarks(&c, self.landmark_sigma, derive_seed(self.seed, &["landmark", id]))
    }
}

/// Forward-only pass over `clips`. Returns records and the mean
/// label-smoothed loss.
pub fn evaluate_with_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    clips: &[SyntheticClip],
    perturb: Option<&Perturbation>,
    batch_size: usize,
) -> Result<(Vec<EvalRecord>, f64)> {
    if clips.is_empty() {
        return Err(Error::Usage("nothing to evaluate".into()));
    }
    let mut records = Vec::with_capacity(clips.len());
    let mut loss_sum = 0.0;
    for chunk in clips.chunks(batch_size.max(1)) {
        let owned: Vec<SyntheticClip> = match perturb {
            Some(p) => chunk.iter().map(|c| p.apply(c)).collect::<Result<_>>()?,
            None => chunk.to_vec(),
        };
        let refs: Vec<&SyntheticClip> = owned.iter().collect();
        let batch = make_batch(&refs)?;
        let mut tape = Tape::new();
        let mut params = Bound::new(store);
        let (loss, logits) = model::loss(&mut tape, &mut params, cfg, &batch)?;
        loss_sum += tape.value(loss).item() * batch.len() as f64;
        for (i, pred) in backend::predictions(tape.value(logits)).into_iter().enumerate() {
            records.push(EvalRecord {
                clip_id: batch.clip_ids[i].clone(),
                speaker_id: batch.speaker_ids[i].clone(),
                label: batch.labels[i],
                predicted: pred,
            });
        }
    }
    Ok((records, loss_sum / clips.len() as f64))
}

pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    clips: &[SyntheticClip],
    perturb: Option<&Perturbation>,
    batch_size: usize,
) -> Result<Vec<EvalRecord>> {
    Ok(evaluate_with_loss(store, cfg, clips, perturb, batch_size)?.0)
}

/// The four robustness conditions, in report order.
pub const CONDITIONS: [&str; 4] = ["clean", "visual_noise", "landmark_perturbation", "noise_and_perturbation"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustRow {
    pub condition: String,
    pub acc: f64,
    pub macc: f64,
    /// Clean accuracy minus this condition's accuracy.
    pub acc_drop: f64,
    pub macc_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub rows: Vec<RobustRow>,
    pub visual_sigma: f64,
    pub landmark_sigma: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl RobustReport {
    pub fn row(&self, condition: &str) -> Option<&RobustRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }
}

/// Evaluates `clips` clean, with visual noise, with landmark jitter, and
/// with both.
pub fn robustness(store: &ParamStore, cfg: &ExperimentConfig, clips: &[SyntheticClip]) -> Result<RobustReport> {
    let (vs, ls) = (cfg.robust.visual_sigma, cfg.robust.landmark_sigma);
    let conditions = [(0.0, 0.0), (vs, 0.0), (0.0, ls), (vs, ls)];
    let mut rows: Vec<RobustRow> = Vec::with_capacity(4);
    for (name, (v, l)) in CONDITIONS.iter().zip(conditions) {
        let perturb = Perturbation {
            visual_sigma: v,
            landmark_sigma: l,
            seed: derive_seed(cfg.seed, &["robust"]),
        };
        let p = (v > 0.0 || l > 0.0).then_some(&perturb);
        let records = evaluate(store, &cfg.model, clips, p, cfg.train.batch_size)?;
        let (acc, macc) = (backend::accuracy(&records)?, backend::mean_accuracy(&records)?);
        let (acc_drop, macc_drop) = rows.first().map_or((0.0, 0.0), |c| (c.acc - acc, c.macc - macc));
        if !acc_drop.is_finite() || !macc_drop.is_finite() {
            return Err(Error::Numeric(format!("non-finite degradation under {name}")));
        }
        rows.push(RobustRow {
            condition: name.to_string(),
            acc,
            macc,
            acc_drop,
            macc_drop,
        });
    }
    Ok(RobustReport {
        rows,
        visual_sigma: vs,
        landmark_sigma: ls,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub acc: f64,
    pub macc: f64,
    pub train_acc: f64,
    pub param_count: usize,
    pub graph_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub config_hash: String,
    pub seed: u64,
}

/// Parameter counts of the four variants, without training.
pub fn variant_counts(base: &ModelConfig, seed: u64) -> Result<Vec<(Variant, ParamCounts)>> {
    Variant::ALL
        .into_iter()
        .map(|v| Ok((v, ParamCounts::of(&v.apply(base).init_params(seed)?))))
        .collect()
}

/// Trains one variant on the run's training set and scores it on the
/// unseen-speaker test split.
pub fn run_variant(cfg: &ExperimentConfig, variant: Variant, ds: &Dataset) -> Result<(AblationRow, TrainOutcome)> {
    let mut vcfg = cfg.clone();
    vcfg.model = variant.apply(&cfg.model);
    let train_clips = training_set(&vcfg, ds);
    let outcome = train(&vcfg, &train_clips, &ds.val)?;
    let test = evaluate(&outcome.params, &vcfg.model, &ds.test, None, vcfg.train.batch_size)?;
    let train_rec = evaluate(&outcome.params, &vcfg.model, &train_clips, None, vcfg.train.batch_size)?;
    let counts = ParamCounts::of(&outcome.params);
    let row = AblationRow {
        variant,
        label: variant.label().to_string(),
        acc: backend::accuracy(&test)?,
        macc: backend::mean_accuracy(&test)?,
        train_acc: backend::accuracy(&train_rec)?,
        param_count: counts.total,
        graph_params: counts.graph_branches + counts.fusion,
    };
    Ok((row, outcome))
}

/// Trains the four variants with the same seed and data.
pub fn run_ablation(cfg: &ExperimentConfig, ds: &Dataset) -> Result<AblationTable> {
    let rows = Variant::ALL
        .into_iter()
        .map(|v| run_variant(cfg, v, ds).map(|(r, _)| r))
        .collect::<Result<_>>()?;
    Ok(AblationTable {
        rows,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    })
}

/// Evaluation report of `clips`.
pub fn eval_report(
    store: &ParamStore,
    cfg: &ExperimentConfig,
    clips: &[SyntheticClip],
    perturb: Option<&Perturbation>,
) -> Result<(Vec<EvalRecord>, EvalReport)> {
    let records = evaluate(store, &cfg.model, clips, perturb, cfg.train.batch_size)?;
    let report = EvalReport::from_records(&records, &cfg.hash(), cfg.seed)?;
    Ok((records, report))
}
