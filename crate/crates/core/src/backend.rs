//! Temporal back end: a residual dilated TCN, temporal mean pooling, an MLP
//! head, the label-smoothed loss, and the accuracy metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// One residual block per entry, strictly increasing.
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    /// Hidden width of the classification MLP.
    pub hidden: usize,
    /// Label smoothing, in `[0, 1)`.
    pub smoothing: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 2, 4],
            kernel: 3,
            classes: 10,
            hidden: 64,
            smoothing: 0.1,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("TCN kernel {} must be odd", self.kernel)));
        }
        if self.dilations.is_empty() || self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "dilations {:?} must be positive and strictly increasing",
                self.dilations
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.smoothing)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Frames that can influence one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }

    /// Dilations that reach past a clip of `t` frames; they still run, over
    /// zero padding.
    pub fn dilation_warnings(&self, t: usize) -> Vec<String> {
        self.dilations
            .iter()
            .filter(|&&d| d >= t)
            .map(|d| format!("dilation {d} is not smaller than the clip length {t}; taps fall into padding"))
            .collect()
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64, dim: usize) {
        let k = self.kernel;
        for i in 0..self.dilations.len() {
            store.init(
                seed,
                &format!("backend.tcn{i}.weight"),
                &[dim, dim, k],
                Init::Glorot { fan_in: dim * k, fan_out: dim * k },
            );
            store.init(seed, &format!("backend.tcn{i}.bias"), &[dim], Init::Zeros);
        }
        nn::init_linear(store, seed, "head.fc1", dim, self.hidden);
        nn::init_linear(store, seed, "head.fc2", self.hidden, self.classes);
    }
}

/// Residual dilated TCN over `[B, T, D]`: each block is `x + relu(conv(x))`.
pub fn aggregate(tape: &mut Tape, params: &mut Bound, cfg: &BackendConfig, seq: Var) -> Result<Var> {
    let s = tape.shape(seq);
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::Shape(format!("TCN input must be [B, T>0, D], got {s:?}")));
    }
    let mut x = tape.permute(seq, &[0, 2, 1])?;
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let w = params.var(tape, &format!("backend.tcn{i}.weight"))?;
        let b = params.var(tape, &format!("backend.tcn{i}.bias"))?;
        let y = tape.conv1d(x, w, Some(b), d)?;
        let y = tape.relu(y);
        x = tape.add(x, y)?;
    }
    tape.permute(x, &[0, 2, 1])
}

/// Mean over time, then `fc2(relu(fc1(.)))`: `[B, T, D] -> [B, classes]`.
pub fn pool_and_classify(tape: &mut Tape, params: &mut Bound, seq: Var) -> Result<Var> {
    let pooled = tape.mean_axis(seq, 1)?;
    let h = nn::linear(tape, params, "head.fc1", pooled)?;
    let h = tape.relu(h);
    nn::linear(tape, params, "head.fc2", h)
}

/// Per-class target weights: `1 - eps` on the label, `eps / (C - 1)` on
/// every other class.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if classes < 2 {
        return Err(Error::Config(format!("label smoothing needs at least 2 classes, got {classes}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let off = eps / (classes - 1) as f64;
    let mut t = Tensor::full(&[labels.len(), classes], off);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + y] = 1.0 - eps;
    }
    Ok(t)
}

/// Label-smoothed cross entropy, averaged over the batch.
pub fn label_smoothed_ce(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("label_smoothed_ce", &s, &[labels.len()]));
    }
    if s[0] == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let targets = smoothed_targets(labels, s[1], eps)?;
    let targets = tape.constant(targets);
    let logp = tape.log_softmax(logits)?;
    let weighted = tape.mul(logp, targets)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / s[0] as f64))
}

/// Row-wise argmax, first index on ties.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// One evaluated clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub clip_id: String,
    pub speaker_id: String,
    pub label: usize,
    pub predicted: usize,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

/// Fraction of records whose prediction matches the label.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Usage("accuracy of an empty record list".into()));
    }
    let hits = records.iter().filter(|r| r.correct()).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub n: usize,
    pub correct: usize,
    pub acc: f64,
}

/// Per-speaker tallies, keyed by speaker id.
pub fn per_speaker(records: &[EvalRecord]) -> BTreeMap<String, SpeakerStats> {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = tally.entry(r.speaker_id.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(r.correct());
    }
    tally
        .into_iter()
        .map(|(k, (n, correct))| {
            let acc = correct as f64 / n as f64;
            (k, SpeakerStats { n, correct, acc })
        })
        .collect()
}

/// Unweighted mean over speakers of per-speaker accuracy.
pub fn mean_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Usage("mean accuracy of an empty record list".into()));
    }
    let groups = per_speaker(records);
    Ok(groups.values().map(|s| s.acc).sum::<f64>() / groups.len() as f64)
}

/// Evaluation report as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub macc: f64,
    pub per_speaker: BTreeMap<String, SpeakerStats>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_records(records: &[EvalRecord], config_hash: &str, seed: u64) -> Result<Self> {
        Ok(Self {
            acc: accuracy(records)?,
            macc: mean_accuracy(records)?,
            per_speaker: per_speaker(records),
            config_hash: config_hash.to_string(),
            seed,
        })
    }

    /// Total clips across speakers.
    pub fn total(&self) -> usize {
        self.per_speaker.values().map(|s| s.n).sum()
    }
}
