//! Lip-dynamics fusion: combining the per-graph branch outputs and merging
//! the result with the frame-wise visual features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How graph-branch features are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Concatenate two branches, then reduce.
    Cat2,
    /// Point-wise sum of two branches.
    Sum2,
    /// Concatenate three branches, then reduce.
    Cat3,
    /// Per-frame routed mixture of three expert projections.
    Wsum3,
    /// `sum(lcg, cat(dag, sag))`.
    Composite,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Cat2,
        FusionMode::Sum2,
        FusionMode::Cat3,
        FusionMode::Wsum3,
        FusionMode::Composite,
    ];

    /// Number of graph features the mode consumes.
    pub fn arity(self) -> usize {
        match self {
            FusionMode::Cat2 | FusionMode::Sum2 => 2,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Cat2 => "cat2",
            FusionMode::Sum2 => "sum2",
            FusionMode::Cat3 => "cat3",
            FusionMode::Wsum3 => "wsum3",
            FusionMode::Composite => "composite",
        }
    }

    /// Learnable scalars the mode adds at feature width `d`.
    pub fn param_count(self, d: usize) -> usize {
        match self {
            FusionMode::Sum2 => 0,
            FusionMode::Cat2 | FusionMode::Composite => 2 * d * d + d,
            FusionMode::Cat3 => 3 * d * d + d,
            FusionMode::Wsum3 => 3 * (d * d + d) + 3 * d * 3 + 3,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}`")))
    }
}

/// A fusion mode bound to its feature width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionSpec {
    pub mode: FusionMode,
    pub dim: usize,
}

impl FusionSpec {
    pub fn new(mode: FusionMode, dim: usize) -> Self {
        Self { mode, dim }
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let d = self.dim;
        match self.mode {
            FusionMode::Sum2 => {}
            FusionMode::Cat2 | FusionMode::Composite => nn::init_linear(store, seed, "fusion.cat", 2 * d, d),
            FusionMode::Cat3 => nn::init_linear(store, seed, "fusion.cat", 3 * d, d),
            FusionMode::Wsum3 => {
                nn::init_linear(store, seed, "fusion.router", 3 * d, 3);
                // experts start as identity maps so the mixture is initially
                // a convex combination of the raw branch features
                for k in 0..3 {
                    store.insert(&format!("fusion.expert{k}.weight"), Tensor::eye(d));
                    store.insert(&format!("fusion.expert{k}.bias"), Tensor::zeros(&[d]));
                }
            }
        }
    }

    /// Fuses graph features given in `lcg, dag, sag` order (two-operand
    /// modes take whichever two branches are enabled, LCG first).
    pub fn apply(&self, tape: &mut Tape, params: &mut Bound, features: &[Var]) -> Result<Var> {
        if features.len() != self.mode.arity() {
            return Err(Error::Config(format!(
                "fusion mode {} takes {} graph features, got {}",
                self.mode,
                self.mode.arity(),
                features.len()
            )));
        }
        match self.mode {
            FusionMode::Cat2 | FusionMode::Cat3 => fuse_cat(tape, params, "fusion.cat", features),
            FusionMode::Sum2 => fuse_sum(tape, features),
            FusionMode::Wsum3 => Ok(fuse_wsum(tape, params, "fusion", features)?.0),
            FusionMode::Composite => fuse_composite(tape, params, features[0], features[1], features[2]),
        }
    }
}

fn check_bt(tape: &Tape, features: &[Var], op: &'static str) -> Result<()> {
    let first = tape.shape(features[0]).to_vec();
    if first.len() != 3 {
        return Err(Error::Shape(format!("{op} expects [B, T, D] features, got {first:?}")));
    }
    for &f in &features[1..] {
        let s = tape.shape(f);
        if s.len() != 3 || s[..2] != first[..2] {
            return Err(Error::dim(op, &first, s));
        }
    }
    Ok(())
}

fn check_same(tape: &Tape, features: &[Var], op: &'static str) -> Result<()> {
    let first = tape.shape(features[0]).to_vec();
    for &f in &features[1..] {
        if tape.shape(f) != first.as_slice() {
            return Err(Error::dim(op, &first, tape.shape(f)));
        }
    }
    Ok(())
}

/// Channel concatenation followed by the linear reduction `{prefix}`.
pub fn fuse_cat(tape: &mut Tape, params: &mut Bound, prefix: &str, features: &[Var]) -> Result<Var> {
    if features.len() < 2 {
        return Err(Error::Usage("concatenation fusion needs at least two operands".into()));
    }
    check_bt(tape, features, "fuse_cat")?;
    let cat = tape.concat(features, 2)?;
    nn::linear(tape, params, prefix, cat)
}

/// Point-wise sum, no parameters.
pub fn fuse_sum(tape: &mut Tape, features: &[Var]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Usage("sum fusion needs at least one operand".into()));
    }
    check_same(tape, features, "fuse_sum")?;
    let mut acc = features[0];
    for &f in &features[1..] {
        acc = tape.add(acc, f)?;
    }
    Ok(acc)
}

/// Routed mixture: a per-frame router over the concatenated features picks
/// softmax weights, which mix the three expert projections. Returns the
/// fused features and the `[B, T, 3]` routing weights.
pub fn fuse_wsum(tape: &mut Tape, params: &mut Bound, prefix: &str, features: &[Var]) -> Result<(Var, Var)> {
    if features.len() != 3 {
        return Err(Error::Usage(format!("routed fusion takes 3 operands, got {}", features.len())));
    }
    check_same(tape, features, "fuse_wsum")?;
    let s = tape.shape(features[0]).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let cat = tape.concat(features, 2)?;
    let logits = nn::linear(tape, params, &format!("{prefix}.router"), cat)?;
    let weights = tape.softmax(logits)?;
    let mut out = None;
    for (k, &f) in features.iter().enumerate() {
        let e = nn::linear(tape, params, &format!("{prefix}.expert{k}"), f)?;
        let wk = tape.narrow(weights, 2, k, 1)?;
        let term = tape.mul(e, wk)?;
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let out = out.expect("three operands");
    debug_assert_eq!(tape.shape(out), &[b, t, d]);
    Ok((out, weights))
}

/// `sum(lcg, cat(dag, sag))`.
pub fn fuse_composite(tape: &mut Tape, params: &mut Bound, lcg: Var, dag: Var, sag: Var) -> Result<Var> {
    check_same(tape, &[lcg, dag, sag], "fuse_composite")?;
    let ds = fuse_cat(tape, params, "fusion.cat", &[dag, sag])?;
    fuse_sum(tape, &[lcg, ds])
}

/// Final fusion level: point-wise addition of graph and visual features.
pub fn merge_with_visual(tape: &mut Tape, graph: Var, visual: Var) -> Result<Var> {
    if tape.shape(graph) != tape.shape(visual) {
        return Err(Error::dim("merge_with_visual", tape.shape(graph), tape.shape(visual)));
    }
    tape.add(graph, visual)
}
