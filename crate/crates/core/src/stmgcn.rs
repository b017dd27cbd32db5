//! Spatio-temporal multi-graph convolution: per-graph branches of stacked
//! ST-GCN layers (temporal conv, spatial graph conv, temporal conv, plus a
//! residual path), node-mean pooling, and a closing bidirectional GRU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::ROW_SUM_TOL;
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    /// ST-GCN layers per branch.
    pub layers: usize,
    /// Width of the temporal kernels inside each layer (odd).
    pub temporal_kernel: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            temporal_kernel: 3,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("a graph branch needs at least one ST-GCN layer".into()));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel {} must be odd", self.temporal_kernel)));
        }
        Ok(())
    }
}

/// Registers one ST-GCN layer under `prefix`.
pub fn init_layer_params(store: &mut ParamStore, seed: u64, prefix: &str, channels: usize, k: usize) {
    for tc in ["tc1", "tc2"] {
        store.init(
            seed,
            &format!("{prefix}.{tc}.weight"),
            &[channels, channels, k],
            Init::Glorot { fan_in: channels * k, fan_out: channels * k },
        );
        store.init(seed, &format!("{prefix}.{tc}.bias"), &[channels], Init::Zeros);
    }
    store.init(
        seed,
        &format!("{prefix}.sgc.weight"),
        &[channels, channels],
        Init::Glorot { fan_in: channels, fan_out: channels },
    );
}

/// Registers a bidirectional GRU with `hidden` units per direction.
pub fn init_bigru_params(store: &mut ParamStore, seed: u64, prefix: &str, input: usize, hidden: usize) {
    for dir in ["fwd", "bwd"] {
        let p = format!("{prefix}.{dir}");
        store.init(seed, &format!("{p}.w_ih"), &[input, 3 * hidden], Init::FanIn(hidden));
        store.init(seed, &format!("{p}.w_hh"), &[hidden, 3 * hidden], Init::FanIn(hidden));
        store.init(seed, &format!("{p}.b_ih"), &[3 * hidden], Init::FanIn(hidden));
        store.init(seed, &format!("{p}.b_hh"), &[3 * hidden], Init::FanIn(hidden));
    }
}

/// Registers a whole branch: optional coordinate lift, layers, Bi-GRU.
pub fn init_branch_params(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    cfg: &BranchConfig,
    lift_from: Option<usize>,
    channels: usize,
    out_dim: usize,
) {
    if let Some(din) = lift_from {
        nn::init_linear(store, seed, &format!("{prefix}.lift"), din, channels);
    }
    for l in 0..cfg.layers {
        init_layer_params(store, seed, &format!("{prefix}.layer{l}"), channels, cfg.temporal_kernel);
    }
    init_bigru_params(store, seed, &format!("{prefix}.gru"), channels, out_dim / 2);
}

fn check_row_stochastic(m: &Tensor) -> Result<()> {
    let n = *m.shape().last().unwrap_or(&0);
    for (i, row) in m.data().chunks(n.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "graph convolution needs a row-normalized adjacency; row {} sums to {s}",
                i % n.max(1)
            )));
        }
    }
    Ok(())
}

/// Spatial graph convolution `act(M · F_t · W)` applied at every time step.
///
/// `f: [B, N, T, C]`, `m: [N, N]` or per-sample `[B, N, N]`, `w: [C, C]`.
pub fn sgc(tape: &mut Tape, f: Var, m: Var, w: Var, act: Activation) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let ms = tape.shape(m).to_vec();
    if fs.len() != 4 {
        return Err(Error::Shape(format!("node features must be [B, N, T, C], got {fs:?}")));
    }
    let (b, n, t, c) = (fs[0], fs[1], fs[2], fs[3]);
    let ok = match ms.as_slice() {
        [r, q] => *r == n && *q == n,
        [bb, r, q] => *bb == b && *r == n && *q == n,
        _ => false,
    };
    if !ok {
        return Err(Error::dim("sgc adjacency", &ms, &fs));
    }
    check_row_stochastic(tape.value(m))?;
    let flat = tape.reshape(f, &[b, n, t * c])?;
    let agg = tape.matmul(m, flat)?;
    let agg = tape.reshape(agg, &[b, n, t, c])?;
    let y = tape.matmul(agg, w)?;
    Ok(tape.activate(y, act))
}

/// Temporal convolution over `[B, N, T, C]` node features, same length.
fn temporal_conv(tape: &mut Tape, params: &mut Bound, prefix: &str, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    let (b, n, t, c) = (s[0], s[1], s[2], s[3]);
    let w = params.var(tape, &format!("{prefix}.weight"))?;
    let bias = params.var(tape, &format!("{prefix}.bias"))?;
    let x = tape.permute(f, &[0, 1, 3, 2])?;
    let x = tape.reshape(x, &[b * n, c, t])?;
    let y = tape.conv1d(x, w, Some(bias), 1)?;
    let co = tape.shape(y)[1];
    let y = tape.reshape(y, &[b, n, co, t])?;
    tape.permute(y, &[0, 1, 3, 2])
}

/// One ST-GCN layer: `F + TC(SGC(TC(F), M))`.
pub fn stgcn_layer(tape: &mut Tape, params: &mut Bound, prefix: &str, f: Var, m: Var, act: Activation) -> Result<Var> {
    let x = temporal_conv(tape, params, &format!("{prefix}.tc1"), f)?;
    let w = params.var(tape, &format!("{prefix}.sgc.weight"))?;
    let x = sgc(tape, x, m, w, act)?;
    let x = temporal_conv(tape, params, &format!("{prefix}.tc2"), x)?;
    tape.add(f, x)
}

/// One GRU direction over `[B, T, D]` producing `[B, T, H]`; the reverse
/// direction reads time backwards but writes outputs at their original
/// time index.
fn gru_direction(tape: &mut Tape, params: &mut Bound, prefix: &str, seq: Var, reverse: bool) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    let (b, t) = (s[0], s[1]);
    let w_ih = params.var(tape, &format!("{prefix}.w_ih"))?;
    let w_hh = params.var(tape, &format!("{prefix}.w_hh"))?;
    let b_ih = params.var(tape, &format!("{prefix}.b_ih"))?;
    let b_hh = params.var(tape, &format!("{prefix}.b_hh"))?;
    let h3 = tape.shape(w_hh)[1];
    let hidden = h3 / 3;
    // input projections for every step at once
    let xp = tape.matmul(seq, w_ih)?;
    let xp = tape.add(xp, b_ih)?;
    let mut h = tape.constant(Tensor::zeros(&[b, hidden]));
    let mut outs = vec![None; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for ti in order {
        let x_t = tape.narrow(xp, 1, ti, 1)?;
        let x_t = tape.reshape(x_t, &[b, h3])?;
        let hp = tape.matmul(h, w_hh)?;
        let hp = tape.add(hp, b_hh)?;
        let xr = tape.narrow(x_t, 1, 0, hidden)?;
        let xz = tape.narrow(x_t, 1, hidden, hidden)?;
        let xn = tape.narrow(x_t, 1, 2 * hidden, hidden)?;
        let hr = tape.narrow(hp, 1, 0, hidden)?;
        let hz = tape.narrow(hp, 1, hidden, hidden)?;
        let hn = tape.narrow(hp, 1, 2 * hidden, hidden)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);
        // h' = n + z * (h - n)  ==  (1 - z) * n + z * h
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        h = tape.add(n, zd)?;
        outs[ti] = Some(tape.reshape(h, &[b, 1, hidden])?);
    }
    let outs: Vec<Var> = outs.into_iter().flatten().collect();
    tape.concat(&outs, 1)
}

/// Bidirectional GRU: `[B, T, D] -> [B, T, 2H]`, forward half first.
pub fn bigru(tape: &mut Tape, params: &mut Bound, prefix: &str, seq: Var) -> Result<Var> {
    let s = tape.shape(seq);
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::Shape(format!("GRU input must be [B, T>0, D], got {s:?}")));
    }
    let f = gru_direction(tape, params, &format!("{prefix}.fwd"), seq, false)?;
    let r = gru_direction(tape, params, &format!("{prefix}.bwd"), seq, true)?;
    tape.concat(&[f, r], 2)
}

/// Differentiable SAG adjacency from `[B, N, T, C]` node features:
/// time-average, cosine similarity, clamp at zero, unit diagonal, row
/// normalization. Returns `[B, N, N]`.
pub fn sag_adjacency(tape: &mut Tape, node_feats: Var) -> Result<Var> {
    let s = tape.shape(node_feats).to_vec();
    let (b, n) = (s[0], s[1]);
    let mean = tape.mean_axis(node_feats, 2)?;
    let sq = tape.mul(mean, mean)?;
    let norm2 = tape.sum_axis(sq, 2)?;
    if let Some(pos) = tape.value(norm2).data().iter().position(|&v| v == 0.0) {
        return Err(Error::Construction(format!(
            "SAG node {} of sample {} has a zero-norm feature vector",
            pos % n,
            pos / n
        )));
    }
    let norm = tape.sqrt(norm2);
    let unit = tape.div(mean, norm)?;
    let unit_t = tape.permute(unit, &[0, 2, 1])?;
    let sim = tape.matmul(unit, unit_t)?;
    let clamped = tape.relu(sim);
    let off_diag = tape.constant(Tensor::from_fn(&[n, n], |i| if i / n == i % n { 0.0 } else { 1.0 }));
    let eye = tape.constant(Tensor::eye(n));
    let w = tape.mul(clamped, off_diag)?;
    let w = tape.add(w, eye)?;
    let rs = tape.sum_axis(w, 2)?;
    let a = tape.div(w, rs)?;
    debug_assert_eq!(tape.shape(a), &[b, n, n]);
    Ok(a)
}

/// Full branch: stacked ST-GCN layers, mean over nodes, Bi-GRU.
/// `f_node: [B, N, T, C]`, returns `[B, T, out_dim]`.
pub fn run_branch(tape: &mut Tape, params: &mut Bound, prefix: &str, layers: usize, f_node: Var, m: Var) -> Result<Var> {
    let mut x = f_node;
    for l in 0..layers {
        x = stgcn_layer(tape, params, &format!("{prefix}.layer{l}"), x, m, Activation::Relu)?;
    }
    let pooled = tape.mean_axis(x, 1)?;
    bigru(tape, params, &format!("{prefix}.gru"), pooled)
}
