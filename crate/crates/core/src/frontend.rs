//! Visual frontend: a resolution-preserving 3-D convolution for local
//! spatio-temporal dynamics, followed by a per-frame 2-D embedding that
//! shares its weights across time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// Channels of the dynamic feature map.
    pub dyn_channels: usize,
    /// Per-frame visual feature width.
    pub visual_dim: usize,
    pub frame_size: usize,
    /// `[kt, kh, kw]` of the 3-D kernel bank, all odd.
    pub dyn_kernel: [usize; 3],
    /// Output channels of the two strided 2-D blocks.
    pub visual_channels: [usize; 2],
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            dyn_channels: 8,
            visual_dim: 64,
            frame_size: 16,
            dyn_kernel: [3, 5, 5],
            visual_channels: [8, 16],
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dyn_kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("dynamic kernel {:?} must have odd extents", self.dyn_kernel)));
        }
        if self.frame_size % 8 != 0 || self.frame_size == 0 {
            return Err(Error::Config(format!(
                "frame size {} must be a positive multiple of 8",
                self.frame_size
            )));
        }
        if self.dyn_channels == 0 || self.visual_dim == 0 || self.visual_channels.contains(&0) {
            return Err(Error::Config("frontend widths must be positive".into()));
        }
        Ok(())
    }

    /// Flattened width after the two stride-2 blocks and 2x2 pooling.
    fn pooled_width(&self) -> usize {
        let side = self.frame_size / 8;
        self.visual_channels[1] * side * side
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let [kt, kh, kw] = self.dyn_kernel;
        let fan = kt * kh * kw;
        store.init(seed, "frontend.dyn.weight", &[self.dyn_channels, 1, kt, kh, kw], Init::FanIn(fan));
        store.init(seed, "frontend.dyn.bias", &[self.dyn_channels], Init::FanIn(fan));
        let [c1, c2] = self.visual_channels;
        let fan1 = self.dyn_channels * 9;
        store.init(
            seed,
            "frontend.vis.conv1.weight",
            &[c1, self.dyn_channels, 3, 3],
            Init::Glorot { fan_in: fan1, fan_out: c1 * 9 },
        );
        store.init(seed, "frontend.vis.conv1.bias", &[c1], Init::Zeros);
        store.init(
            seed,
            "frontend.vis.conv2.weight",
            &[c2, c1, 3, 3],
            Init::Glorot { fan_in: c1 * 9, fan_out: c2 * 9 },
        );
        store.init(seed, "frontend.vis.conv2.bias", &[c2], Init::Zeros);
        nn::init_linear(store, seed, "frontend.vis.proj", self.pooled_width(), self.visual_dim);
    }
}

/// Per-clip input normalization of `[B, 1, T, H, W]` frames: every pixel
/// loses its temporal mean, then the clip is scaled to unit variance.
///
/// Static appearance (skin tone, texture, lighting gain) drops out and the
/// articulation motion reaches the convolutions at a fixed scale. A clip
/// without motion maps to zeros.
pub fn normalize_clips(frames: &Tensor) -> Result<Tensor> {
    let sh = frames.shape();
    if sh.len() != 5 || sh[1] != 1 {
        return Err(Error::Shape(format!("frames must be [B, 1, T, H, W], got {sh:?}")));
    }
    let (b, t, hw) = (sh[0], sh[2], sh[3] * sh[4]);
    let mut out = frames.clone();
    if t == 0 || hw == 0 {
        return Ok(out);
    }
    for clip in out.data_mut().chunks_mut(t * hw).take(b) {
        for p in 0..hw {
            let mean = (0..t).map(|ti| clip[ti * hw + p]).sum::<f64>() / t as f64;
            for ti in 0..t {
                clip[ti * hw + p] -= mean;
            }
        }
        let var = clip.iter().map(|v| v * v).sum::<f64>() / clip.len() as f64;
        let inv = 1.0 / (var.sqrt() + NORM_FLOOR);
        clip.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Guards the variance scaling of static clips.
pub const NORM_FLOOR: f64 = 1e-6;

/// Local dynamic features: `[B, 1, T, H, W] -> [B, C_d, T, H, W]`,
/// `tanh(conv3d(frames))` with same padding.
pub fn extract_dynamic(tape: &mut Tape, params: &mut Bound, frames: Var) -> Result<Var> {
    let sh = tape.shape(frames).to_vec();
    if sh.len() != 5 || sh[1] != 1 {
        return Err(Error::Shape(format!("frames must be [B, 1, T, H, W], got {sh:?}")));
    }
    if sh[0] == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let w = params.var(tape, "frontend.dyn.weight")?;
    let b = params.var(tape, "frontend.dyn.bias")?;
    let y = tape.conv3d(frames, w, Some(b))?;
    Ok(tape.tanh(y))
}

/// Frame-wise visual features: `[B, C_d, T, H, W] -> [B, T, D_v]`.
///
/// Every frame goes through the same two stride-2 conv blocks, 2x2 average
/// pooling and a linear projection.
pub fn extract_visual(tape: &mut Tape, params: &mut Bound, dyn_feats: Var) -> Result<Var> {
    let sh = tape.shape(dyn_feats).to_vec();
    if sh.len() != 5 {
        return Err(Error::Shape(format!("dynamic features must be [B, C, T, H, W], got {sh:?}")));
    }
    let (b, c, t, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let x = tape.permute(dyn_feats, &[0, 2, 1, 3, 4])?;
    let x = tape.reshape(x, &[b * t, c, h, w])?;
    let mut x = x;
    for block in ["conv1", "conv2"] {
        let wv = params.var(tape, &format!("frontend.vis.{block}.weight"))?;
        let bv = params.var(tape, &format!("frontend.vis.{block}.bias"))?;
        x = tape.conv2d(x, wv, Some(bv), 2)?;
        x = tape.relu(x);
    }
    let s = tape.shape(x).to_vec();
    let (ch, hh, ww) = (s[1], s[2] / 2, s[3] / 2);
    // [N, C, H, W] -> [N, C, H/2, 2, W/2, 2], average the pairs
    let x = tape.reshape(x, &[b * t, ch, hh, 2, ww, 2])?;
    let x = tape.sum_axis(x, 5)?;
    let x = tape.sum_axis(x, 3)?;
    let x = tape.scale(x, 0.25);
    let x = tape.reshape(x, &[b * t, ch * hh * ww])?;
    let y = nn::linear(tape, params, "frontend.vis.proj", x)?;
    let d = tape.shape(y)[1];
    tape.reshape(y, &[b, t, d])
}
