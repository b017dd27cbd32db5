//! Synthetic lip clips: parametric lip contours driven by per-class
//! articulation programs, per-speaker shape and texture nuisances, rendered
//! into small intensity patches with exact landmark tracks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSequence, LipTopology, INNER_RING, NUM_LANDMARKS, OUTER_RING};
use crate::tensor::Tensor;

/// Deterministic sub-seed for a named stream under `seed`.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub speakers: usize,
    /// Clips per (speaker, class).
    pub clips_per: usize,
    /// Of those, how many per training speaker go to validation.
    pub val_per: usize,
    pub frame_size: usize,
    pub frames: usize,
    /// Per-pixel Gaussian sensor noise baked into every rendered clip.
    pub pixel_noise: f64,
    /// Floor on pairwise distance between canonical class trajectories.
    pub class_separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            speakers: 12,
            clips_per: 30,
            val_per: 5,
            frame_size: 16,
            frames: 29,
            pixel_noise: 0.15,
            class_separation: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.speakers < 3 {
            return Err(Error::Config(format!(
                "{} speakers cannot form train and unseen-speaker test splits; need at least 3",
                self.speakers
            )));
        }
        if self.clips_per == 0 || self.val_per >= self.clips_per {
            return Err(Error::Config(format!(
                "clips_per ({}) must exceed val_per ({})",
                self.clips_per, self.val_per
            )));
        }
        if self.frames < 3 {
            return Err(Error::Config(format!("clips need at least 3 frames, got {}", self.frames)));
        }
        if self.frame_size < 12 {
            return Err(Error::Config(format!("frame size {} too small for a lip contour", self.frame_size)));
        }
        if !(self.pixel_noise >= 0.0) {
            return Err(Error::Config("pixel noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Speakers held out for the unseen-speaker test split.
    pub fn test_speakers(&self) -> usize {
        (self.speakers / 3).max(1)
    }
}

/// Per-speaker nuisance factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Static per-landmark offsets in pixels, `[20][2]`.
    pub offsets: Vec<[f64; 2]>,
    pub scale: f64,
    pub center: [f64; 2],
    /// How strongly the speaker articulates.
    pub gain: f64,
    pub skin: f64,
    pub lip_tone: f64,
    pub texture_seed: u64,
}

const OFFSET_BOUND: f64 = 0.35;

impl SpeakerProfile {
    pub fn sample(speaker_id: &str, frame_size: usize, rng: &mut impl Rng) -> Self {
        let c = (frame_size as f64 - 1.0) / 2.0;
        Self {
            speaker_id: speaker_id.to_string(),
            offsets: (0..NUM_LANDMARKS)
                .map(|_| [rng.random_range(-OFFSET_BOUND..OFFSET_BOUND), rng.random_range(-OFFSET_BOUND..OFFSET_BOUND)])
                .collect(),
            scale: rng.random_range(0.85..1.15),
            center: [c + rng.random_range(-0.8..0.8), c + rng.random_range(-0.6..0.6)],
            gain: rng.random_range(0.8..1.2),
            skin: rng.random_range(0.3..0.45),
            lip_tone: rng.random_range(0.2..0.35),
            texture_seed: rng.random(),
        }
    }
}

/// Number of key poses in an articulation program.
pub const PHASES: usize = 4;

/// Per-class articulation program: key poses of (opening, spread,
/// protrusion) in `[0, 1]`, visited in order between rest poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordClassSpec {
    pub label: usize,
    pub targets: Vec<[f64; 3]>,
    /// Maximum per-key timing shift, in frames.
    pub timing_jitter: f64,
    /// Maximum relative amplitude change.
    pub amplitude_jitter: f64,
}

const REST: [f64; 3] = [0.1, 0.4, 0.0];

/// Smooth interpolation through `(time, pose)` keys, held flat outside.
fn interpolate(keys: &[(f64, [f64; 3])], t: f64) -> [f64; 3] {
    if t <= keys[0].0 {
        return keys[0].1;
    }
    for w in keys.windows(2) {
        let ((t0, a), (t1, b)) = (w[0], w[1]);
        if t <= t1 {
            let u = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            let s = 0.5 - 0.5 * (std::f64::consts::PI * u).cos();
            return [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2])];
        }
    }
    keys[keys.len() - 1].1
}

impl WordClassSpec {
    pub fn sample(label: usize, rng: &mut impl Rng) -> Self {
        Self {
            label,
            targets: (0..PHASES)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect(),
            timing_jitter: 1.5,
            amplitude_jitter: 0.15,
        }
    }

    /// Articulation track `[T][3]` with per-key timing shifts (frames) and
    /// an amplitude factor.
    pub fn trajectory(&self, frames: usize, shifts: &[f64], amp: f64) -> Vec<[f64; 3]> {
        let span = frames as f64 - 1.0;
        let lo = 0.12 * span;
        let hi = 0.88 * span;
        let mut keys = vec![(0.0, REST)];
        for (k, tgt) in self.targets.iter().enumerate() {
            let base = lo + (hi - lo) * k as f64 / (PHASES - 1) as f64;
            let pose = [
                (REST[0] + amp * (tgt[0] - REST[0])).clamp(0.0, 1.0),
                (REST[1] + amp * (tgt[1] - REST[1])).clamp(0.0, 1.0),
                (REST[2] + amp * (tgt[2] - REST[2])).clamp(0.0, 1.0),
            ];
            keys.push((base + shifts.get(k).copied().unwrap_or(0.0), pose));
        }
        keys.push((span, REST));
        (0..frames).map(|t| interpolate(&keys, t as f64)).collect()
    }

    pub fn canonical(&self, frames: usize) -> Vec<[f64; 3]> {
        self.trajectory(frames, &[], 1.0)
    }
}

fn trajectory_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Class programs for a dataset, redrawn until every pair of canonical
/// trajectories is at least `floor` apart.
pub fn sample_classes(cfg: &SynthConfig, seed: u64) -> Result<Vec<WordClassSpec>> {
    let mut rng = rng_for(seed, &["classes"]);
    let mut out: Vec<WordClassSpec> = Vec::with_capacity(cfg.classes);
    let mut attempts = 0;
    while out.len() < cfg.classes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!(
                "cannot draw {} classes separated by {}",
                cfg.classes, cfg.class_separation
            )));
        }
        let cand = WordClassSpec::sample(out.len(), &mut rng);
        let traj = cand.canonical(cfg.frames);
        if out
            .iter()
            .all(|c| trajectory_distance(&c.canonical(cfg.frames), &traj) >= cfg.class_separation)
        {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Contour points `[20][2]` for one articulation pose.
pub fn contour(profile: &SpeakerProfile, pose: [f64; 3], frame_size: usize) -> Vec<[f64; 2]> {
    let [open, spread, protrude] = pose;
    let s = profile.scale * profile.gain.sqrt();
    let g = profile.gain;
    let half_w = s * (3.6 + 1.6 * spread - 1.0 * protrude);
    let upper = s * (1.3 + 0.6 * g * open + 0.5 * protrude);
    let lower = s * (1.6 + 2.2 * g * open + 0.5 * protrude);
    let inner_w = half_w * (0.72 - 0.15 * protrude);
    let inner_up = s * (0.15 + 0.7 * g * open);
    let inner_lo = s * (0.2 + 1.3 * g * open);
    let [cx, cy] = profile.center;
    let lo = 0.5;
    let hi = frame_size as f64 - 1.5;
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    let ring = |n: usize, w: f64, up: f64, dn: f64, pts: &mut Vec<[f64; 2]>| {
        for k in 0..n {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let sn = phi.sin();
            // a slight dip in the middle of the upper outer lip
            let bow = if n == OUTER_RING && sn > 0.9 { 0.25 * s } else { 0.0 };
            let h = if sn > 0.0 { up - bow } else { dn };
            pts.push([cx - w * phi.cos(), cy - h * sn]);
        }
    };
    ring(OUTER_RING, half_w, upper, lower, &mut pts);
    ring(INNER_RING, inner_w, inner_up, inner_lo, &mut pts);
    for (p, o) in pts.iter_mut().zip(&profile.offsets) {
        p[0] = (p[0] + o[0]).clamp(lo, hi);
        p[1] = (p[1] + o[1]).clamp(lo, hi);
    }
    pts
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + u * dx, a[1] + u * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Distance from `p` to the closed polyline through `ring`.
fn ring_distance(p: [f64; 2], ring: &[[f64; 2]]) -> f64 {
    (0..ring.len())
        .map(|k| segment_distance(p, ring[k], ring[(k + 1) % ring.len()]))
        .fold(f64::INFINITY, f64::min)
}

fn inside(p: [f64; 2], ring: &[[f64; 2]]) -> bool {
    let mut c = false;
    let n = ring.len();
    for k in 0..n {
        let (a, b) = (ring[k], ring[(k + n - 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            c = !c;
        }
    }
    c
}

/// Distance from `p` to the nearest contour edge of either ring.
pub fn contour_distance(p: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    ring_distance(p, &pts[..OUTER_RING]).min(ring_distance(p, &pts[OUTER_RING..]))
}

/// Low-frequency speaker texture over the crop.
fn texture(seed: u64, frame_size: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    let n = frame_size;
    (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum()
        })
        .collect()
}

const RIDGE_PEAK: f64 = 0.45;
const RIDGE_WIDTH: f64 = 0.7;
const INTERIOR: f64 = 0.08;

/// Renders one `[H, W]` frame for contour `pts`.
pub fn render_frame(profile: &SpeakerProfile, tex: &[f64], pts: &[[f64; 2]], frame_size: usize) -> Vec<f64> {
    let outer = &pts[..OUTER_RING];
    let inner = &pts[OUTER_RING..];
    let n = frame_size;
    (0..n * n)
        .map(|i| {
            let p = [(i % n) as f64, (i / n) as f64];
            let base = if inside(p, inner) {
                INTERIOR
            } else if inside(p, outer) {
                profile.lip_tone
            } else {
                profile.skin
            };
            let d = contour_distance(p, pts);
            let ridge = RIDGE_PEAK * (-d * d / (2.0 * RIDGE_WIDTH * RIDGE_WIDTH)).exp();
            (base + tex[i] + ridge).clamp(0.0, 1.0)
        })
        .collect()
}

/// One synthetic clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    /// `[T, H, W]` intensities in `[0, 1]`.
    pub frames: Tensor,
    pub landmarks: LandmarkSequence,
    pub seed: u64,
}

impl SyntheticClip {
    pub fn clip_id(&self) -> &str {
        &self.landmarks.clip_id
    }

    pub fn speaker_id(&self) -> &str {
        &self.landmarks.speaker_id
    }

    pub fn label(&self) -> usize {
        self.landmarks.label
    }

    pub fn frame_size(&self) -> usize {
        self.landmarks.frame_size
    }
}

/// Checks that each frame's brightest pixel lies within one pixel of the
/// contour drawn from the clip's own landmarks.
pub fn self_check(clip: &SyntheticClip) -> Result<()> {
    let sh = clip.frames.shape();
    let (t, h, w) = (sh[0], sh[1], sh[2]);
    for ti in 0..t {
        let frame = &clip.frames.data()[ti * h * w..(ti + 1) * h * w];
        let (arg, _) = frame
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let p = [(arg % w) as f64, (arg / w) as f64];
        let pts: Vec<[f64; 2]> = (0..NUM_LANDMARKS)
            .map(|n| {
                let (x, y) = clip.landmarks.point(ti, n);
                [x, y]
            })
            .collect();
        let d = contour_distance(p, &pts);
        if d > 1.0 {
            return Err(Error::Data(format!(
                "clip {} frame {ti}: brightest pixel ({}, {}) is {d:.2}px from the contour",
                clip.clip_id(),
                p[0],
                p[1]
            )));
        }
    }
    Ok(())
}

/// Renders one clip of class `spec` for `profile`, fully determined by
/// `seed`. The noise-free render passes [`self_check`] before sensor noise
/// is added.
pub fn generate_clip(
    cfg: &SynthConfig,
    spec: &WordClassSpec,
    profile: &SpeakerProfile,
    clip_id: &str,
    seed: u64,
) -> Result<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<f64> = (0..PHASES)
        .map(|_| rng.random_range(-spec.timing_jitter..=spec.timing_jitter))
        .collect();
    let amp = 1.0 + rng.random_range(-spec.amplitude_jitter..=spec.amplitude_jitter);
    let traj = spec.trajectory(cfg.frames, &shifts, amp);
    let fs = cfg.frame_size;
    let tex = texture(profile.texture_seed, fs);
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut coords = Vec::with_capacity(cfg.frames * NUM_LANDMARKS * 2);
    let mut frames = Vec::with_capacity(cfg.frames * fs * fs);
    for pose in &traj {
        let pts = contour(profile, *pose, fs);
        coords.extend(pts.iter().flat_map(|p| [p[0], p[1]]));
        frames.extend(render_frame(profile, &tex, &pts, fs));
    }
    let coords = Tensor::new(&[cfg.frames, NUM_LANDMARKS, 2], coords)?;
    let landmarks = LandmarkSequence::new(coords, clip_id, &profile.speaker_id, spec.label, fs)?;
    let mut clip = SyntheticClip {
        frames: Tensor::new(&[cfg.frames, fs, fs], frames)?,
        landmarks,
        seed,
    };
    // consistency is a property of the renderer, so check before the sensor noise
    self_check(&clip)?;
    if cfg.pixel_noise > 0.0 {
        for v in clip.frames.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(clip)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

/// A generated dataset, clips ordered by (speaker, class, index).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub speakers: Vec<SpeakerProfile>,
    pub classes: Vec<WordClassSpec>,
    pub train_speakers: Vec<String>,
    pub test_speakers: Vec<String>,
    pub train: Vec<SyntheticClip>,
    pub val: Vec<SyntheticClip>,
    pub test: Vec<SyntheticClip>,
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i:02}")
}

pub fn clip_name(speaker: usize, class: usize, index: usize) -> String {
    format!("spk{speaker:02}_w{class:02}_{index:02}")
}

/// Generates the full dataset. Test speakers never appear in train or val.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let classes = sample_classes(cfg, seed)?;
    let speakers: Vec<SpeakerProfile> = (0..cfg.speakers)
        .map(|s| {
            let name = speaker_name(s);
            SpeakerProfile::sample(&name, cfg.frame_size, &mut rng_for(seed, &["speaker", &name]))
        })
        .collect();
    let mut order: Vec<usize> = (0..cfg.speakers).collect();
    order.shuffle(&mut rng_for(seed, &["split"]));
    let mut test_idx: Vec<usize> = order[..cfg.test_speakers()].to_vec();
    test_idx.sort_unstable();
    let is_test = |s: usize| test_idx.contains(&s);

    let mut ds = Dataset {
        config: cfg.clone(),
        seed,
        train_speakers: (0..cfg.speakers).filter(|&s| !is_test(s)).map(speaker_name).collect(),
        test_speakers: test_idx.iter().map(|&s| speaker_name(s)).collect(),
        speakers,
        classes,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for s in 0..cfg.speakers {
        for c in 0..cfg.classes {
            for i in 0..cfg.clips_per {
                let id = clip_name(s, c, i);
                let clip_seed = derive_seed(seed, &["clip", &id]);
                let clip = generate_clip(cfg, &ds.classes[c], &ds.speakers[s], &id, clip_seed)?;
                if is_test(s) {
                    ds.test.push(clip);
                } else if i < cfg.val_per {
                    ds.val.push(clip);
                } else {
                    ds.train.push(clip);
                }
            }
        }
    }
    Ok(ds)
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticClip] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Every third training clip of each speaker, in (class, index) order.
pub fn low_resource(train: &[SyntheticClip]) -> Vec<SyntheticClip> {
    let mut seen: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    train
        .iter()
        .filter(|c| {
            let k = seen.entry(c.speaker_id()).or_insert(0);
            let keep = *k % 3 == 0;
            *k += 1;
            keep
        })
        .cloned()
        .collect()
}

/// Temporal masking settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Longest masked span in frames; 0 disables masking.
    pub max_len: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { max_len: 5 }
    }
}

/// Horizontal mirror of frames and landmarks. Node `i` of the result holds
/// the mirrored position of the node that `i` mirrors.
pub fn flip(clip: &SyntheticClip) -> Result<SyntheticClip> {
    let sh = clip.frames.shape();
    let (t, h, w) = (sh[0], sh[1], sh[2]);
    let src = clip.frames.data();
    let mut frames = Tensor::zeros(sh);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                frames.data_mut()[(ti * h + y) * w + x] = src[(ti * h + y) * w + (w - 1 - x)];
            }
        }
    }
    let perm = LipTopology::default().mirror_permutation();
    let lm = &clip.landmarks;
    let n = NUM_LANDMARKS;
    let mut coords = Tensor::zeros(lm.coords.shape());
    for ti in 0..lm.frames() {
        for i in 0..n {
            let (x, y) = lm.point(ti, i);
            coords.set(&[ti, perm[i], 0], (w - 1) as f64 - x);
            coords.set(&[ti, perm[i], 1], y);
        }
    }
    let landmarks = LandmarkSequence::new(coords, &lm.clip_id, &lm.speaker_id, lm.label, lm.frame_size)?;
    Ok(SyntheticClip {
        frames,
        landmarks,
        seed: clip.seed,
    })
}

/// Replaces frames `start..start + len` with their mean frame.
pub fn mask_span(clip: &SyntheticClip, start: usize, len: usize) -> Result<SyntheticClip> {
    let sh = clip.frames.shape();
    let (t, plane) = (sh[0], sh[1] * sh[2]);
    if start + len > t {
        return Err(Error::Config(format!("mask {start}..{} exceeds {t} frames", start + len)));
    }
    let mut out = clip.clone();
    if len == 0 {
        return Ok(out);
    }
    let data = out.frames.data_mut();
    let mut mean = vec![0.0; plane];
    for ti in start..start + len {
        for (m, v) in mean.iter_mut().zip(&data[ti * plane..(ti + 1) * plane]) {
            *m += v / len as f64;
        }
    }
    for ti in start..start + len {
        data[ti * plane..(ti + 1) * plane].copy_from_slice(&mean);
    }
    Ok(out)
}

/// Random flip with probability `flip_p`, then a random temporal mask of
/// up to `mask.max_len` frames. Labels are unchanged.
pub fn augment(clip: &SyntheticClip, flip_p: f64, mask: &MaskConfig, seed: u64) -> Result<SyntheticClip> {
    let t = clip.frames.shape()[0];
    if mask.max_len > t {
        return Err(Error::Config(format!("mask length {} exceeds clip length {t}", mask.max_len)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = if rng.random::<f64>() < flip_p { flip(clip)? } else { clip.clone() };
    let len = rng.random_range(0..=mask.max_len);
    let start = rng.random_range(0..=t - len);
    out = mask_span(&out, start, len)?;
    Ok(out)
}

/// I.i.d. Gaussian noise on the frames, clamped to `[0, 1]`.
pub fn perturb_visual(clip: &SyntheticClip, sigma: f64, seed: u64) -> Result<SyntheticClip> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {sigma} must be nonnegative")));
    }
    let mut out = clip.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    for v in out.frames.data_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// I.i.d. Gaussian landmark offsets, clamped inside the crop.
pub fn perturb_landmarks(clip: &SyntheticClip, sigma: f64, seed: u64) -> Result<SyntheticClip> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("jitter sigma {sigma} must be nonnegative")));
    }
    let mut out = clip.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let hi = clip.frame_size() as f64 - 1.0;
    for v in out.landmarks.coords.data_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, hi);
    }
    Ok(out)
}
