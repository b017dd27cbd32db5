//! The assembled lipreading model: visual frontend, up to three landmark
//! graph branches, fusion, temporal back end and classifier.

use serde::{Deserialize, Serialize};

use crate::backend::{self, BackendConfig};
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig};
use crate::fusion::{self, FusionMode, FusionSpec};
use crate::graphs::{self, GraphKind, DAG_EPSILON};
use crate::landmarks::{LipTopology, NUM_LANDMARKS};
use crate::nn;
use crate::params::{Bound, ParamStore};
use crate::stmgcn::{self, BranchConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architecture and variant switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub branch: BranchConfig,
    pub backend: BackendConfig,
    pub use_lcg: bool,
    pub use_dag: bool,
    pub use_sag: bool,
    /// Used when two or three graphs are enabled; a single graph feeds the
    /// visual merge directly.
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            branch: BranchConfig::default(),
            backend: BackendConfig::default(),
            use_lcg: true,
            use_dag: true,
            use_sag: true,
            fusion: FusionMode::Composite,
        }
    }
}

/// The four rows of the ablation, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Dag,
    DagLcg,
    DagLcgSag,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Dag, Variant::DagLcg, Variant::DagLcgSag];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dag => "+DAG",
            Variant::DagLcg => "+DAG+LCG",
            Variant::DagLcgSag => "+DAG+LCG+SAG",
        }
    }

    /// `base` with this variant's graph switches and fusion mode.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        let (lcg, dag, sag) = match self {
            Variant::Baseline => (false, false, false),
            Variant::Dag => (false, true, false),
            Variant::DagLcg => (true, true, false),
            Variant::DagLcgSag => (true, true, true),
        };
        c.use_lcg = lcg;
        c.use_dag = dag;
        c.use_sag = sag;
        c.fusion = match self {
            Variant::DagLcg => FusionMode::Sum2,
            Variant::DagLcgSag => FusionMode::Composite,
            _ => base.fusion,
        };
        c
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.frontend.visual_dim
    }

    pub fn enabled_graphs(&self) -> Vec<GraphKind> {
        let mut v = Vec::new();
        if self.use_lcg {
            v.push(GraphKind::Lcg);
        }
        if self.use_dag {
            v.push(GraphKind::Dag);
        }
        if self.use_sag {
            v.push(GraphKind::Sag);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.branch.validate()?;
        self.backend.validate()?;
        if self.dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "feature width {} must be even to split across the two GRU directions",
                self.dim()
            )));
        }
        let g = self.enabled_graphs().len();
        if g >= 2 && self.fusion.arity() != g {
            return Err(Error::Config(format!(
                "fusion mode {} fuses {} graphs but {g} are enabled",
                self.fusion,
                self.fusion.arity()
            )));
        }
        Ok(())
    }

    /// Fusion actually applied, if any.
    pub fn fusion_spec(&self) -> Option<FusionSpec> {
        (self.enabled_graphs().len() >= 2).then(|| FusionSpec::new(self.fusion, self.dim()))
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        self.frontend.init_params(&mut store, seed);
        let c = self.frontend.dyn_channels;
        for kind in self.enabled_graphs() {
            let lift = (kind == GraphKind::Lcg).then_some(2);
            stmgcn::init_branch_params(&mut store, seed, &branch_prefix(kind), &self.branch, lift, c, self.dim());
        }
        if let Some(spec) = self.fusion_spec() {
            spec.init_params(&mut store, seed);
        }
        self.backend.init_params(&mut store, seed, self.dim());
        Ok(store)
    }
}

pub fn branch_prefix(kind: GraphKind) -> String {
    format!("branch.{}", kind.name().to_lowercase())
}

/// Scalar counts split by component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub frontend: usize,
    pub graph_branches: usize,
    pub fusion: usize,
    pub backend: usize,
}

impl ParamCounts {
    pub fn of(store: &ParamStore) -> Self {
        Self {
            total: store.count(),
            frontend: store.count_prefix("frontend."),
            graph_branches: store.count_prefix("branch."),
            fusion: store.count_prefix("fusion."),
            backend: store.count_prefix("backend.") + store.count_prefix("head."),
        }
    }
}

/// A batch of clips ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    /// `[B, 1, T, H, W]` intensities.
    pub frames: Tensor,
    /// One `[T, 20, 2]` landmark track per clip.
    pub tracks: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<String>,
    pub speaker_ids: Vec<String>,
    pub frame_size: usize,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames_len(&self) -> usize {
        self.frames.shape().get(2).copied().unwrap_or(0)
    }
}

/// Intermediate tape handles of one forward pass.
pub struct Forward {
    pub logits: Var,
    pub visual: Var,
    pub branches: Vec<(GraphKind, Var)>,
}

/// `[B, N, T, 2]` LCG node features: each clip's coordinates centred on
/// its mean lip centroid and divided by its mean distance from it, so the
/// features ignore where the mouth sits in the crop and how large it is.
pub fn normalized_coords(batch: &ClipBatch) -> Result<Tensor> {
    let b = batch.len();
    let t = batch.frames_len();
    let mut out = Tensor::zeros(&[b, NUM_LANDMARKS, t, 2]);
    for (bi, track) in batch.tracks.iter().enumerate() {
        if track.shape() != [t, NUM_LANDMARKS, 2] {
            return Err(Error::Shape(format!(
                "landmark track {:?} does not match {t} frames x {NUM_LANDMARKS} nodes",
                track.shape()
            )));
        }
        let pts = track.data();
        let count = (t * NUM_LANDMARKS) as f64;
        let cx = pts.iter().step_by(2).sum::<f64>() / count;
        let cy = pts.iter().skip(1).step_by(2).sum::<f64>() / count;
        let spread = pts
            .chunks_exact(2)
            .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
            .sum::<f64>()
            / count;
        let inv = 1.0 / spread.max(COORD_SPREAD_FLOOR);
        for ti in 0..t {
            for n in 0..NUM_LANDMARKS {
                out.set(&[bi, n, ti, 0], (track.at(&[ti, n, 0]) - cx) * inv);
                out.set(&[bi, n, ti, 1], (track.at(&[ti, n, 1]) - cy) * inv);
            }
        }
    }
    Ok(out)
}

/// Smallest spread, in pixels, used when scaling LCG coordinates.
pub const COORD_SPREAD_FLOOR: f64 = 1e-3;

/// Per-clip DAG adjacency stacked to `[B, N, N]`.
pub fn dag_stack(tracks: &[Tensor]) -> Result<Tensor> {
    let n = NUM_LANDMARKS;
    let mut data = Vec::with_capacity(tracks.len() * n * n);
    for track in tracks {
        data.extend_from_slice(graphs::build_dag(track, DAG_EPSILON)?.weights.data());
    }
    Tensor::new(&[tracks.len(), n, n], data)
}

/// Full forward pass with parameters bound through `params`.
pub fn forward(tape: &mut Tape, params: &mut Bound, cfg: &ModelConfig, batch: &ClipBatch) -> Result<Forward> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if batch.tracks.len() != batch.len() || batch.frames.shape().first() != Some(&batch.len()) {
        return Err(Error::Shape("batch frames, tracks and labels disagree in length".into()));
    }
    let frames = tape.constant(frontend::normalize_clips(&batch.frames)?);
    let dyn_feats = frontend::extract_dynamic(tape, params, frames)?;
    let visual = frontend::extract_visual(tape, params, dyn_feats)?;

    let kinds = cfg.enabled_graphs();
    let sampled = if cfg.use_dag || cfg.use_sag {
        let tracks: Vec<&Tensor> = batch.tracks.iter().collect();
        let fshape = tape.shape(dyn_feats).to_vec();
        let index = graphs::sampling_index(&fshape, &tracks, batch.frame_size)?;
        let (b, c, t) = (fshape[0], fshape[1], fshape[2]);
        Some(tape.gather(dyn_feats, index, &[b, NUM_LANDMARKS, t, c])?)
    } else {
        None
    };

    let mut branches = Vec::with_capacity(kinds.len());
    for &kind in &kinds {
        let prefix = branch_prefix(kind);
        let (nodes, adj) = match kind {
            GraphKind::Lcg => {
                let coords = tape.constant(normalized_coords(batch)?);
                let nodes = nn::linear(tape, params, &format!("{prefix}.lift"), coords)?;
                let adj = graphs::build_lcg(&LipTopology::default())?;
                (nodes, tape.constant(adj.weights))
            }
            GraphKind::Dag => {
                let nodes = sampled.expect("sampled when DAG is enabled");
                (nodes, tape.constant(dag_stack(&batch.tracks)?))
            }
            GraphKind::Sag => {
                let nodes = sampled.expect("sampled when SAG is enabled");
                (nodes, stmgcn::sag_adjacency(tape, nodes)?)
            }
        };
        let out = stmgcn::run_branch(tape, params, &prefix, cfg.branch.layers, nodes, adj)?;
        branches.push((kind, out));
    }

    let feats: Vec<Var> = branches.iter().map(|&(_, v)| v).collect();
    let graph = match feats.len() {
        0 => None,
        1 => Some(feats[0]),
        _ => Some(cfg.fusion_spec().expect("two or more graphs").apply(tape, params, &feats)?),
    };
    let merged = match graph {
        Some(g) => fusion::merge_with_visual(tape, g, visual)?,
        None => visual,
    };
    let seq = backend::aggregate(tape, params, &cfg.backend, merged)?;
    let logits = backend::pool_and_classify(tape, params, seq)?;
    Ok(Forward {
        logits,
        visual,
        branches,
    })
}

/// Forward plus label-smoothed loss. Returns `(loss, logits)`.
pub fn loss(tape: &mut Tape, params: &mut Bound, cfg: &ModelConfig, batch: &ClipBatch) -> Result<(Var, Var)> {
    let fwd = forward(tape, params, cfg, batch)?;
    let l = backend::label_smoothed_ce(tape, fwd.logits, &batch.labels, cfg.backend.smoothing)?;
    Ok((l, fwd.logits))
}

/// Logits as a plain tensor, no gradients kept.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, batch: &ClipBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut params = Bound::new(store);
    let fwd = forward(&mut tape, &mut params, cfg, batch)?;
    Ok(tape.value(fwd.logits).clone())
}

/// Time-averaged `[N, C]` dynamic node features of one clip, the input SAG
/// is built from. `frames` is `[T, H, W]`, `track` is `[T, N, 2]`.
pub fn clip_node_features(store: &ParamStore, frames: &Tensor, track: &Tensor, frame_size: usize) -> Result<Tensor> {
    let sh = frames.shape();
    if sh.len() != 3 {
        return Err(Error::Shape(format!("clip frames must be [T, H, W], got {sh:?}")));
    }
    let batch = frames.clone().reshape(&[1, 1, sh[0], sh[1], sh[2]])?;
    let mut tape = Tape::new();
    let mut params = Bound::new(store);
    let x = tape.constant(frontend::normalize_clips(&batch)?);
    let dyn_feats = frontend::extract_dynamic(&mut tape, &mut params, x)?;
    let sampled = graphs::sample_node_features(tape.value(dyn_feats), track, frame_size)?;
    let s = sampled.shape().to_vec();
    graphs::time_average(&sampled.reshape(&s[1..])?)
}
