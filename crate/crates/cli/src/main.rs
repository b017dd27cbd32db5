//! `lipgraph`: data generation, graph inspection, training, evaluation,
//! ablation, robustness sweeps and gradient checks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use lipgraph::checkpoint::Checkpoint;
use lipgraph::config::ExperimentConfig;
use lipgraph::graphs::{self, AdjacencyMatrix, DAG_EPSILON};
use lipgraph::landmarks::{self, LandmarkSequence, LipTopology};
use lipgraph::model::{self, ParamCounts};
use lipgraph::synth::{self, Dataset, Split};
use lipgraph::train::{self, Perturbation};
use lipgraph::{gradsuite, io, Error};

/// Name of the resolved configuration written next to every output.
const SNAPSHOT: &str = "config.json";

#[derive(Parser)]
#[command(name = "lipgraph", version, about = "Landmark-guided graph features for word-level lipreading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed override (the data seed for gen-data, the run seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbKind {
    None,
    Visual,
    Landmark,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(Common),
    /// Dump the three adjacency matrices of one landmark record.
    BuildGraphs {
        #[command(flatten)]
        common: Common,
        /// Landmark JSON-lines file.
        #[arg(long)]
        landmarks: PathBuf,
        /// Clip to use; defaults to the first record.
        #[arg(long)]
        clip: Option<String>,
        /// Frame tensor file for SAG features; defaults to
        /// `frames/<clip>.bin` next to the landmark file.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Checkpoint whose frontend produces the SAG features; a fresh
        /// initialization from the run seed otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "none")]
        perturb: PerturbKind,
    },
    /// Train and score the four graph variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint under the four perturbation conditions.
    Robust {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at the run seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

/// Process exit code of a library error.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Usage(_)) => 2,
        Some(Error::Data(_) | Error::Io { .. } | Error::Load(_) | Error::Json(_)) => 3,
        Some(Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::BuildGraphs {
            common,
            landmarks,
            clip,
            frames,
            checkpoint,
        } => build_graphs(&common, &landmarks, clip.as_deref(), frames.as_deref(), checkpoint.as_deref()),
        Command::Train { common, data } => train_cmd(&common, &data),
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            perturb,
        } => eval_cmd(&common, &data, &checkpoint, &split, perturb),
        Command::Ablate { common, data } => ablate(&common, &data),
        Command::Robust {
            common,
            data,
            checkpoint,
            split,
        } => robust(&common, &data, &checkpoint, &split),
        Command::Gradcheck { common, seeds } => gradcheck(&common, seeds),
    }
}

/// Config file, then `--set` overrides, validated.
fn resolve(c: &Common) -> lipgraph::Result<ExperimentConfig> {
    resolve_near(c, None)
}

/// Like [`resolve`], but without `--config` the snapshot stored beside
/// `artifact` is used when there is one.
fn resolve_near(c: &Common, artifact: Option<&Path>) -> lipgraph::Result<ExperimentConfig> {
    let beside = artifact
        .and_then(Path::parent)
        .map(|d| d.join(SNAPSHOT))
        .filter(|p| p.is_file());
    let base = match c.config.as_ref().or(beside.as_ref()) {
        Some(p) => ExperimentConfig::from_json(&io::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&c.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn with_run_seed(c: &Common) -> lipgraph::Result<ExperimentConfig> {
    with_run_seed_near(c, None)
}

fn with_run_seed_near(c: &Common, artifact: Option<&Path>) -> lipgraph::Result<ExperimentConfig> {
    let mut cfg = resolve_near(c, artifact)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn snapshot(dir: &Path, cfg: &ExperimentConfig) -> lipgraph::Result<()> {
    io::write_atomic(&dir.join(SNAPSHOT), cfg.to_json().as_bytes())
}

/// Loads a dataset and makes `cfg` describe it.
fn load_data(cfg: &mut ExperimentConfig, dir: &Path) -> lipgraph::Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Data(format!("no dataset at {} (manifest.json not found)", dir.display())));
    }
    let ds = io::load_dataset(dir)?;
    cfg.data = ds.config.clone();
    cfg.data_seed = ds.seed;
    cfg.validate()?;
    Ok(ds)
}

fn parse_split(s: &str) -> lipgraph::Result<Split> {
    s.parse()
}

/// File-not-found error naming the resolved path, raised before any other
/// work.
fn require_file(path: &Path) -> lipgraph::Result<()> {
    if path.is_file() {
        return Ok(());
    }
    Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
}

/// Loads a checkpoint and fails unless it matches the configured model.
fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> lipgraph::Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let expected = cfg.model.init_params(cfg.seed)?;
    ck.check_architecture(&expected, &cfg.architecture_hash())?;
    Ok(ck)
}

fn gen_data(c: &Common) -> anyhow::Result<()> {
    let mut cfg = resolve(c)?;
    if let Some(s) = c.seed {
        cfg.data_seed = s;
    }
    let ds = synth::generate_dataset(&cfg.data, cfg.data_seed)?;
    let m = io::save_dataset(&c.out, &ds, c.force)?;
    snapshot(&c.out, &cfg)?;
    println!(
        "wrote {} clips ({} train, {} val, {} test) to {}",
        m.clips.len(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test),
        c.out.display()
    );
    Ok(())
}

/// Matrix as whitespace-separated rows.
fn matrix_text(m: &lipgraph::Tensor) -> String {
    let n = m.shape()[1];
    let mut s = String::new();
    for row in m.data().chunks(n) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn graph_summary(adj: &AdjacencyMatrix) -> serde_json::Value {
    let degrees = adj.degrees();
    let mut hist = std::collections::BTreeMap::new();
    for d in &degrees {
        *hist.entry(d.to_string()).or_insert(0usize) += 1;
    }
    serde_json::json!({
        "row_sums": adj.row_sums(),
        "degrees": degrees,
        "degree_histogram": hist,
    })
}

fn max_asymmetry(m: &lipgraph::Tensor) -> f64 {
    let n = m.shape()[0];
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m.at(&[i, j]) - m.at(&[j, i])).abs());
        }
    }
    worst
}

fn build_graphs(
    c: &Common,
    lm_path: &Path,
    clip: Option<&str>,
    frames: Option<&Path>,
    checkpoint: Option<&Path>,
) -> anyhow::Result<()> {
    require_file(lm_path)?;
    if let Some(p) = checkpoint {
        require_file(p)?;
    }
    let cfg = with_run_seed_near(c, checkpoint)?;
    let file = fs::File::open(lm_path).map_err(|e| Error::io(lm_path, e))?;
    let seqs = landmarks::read_jsonl(std::io::BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: {e}", lm_path.display())))?;
    let seq: &LandmarkSequence = match clip {
        Some(id) => seqs
            .iter()
            .find(|s| s.clip_id == id)
            .ok_or_else(|| Error::Data(format!("{}: no record for clip {id}", lm_path.display())))?,
        None => seqs
            .first()
            .ok_or_else(|| Error::Data(format!("{}: no landmark records", lm_path.display())))?,
    };
    let frames_path = match frames {
        Some(p) => p.to_path_buf(),
        None => lm_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("frames/{}.bin", seq.clip_id)),
    };
    let frame_tensor = io::read_tensor(&frames_path)?;
    let store = match checkpoint {
        Some(p) => load_checkpoint(p, &cfg)?.params,
        None => cfg.model.init_params(cfg.seed)?,
    };
    let feats = model::clip_node_features(&store, &frame_tensor, &seq.coords, seq.frame_size)?;

    io::prepare_out_dir(&c.out, c.force)?;
    let lcg = graphs::build_lcg(&LipTopology::default())?;
    let dag = graphs::build_dag(&seq.coords, DAG_EPSILON)?;
    let sag = graphs::build_sag(&feats)?;
    let sim = graphs::sag_similarity(&feats)?;
    for adj in [&lcg, &dag, &sag] {
        io::write_atomic(
            &c.out.join(format!("{}.txt", adj.kind.name())),
            matrix_text(&adj.weights).as_bytes(),
        )?;
    }
    let summary = serde_json::json!({
        "clip_id": seq.clip_id,
        "speaker_id": seq.speaker_id,
        "frames": seq.frames(),
        "sag_features": frames_path.display().to_string(),
        "sag_similarity_max_asymmetry": max_asymmetry(&sim),
        "lcg": graph_summary(&lcg),
        "dag": graph_summary(&dag),
        "sag": graph_summary(&sag),
    });
    io::write_json(&c.out.join("summary.json"), &summary)?;
    snapshot(&c.out, &cfg)?;
    let mut report = String::new();
    for adj in [&lcg, &dag, &sag] {
        let sums = adj.row_sums();
        let worst = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        let deg = adj.degrees();
        let _ = writeln!(
            report,
            "{}: degrees {}..{}, max |row sum - 1| = {worst:.2e}",
            adj.kind.name(),
            deg.iter().min().unwrap_or(&0),
            deg.iter().max().unwrap_or(&0)
        );
    }
    print!("{report}");
    Ok(())
}

fn train_cmd(c: &Common, data: &Path) -> anyhow::Result<()> {
    let mut cfg = with_run_seed(c)?;
    let ds = load_data(&mut cfg, data)?;
    io::prepare_out_dir(&c.out, c.force)?;
    snapshot(&c.out, &cfg)?;
    let clips = train::training_set(&cfg, &ds);
    let out = train::train(&cfg, &clips, &ds.val)?;
    for h in &out.history {
        let val = match (h.val_loss, h.val_acc) {
            (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
            _ => String::new(),
        };
        println!("epoch {:>3} loss {:.4} acc {:.4}{val}", h.epoch, h.train_loss, h.train_acc);
    }
    let ck = Checkpoint {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        architecture_hash: cfg.architecture_hash(),
        params: out.params,
        optimizer: out.optimizer,
    };
    ck.save(&c.out.join("checkpoint.bin"))?;
    io::write_json(&c.out.join("history.json"), &out.history)?;
    io::write_json(&c.out.join("params.json"), &ParamCounts::of(&ck.params))?;
    Ok(())
}

fn perturbation(cfg: &ExperimentConfig, kind: PerturbKind) -> Option<Perturbation> {
    let (v, l) = (cfg.robust.visual_sigma, cfg.robust.landmark_sigma);
    let (visual_sigma, landmark_sigma) = match kind {
        PerturbKind::None => return None,
        PerturbKind::Visual => (v, 0.0),
        PerturbKind::Landmark => (0.0, l),
        PerturbKind::Both => (v, l),
    };
    Some(Perturbation {
        visual_sigma,
        landmark_sigma,
        seed: synth::derive_seed(cfg.seed, &["robust"]),
    })
}

fn eval_cmd(c: &Common, data: &Path, ck_path: &Path, split: &str, kind: PerturbKind) -> anyhow::Result<()> {
    require_file(ck_path)?;
    let mut cfg = with_run_seed_near(c, Some(ck_path))?;
    let split = parse_split(split)?;
    let ds = load_data(&mut cfg, data)?;
    let ck = load_checkpoint(ck_path, &cfg)?;
    let p = perturbation(&cfg, kind);
    let (records, report) = train::eval_report(&ck.params, &cfg, ds.split(split), p.as_ref())?;
    io::prepare_out_dir(&c.out, c.force)?;
    snapshot(&c.out, &cfg)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).context("serializing a record")?);
        lines.push('\n');
    }
    io::write_atomic(&c.out.join("records.jsonl"), lines.as_bytes())?;
    io::write_json(&c.out.join("report.json"), &report)?;
    println!("acc {:.4} macc {:.4} over {} clips", report.acc, report.macc, report.total());
    Ok(())
}

fn ablate(c: &Common, data: &Path) -> anyhow::Result<()> {
    let mut cfg = with_run_seed(c)?;
    let ds = load_data(&mut cfg, data)?;
    io::prepare_out_dir(&c.out, c.force)?;
    snapshot(&c.out, &cfg)?;
    let table = train::run_ablation(&cfg, &ds)?;
    io::write_json(&c.out.join("ablation.json"), &table)?;
    let mut text = format!("{:<14} {:>8} {:>8} {:>9} {:>8}\n", "variant", "acc", "macc", "train", "params");
    for r in &table.rows {
        let _ = writeln!(
            text,
            "{:<14} {:>8.4} {:>8.4} {:>9.4} {:>8}",
            r.label, r.acc, r.macc, r.train_acc, r.param_count
        );
    }
    io::write_atomic(&c.out.join("ablation.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn robust(c: &Common, data: &Path, ck_path: &Path, split: &str) -> anyhow::Result<()> {
    require_file(ck_path)?;
    let mut cfg = with_run_seed_near(c, Some(ck_path))?;
    let split = parse_split(split)?;
    let ds = load_data(&mut cfg, data)?;
    let ck = load_checkpoint(ck_path, &cfg)?;
    let report = train::robustness(&ck.params, &cfg, ds.split(split))?;
    io::prepare_out_dir(&c.out, c.force)?;
    snapshot(&c.out, &cfg)?;
    io::write_json(&c.out.join("robust.json"), &report)?;
    for r in &report.rows {
        println!(
            "{:<24} acc {:.4} macc {:.4} drop {:+.4}",
            r.condition, r.acc, r.macc, r.acc_drop
        );
    }
    Ok(())
}

fn gradcheck(c: &Common, count: u64) -> anyhow::Result<()> {
    let cfg = with_run_seed(c)?;
    if count == 0 {
        return Err(Error::Usage("--seeds must be positive".into()).into());
    }
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + count).collect();
    let report = gradsuite::run(&seeds)?;
    io::prepare_out_dir(&c.out, c.force)?;
    snapshot(&c.out, &cfg)?;
    io::write_json(&c.out.join("gradcheck.json"), &report)?;
    println!(
        "{} checks over {} seeds, worst relative error {:.3e} (tolerance {:.0e})",
        report.results.len(),
        seeds.len(),
        report.worst(),
        report.tolerance
    );
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    for f in &failures {
        eprintln!("FAIL {} seed {}: {:.3e}", f.case, f.seed, f.max_rel_error);
    }
    Err(Error::Numeric(format!("{} gradient checks failed", failures.len())).into())
}
