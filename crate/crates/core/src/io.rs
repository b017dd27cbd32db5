//! On-disk formats: frame tensors, dataset directories, atomic writes.
//!
//! A dataset directory holds `manifest.json`, `landmarks.jsonl` (one record
//! per clip) and `frames/<clip_id>.bin`. Frame files are
//! `b"LGFRAME1"`, a little-endian `u32` rank, `u64` extents, then
//! little-endian `f64` values in row-major order.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{self, LandmarkSequence};
use crate::synth::{Dataset, SpeakerProfile, Split, SynthConfig, SyntheticClip, WordClassSpec};
use crate::tensor::Tensor;

pub const FRAME_MAGIC: &[u8; 8] = b"LGFRAME1";
pub const DATASET_FORMAT: &str = "lipgraph-dataset/1";

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.ndim() + 8 * t.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let bad = |what: &str| Error::Data(format!("{origin}: {what}"));
    if bytes.len() < 12 || &bytes[..8] != FRAME_MAGIC {
        return Err(bad("not a frame tensor file (bad magic)"));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let head = 12 + 8 * ndim;
    if bytes.len() < head {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != head + 8 * n {
        return Err(bad(&format!("expected {} data bytes for shape {shape:?}, found {}", 8 * n, bytes.len() - head)));
    }
    let data = bytes[head..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub clip_id: String,
    pub speaker_id: String,
    pub label: usize,
    pub split: Split,
    pub seed: u64,
    pub frames: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub train_speakers: Vec<String>,
    pub test_speakers: Vec<String>,
    pub speakers: Vec<SpeakerProfile>,
    pub classes: Vec<WordClassSpec>,
    pub clips: Vec<ManifestClip>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.clips.iter().filter(|c| c.split == split).count()
    }
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Refuses to reuse a non-empty directory unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir) && !force {
        return Err(Error::Usage(format!(
            "output directory {} exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn frames_rel(clip_id: &str) -> String {
    format!("frames/{clip_id}.bin")
}

pub fn manifest_of(ds: &Dataset) -> Manifest {
    let clips = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .flat_map(|split| {
            ds.split(split).iter().map(move |c| ManifestClip {
                clip_id: c.clip_id().to_string(),
                speaker_id: c.speaker_id().to_string(),
                label: c.label(),
                split,
                seed: c.seed,
                frames: frames_rel(c.clip_id()),
            })
        })
        .collect();
    Manifest {
        format: DATASET_FORMAT.to_string(),
        seed: ds.seed,
        config: ds.config.clone(),
        train_speakers: ds.train_speakers.clone(),
        test_speakers: ds.test_speakers.clone(),
        speakers: ds.speakers.clone(),
        classes: ds.classes.clone(),
        clips,
    }
}

/// Writes a dataset directory.
pub fn save_dataset(dir: &Path, ds: &Dataset, force: bool) -> Result<Manifest> {
    prepare_out_dir(dir, force)?;
    let manifest = manifest_of(ds);
    let all: Vec<&SyntheticClip> = ds.train.iter().chain(&ds.val).chain(&ds.test).collect();
    for c in &all {
        write_atomic(&dir.join(frames_rel(c.clip_id())), &encode_tensor(&c.frames))?;
    }
    let seqs: Vec<LandmarkSequence> = all.iter().map(|c| c.landmarks.clone()).collect();
    let mut buf = Vec::new();
    landmarks::write_jsonl(&mut buf, &seqs).map_err(|e| Error::io(dir.join("landmarks.jsonl"), e))?;
    write_atomic(&dir.join("landmarks.jsonl"), &buf)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = serde_json::from_str(&read_to_string(&path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Data(format!("{}: unsupported format `{}`", path.display(), m.format)));
    }
    Ok(m)
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let lm_path = dir.join("landmarks.jsonl");
    let file = fs::File::open(&lm_path).map_err(|e| Error::io(&lm_path, e))?;
    let seqs = landmarks::read_jsonl(BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: {e}", lm_path.display())))?;
    let mut by_id: std::collections::HashMap<String, LandmarkSequence> =
        seqs.into_iter().map(|s| (s.clip_id.clone(), s)).collect();
    let mut ds = Dataset {
        config: manifest.config.clone(),
        seed: manifest.seed,
        speakers: manifest.speakers.clone(),
        classes: manifest.classes.clone(),
        train_speakers: manifest.train_speakers.clone(),
        test_speakers: manifest.test_speakers.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mc in &manifest.clips {
        let landmarks = by_id
            .remove(&mc.clip_id)
            .ok_or_else(|| Error::Data(format!("{}: no landmark record for clip {}", lm_path.display(), mc.clip_id)))?;
        let frames_path: PathBuf = dir.join(&mc.frames);
        let frames = read_tensor(&frames_path)?;
        let clip = SyntheticClip {
            frames,
            landmarks,
            seed: mc.seed,
        };
        match mc.split {
            Split::Train => ds.train.push(clip),
            Split::Val => ds.val.push(clip),
            Split::Test => ds.test.push(clip),
        }
    }
    Ok(ds)
}
