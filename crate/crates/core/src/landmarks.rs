//! Lip-contour landmark tracks and the fixed 20-point topology.
//!
//! Node order follows the common 68-point face convention restricted to the
//! mouth (points 48..=67), re-indexed from zero:
//!
//! ```text
//! outer ring  0..=11   0 = left corner, 1..=5 upper lip, 6 = right corner,
//!                      7..=11 lower lip (right to left)
//! inner ring 12..=19  12 = left inner corner, 13..=15 upper, 16 = right
//!                      inner corner, 17..=19 lower (right to left)
//! ```
//!
//! Coordinates are pixels of the cropped frame, `x` to the right and `y`
//! down.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 20;
pub const OUTER_RING: usize = 12;
pub const INNER_RING: usize = 8;

/// How the 20 landmarks are wired along the lip contour.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LipTopology {
    pub outer_ring: Vec<usize>,
    pub inner_ring: Vec<usize>,
    pub corner_pairs: Vec<(usize, usize)>,
}

impl Default for LipTopology {
    fn default() -> Self {
        Self {
            outer_ring: (0..OUTER_RING).collect(),
            inner_ring: (OUTER_RING..NUM_LANDMARKS).collect(),
            corner_pairs: vec![(0, 12), (6, 16)],
        }
    }
}

impl LipTopology {
    pub fn num_nodes(&self) -> usize {
        self.outer_ring.len() + self.inner_ring.len()
    }

    /// Rings must be disjoint, cover `0..n`, and each be a closed cycle of at
    /// least three nodes; corner links must join the two rings.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        for &i in self.outer_ring.iter().chain(&self.inner_ring) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Construction(format!(
                    "ring index {i} repeated or out of range for {n} nodes"
                )));
            }
        }
        for (name, ring) in [("outer", &self.outer_ring), ("inner", &self.inner_ring)] {
            if ring.len() < 3 {
                return Err(Error::Construction(format!(
                    "{name} ring has {} nodes and cannot close a cycle",
                    ring.len()
                )));
            }
        }
        for &(a, b) in &self.corner_pairs {
            if !(self.outer_ring.contains(&a) && self.inner_ring.contains(&b)) {
                return Err(Error::Construction(format!("corner link ({a}, {b}) does not join outer to inner ring")));
            }
        }
        Ok(())
    }

    /// Undirected edges: consecutive ring members (closing back to the
    /// first) plus corner links. No self-loops.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for ring in [&self.outer_ring, &self.inner_ring] {
            for k in 0..ring.len() {
                e.push((ring[k], ring[(k + 1) % ring.len()]));
            }
        }
        e.extend(self.corner_pairs.iter().copied());
        e
    }

    /// Node permutation induced by a horizontal mirror: node `i` maps onto
    /// the node that sits at its mirrored position.
    pub fn mirror_permutation(&self) -> Vec<usize> {
        let mut p = vec![0; self.num_nodes()];
        for (ring, anchor) in [(&self.outer_ring, self.outer_ring.len() / 2), (&self.inner_ring, self.inner_ring.len() / 2)] {
            // position k reflects to (anchor - k) mod len; the corners at
            // 0 and len/2 map onto each other
            let len = ring.len();
            for k in 0..len {
                let m = (anchor + len - k) % len;
                p[ring[k]] = ring[m];
            }
        }
        p
    }
}

/// One clip's lip-contour track with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSequence {
    /// `[T, 20, 2]` pixel coordinates.
    pub coords: Tensor,
    pub clip_id: String,
    pub speaker_id: String,
    pub label: usize,
    pub frame_size: usize,
}

impl LandmarkSequence {
    pub fn new(coords: Tensor, clip_id: &str, speaker_id: &str, label: usize, frame_size: usize) -> Result<Self> {
        let s = Self {
            coords,
            clip_id: clip_id.to_string(),
            speaker_id: speaker_id.to_string(),
            label,
            frame_size,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let sh = self.coords.shape();
        if sh.len() != 3 || sh[1] != NUM_LANDMARKS || sh[2] != 2 {
            return Err(Error::Data(format!(
                "clip {}: landmark track must be [T, {NUM_LANDMARKS}, 2], got {sh:?}",
                self.clip_id
            )));
        }
        if sh[0] < 3 {
            return Err(Error::Data(format!("clip {}: need at least 3 frames, got {}", self.clip_id, sh[0])));
        }
        let fs = self.frame_size as f64;
        if let Some(v) = self.coords.data().iter().find(|v| !(v.is_finite() && **v >= 0.0 && **v < fs)) {
            return Err(Error::Data(format!(
                "clip {}: coordinate {v} outside crop [0, {fs})",
                self.clip_id
            )));
        }
        Ok(())
    }

    pub fn point(&self, t: usize, node: usize) -> (f64, f64) {
        (self.coords.at(&[t, node, 0]), self.coords.at(&[t, node, 1]))
    }

    pub fn to_record(&self) -> LandmarkRecord {
        let t = self.frames();
        let coords = (0..t)
            .map(|ti| (0..NUM_LANDMARKS).map(|n| { let (x, y) = self.point(ti, n); [x, y] }).collect())
            .collect();
        LandmarkRecord {
            clip_id: self.clip_id.clone(),
            speaker_id: self.speaker_id.clone(),
            label: self.label,
            frame_size: self.frame_size,
            coords,
        }
    }
}

/// One line of the landmark interchange file (JSON lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub clip_id: String,
    pub speaker_id: String,
    pub label: usize,
    pub frame_size: usize,
    /// `T x 20 x [x, y]`
    pub coords: Vec<Vec<[f64; 2]>>,
}

impl LandmarkRecord {
    pub fn into_sequence(self) -> Result<LandmarkSequence> {
        let t = self.coords.len();
        if let Some((i, f)) = self.coords.iter().enumerate().find(|(_, f)| f.len() != NUM_LANDMARKS) {
            return Err(Error::Data(format!(
                "clip {}: frame {i} has {} landmarks, expected {NUM_LANDMARKS}",
                self.clip_id,
                f.len()
            )));
        }
        let data: Vec<f64> = self.coords.iter().flatten().flat_map(|p| p.iter().copied()).collect();
        let coords = Tensor::new(&[t, NUM_LANDMARKS, 2], data)?;
        LandmarkSequence::new(coords, &self.clip_id, &self.speaker_id, self.label, self.frame_size)
    }
}

/// Writes one JSON record per line.
pub fn write_jsonl<W: Write>(mut w: W, seqs: &[LandmarkSequence]) -> std::io::Result<()> {
    for s in seqs {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a JSON-lines landmark file. Blank lines are skipped; errors carry
/// the 1-based line number.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LandmarkSequence>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LandmarkRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(rec.into_sequence().map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_topology_is_valid() {
        LipTopology::default().validate().unwrap();
    }

    #[test]
    fn open_or_overlapping_rings_are_rejected() {
        let mut t = LipTopology::default();
        t.inner_ring = vec![12, 13];
        t.outer_ring.extend(14..20);
        assert!(t.validate().is_err());
        let mut t = LipTopology::default();
        t.inner_ring[0] = 0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn mirror_swaps_corners_and_is_involution() {
        let t = LipTopology::default();
        let p = t.mirror_permutation();
        assert_eq!(p[0], 6);
        assert_eq!(p[6], 0);
        assert_eq!(p[3], 3);
        assert_eq!(p[9], 9);
        assert_eq!(p[12], 16);
        assert_eq!(p[14], 14);
        assert_eq!(p[18], 18);
        assert_eq!(p[13], 15);
        for i in 0..20 {
            assert_eq!(p[p[i]], i);
        }
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let text = "\n{\"clip_id\":\"a\"}\n";
        let err = read_jsonl(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn out_of_crop_coordinates_rejected() {
        let coords = Tensor::full(&[3, 20, 2], 16.0);
        assert!(LandmarkSequence::new(coords, "c", "s", 0, 16).is_err());
        let coords = Tensor::full(&[2, 20, 2], 1.0);
        assert!(LandmarkSequence::new(coords, "c", "s", 0, 16).is_err());
    }
}
