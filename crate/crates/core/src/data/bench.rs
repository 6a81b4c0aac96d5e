//! Benchmark sets with morphologically roughened masks, and their on-disk forms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{derive_seed, morphology, synth_sample, Image, InpaintSample, Mask};
use crate::kernels::Exec;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Replaces the hole of a synthetic sample with the roughened object mask.
pub fn bench_sample(seed: u64) -> InpaintSample {
    let mut s = synth_sample(seed);
    s.hole_mask = morphology::make_bench_mask(&s.object_mask).expect("binary by construction");
    s
}

pub fn build_benchset(n: usize, seed: u64) -> Result<Vec<InpaintSample>> {
    build_benchset_with(n, seed, Exec::default())
}

pub fn build_benchset_with(n: usize, seed: u64, exec: Exec) -> Result<Vec<InpaintSample>> {
    if n == 0 {
        return Err(Error::InvalidCount("benchmark set needs at least one sample".into()));
    }
    let make = |i: usize| bench_sample(derive_seed(seed, i as u64));
    Ok(match exec {
        Exec::Sequential => (0..n).map(make).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(make).collect()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u32>,
}

impl From<&Mask> for MaskRle {
    fn from(m: &Mask) -> Self {
        Self { height: m.height(), width: m.width(), runs: m.to_rle() }
    }
}

impl MaskRle {
    pub fn to_mask(&self) -> Result<Mask> {
        Mask::from_rle(self.height, self.width, &self.runs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub index: usize,
    pub seed: u64,
    pub label: u32,
    pub mask: MaskRle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub version: u32,
    pub base_seed: u64,
    pub entries: Vec<BenchEntry>,
}

impl BenchManifest {
    pub fn from_samples(base_seed: u64, samples: &[InpaintSample]) -> Self {
        let entries = samples
            .iter()
            .enumerate()
            .map(|(index, s)| BenchEntry { index, seed: s.seed, label: s.label, mask: (&s.hole_mask).into() })
            .collect();
        Self { version: MANIFEST_VERSION, base_seed, entries }
    }

    /// Regenerates every sample from its seed and checks it against the recorded label and mask.
    pub fn load_samples(&self) -> Result<Vec<InpaintSample>> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", self.version)));
        }
        self.entries
            .iter()
            .map(|e| {
                let s = bench_sample(e.seed);
                if s.label != e.label || s.hole_mask != e.mask.to_mask()? {
                    return Err(Error::Config(format!("manifest entry {} does not match its seed", e.index)));
                }
                Ok(s)
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSidecar {
    /// `[channels, height, width]` of the raw float32 payload.
    pub shape: [usize; 3],
    pub label: u32,
    pub seed: u64,
    pub mask: MaskRle,
}

/// Writes `<stem>.f32` (little-endian CHW float32) and `<stem>.json`.
pub fn write_record(dir: &Path, stem: &str, sample: &InpaintSample) -> Result<()> {
    let (c, h, w) = sample.x0.shape();
    let bytes: Vec<u8> = sample.x0.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    crate::io::write_atomic(&dir.join(format!("{stem}.f32")), &bytes)?;
    let sidecar = RecordSidecar { shape: [c, h, w], label: sample.label, seed: sample.seed, mask: (&sample.hole_mask).into() };
    crate::io::write_atomic(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&sidecar)?)
}

pub fn read_record(dir: &Path, stem: &str) -> Result<InpaintSample> {
    let sidecar: RecordSidecar = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{stem}.f32")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Config(format!("{stem}.f32: truncated payload")));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let [c, h, w] = sidecar.shape;
    let x0 = Image::from_vec(c, h, w, data)?;
    let synth = synth_sample(sidecar.seed);
    Ok(InpaintSample {
        x0,
        hole_mask: sidecar.mask.to_mask()?,
        object_mask: synth.object_mask,
        label: sidecar.label,
        seed: sidecar.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_non_empty() {
        let a = build_benchset(40, 9).unwrap();
        let b = build_benchset_with(40, 9, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.hole_mask.count() > 0));
        assert_eq!(build_benchset(1, 3).unwrap(), build_benchset(1, 3).unwrap());
        assert!(build_benchset(0, 3).is_err());
    }

    #[test]
    fn manifest_regenerates_samples() {
        let set = build_benchset(5, 2).unwrap();
        let m = BenchManifest::from_samples(2, &set);
        let json = serde_json::to_string(&m).unwrap();
        let back: BenchManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.load_samples().unwrap(), set);
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = bench_sample(77);
        write_record(dir.path(), "s0", &s).unwrap();
        assert_eq!(read_record(dir.path(), "s0").unwrap(), s);
    }
}
