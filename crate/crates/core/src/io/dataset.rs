use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 8] = b"DPOTDS1\0";
pub const DATASET_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 8 + 7 * 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported dataset version {0} (this build reads version {DATASET_VERSION})")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0} (only 1 = real32 is defined)")]
    UnsupportedDtype(u32),
    #[error("file truncated: need at least {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}; the file is corrupt")]
    Crc { stored: u32, computed: u32 },
    #[error("metadata is not valid JSON: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub pde: String,
    pub coefficients: BTreeMap<String, f64>,
    pub dt_save: f64,
    pub channel_names: Vec<String>,
    /// Per-channel mean over mask-interior entries.
    pub mean: Vec<f64>,
    /// Per-channel standard deviation over mask-interior entries.
    pub std: Vec<f64>,
    pub seed: u64,
}

/// `N` trajectories of `T` frames, stored `[n, t, h, w, c]` in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: Vec<f32>,
    /// `[n, h, w]`, 1 inside the physical domain.
    pub mask: Vec<u8>,
    pub meta: DatasetMeta,
}

impl TrajectoryDataset {
    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn trajectory_len(&self) -> usize {
        self.t * self.frame_len()
    }

    pub fn frame(&self, traj: usize, t: usize) -> &[f32] {
        let start = traj * self.trajectory_len() + t * self.frame_len();
        &self.values[start..start + self.frame_len()]
    }

    pub fn trajectory_mask(&self, traj: usize) -> &[u8] {
        let n = self.h * self.w;
        &self.mask[traj * n..(traj + 1) * n]
    }

    /// Keeps trajectories `range`, preserving metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TrajectoryDataset {
        let tl = self.trajectory_len();
        let ml = self.h * self.w;
        TrajectoryDataset {
            n: range.len(),
            values: self.values[range.start * tl..range.end * tl].to_vec(),
            mask: self.mask[range.start * ml..range.end * ml].to_vec(),
            meta: self.meta.clone(),
            ..*self
        }
    }

    /// Per-channel mean and standard deviation over mask-interior entries.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let mut sum = vec![0.0; self.c];
        let mut sq = vec![0.0; self.c];
        let mut count = 0usize;
        for n in 0..self.n {
            let mask = self.trajectory_mask(n);
            for t in 0..self.t {
                let frame = self.frame(n, t);
                for (p, &m) in mask.iter().enumerate() {
                    if m == 0 {
                        continue;
                    }
                    count += 1;
                    for c in 0..self.c {
                        let v = frame[p * self.c + c] as f64;
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
        }
        let count = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .collect();
        (mean, std)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let expected = self.n * self.trajectory_len();
        if self.values.len() != expected {
            return Err(DatasetError::Inconsistent(format!(
                "header implies {expected} values, payload has {}",
                self.values.len()
            )));
        }
        if self.mask.len() != self.n * self.h * self.w {
            return Err(DatasetError::Inconsistent(format!(
                "mask has {} bytes, expected {}",
                self.mask.len(),
                self.n * self.h * self.w
            )));
        }
        if self.meta.channel_names.len() != self.c {
            return Err(DatasetError::Inconsistent(format!(
                "{} channel names for {} channels",
                self.meta.channel_names.len(),
                self.c
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        self.validate()?;
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite(i));
        }
        let json = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len() + self.mask.len() + json.len() + 12);
        out.extend_from_slice(DATASET_MAGIC);
        for dim in [
            DATASET_VERSION,
            self.n as u32,
            self.t as u32,
            self.h as u32,
            self.w as u32,
            self.c as u32,
            DTYPE_F32,
        ] {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.mask);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let need = |expected: usize| {
            if bytes.len() < expected {
                Err(DatasetError::Truncated {
                    expected,
                    actual: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(8)?;
        if &bytes[..8] != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        need(HEADER_LEN)?;
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != DATASET_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let dtype = word(6);
        if dtype != DTYPE_F32 {
            return Err(DatasetError::UnsupportedDtype(dtype));
        }
        let [n, t, h, w, c] = [1, 2, 3, 4, 5].map(|i| word(i) as usize);
        let n_values = n * t * h * w * c;
        let mask_start = HEADER_LEN + 4 * n_values;
        let json_len_at = mask_start + n * h * w;
        need(json_len_at + 8)?;
        let json_len = u64::from_le_bytes(bytes[json_len_at..json_len_at + 8].try_into().unwrap()) as usize;
        let crc_at = json_len_at + 8 + json_len;
        need(crc_at + 4)?;
        if bytes.len() != crc_at + 4 {
            return Err(DatasetError::Inconsistent(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - crc_at - 4
            )));
        }
        let stored = u32::from_le_bytes(bytes[crc_at..crc_at + 4].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..crc_at]);
        if stored != computed {
            return Err(DatasetError::Crc { stored, computed });
        }
        let values = bytes[HEADER_LEN..mask_start]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let meta: DatasetMeta = serde_json::from_slice(&bytes[json_len_at + 8..crc_at])?;
        let ds = TrajectoryDataset {
            n,
            t,
            h,
            w,
            c,
            values,
            mask: bytes[mask_start..json_len_at].to_vec(),
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn write_dataset(dataset: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let bytes = dataset.to_bytes()?;
    super::atomic_write(path.as_ref(), &bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<TrajectoryDataset, DatasetError> {
    TrajectoryDataset::from_bytes(&std::fs::read(path)?)
}
