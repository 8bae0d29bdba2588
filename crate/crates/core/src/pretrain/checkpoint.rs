//! Checkpoint container: magic, version, JSON metadata, named f32 blobs,
//! trailing CRC-32 over everything before it.
//!
//! Layout: `b"MSRV"`, u32 LE version, u64 LE metadata length, metadata JSON,
//! the section blobs in directory order (little-endian f32, row major), and
//! a final u32 LE CRC-32 of all preceding bytes. All stored tensors are
//! f32-valued by the training-loop rounding discipline, so saving and
//! loading round-trips exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::pretrain::PretrainSetup;

pub const MAGIC: [u8; 4] = *b"MSRV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_mpe: f64,
    pub l_cpm: f64,
    pub l_total: f64,
}

/// Cluster assignments captured at the last refresh, kept so a resumed run
/// sees exactly the targets the interrupted run was using.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StoredAssignments {
    pub z_t: Vec<usize>,
    pub z_p: Vec<usize>,
    pub z_r: Vec<usize>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub setup: PretrainSetup,
    pub epochs_completed: usize,
    pub adam_step: u64,
    pub loss_history: Vec<EpochLoss>,
    #[serde(default)]
    pub assignments: Option<StoredAssignments>,
    /// Free-form slot for downstream stages (e.g. survival-head settings).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct SectionEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct DiskMeta {
    meta: CheckpointMeta,
    sections: Vec<SectionEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&Array2<f64>> {
        self.sections
            .get(name)
            .ok_or_else(|| CoreError::MissingSection(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let directory: Vec<SectionEntry> = self
            .sections
            .iter()
            .map(|(name, a)| SectionEntry {
                name: name.clone(),
                rows: a.nrows(),
                cols: a.ncols(),
            })
            .collect();
        let meta_json = serde_json::to_vec(&DiskMeta {
            meta: self.meta.clone(),
            sections: directory,
        })?;

        let blob_len: usize = self.sections.values().map(|a| a.len() * 4).sum();
        let mut out = Vec::with_capacity(4 + 4 + 8 + meta_json.len() + blob_len + 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        for a in self.sections.values() {
            for &x in a.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(CoreError::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(CoreError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CoreError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version > VERSION {
            return Err(CoreError::VersionMismatch {
                found: version,
                supported: VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta_end = 16usize.checked_add(meta_len).ok_or(CoreError::Truncated)?;
        if bytes.len() < meta_end + 4 {
            return Err(CoreError::Truncated);
        }
        let disk: DiskMeta = serde_json::from_slice(&bytes[16..meta_end])?;

        let mut at = meta_end;
        let mut sections = BTreeMap::new();
        for entry in &disk.sections {
            let n = entry.rows * entry.cols;
            let end = at.checked_add(n * 4).ok_or(CoreError::Truncated)?;
            if bytes.len() < end + 4 {
                return Err(CoreError::Truncated);
            }
            let mut values = Vec::with_capacity(n);
            for chunk in bytes[at..end].chunks_exact(4) {
                values.push(
                    f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64,
                );
            }
            let a = Array2::from_shape_vec((entry.rows, entry.cols), values)
                .expect("shape matches value count");
            sections.insert(entry.name.clone(), a);
            at = end;
        }
        if bytes.len() != at + 4 {
            return Err(CoreError::Truncated);
        }
        let stored = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..at]);
        if stored != computed {
            return Err(CoreError::ChecksumMismatch { stored, computed });
        }
        Ok(Self {
            meta: disk.meta,
            sections,
        })
    }

    /// Write atomically: stage to a sibling file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, &bytes).map_err(|e| CoreError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::pretrain::PretrainConfig;

    fn sample() -> Checkpoint {
        let mut sections = BTreeMap::new();
        sections.insert(
            "a.w".to_string(),
            Array2::from_shape_fn((2, 3), |(i, j)| ((i * 3 + j) as f32 * 0.25 - 1.0) as f64),
        );
        sections.insert(
            "b.w".to_string(),
            Array2::from_shape_fn((1, 4), |(_, j)| (j as f32 * 1.5) as f64),
        );
        Checkpoint {
            meta: CheckpointMeta {
                setup: PretrainSetup {
                    encoder: EncoderConfig::default(),
                    volume_shape: (4, 8, 8),
                    gene_count: 50,
                    prototype_count: 8,
                    tau1: 0.1,
                    tau2: 0.2,
                    pretrain: PretrainConfig::default(),
                },
                epochs_completed: 3,
                adam_step: 42,
                loss_history: vec![EpochLoss {
                    epoch: 0,
                    l_mpe: 1.25,
                    l_cpm: 2.0625,
                    l_total: 3.3125,
                }],
                assignments: Some(StoredAssignments {
                    z_t: vec![0, 1],
                    z_p: vec![1, 0],
                    z_r: vec![0, 0],
                    k: 2,
                }),
                extra: serde_json::Map::new(),
            },
            sections,
        }
    }

    #[test]
    fn round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        // and the serialized form is stable
        let again = dir.path().join("again.ckpt");
        back.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CoreError::BadMagic)
        ));
    }

    #[test]
    fn rejects_newer_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CoreError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_truncation_anywhere() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, 20, bytes.len() - 5, bytes.len() - 1] {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&bytes[..cut]),
                    Err(CoreError::Truncated) | Err(CoreError::Json(_))
                ),
                "cut at {cut} not detected"
            );
        }
    }

    #[test]
    fn rejects_flipped_payload_bit() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() - 8;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CoreError::ChecksumMismatch { .. }) | Err(CoreError::Json(_))
        ));
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CoreError::Truncated)
        ));
    }

    #[test]
    fn missing_section_lookup_errors() {
        let ck = sample();
        assert!(ck.section("a.w").is_ok());
        assert!(matches!(
            ck.section("c.w"),
            Err(CoreError::MissingSection(_))
        ));
    }
}
