//! Checkpoint files: a JSON header followed by named DPA1 arrays.
//!
//! Layout: `DPCK`, u32 version, u64 header length, header JSON, u32 array
//! count, then per array a u32 name length, the UTF-8 name and one DPA1
//! record. The header carries a SHA-256 of the array section.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array_io::Array;
use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DPCK";
const VERSION: u32 = 1;

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub report: LossReport,
    pub grad_norm: f64,
    /// Stage-1' code accuracies on the batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: String,
    /// Completed iterations.
    pub iteration: usize,
    pub total_iterations: usize,
    /// Config section hashes, keyed by section name.
    pub hashes: BTreeMap<String, String>,
    pub history: Vec<HistoryEntry>,
    /// Free-form scalars such as final accuracies.
    pub extra: BTreeMap<String, f64>,
    #[serde(default)]
    pub payload_sha256: String,
}

/// Training state: parameters, optimizer moments and the metric history.
/// Batch sampling is keyed on the iteration counter, so the counter is the
/// whole RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(stage: &str, total_iterations: usize) -> Self {
        Self {
            header: CheckpointHeader {
                stage: stage.to_string(),
                iteration: 0,
                total_iterations,
                hashes: BTreeMap::new(),
                history: Vec::new(),
                extra: BTreeMap::new(),
                payload_sha256: String::new(),
            },
            arrays: BTreeMap::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.header.iteration >= self.header.total_iterations
    }

    /// Arrays whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Array> {
        self.arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_group(&mut self, prefix: &str, arrays: BTreeMap<String, Array>) {
        for (k, v) in arrays {
            self.arrays.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Fails with `ConfigHash` unless the recorded hash of `section` equals
    /// `expected`.
    pub fn require_hash(&self, section: &str, expected: &str) -> Result<()> {
        let found = self.header.hashes.get(section).cloned().unwrap_or_default();
        if found != expected {
            return Err(Error::ConfigHash { expected: format!("{section}:{expected}"), found: format!("{section}:{found}") });
        }
        Ok(())
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            a.write_to(&mut buf).expect("writing to a Vec cannot fail");
        }
        buf
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload();
        let mut header = self.header.clone();
        header.payload_sha256 = hex::encode(Sha256::digest(&payload));
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + head.len() + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail };
        let mut r = bytes;
        let mut fixed = [0u8; 16];
        r.read_exact(&mut fixed).map_err(|_| bad("truncated header".into()))?;
        if fixed[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(fixed[8..16].try_into().unwrap()) as usize;
        if r.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let (head, payload) = r.split_at(hlen);
        let mut header: CheckpointHeader = serde_json::from_slice(head).map_err(|e| bad(e.to_string()))?;
        let digest = hex::encode(Sha256::digest(payload));
        if digest != header.payload_sha256 {
            return Err(Error::Integrity { path: path.to_path_buf(), detail: "array checksum mismatch".into() });
        }
        header.payload_sha256.clear();
        let mut r = payload;
        let mut n = [0u8; 4];
        r.read_exact(&mut n).map_err(|_| bad("truncated arrays".into()))?;
        let mut arrays = BTreeMap::new();
        for _ in 0..u32::from_le_bytes(n) {
            r.read_exact(&mut n).map_err(|_| bad("truncated arrays".into()))?;
            let mut name = vec![0u8; u32::from_le_bytes(n) as usize];
            r.read_exact(&mut name).map_err(|_| bad("truncated arrays".into()))?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let a = Array::read_from(&mut r).map_err(|e| bad(format!("{name}: {e}")))?;
            arrays.insert(name, a);
        }
        Ok(Self { header, arrays })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}
