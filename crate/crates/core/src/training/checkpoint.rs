//! Binary checkpoint: magic, little-endian u32 header length, JSON header,
//! then every parameter group as raw little-endian f32 in canonical order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::dataset::{Dataset, IdRegistry};
use crate::diagnet::{Architecture, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"SRNCD1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: Architecture,
    pub student_ids_sha256: String,
    pub exercise_ids_sha256: String,
    pub concept_ids_sha256: String,
    pub student_ids: Vec<String>,
    pub concept_ids: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub train_config: TrainConfig,
    /// Free-form run settings supplied by the caller.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

/// SHA-256 of the ids joined by newlines, hex encoded.
pub fn ids_digest<'a>(ids: impl IntoIterator<Item = &'a String>) -> String {
    let mut h = Sha256::new();
    for (i, id) in ids.into_iter().enumerate() {
        if i > 0 {
            h.update(b"\n");
        }
        h.update(id.as_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        ids: &IdRegistry,
        cfg: &TrainConfig,
        run: serde_json::Value,
    ) -> Self {
        let tensors = params
            .named_groups()
            .into_iter()
            .map(|(name, p)| TensorEntry {
                name,
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            arch: params.arch.clone(),
            student_ids_sha256: ids_digest(&ids.students),
            exercise_ids_sha256: ids_digest(&ids.exercises),
            concept_ids_sha256: ids_digest(&ids.concepts),
            student_ids: ids.students.iter().cloned().collect(),
            concept_ids: ids.concepts.iter().cloned().collect(),
            tensors,
            train_config: cfg.clone(),
            run,
        };
        Self { header, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Checkpoint("header too large".into()))?;
        let payload: usize = self
            .params
            .named_groups()
            .iter()
            .map(|(_, p)| p.value.len())
            .sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in self.params.named_groups() {
            for &x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not an SRNCD1 checkpoint".into()));
        }
        let mut pos = MAGIC.len();
        let header_len =
            u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        pos += 4;
        let header_bytes = bytes
            .get(pos..pos + header_len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        pos += header_len;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }

        // Allocate the structure the architecture implies, then overwrite it.
        let mut params = ModelParams::init(&header.arch, 0)?;
        let expected: Vec<TensorEntry> = params
            .named_groups()
            .into_iter()
            .map(|(name, p)| TensorEntry {
                name,
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(Error::Shape(format!(
                "architecture implies {} tensors, checkpoint lists {}",
                expected.len(),
                header.tensors.len()
            )));
        }
        for (want, got) in expected.iter().zip(&header.tensors) {
            if want != got {
                return Err(Error::Shape(format!(
                    "tensor {} expected {}x{}, checkpoint has {} {}x{}",
                    want.name, want.rows, want.cols, got.name, got.rows, got.cols
                )));
            }
        }
        let needed: usize = expected.iter().map(|e| e.rows * e.cols * 4).sum();
        let payload = &bytes[pos..];
        if payload.len() != needed {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, expected {needed}",
                payload.len()
            )));
        }
        let mut chunks = payload.chunks_exact(4);
        for (entry, p) in expected.iter().zip(params.groups_mut()) {
            for x in p.value.data_mut() {
                *x = f32::from_le_bytes(
                    chunks
                        .next()
                        .expect("length checked")
                        .try_into()
                        .expect("4 bytes"),
                );
            }
            p.zero_grad();
            if !p.value.all_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} holds non-finite values",
                    entry.name
                )));
            }
            if p.min_constrained().is_some_and(|m| m < 0.0) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} violates its sign constraint",
                    entry.name
                )));
            }
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Reject a dataset whose shape or ids differ from the training data.
    pub fn check_dataset(&self, d: &Dataset) -> Result<()> {
        self.params
            .check_dims(d.n_students(), d.n_exercises(), d.n_concepts())?;
        for (what, ours, theirs) in [
            (
                "student",
                &self.header.student_ids_sha256,
                ids_digest(&d.ids.students),
            ),
            (
                "exercise",
                &self.header.exercise_ids_sha256,
                ids_digest(&d.ids.exercises),
            ),
            (
                "concept",
                &self.header.concept_ids_sha256,
                ids_digest(&d.ids.concepts),
            ),
        ] {
            if *ours != theirs {
                return Err(Error::Data(format!(
                    "{what} ids differ from those the model was trained on"
                )));
            }
        }
        Ok(())
    }
}
