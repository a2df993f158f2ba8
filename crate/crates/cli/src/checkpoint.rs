//! Binary checkpoints: `DMDCKPT1`, a little-endian u64 byte length, that many
//! bytes of UTF-8 JSON metadata, then `param_count` little-endian f64 values.
//! Loading either yields the whole checkpoint or an error; trailing bytes are
//! rejected like truncation.

use std::io::{Read, Write};
use std::path::Path;

use dmd_core::autodiff::{Activation, Mlp};
use dmd_core::diffusion::{Denoiser, DenoiserSpec, Role};
use dmd_core::dmd::{GenScales, Generator};
use dmd_core::schedule::{PredictionType, ScheduleSpec};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"DMDCKPT1";
pub const VERSION: u32 = 1;

/// Upper bound on the metadata block, far above anything written here.
const MAX_META_BYTES: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointRole {
    Teacher,
    Fake,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub role: CheckpointRole,
    pub dim: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub classes: Option<usize>,
    /// Denoiser fields; absent for generators.
    pub schedule: Option<ScheduleSpec>,
    pub prediction: Option<PredictionType>,
    pub sigma_data: Option<f64>,
    /// Generator wrapping; absent for denoisers.
    pub scales: Option<GenScales>,
    /// Optimizer steps behind the parameters.
    pub step: usize,
    pub config_hash: u64,
    /// Hash of the target mixture the teacher lineage was trained on.
    pub target_hash: u64,
    /// Parameter hash of the teacher this artifact descends from (its own hash for a teacher).
    pub teacher_hash: u64,
    pub param_count: usize,
}

/// Provenance hashes stamped into every checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Lineage {
    pub config_hash: u64,
    pub target_hash: u64,
    pub teacher_hash: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after parameter payload")]
    Trailing(usize),
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_denoiser(
        d: &Denoiser,
        role: CheckpointRole,
        step: usize,
        lineage: Lineage,
    ) -> Self {
        let spec = d.spec();
        Self {
            meta: CheckpointMeta {
                version: VERSION,
                role,
                dim: spec.dim,
                widths: spec.widths(),
                activation: spec.activation,
                classes: spec.classes,
                schedule: Some(d.schedule().spec()),
                prediction: Some(spec.prediction),
                sigma_data: Some(spec.sigma_data),
                scales: None,
                step,
                config_hash: lineage.config_hash,
                target_hash: lineage.target_hash,
                teacher_hash: lineage.teacher_hash,
                param_count: d.net().num_params(),
            },
            params: d.net().params().to_vec(),
        }
    }

    pub fn from_generator(g: &Generator, step: usize, lineage: Lineage) -> Self {
        let net = g.net();
        Self {
            meta: CheckpointMeta {
                version: VERSION,
                role: CheckpointRole::Generator,
                dim: g.dim(),
                widths: net.widths().to_vec(),
                activation: net.activation(),
                classes: g.classes(),
                schedule: None,
                prediction: None,
                sigma_data: None,
                scales: Some(g.scales()),
                step,
                config_hash: lineage.config_hash,
                target_hash: lineage.target_hash,
                teacher_hash: lineage.teacher_hash,
                param_count: net.num_params(),
            },
            params: net.params().to_vec(),
        }
    }

    fn net(&self) -> Result<Mlp, CheckpointError> {
        Mlp::from_params(
            self.meta.widths.clone(),
            self.meta.activation,
            self.params.clone(),
        )
        .map_err(|e| CheckpointError::Metadata(e.to_string()))
    }

    /// Rebuilds a frozen denoiser.
    pub fn to_denoiser(&self) -> Result<Denoiser, CheckpointError> {
        let m = &self.meta;
        let (Some(schedule), Some(prediction), Some(sigma_data)) =
            (&m.schedule, m.prediction, m.sigma_data)
        else {
            return Err(CheckpointError::Metadata(format!(
                "{:?} checkpoint is not a denoiser",
                m.role
            )));
        };
        if m.widths.len() < 2 {
            return Err(CheckpointError::Metadata(
                "need at least two layer widths".into(),
            ));
        }
        let spec = DenoiserSpec {
            dim: m.dim,
            hidden: m.widths[1..m.widths.len() - 1].to_vec(),
            activation: m.activation,
            prediction,
            classes: m.classes,
            sigma_data,
        };
        let schedule = schedule
            .build()
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        Denoiser::from_parts(spec, schedule, Role::Base, self.net()?)
            .map_err(|e| CheckpointError::Metadata(e.to_string()))
    }

    pub fn to_generator(&self) -> Result<Generator, CheckpointError> {
        let Some(scales) = self.meta.scales else {
            return Err(CheckpointError::Metadata(format!(
                "{:?} checkpoint is not a generator",
                self.meta.role
            )));
        };
        Generator::from_parts(self.meta.dim, self.meta.classes, scales, self.net()?)
            .map_err(|e| CheckpointError::Metadata(e.to_string()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        w.write_all(MAGIC)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        let mut payload = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            payload.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&payload)?;
        w.flush()
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| CheckpointError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated("header")
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .ok_or(CheckpointError::Truncated("metadata length"))?
            .try_into()
            .expect("slice of 8");
        let meta_len = u64::from_le_bytes(len_bytes);
        if meta_len > MAX_META_BYTES {
            return Err(CheckpointError::Metadata(format!(
                "metadata length {meta_len} is implausible"
            )));
        }
        let meta_end = 16 + meta_len as usize;
        let meta_bytes = bytes
            .get(16..meta_end)
            .ok_or(CheckpointError::Truncated("metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        if meta.version != VERSION {
            return Err(CheckpointError::Version(meta.version));
        }
        let expected = dmd_core::autodiff::param_count(&meta.widths);
        if meta.param_count != expected {
            return Err(CheckpointError::Metadata(format!(
                "param_count {} does not match widths {:?} ({expected})",
                meta.param_count, meta.widths
            )));
        }
        let payload = &bytes[meta_end..];
        let need = meta.param_count * 8;
        if payload.len() < need {
            return Err(CheckpointError::Truncated("parameter payload"));
        }
        if payload.len() > need {
            return Err(CheckpointError::Trailing(payload.len() - need));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}
