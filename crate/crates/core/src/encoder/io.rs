use std::path::Path;

use thiserror::Error;

use super::{EncoderConfig, EncoderError, EncoderParams};
use crate::container::{Container, ContainerError, TensorRecord};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"CGWT";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("io error: {0}")]
    Io(std::io::Error),
    #[error("weights file version or config mismatch: {0}")]
    VersionMismatch(String),
    #[error("weights file checksum error: {0}")]
    Checksum(String),
    #[error("malformed weights file: {0}")]
    Malformed(String),
}

impl From<ContainerError> for WeightsError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io(e) => WeightsError::Io(e),
            ContainerError::Checksum(s) => WeightsError::Checksum(s),
            ContainerError::Version { found, expected } => {
                WeightsError::VersionMismatch(format!("format version {found}, expected {expected}"))
            }
            other => WeightsError::Malformed(other.to_string()),
        }
    }
}

impl From<EncoderError> for WeightsError {
    fn from(e: EncoderError) -> Self {
        WeightsError::Malformed(e.to_string())
    }
}

pub fn to_container(params: &EncoderParams<f32>) -> Container {
    let header = serde_json::to_string(params.config()).expect("config serializes");
    let mut c = Container::new(WEIGHTS_MAGIC, header);
    for slot in params.layout().slots() {
        c.tensors.push(TensorRecord {
            name: slot.name.clone(),
            dims: slot.dims.iter().map(|&d| d as u32).collect(),
            data: params.tensor(slot).to_vec(),
        });
    }
    let h = params.config().hidden_dim as u32;
    c.tensors.push(TensorRecord {
        name: "bn.running_mean".into(),
        dims: vec![h],
        data: params.running_mean.clone(),
    });
    c.tensors.push(TensorRecord {
        name: "bn.running_var".into(),
        dims: vec![h],
        data: params.running_var.clone(),
    });
    c
}

/// Content hash of the serialized weights, used to tie index files to the
/// encoder that produced their vectors.
pub fn fingerprint(params: &EncoderParams<f32>) -> u64 {
    crate::container::fnv1a64(&to_container(params).to_bytes())
}

pub fn save_params(params: &EncoderParams<f32>, path: &Path) -> Result<(), WeightsError> {
    Ok(to_container(params).write(path)?)
}

pub fn load_params(path: &Path) -> Result<EncoderParams<f32>, WeightsError> {
    from_container(&Container::read(path, WEIGHTS_MAGIC)?)
}

/// Loads weights and rejects them unless they were saved with `expected`.
pub fn load_params_expecting(
    path: &Path,
    expected: &EncoderConfig,
) -> Result<EncoderParams<f32>, WeightsError> {
    let params = load_params(path)?;
    if params.config() != expected {
        return Err(WeightsError::VersionMismatch(format!(
            "file config {:?} differs from expected {:?}",
            params.config(),
            expected
        )));
    }
    Ok(params)
}

pub fn from_container(c: &Container) -> Result<EncoderParams<f32>, WeightsError> {
    let config: EncoderConfig = serde_json::from_str(&c.header)
        .map_err(|e| WeightsError::VersionMismatch(format!("unreadable config: {e}")))?;
    config.validate()?;
    let layout = super::Layout::new(&config);
    let mut weights = Vec::with_capacity(layout.total);
    for slot in layout.slots() {
        let t = c
            .tensor(&slot.name)
            .ok_or_else(|| WeightsError::Malformed(format!("missing tensor {}", slot.name)))?;
        let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        if dims != slot.dims {
            return Err(WeightsError::Malformed(format!(
                "tensor {} has dims {dims:?}, expected {:?}",
                slot.name, slot.dims
            )));
        }
        weights.extend_from_slice(&t.data);
    }
    let buffer = |name: &str| {
        c.tensor(name)
            .map(|t| t.data.clone())
            .ok_or_else(|| WeightsError::Malformed(format!("missing tensor {name}")))
    };
    Ok(EncoderParams::from_parts(
        config,
        weights,
        buffer("bn.running_mean")?,
        buffer("bn.running_var")?,
    )?)
}
