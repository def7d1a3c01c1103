//! Versioned JSON checkpoint of a trained Q-network.
//!
//! Keys are emitted in declaration order and floats in shortest round-trip
//! form, so identical training runs produce identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dense, DqnHyper, QNetwork};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    /// Per layer, `outputs` rows of `inputs` weights.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub hyper: DqnHyper,
    pub seed: u64,
    pub training_steps: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_network(
        net: &QNetwork,
        hyper: &DqnHyper,
        seed: u64,
        training_steps: u64,
        config_hash: impl Into<String>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: net.dims(),
            weights: net
                .layers()
                .iter()
                .map(|l| l.weights.chunks(l.inputs).map(<[f64]>::to_vec).collect())
                .collect(),
            biases: net.layers().iter().map(|l| l.biases.clone()).collect(),
            input_offset: net.input_offset().to_vec(),
            input_scale: net.input_scale().to_vec(),
            hyper: hyper.clone(),
            seed,
            training_steps,
            config_hash: config_hash.into(),
        }
    }

    pub fn to_network(&self) -> Result<QNetwork> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let dims = &self.layer_dims;
        if dims.len() < 2
            || self.weights.len() != dims.len() - 1
            || self.biases.len() != dims.len() - 1
        {
            return Err(Error::Checkpoint(
                "layer count does not match layer_dims".into(),
            ));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, (rows, biases)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (inputs, outputs) = (dims[k], dims[k + 1]);
            if rows.len() != outputs || rows.iter().any(|r| r.len() != inputs) {
                return Err(Error::Checkpoint(format!(
                    "layer {k} weights are not {outputs}x{inputs}"
                )));
            }
            layers.push(Dense {
                inputs,
                outputs,
                weights: rows.concat(),
                biases: biases.clone(),
            });
        }
        QNetwork::from_layers(layers)?
            .with_input_normalization(self.input_offset.clone(), self.input_scale.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
