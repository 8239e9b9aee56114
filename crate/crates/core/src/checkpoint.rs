//! JSON checkpoints.
//!
//! Parameter values are stored as hex strings of their little-endian `f64`
//! bytes so that a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::layer::{GradMode, LayerConfig};
use crate::models::{init_params, ModelParams, Variant};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "SPODNET-CKPT-1";

/// A model together with the layer settings it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub layer: LayerConfig,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileRepr {
    format: String,
    variant: Variant,
    p: usize,
    seed: u64,
    zeta: f64,
    #[serde(rename = "K")]
    num_layers: usize,
    #[serde(default = "default_true")]
    stabilizer: bool,
    #[serde(default)]
    full_gradient: bool,
    params: Vec<ParamRecord>,
}

fn default_true() -> bool {
    true
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
    hex::encode(bytes)
}

fn decode(name: &str, text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = hex::decode(text).map_err(|e| Error::Format(format!("{name}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{name}: {} bytes for {expected} values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Checkpoint {
    pub fn new(params: ModelParams, layer: LayerConfig, seed: u64) -> Self {
        Self {
            params,
            layer,
            seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let repr = FileRepr {
            format: CHECKPOINT_FORMAT.into(),
            variant: self.params.variant,
            p: self.params.p,
            seed: self.seed,
            zeta: self.layer.zeta,
            num_layers: self.layer.num_layers,
            stabilizer: self.layer.stabilize,
            full_gradient: self.layer.grad_mode == GradMode::Full,
            params: self
                .params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| ParamRecord {
                    name,
                    shape: t.shape().to_vec(),
                    values: encode(t.data()),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&repr)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: FileRepr = serde_json::from_str(text)?;
        if repr.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "expected format {CHECKPOINT_FORMAT:?}, found {:?}",
                repr.format
            )));
        }
        let layer = LayerConfig {
            zeta: repr.zeta,
            stabilize: repr.stabilizer,
            num_layers: repr.num_layers,
            grad_mode: if repr.full_gradient {
                GradMode::Full
            } else {
                GradMode::Detached
            },
            ..LayerConfig::default()
        };
        layer
            .validate(repr.p)
            .map_err(|e| Error::Format(e.to_string()))?;
        // the seed only fixes the layout here; every value is overwritten
        let mut params =
            init_params(repr.variant, repr.p, 0).map_err(|e| Error::Format(e.to_string()))?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != repr.params.len() {
            return Err(Error::Format(format!(
                "{} expects {} parameter tensors, found {}",
                repr.variant,
                names.len(),
                repr.params.len()
            )));
        }
        for ((name, slot), rec) in names.iter().zip(params.tensors_mut()).zip(&repr.params) {
            if *name != rec.name {
                return Err(Error::Format(format!(
                    "expected parameter {name:?}, found {:?}",
                    rec.name
                )));
            }
            if slot.shape() != rec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, expected {:?}",
                    rec.shape,
                    slot.shape()
                )));
            }
            let values = decode(name, &rec.values, slot.len())?;
            *slot = Tensor::new(rec.shape.clone(), values)?.with_grad();
        }
        params.validate()?;
        Ok(Self {
            params,
            layer,
            seed: repr.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
