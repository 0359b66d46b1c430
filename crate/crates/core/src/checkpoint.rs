//! Model checkpoints on disk.
//!
//! A checkpoint directory holds `manifest.json` plus one tensor file per
//! weight (`<name>.bin` with its `<name>.json` descriptor).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QtError, Result};
use crate::io::{read_tensor_file, write_tensor_file, Dtype};
use crate::model::{ToyTransformer, ToyTransformerConfig};
use crate::quant::QuantSpec;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub steps: usize,
    pub final_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: ToyTransformerConfig,
    pub weights: Vec<WeightEntry>,
    #[serde(default)]
    pub quant_specs: BTreeMap<String, QuantSpec>,
    #[serde(default)]
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: ToyTransformer,
    /// Optional per-tensor specs keyed by weight name or observer site id.
    pub quant_specs: BTreeMap<String, QuantSpec>,
    pub metadata: TrainingMetadata,
}

fn check_spec_names(config: &ToyTransformerConfig, specs: &BTreeMap<String, QuantSpec>) -> Result<()> {
    let weights = config.quantized_weight_names();
    let sites = config.site_ids();
    for name in specs.keys() {
        if !weights.contains(name) && !sites.contains(name) {
            return Err(QtError::config(format!("quant spec for unknown tensor `{name}`")));
        }
    }
    Ok(())
}

fn check_file_name(file: &str) -> Result<()> {
    let ok = !file.is_empty()
        && file != "."
        && file != ".."
        && file
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        && file.ends_with(".bin");
    if ok {
        Ok(())
    } else {
        Err(QtError::data(format!("invalid weight file name `{file}`")))
    }
}

/// Parse and validate a manifest: config valid, weight index equal to the
/// config's closed weight set, specs naming existing tensors.
pub fn parse_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_slice(bytes)?;
    m.config.validate()?;
    let expected = m.config.weight_shapes();
    if m.weights.len() != expected.len() {
        return Err(QtError::config(format!(
            "manifest lists {} weights, config defines {}",
            m.weights.len(),
            expected.len()
        )));
    }
    let by_name: BTreeMap<_, _> = m.weights.iter().map(|w| (w.name.as_str(), w)).collect();
    for (name, shape) in &expected {
        let w = by_name
            .get(name.as_str())
            .ok_or_else(|| QtError::config(format!("manifest is missing weight `{name}`")))?;
        if &w.shape != shape {
            return Err(QtError::dim(format!("weight `{name}` shape {:?} != {shape:?}", w.shape)));
        }
        check_file_name(&w.file)?;
    }
    check_spec_names(&m.config, &m.quant_specs)?;
    Ok(m)
}

impl ModelCheckpoint {
    pub fn new(model: ToyTransformer) -> Self {
        ModelCheckpoint {
            model,
            quant_specs: BTreeMap::new(),
            metadata: TrainingMetadata::default(),
        }
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            config: self.model.config().clone(),
            weights: self
                .model
                .weights()
                .iter()
                .map(|(name, t)| WeightEntry {
                    name: name.clone(),
                    file: format!("{name}.bin"),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            quant_specs: self.quant_specs.clone(),
            metadata: self.metadata,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        check_spec_names(self.model.config(), &self.quant_specs)?;
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for entry in &manifest.weights {
            write_tensor_file(&dir.join(&entry.file), &self.model.weights()[&entry.name], Dtype::F64)?;
        }
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = parse_manifest(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut weights = BTreeMap::new();
        for entry in &manifest.weights {
            let t: Tensor = read_tensor_file(&dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(QtError::data(format!(
                    "tensor file for `{}` has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            weights.insert(entry.name.clone(), t);
        }
        Ok(ModelCheckpoint {
            model: ToyTransformer::from_weights(manifest.config, weights)?,
            quant_specs: manifest.quant_specs,
            metadata: manifest.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ToyTransformerConfig {
        ToyTransformerConfig {
            depth: 1,
            dim: 4,
            heads: 2,
            mlp_ratio: 2,
            seq_len: 3,
            input_dim: 2,
            num_classes: 3,
            seed: 5,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = ModelCheckpoint::new(ToyTransformer::new(cfg()).unwrap());
        ck.quant_specs.insert("head.weight".into(), QuantSpec::new(8, 0.01).unwrap());
        ck.quant_specs.insert("embed.input".into(), QuantSpec::new(7, 0.5).unwrap());
        ck.metadata = TrainingMetadata {
            steps: 12,
            final_alpha: 0.25,
        };
        ck.save(dir.path()).unwrap();
        assert_eq!(ModelCheckpoint::load(dir.path()).unwrap(), ck);
    }

    #[test]
    fn rejects_unknown_spec_names() {
        let mut ck = ModelCheckpoint::new(ToyTransformer::new(cfg()).unwrap());
        ck.quant_specs.insert("nope".into(), QuantSpec::new(8, 1.0).unwrap());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ck.save(dir.path()), Err(QtError::Config(_))));
        let mut m = ModelCheckpoint::new(ToyTransformer::new(cfg()).unwrap()).manifest();
        m.quant_specs.insert("pos".into(), QuantSpec::new(8, 1.0).unwrap());
        assert!(parse_manifest(serde_json::to_string(&m).unwrap().as_bytes()).is_err());
    }

    #[test]
    fn rejects_incomplete_or_unsafe_index() {
        let base = ModelCheckpoint::new(ToyTransformer::new(cfg()).unwrap()).manifest();
        let mut m = base.clone();
        m.weights.pop();
        assert!(parse_manifest(serde_json::to_string(&m).unwrap().as_bytes()).is_err());
        let mut m = base.clone();
        m.weights[0].file = "../escape.bin".into();
        assert!(parse_manifest(serde_json::to_string(&m).unwrap().as_bytes()).is_err());
        let mut m = base;
        m.weights[0].shape = vec![1];
        assert!(parse_manifest(serde_json::to_string(&m).unwrap().as_bytes()).is_err());
    }
}
