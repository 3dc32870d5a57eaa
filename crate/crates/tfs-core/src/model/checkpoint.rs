//! Checkpoint persistence.
//!
//! On disk a checkpoint is a directory holding `manifest.json` (format
//! version, encoder config, seed, provenance chain, parameter names and
//! shapes in order) and `params.bin` (every tensor's values concatenated in
//! manifest order as little-endian f32). In memory the values are f64 but
//! always exactly f32-representable: the constructor rounds, so save/load is
//! the identity on parameters.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TfsError};
use crate::model::{encoder_param_specs, EncoderConfig, HeadKind, Model};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

/// Immutable snapshot of a model plus its lineage.
///
/// `provenance` is the append-only chain of phase tags from `random_init`
/// to this checkpoint's own tag (the last entry). `pseudo_label_source`
/// records the id of the teacher whose pseudo labels trained this model,
/// when there was one.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: EncoderConfig,
    pub params: IndexMap<String, Tensor>,
    pub provenance: Vec<String>,
    pub pseudo_label_source: Option<String>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: EncoderConfig,
    seed: u64,
    provenance: Vec<String>,
    pseudo_label_source: Option<String>,
    params: Vec<ParamEntry>,
}

fn valid_tag(tag: &str) -> bool {
    matches!(tag, "random_init" | "tapt" | "finetuned")
        || tag
            .strip_prefix("student_round_")
            .is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

impl ModelCheckpoint {
    /// Builds a checkpoint, validating the parameter table against the
    /// config and rounding every value to its nearest f32.
    pub fn new(
        config: EncoderConfig,
        mut params: IndexMap<String, Tensor>,
        provenance: Vec<String>,
        seed: u64,
        pseudo_label_source: Option<String>,
    ) -> Result<Self> {
        config.validate()?;
        if provenance.is_empty() {
            return Err(TfsError::Checkpoint("provenance chain is empty".into()));
        }
        for tag in &provenance {
            if !valid_tag(tag) {
                return Err(TfsError::Checkpoint(format!("unknown provenance tag {tag:?}")));
            }
        }
        validate_param_table(&config, &params)?;
        for tensor in params.values_mut() {
            tensor.round_to_f32();
            tensor.clear_grad();
            tensor.set_requires_grad(false);
        }
        Ok(Self { config, params, provenance, pseudo_label_source, seed })
    }

    /// The checkpoint's own phase tag (last provenance entry).
    pub fn tag(&self) -> &str {
        self.provenance.last().expect("provenance is never empty")
    }

    /// Content id: 16 hex chars of the SHA-256 over manifest and parameters.
    pub fn id(&self) -> String {
        let manifest = self.manifest();
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&manifest).expect("manifest serializes"));
        hasher.update(self.param_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Snapshot of a trained working model as this checkpoint's child:
    /// provenance extended by `tag`, seed inherited from the lineage root.
    pub fn child_from_model(
        &self,
        model: Model,
        tag: &str,
        pseudo_label_source: Option<String>,
    ) -> Result<ModelCheckpoint> {
        let mut provenance = self.provenance.clone();
        provenance.push(tag.to_string());
        ModelCheckpoint::new(model.config, model.params, provenance, self.seed, pseudo_label_source)
    }

    pub fn has_head(&self, kind: HeadKind) -> bool {
        Model::from_checkpoint(self).has_head(kind)
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            config: self.config,
            seed: self.seed,
            provenance: self.provenance.clone(),
            pseudo_label_source: self.pseudo_label_source.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        }
    }

    fn param_bytes(&self) -> Vec<u8> {
        let total: usize = self.params.values().map(Tensor::len).sum();
        let mut bytes = Vec::with_capacity(total * 4);
        for tensor in self.params.values() {
            for &v in tensor.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
        std::fs::write(dir.join(PARAMS_FILE), self.param_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let body = std::fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&body).map_err(|e| {
            TfsError::Checkpoint(format!("{}: {e}", manifest_path.display()))
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(TfsError::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let bytes = std::fs::read(dir.join(PARAMS_FILE))?;
        let expected: usize = manifest
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != expected * 4 {
            return Err(TfsError::Checkpoint(format!(
                "params.bin holds {} bytes but the manifest needs {}",
                bytes.len(),
                expected * 4
            )));
        }
        let mut params = IndexMap::with_capacity(manifest.params.len());
        let mut offset = 0;
        for entry in &manifest.params {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f64> = bytes[offset..offset + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect();
            offset += n * 4;
            let tensor = Tensor::new(entry.shape.clone(), data)?;
            if params.insert(entry.name.clone(), tensor).is_some() {
                return Err(TfsError::Checkpoint(format!(
                    "duplicate parameter {:?} in manifest",
                    entry.name
                )));
            }
        }
        Self::new(
            manifest.config,
            params,
            manifest.provenance,
            manifest.seed,
            manifest.pseudo_label_source,
        )
    }
}

/// Checks that the table holds exactly the encoder parameters for `config`
/// plus whole head groups, each with the right shape.
fn validate_param_table(config: &EncoderConfig, params: &IndexMap<String, Tensor>) -> Result<()> {
    let mut expected: IndexMap<String, Vec<usize>> =
        encoder_param_specs(config).into_iter().collect();
    let i = config.hidden_size;
    for (name, tensor) in params {
        if let Some(shape) = expected.shift_remove(name) {
            if tensor.shape() != &shape[..] {
                return Err(TfsError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            continue;
        }
        let ok = match name.as_str() {
            "head.mlm.bias" => tensor.shape() == [config.vocab_size],
            "head.classifier.w" | "head.tagger.w" | "head.multi.w" => {
                tensor.shape().len() == 2 && tensor.shape()[1] == i && tensor.shape()[0] >= 2
            }
            "head.classifier.b" | "head.tagger.b" | "head.multi.b" => {
                let w = name.strip_suffix(".b").expect("suffix checked");
                let classes = params
                    .get(&format!("{w}.w"))
                    .map(|t| t.shape()[0])
                    .unwrap_or(0);
                tensor.shape() == [classes]
            }
            _ => false,
        };
        if !ok {
            return Err(TfsError::Checkpoint(format!(
                "unexpected parameter {name} with shape {:?}",
                tensor.shape()
            )));
        }
    }
    if let Some((name, shape)) = expected.first() {
        return Err(TfsError::Checkpoint(format!(
            "missing encoder parameter {name} (shape {shape:?})"
        )));
    }
    Ok(())
}
