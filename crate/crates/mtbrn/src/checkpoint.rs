//! Self-describing JSON checkpoints. Floats round-trip bit-exactly.

use std::path::Path;

use mtbrn_core::model::{FieldSpec, ModelConfig, ModelParams, ModelVariant};
use mtbrn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::Catalog;
use crate::error::{Error, Result};
use crate::formats::{read_json, write_json};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: [usize; 3],
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_range: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: String,
    pub hyperparameters: Hyperparameters,
    pub vocab: Catalog,
    pub params: Vec<ParamRecord>,
}

pub fn model_config(hyper: &Hyperparameters, catalog: &Catalog) -> ModelConfig {
    let specs = |s: &crate::catalog::Schema| {
        s.fields.iter().map(|f| FieldSpec { kind: f.kind.clone().into(), vocab_size: f.vocab_size }).collect()
    };
    ModelConfig {
        embedding_dim: hyper.embedding_dim,
        hidden: hyper.hidden,
        mlp_hidden: hyper.mlp_hidden,
        user_fields: specs(&catalog.user_fields),
        item_fields: specs(&catalog.item_fields),
        n_items: catalog.items.len() as u32,
        n_entities: catalog.entities.len() as u32,
        n_relations: catalog.relations.len() as u32,
    }
}

impl Hyperparameters {
    pub fn new(dims: &ModelConfig, train: &TrainConfig) -> Self {
        Self {
            embedding_dim: dims.embedding_dim,
            hidden: dims.hidden,
            mlp_hidden: dims.mlp_hidden,
            batch_size: train.batch_size,
            epochs: train.epochs,
            seed: train.seed,
            init_range: train.init_range,
            learning_rate: train.learning_rate,
            epsilon: train.epsilon,
        }
    }
}

impl Checkpoint {
    pub fn from_model(params: &ModelParams, variant: ModelVariant, hyper: Hyperparameters, vocab: Catalog) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            variant: variant.name().to_owned(),
            hyperparameters: hyper,
            vocab,
            params: params
                .store
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn variant(&self) -> Result<ModelVariant> {
        ModelVariant::parse(&self.variant).ok_or_else(|| Error::Invalid(format!("unknown variant `{}`", self.variant)))
    }

    /// Rebuilds the model; every parameter must match the shape implied by
    /// the stored hyperparameters and vocabularies.
    pub fn to_model(&self) -> Result<ModelParams> {
        let mut params = ModelParams::new(model_config(&self.hyperparameters, &self.vocab)).map_err(Error::core)?;
        params
            .load_values(self.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice(), p.values.as_slice())))
            .map_err(Error::core)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "{}: checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                c.format_version
            )));
        }
        Ok(c)
    }
}
