//! Checkpoints: parameters, optimizer moments and step in a `GDTR1` container,
//! with the run configuration in a `.json` file beside it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::tensor_io::{self, Record};

use super::AdamW;

const STEP_TENSOR: &str = "optimizer.step";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn config_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self.params.named().into_iter().map(|(n, t)| Record::f64(n, t.clone())).collect();
        out.extend(self.optimizer.state_tensors(&self.params).into_iter().map(|(n, t)| Record::f64(n, t)));
        out.push(Record::f64(STEP_TENSOR, Tensor { shape: vec![], data: vec![self.optimizer.step as f64] }));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor_io::write(path, &self.records())?;
        let cfg_path = Self::config_path(path);
        fs::write(&cfg_path, self.config.to_json()).map_err(|e| Error::io(&cfg_path, e))
    }

    /// Loads a checkpoint. With `config` given it replaces the stored snapshot,
    /// and every tensor is checked against that config's dimensions.
    pub fn load(path: &Path, config: Option<&RunConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => c.clone(),
            None => RunConfig::load(&Self::config_path(path))?,
        };
        let tensors: BTreeMap<String, Tensor> = tensor_io::read_map(path)?;
        let params = ModelParams::from_named(&config.model, &tensors)?;
        let step = tensors.get(STEP_TENSOR).and_then(|t| t.data.first()).copied().unwrap_or(0.0) as u64;
        let optimizer = AdamW::from_state_tensors(config.train.weight_decay, step, &tensors);
        Ok(Checkpoint { config, params, optimizer })
    }
}
