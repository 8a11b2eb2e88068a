//! Checkpoints: a model-config JSON plus a parameter JSON in one directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::process::{ModelKind, PointProcessModel};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: Option<ModelKind>,
    pub flow: FlowConfig,
    /// Rate pre-activation; the rate is `softplus(theta_lambda)`.
    pub theta_lambda: f64,
}

fn with_path<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn save(dir: &Path, model: &PointProcessModel, kind: Option<ModelKind>) -> Result<()> {
    with_path(dir, fs::create_dir_all(dir))?;
    let file = ModelFile {
        kind,
        flow: model.flow.config().clone(),
        theta_lambda: model.theta_lambda(),
    };
    let cfg_path = dir.join(CONFIG_FILE);
    with_path(&cfg_path, fs::write(&cfg_path, serde_json::to_string_pretty(&file)? + "\n"))?;
    let p_path = dir.join(PARAMS_FILE);
    with_path(&p_path, fs::write(&p_path, model.flow.params().to_json()? + "\n"))?;
    Ok(())
}

/// Loads a checkpoint directory; parameters must match the architecture
/// described by the config.
pub fn load(dir: &Path) -> Result<(PointProcessModel, ModelFile)> {
    let cfg_path = dir.join(CONFIG_FILE);
    let file: ModelFile = serde_json::from_str(&with_path(&cfg_path, fs::read_to_string(&cfg_path))?)?;
    let p_path = dir.join(PARAMS_FILE);
    let params = ParameterSet::from_json(&with_path(&p_path, fs::read_to_string(&p_path))?)?;
    let flow = FlowModel::from_parts(file.flow.clone(), params)
        .map_err(|e| Error::Config(format!("checkpoint {}: {e}", dir.display())))?;
    Ok((PointProcessModel::new(flow, file.theta_lambda)?, file))
}
