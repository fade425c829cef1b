//! Optional TOML experiment file; command-line flags override its values.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;
use unif_core::deform::QRatio;
use unif_core::neural_sdf::UnionMode;

use crate::UserError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
    pub frames_per_batch: Option<usize>,
    pub seed: Option<u64>,
    pub surface_samples: Option<usize>,
    pub local_samples: Option<usize>,
    pub global_samples: Option<usize>,
    pub sigma_local: Option<f64>,
    pub box_scale: Option<f64>,
    pub unit_weight: Option<f64>,
    pub lim_weight: Option<f64>,
    pub sec_weight: Option<f64>,
    pub perim_weight: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub split: Option<String>,
    pub init_steps: Option<usize>,
    pub aps: Option<bool>,
    pub lim: Option<bool>,
    pub sec: Option<bool>,
    pub perim: Option<bool>,
    pub q_ratio: Option<QRatio>,
    pub union: Option<UnionMode>,
    pub resolution: Option<usize>,
    pub pad: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| UserError(format!("invalid config {}: {e}", path.display())))
            .context("loading experiment config")
    }
}
