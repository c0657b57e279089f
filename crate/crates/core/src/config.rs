//! Flat key-value run configuration. Every key is optional and mirrors a
//! field of [`TrainConfig`] or [`NetworkConfig`]; present keys override the
//! defaults they are applied to.
//!
//! ```toml
//! lr0 = 1e-4
//! batch = 4
//! feature_dim = 8
//! ks = [3, 4, 5, 6, 7, 8]
//! ds = [1, 1, 2, 2, 3, 3]
//! no_dilation = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::KdSchedule;
use crate::net::NetworkConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lr0: Option<f64>,
    pub decay: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub max_steps: Option<usize>,
    pub clip_norm: Option<f64>,
    pub crop_size: Option<usize>,
    pub crop_stride: Option<usize>,

    pub patch_size: Option<usize>,
    pub feature_dim: Option<usize>,
    pub intra_blocks: Option<usize>,
    pub inter_blocks: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub ds: Option<Vec<usize>>,
    pub ffn_ratio: Option<usize>,
    pub ffn_residual: Option<bool>,
    pub zero_init_branches: Option<bool>,
    pub fixed_k: Option<usize>,
    pub no_dilation: Option<bool>,
    pub no_inter_modal: Option<bool>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Values set in `other` win over values set here.
    pub fn overlay(self, other: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            lr0, decay, batch, epochs, lambda, seed, beta1, beta2, eps, max_steps, clip_norm, crop_size,
            crop_stride, patch_size, feature_dim, intra_blocks, inter_blocks, ks, ds, ffn_ratio, ffn_residual,
            zero_init_branches, fixed_k, no_dilation, no_inter_modal
        )
    }

    /// Applies the set keys on top of `net` and `train`, then validates both.
    pub fn apply(&self, net: &mut NetworkConfig, train: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($dst:expr, $($f:ident),*) => { $(if let Some(v) = self.$f.clone() { $dst.$f = v; })* };
        }
        set!(train, lr0, decay, batch, epochs, lambda, seed, crop_size, crop_stride);
        set!(train.adam, beta1, beta2, eps);
        if self.max_steps.is_some() {
            train.max_steps = self.max_steps;
        }
        if self.clip_norm.is_some() {
            train.clip_norm = self.clip_norm;
        }
        set!(
            net,
            patch_size,
            feature_dim,
            intra_blocks,
            inter_blocks,
            ffn_ratio,
            ffn_residual,
            zero_init_branches,
            no_dilation,
            no_inter_modal
        );
        if self.fixed_k.is_some() {
            net.fixed_k = self.fixed_k;
        }
        if self.ks.is_some() || self.ds.is_some() {
            let ks = self.ks.clone().unwrap_or_else(|| net.schedule.ks());
            let ds = self.ds.clone().unwrap_or_else(|| net.schedule.ds());
            net.schedule = KdSchedule::new(&ks, &ds)?;
        }
        net.validate()?;
        train.validate()
    }
}
