//! Flat key/value run configuration (TOML syntax, no tables).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::synth::SceneConfig;
use crate::tensor::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,

    // scenes
    pub num_classes: usize,
    pub num_attributes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_proposals: usize,
    pub d_obj: usize,
    pub d_t: usize,
    pub noise_sigma: f64,
    pub min_box_size: f64,
    pub max_box_size: f64,
    pub relation_margin: f64,
    pub attribute_prob: f64,
    pub query_class_groups: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,

    // model
    pub branch_heads: usize,
    pub branch_layers: usize,
    pub reasoner_heads: usize,
    pub reasoner_layers: usize,
    pub ffn_hidden: usize,
    pub multi_branch: bool,
    pub pre_norm: bool,

    // optimization
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lambda_cls: f64,
    pub lambda_giou: f64,
    pub top_n: usize,
    /// When nonzero, each training graph is filtered to a fresh uniform draw
    /// from `min(min_train_top_n, top_n)..=top_n` every epoch. Validation and
    /// test always use `top_n`.
    pub min_train_top_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SceneConfig::default();
        let m = ModelConfig::default();
        let o = AdamWConfig::default();
        let w = LossWeights::default();
        Self {
            seed: 0,
            precision: Precision::F32,
            num_classes: s.num_classes,
            num_attributes: s.num_attributes,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            num_proposals: s.num_proposals,
            d_obj: s.d_obj,
            d_t: s.d_t,
            noise_sigma: s.noise_sigma,
            min_box_size: s.min_box_size,
            max_box_size: s.max_box_size,
            relation_margin: s.relation_margin,
            attribute_prob: s.attribute_prob,
            query_class_groups: s.query_class_groups,
            train_scenes: 2000,
            val_scenes: 250,
            test_scenes: 500,
            branch_heads: m.branch_heads,
            branch_layers: m.branch_layers,
            reasoner_heads: m.reasoner_heads,
            reasoner_layers: m.reasoner_layers,
            ffn_hidden: m.ffn_hidden,
            multi_branch: m.multi_branch,
            pre_norm: m.pre_norm,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            batch_size: 8,
            epochs: 120,
            patience: 30,
            lambda_cls: w.lambda_cls,
            lambda_giou: w.lambda_giou,
            top_n: 32,
            min_train_top_n: 8,
        }
    }
}

impl RunConfig {
    /// Tiny configuration for finite-difference gradient checks.
    pub fn gradcheck_default() -> Self {
        Self {
            precision: Precision::F64,
            num_proposals: 8,
            min_objects: 2,
            max_objects: 5,
            d_obj: 16,
            d_t: 8,
            branch_heads: 2,
            branch_layers: 2,
            reasoner_heads: 2,
            reasoner_layers: 2,
            ffn_hidden: 32,
            top_n: 8,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            num_classes: self.num_classes,
            num_attributes: self.num_attributes,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            num_proposals: self.num_proposals,
            d_obj: self.d_obj,
            d_t: self.d_t,
            noise_sigma: self.noise_sigma,
            min_box_size: self.min_box_size,
            max_box_size: self.max_box_size,
            relation_margin: self.relation_margin,
            attribute_prob: self.attribute_prob,
            query_class_groups: self.query_class_groups,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_obj: self.d_obj,
            d_t: self.d_t,
            branch_heads: self.branch_heads,
            branch_layers: self.branch_layers,
            reasoner_heads: self.reasoner_heads,
            reasoner_layers: self.reasoner_layers,
            ffn_hidden: self.ffn_hidden,
            multi_branch: self.multi_branch,
            pre_norm: self.pre_norm,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_giou: self.lambda_giou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        self.model().validate()?;
        self.loss_weights().validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.top_n == 0 {
            return bad("top_n must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        Ok(())
    }
}
