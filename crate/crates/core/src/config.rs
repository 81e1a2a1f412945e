//! Experiment configuration: a TOML schema covering dataset construction,
//! model dimensions, training and evaluation. Unknown keys are rejected
//! everywhere, and `validate` runs before any command does work.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdomains::{
    default_styles, GeneratorConfig, ProtocolConfig, ProtocolMode, StyleSpec,
};

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cddmsl,
    Dva,
    CaptionPl,
    SourceOnly,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Cddmsl => "cddmsl",
            Method::Dva => "dva",
            Method::CaptionPl => "caption_pl",
            Method::SourceOnly => "source_only",
        };
        f.write_str(s)
    }
}

/// Architecture dimensions and detection-head thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of the four backbone blocks; strides are fixed at 2,2,2,1.
    pub backbone_channels: [usize; 4],
    /// RoI pooling resolution P.
    pub pooled_size: usize,
    /// Language-space dimension shared by the mapper output and prompt bank.
    pub lang_dim: usize,
    /// Internal attention width of the vision-to-language mapper.
    pub attn_dim: usize,
    pub v2l_hidden: usize,
    pub proj_hidden: usize,
    /// Projection-head output dimension.
    pub proj_dim: usize,
    pub reg_hidden: usize,
    pub anchor_sizes: Vec<f64>,
    pub cls_temperature: f64,
    pub focal_gamma: f64,
    pub background_weight: f64,
    pub match_pos_iou: f64,
    pub match_bg_iou: f64,
    pub sample_regions: usize,
    pub positive_fraction: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_sample: usize,
    pub rpn_pre_nms: usize,
    pub rpn_post_nms: usize,
    pub rpn_nms_iou: f64,
    pub rpn_min_size: f64,
    /// Whether ground-truth boxes are appended to RPN proposals when
    /// sampling regions for the detection head during training.
    pub add_gt_proposals: bool,
    /// Jittered copies / random negatives per ground-truth box in
    /// oracle-proposal mode.
    pub oracle_jitter: usize,
    pub categories: Vec<String>,
    pub prompt_templates: Vec<String>,
    /// Codebook size of the caption pseudo-labeling baseline.
    pub codebook_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: [12, 24, 48, 64],
            pooled_size: 4,
            lang_dim: 64,
            attn_dim: 32,
            v2l_hidden: 64,
            proj_hidden: 128,
            proj_dim: 256,
            reg_hidden: 64,
            anchor_sizes: vec![12.0, 18.0, 26.0, 36.0],
            cls_temperature: 0.07,
            focal_gamma: 0.5,
            background_weight: 0.2,
            match_pos_iou: 0.5,
            match_bg_iou: 0.3,
            sample_regions: 32,
            positive_fraction: 0.25,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_sample: 32,
            rpn_pre_nms: 128,
            rpn_post_nms: 24,
            rpn_nms_iou: 0.7,
            rpn_min_size: 4.0,
            add_gt_proposals: true,
            oracle_jitter: 2,
            categories: vec![
                "circle".into(),
                "square".into(),
                "triangle".into(),
                "cross".into(),
            ],
            prompt_templates: vec![
                "a photo of a {}".into(),
                "a drawing of a {}".into(),
                "an image of a {}".into(),
            ],
            codebook_size: 32,
        }
    }
}

impl ModelConfig {
    /// Input-to-feature downscale of the backbone (strides 2*2*2*1).
    pub fn stride(&self) -> usize {
        8
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_channels[3]
    }
}

/// Two-stage optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub burnup_steps: usize,
    pub joint_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub omega: f64,
    pub tau: f64,
    pub oracle_proposals: bool,
    pub bidirectional_stylization: bool,
    /// Average both contrastive directions instead of the one-directional
    /// anchor-to-counterpart form.
    pub symmetric_contrastive: bool,
    /// Component toggles for ablations; all on for the full method.
    pub use_img: bool,
    pub use_inst: bool,
    pub use_dist: bool,
    /// Fit the mapper on a seeded feature-to-prompt regression task before
    /// freezing it (off by default; the mapper is frozen either way).
    pub v2l_prefit: bool,
    /// Checkpoint every n joint steps (0 = final state only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            burnup_steps: 500,
            joint_steps: 1500,
            batch_size: 8,
            lr: 0.002,
            momentum: 0.9,
            omega: 1.0,
            tau: 0.07,
            oracle_proposals: false,
            bidirectional_stylization: false,
            symmetric_contrastive: false,
            use_img: true,
            use_inst: true,
            use_dist: true,
            v2l_prefit: false,
            checkpoint_every: 0,
        }
    }
}

/// Inference and scoring settings used by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_threshold: 0.05,
            nms_iou: 0.5,
            iou_threshold: 0.5,
        }
    }
}

/// Dataset section: generator, styles, protocol and sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    /// Style bank; empty means the built-in four styles.
    pub styles: Vec<StyleSpec>,
    pub labeled_style: String,
    pub unlabeled_styles: Vec<String>,
    pub mode: ProtocolMode,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_target: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 7,
            generator: GeneratorConfig::default(),
            styles: Vec::new(),
            labeled_style: "plain".into(),
            unlabeled_styles: vec!["inkwash".into()],
            mode: ProtocolMode::Dg,
            n_labeled: 64,
            n_unlabeled: 32,
            n_target: 32,
        }
    }
}

impl DatasetConfig {
    pub fn styles(&self) -> Vec<StyleSpec> {
        if self.styles.is_empty() {
            default_styles()
        } else {
            self.styles.clone()
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            labeled_style: self.labeled_style.clone(),
            unlabeled_styles: self.unlabeled_styles.clone(),
            mode: self.mode,
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            n_target: self.n_target,
        }
    }
}

/// The full experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Cddmsl,
            seed: 0,
            output_dir: "runs/default".into(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let styles = d.styles();
        let names: Vec<String> = styles.iter().map(|s| s.style_id.clone()).collect();
        for s in std::iter::once(&d.labeled_style).chain(d.unlabeled_styles.iter()) {
            if !names.contains(s) {
                return Err(Error::Config(format!("style not defined: {s}")));
            }
        }
        if self.train.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.train.omega < 0.0 {
            return Err(Error::Config("train.omega must be non-negative".into()));
        }
        if self.train.tau <= 0.0 {
            return Err(Error::Config("train.tau must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.model.categories.len() < d.generator.num_categories {
            return Err(Error::Config(format!(
                "model.categories names {} classes but the generator uses {}",
                self.model.categories.len(),
                d.generator.num_categories
            )));
        }
        if self.model.prompt_templates.is_empty() {
            return Err(Error::Config("model.prompt_templates must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.model.positive_fraction) {
            return Err(Error::Config("model.positive_fraction must be in [0,1]".into()));
        }
        if self.model.focal_gamma < 0.0 {
            return Err(Error::Config("model.focal_gamma must be >= 0".into()));
        }
        d.protocol().validate_sizes()?;
        Ok(())
    }

    /// Stable hash of the serialized config, stored in checkpoints.
    pub fn config_hash(&self) -> u64 {
        crate::rng::hash_str(&self.to_toml_string())
    }
}

impl ProtocolConfig {
    fn validate_sizes(&self) -> Result<()> {
        if self.n_labeled == 0 || self.n_unlabeled == 0 || self.n_target == 0 {
            return Err(Error::Config("dataset split sizes must be positive".into()));
        }
        if self.unlabeled_styles.is_empty() {
            return Err(Error::Config("at least one unlabeled style is required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::default().to_toml_string();
        text.push_str("\nmystery_knob = 3\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("mystery_knob"), "{err}");
    }

    #[test]
    fn missing_style_is_a_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.unlabeled_styles = vec!["watercolour".into()];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("watercolour"));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.tau = 0.1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
