use gnss_fsl::fsl::{LossKind, PretrainMode, TrainConfig, DEFAULT_ADAPTATION_CLASSES};
use gnss_fsl::metrics::TsneConfig;
use gnss_fsl::nn::{ArchConfig, EmbeddingNorm};
use gnss_fsl::NUM_CLASSES;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Where quadruplet training gets its similarity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// Mined from the ensemble stage.
    Computed,
    #[default]
    PaperFixture,
}

/// Run configuration shared by every stage after corpus generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub loss: LossKind,
    pub alpha: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub adaptation_classes: Vec<u8>,
    pub k_shot: usize,
    pub similarity_map: MapSource,

    pub pretrain: PretrainMode,
    pub pairwise_norm: EmbeddingNorm,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub tuples_per_step: usize,
    pub audit_size: usize,
    pub channels: Vec<usize>,
    pub ensemble_size: usize,
    pub ensemble_epochs: usize,
    pub mining_quantile: f64,
    pub mining_floor: f64,
    /// Epochs of adaptation-head post-training on the support set; 0 disables the head.
    pub post_train_epochs: usize,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    /// Cap on embedded query samples; t-SNE is quadratic in this.
    pub tsne_max_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let tsne = TsneConfig::default();
        Self {
            loss: t.loss,
            alpha: t.alpha,
            alpha1: t.alpha1,
            alpha2: t.alpha2,
            lambda: t.lambda,
            epochs: t.epochs,
            lr: t.lr,
            decay: t.decay,
            seed: t.seed,
            embed_dim: 64,
            adaptation_classes: DEFAULT_ADAPTATION_CLASSES.to_vec(),
            k_shot: 5,
            similarity_map: MapSource::default(),
            pretrain: t.pretrain,
            pairwise_norm: t.pairwise_norm,
            episodes_per_epoch: t.episodes_per_epoch,
            batch_size: t.batch_size,
            tuples_per_step: t.tuples_per_step,
            audit_size: t.audit_size,
            channels: vec![16, 32, 64],
            ensemble_size: 10,
            ensemble_epochs: 20,
            mining_quantile: gnss_fsl::fsl::DEFAULT_MINING_QUANTILE,
            mining_floor: gnss_fsl::fsl::DEFAULT_EPISTEMIC_FLOOR,
            post_train_epochs: 0,
            tsne_perplexity: tsne.perplexity,
            tsne_iterations: tsne.iterations,
            tsne_max_points: 300,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&crate::manifest::read_text(path)?)
    }

    /// Canonical serialization; the config hash is taken over these bytes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.adaptation_classes.is_empty() {
            return bad("adaptation_classes is empty".into());
        }
        let mut seen = [false; NUM_CLASSES];
        for &c in &self.adaptation_classes {
            if c as usize >= NUM_CLASSES || seen[c as usize] {
                return bad(format!("adaptation class {c} is out of range or repeated"));
            }
            seen[c as usize] = true;
        }
        if NUM_CLASSES - self.adaptation_classes.len() < 3 {
            return bad("fewer than three base classes remain".into());
        }
        if self.k_shot == 0 || self.embed_dim == 0 || self.channels.is_empty() {
            return bad("k_shot, embed_dim and channels must be non-empty".into());
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mining_quantile) {
            return bad(format!("mining_quantile {} outside [0, 1]", self.mining_quantile));
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn base_classes(&self) -> Vec<u8> {
        gnss_fsl::fsl::base_classes(&self.adaptation_classes)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            alpha: self.alpha,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            lambda: self.lambda,
            epochs: self.epochs,
            lr: self.lr,
            decay: self.decay,
            seed: self.seed,
            pretrain: self.pretrain,
            episodes_per_epoch: self.episodes_per_epoch,
            batch_size: self.batch_size,
            tuples_per_step: self.tuples_per_step,
            pairwise_norm: self.pairwise_norm,
            audit_size: self.audit_size,
            ..TrainConfig::default()
        }
    }

    /// Ensemble members are plain classifiers trained with cross-entropy.
    pub fn ensemble_train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: LossKind::Ce,
            epochs: self.ensemble_epochs,
            pretrain: PretrainMode::Classifier,
            audit_size: 0,
            ..self.train_config()
        }
    }

    /// The classifier head is present whenever pre-training needs it.
    pub fn arch(&self, height: usize, width: usize, with_head: bool) -> ArchConfig {
        ArchConfig {
            in_height: height,
            in_width: width,
            channels: self.channels.clone(),
            embed_dim: self.embed_dim,
            num_classes: with_head.then_some(NUM_CLASSES),
            adaptation: None,
        }
    }

    pub fn tsne_config(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.tsne_perplexity,
            iterations: self.tsne_iterations,
            seed: self.seed,
            ..TsneConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_keys_parse() {
        let text = r#"{"loss": "quadruplet", "alpha": 2, "alpha1": 2, "alpha2": 5, "lambda": 1, "epochs": 3,
            "lr": 0.01, "decay": 0.0005, "seed": 7, "embed_dim": 16, "adaptation_classes": [3, 7, 9, 10],
            "k_shot": 5, "similarity_map": "computed"}"#;
        let cfg = PipelineConfig::from_json(text).unwrap();
        assert_eq!(cfg.loss, LossKind::Quadruplet);
        assert_eq!(cfg.similarity_map, MapSource::Computed);
        assert_eq!((cfg.seed, cfg.embed_dim, cfg.epochs), (7, 16, 3));
        assert_eq!(cfg.base_classes(), [0, 1, 2, 4, 5, 6, 8]);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            r#"{"loss": "hinge"}"#,
            r#"{"adaptation_classes": [3, 3]}"#,
            r#"{"adaptation_classes": [11]}"#,
            r#"{"adaptation_classes": []}"#,
            r#"{"loss": "quadruplet", "alpha1": -1}"#,
            r#"{"k_shot": 0}"#,
            r#"{"unknown_key": 1}"#,
            r#"{"similarity_map": "mined"}"#,
        ] {
            assert!(PipelineConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), PipelineConfig::from_json(&a.canonical_json()).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
