//! Few-shot pipeline: stratified splits, prototypical episodes and
//! classification, uncertainty-mined similarity maps, quadruplet sampling
//! and the training loop.
//!
//! Similar samples are drawn from classes confusable with the anchor class.
//! Ties are broken towards the smallest class id throughout.

mod eval;
mod mining;
mod proto;
mod split;
mod train;

pub use eval::{evaluate_fsl, AdaptationProtocol, FslEvaluation};
pub use mining::{
    build_similarity_map, confusion_uncertainty, similarity_from_cells, Quadruplet, QuadrupletSampler, SimilarityMap,
    DEFAULT_EPISTEMIC_FLOOR, DEFAULT_MINING_QUANTILE,
};
pub use proto::{compute_prototypes, embed_f64, pn_episode_loss, prototype_loss, Dataset, Episode, PrototypeClassifier};
pub use split::{split_corpus, split_counts, Split, DEFAULT_FRACTIONS};
pub use train::{adapt, train, train_ensemble, EpochLog, LossKind, PretrainMode, TrainConfig, TrainRun, Trainer};

/// Adaptation classes of the featured pre-train/adapt partition.
pub const DEFAULT_ADAPTATION_CLASSES: [u8; 4] = [3, 7, 9, 10];

/// Classes not in `adaptation`, ascending.
pub fn base_classes(adaptation: &[u8]) -> Vec<u8> {
    (0..crate::NUM_CLASSES as u8).filter(|c| !adaptation.contains(c)).collect()
}
