use super::proto::{compute_prototypes, Dataset, PrototypeClassifier};
use super::split::Split;
use super::train::adapt;
use crate::error::{ensure, Result};
use crate::metrics::{confusion, ConfusionMatrix, MetricReport};
use crate::nn::EmbeddingNetwork;
use crate::{Scalar, NUM_CLASSES};
use std::collections::BTreeMap;

/// Base-plus-adapted prototype classifier scored on a test set.
#[derive(Debug, Clone)]
pub struct FslEvaluation {
    pub classifier: PrototypeClassifier,
    pub predictions: Vec<u8>,
    pub confusion: ConfusionMatrix,
    pub report: MetricReport,
    /// Mean recall over the adaptation classes present in the test set.
    pub adaptation_accuracy: f64,
}

/// Prototypes for base classes come from all of `base_support`; each class in
/// `adapt_support` contributes its first `k` samples.
pub fn evaluate_fsl<T: Scalar>(
    net: &EmbeddingNetwork<T>,
    base_support: &Dataset,
    adapt_support: &Dataset,
    k: usize,
    test: &Dataset,
) -> Result<FslEvaluation> {
    let base = compute_prototypes(net, base_support)?;
    let classifier = adapt(net, &base, adapt_support, k)?;
    let predictions = classifier.predict(net, &test.images)?;
    let truth: Vec<usize> = test.labels.iter().map(|&l| l as usize).collect();
    let pred: Vec<usize> = predictions.iter().map(|&l| l as usize).collect();
    let confusion = confusion(&truth, &pred, NUM_CLASSES)?;
    let adapt_classes: Vec<usize> = adapt_support.classes().into_iter().map(usize::from).collect();
    Ok(FslEvaluation {
        report: MetricReport::from_confusion(&confusion),
        adaptation_accuracy: confusion.mean_recall(&adapt_classes),
        classifier,
        predictions,
        confusion,
    })
}

/// Index partition of a labelled corpus for pre-train/adapt evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationProtocol {
    /// Base-class training samples: pre-training data and base prototypes.
    pub base_train: Vec<usize>,
    /// First `k` training samples of each adaptation class.
    pub support: Vec<usize>,
    /// Base-class test samples plus every non-support adaptation sample.
    pub query: Vec<usize>,
}

impl AdaptationProtocol {
    /// Adaptation classes are never seen before adaptation, so all their
    /// samples outside the support are usable as queries.
    pub fn new(labels: &[u8], splits: &[Split], adaptation: &[u8], k: usize) -> Result<Self> {
        ensure!(labels.len() == splits.len(), "{} labels but {} split tags", labels.len(), splits.len());
        ensure!(k >= 1, "k must be at least 1");
        let mut p = Self { base_train: Vec::new(), support: Vec::new(), query: Vec::new() };
        let mut taken: BTreeMap<u8, usize> = adaptation.iter().map(|&c| (c, 0)).collect();
        for (i, (&l, &s)) in labels.iter().zip(splits).enumerate() {
            match taken.get_mut(&l) {
                Some(n) if s == Split::Train && *n < k => {
                    *n += 1;
                    p.support.push(i);
                }
                Some(_) => p.query.push(i),
                None if s == Split::Train => p.base_train.push(i),
                None if s == Split::Test => p.query.push(i),
                None => {}
            }
        }
        for (c, n) in taken {
            ensure!(n == k, "adaptation class {c} has {n} training samples, k = {k}");
        }
        Ok(p)
    }
}
