use super::mining::{QuadrupletSampler, SimilarityMap};
use super::proto::{compute_prototypes, episode_rows, prototype_loss, Dataset, Episode, PrototypeClassifier};
use crate::error::{ensure, Error, Result};
use crate::losses::{cross_entropy, PairBatch, PairwiseLoss};
use crate::nn::{sgd_step, ArchConfig, EmbeddingNetwork, EmbeddingNorm, GradientVector};
use crate::seed::stream;
use crate::spectro::SpectrogramImage;
use crate::uncertainty::Ensemble;
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// No pairwise term.
    #[default]
    Ce,
    Contrastive,
    Triplet,
    Quadruplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Prototypical episodes (plus cross-entropy when a classifier head exists).
    #[default]
    Episodic,
    /// Class-balanced mini-batches through the classifier head.
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub alpha: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Weight of the pairwise term relative to the base objective.
    pub lambda: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr: f64,
    pub decay: f64,
    pub seed: u64,
    pub pretrain: PretrainMode,
    pub n_way: usize,
    pub train_shots: usize,
    pub train_queries: usize,
    /// Mini-batch size in classifier mode.
    pub batch_size: usize,
    /// Pairwise tuples drawn per step.
    pub tuples_per_step: usize,
    pub pairwise_norm: EmbeddingNorm,
    /// Fixed tuples re-scored after every epoch for the satisfaction rate.
    pub audit_size: usize,
    /// Samples per class used for the nearest-prototype mining fallback.
    pub fallback_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Ce,
            alpha: 2.0,
            alpha1: 2.0,
            alpha2: 5.0,
            lambda: 1.0,
            epochs: 100,
            episodes_per_epoch: 10,
            lr: 0.01,
            decay: 0.0005,
            seed: 0,
            pretrain: PretrainMode::Episodic,
            n_way: 5,
            train_shots: 2,
            train_queries: 3,
            batch_size: 32,
            tuples_per_step: 16,
            pairwise_norm: EmbeddingNorm::Softmax,
            audit_size: 64,
            fallback_samples: 8,
        }
    }
}

impl TrainConfig {
    pub fn pairwise(&self) -> Option<PairwiseLoss> {
        match self.loss {
            LossKind::Ce => None,
            LossKind::Contrastive => Some(PairwiseLoss::Contrastive { alpha: self.alpha }),
            LossKind::Triplet => Some(PairwiseLoss::Triplet { alpha: self.alpha }),
            LossKind::Quadruplet => Some(PairwiseLoss::Quadruplet { alpha1: self.alpha1, alpha2: self.alpha2 }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr.is_finite() && self.lr > 0.0, "learning rate must be positive");
        ensure!(self.decay.is_finite() && self.decay >= 0.0, "decay must be non-negative");
        ensure!(self.lambda.is_finite() && self.lambda >= 0.0, "lambda must be non-negative");
        ensure!(self.episodes_per_epoch >= 1, "episodes_per_epoch must be positive");
        ensure!(self.n_way >= 2, "n_way must be at least 2");
        ensure!(self.train_shots >= 1 && self.train_queries >= 1, "train shots and queries must be positive");
        ensure!(self.batch_size >= 1 && self.tuples_per_step >= 1, "batch sizes must be positive");
        if let Some(p) = self.pairwise() {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub base_loss: f64,
    pub pairwise_loss: f64,
    /// Fraction of audit tuples with every hinge at zero, after the epoch.
    pub satisfaction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: EmbeddingNetwork<f32>,
    pub log: Vec<EpochLog>,
    /// Audit satisfaction before the first update.
    pub initial_satisfaction: Option<f64>,
}

struct Tuple {
    anchor: usize,
    positive: usize,
    similar: Option<usize>,
    negative: usize,
}

/// Single-writer SGD training loop over a labelled dataset.
pub struct Trainer<'a> {
    data: Dataset<'a>,
    cfg: TrainConfig,
    net: EmbeddingNetwork<f32>,
    classes: Vec<u8>,
    sampler: Option<QuadrupletSampler>,
    audit: Vec<Tuple>,
    rng: ChaCha8Rng,
    tuple_rng: ChaCha8Rng,
    /// Parameters exempt from weight decay: biases and frozen backbone weights.
    bias_mask: Vec<bool>,
    epoch: usize,
}

const EPISODE_STREAM: u64 = 1;
const AUDIT_STREAM: u64 = 2;
const TUPLE_STREAM: u64 = 3;

impl<'a> Trainer<'a> {
    /// Fresh network initialized from `cfg.seed`.
    pub fn new(data: Dataset<'a>, arch: ArchConfig, cfg: TrainConfig, map: &SimilarityMap) -> Result<Self> {
        let net = EmbeddingNetwork::init(arch, cfg.seed)?;
        Self::from_net(data, net, cfg, map)
    }

    /// Continues training an existing network (e.g. to post-train an adaptation head).
    pub fn from_net(data: Dataset<'a>, net: EmbeddingNetwork<f32>, cfg: TrainConfig, map: &SimilarityMap) -> Result<Self> {
        cfg.validate()?;
        let classes = data.classes();
        ensure!(classes.len() >= 2, "training needs at least two classes");
        if cfg.pretrain == PretrainMode::Classifier || net.num_classes().is_some() {
            let k = net.num_classes().ok_or_else(|| Error::invalid("classifier pre-training needs a classifier head"))?;
            ensure!(classes.iter().all(|&c| (c as usize) < k), "labels exceed the classifier head size {k}");
        }
        let sampler = match cfg.pairwise() {
            Some(_) => Some(QuadrupletSampler::new(&data, map)?),
            None => None,
        };
        // Frozen parameters get neither gradient nor decay, so they stay bit-identical.
        let frozen = if net.frozen_backbone { net.backbone_mask() } else { vec![false; net.params.len()] };
        let bias_mask: Vec<bool> = net.bias_mask().iter().zip(&frozen).map(|(&b, &f)| b || f).collect();
        let mut t = Self {
            data,
            net,
            classes,
            sampler,
            audit: Vec::new(),
            rng: stream(cfg.seed, EPISODE_STREAM),
            tuple_rng: stream(cfg.seed, TUPLE_STREAM),
            bias_mask,
            epoch: 0,
            cfg,
        };
        t.refresh_fallback()?;
        let mut audit_rng = stream(t.cfg.seed, AUDIT_STREAM);
        t.audit = (0..if t.sampler.is_some() { t.cfg.audit_size } else { 0 })
            .map(|_| t.draw_tuple(&mut audit_rng))
            .collect::<Result<_>>()?;
        Ok(t)
    }

    pub fn net(&self) -> &EmbeddingNetwork<f32> {
        &self.net
    }

    pub fn into_net(self) -> EmbeddingNetwork<f32> {
        self.net
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn draw_tuple(&self, rng: &mut ChaCha8Rng) -> Result<Tuple> {
        let sampler = self.sampler.as_ref().expect("pairwise sampler");
        let q = sampler.sample(rng)?;
        if self.cfg.loss == LossKind::Quadruplet {
            return Ok(Tuple { anchor: q.anchor, positive: q.positive, similar: Some(q.similar), negative: q.negative });
        }
        let anchor_class = sampler.label(q.anchor);
        let others: Vec<u8> = self.classes.iter().copied().filter(|&c| c != anchor_class).collect();
        let n_class = *others.choose(rng).expect("two classes");
        let by_class = self.data.by_class();
        let negative = *by_class[&n_class].choose(rng).expect("non-empty class");
        Ok(Tuple { anchor: q.anchor, positive: q.positive, similar: None, negative })
    }

    /// Recomputes nearest-prototype fallbacks when some anchor class has no map entry.
    fn refresh_fallback(&mut self) -> Result<()> {
        let Some(sampler) = &self.sampler else { return Ok(()) };
        if sampler.anchor_classes().iter().all(|&c| !sampler.map().get(c).is_empty()) {
            return Ok(());
        }
        let by_class = self.data.by_class();
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        for (&c, idx) in &by_class {
            for &i in idx.iter().take(self.cfg.fallback_samples) {
                images.push(self.data.images[i]);
                labels.push(c);
            }
        }
        let protos = compute_prototypes(&self.net, &Dataset { images, labels })?;
        self.sampler.as_mut().unwrap().set_fallback_from(&protos);
        Ok(())
    }

    /// Fraction of audit tuples whose hinges are all inactive.
    pub fn satisfaction(&self) -> Result<Option<f64>> {
        let Some(loss) = self.cfg.pairwise() else { return Ok(None) };
        if self.audit.is_empty() {
            return Ok(None);
        }
        let mut ok = 0usize;
        for chunk in self.audit.chunks(16) {
            let mut images: Vec<&SpectrogramImage> = Vec::new();
            for t in chunk {
                images.extend([self.data.images[t.anchor], self.data.images[t.positive], self.data.images[t.negative]]);
                if let Some(s) = t.similar {
                    images.push(self.data.images[s]);
                }
            }
            // Working precision: the audit only tracks the trend of the training objective.
            let emb: Vec<Vec<f64>> = self
                .net
                .embed(&images)?
                .iter()
                .map(|e| self.cfg.pairwise_norm.apply(&e.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect();
            let mut row = 0;
            for t in chunk {
                let (a, p, n) = (&emb[row], &emb[row + 1], &emb[row + 2]);
                let s = t.similar.map(|_| &emb[row + 3]);
                row += if t.similar.is_some() { 4 } else { 3 };
                let single = PairBatch {
                    anchors: vec![a.clone()],
                    positives: vec![p.clone()],
                    negatives: vec![n.clone()],
                    similars: s.map(|v| vec![v.clone()]),
                };
                if loss.evaluate(&single)?.loss == 0.0 {
                    ok += 1;
                }
            }
        }
        Ok(Some(ok as f64 / self.audit.len() as f64))
    }

    /// One SGD step; returns (total, base, pairwise) loss.
    fn step(&mut self) -> Result<(f64, f64, f64)> {
        let cfg = &self.cfg;
        let mut order: Vec<usize> = Vec::new();
        let mut episode: Option<(Vec<Vec<usize>>, Vec<(usize, usize)>)> = None;
        match cfg.pretrain {
            PretrainMode::Episodic => {
                let ep = Episode::sample(&self.data, &self.classes, cfg.n_way, cfg.train_shots, cfg.train_queries, &mut self.rng)?;
                let (rows, support, query_src) = episode_rows(&ep);
                let query = query_src
                    .into_iter()
                    .map(|(row, q)| (row, ep.ways.iter().position(|&w| w == self.data.labels[q]).unwrap()))
                    .collect();
                order = rows;
                episode = Some((support, query));
            }
            PretrainMode::Classifier => {
                let by_class = self.data.by_class();
                for _ in 0..cfg.batch_size {
                    let c = self.classes.choose(&mut self.rng).unwrap();
                    order.push(*by_class[c].choose(&mut self.rng).unwrap());
                }
            }
        }
        let n_base = order.len();
        let mut tuples = Vec::new();
        if self.sampler.is_some() && cfg.lambda > 0.0 {
            let mut rng = self.tuple_rng.clone();
            for _ in 0..cfg.tuples_per_step {
                tuples.push(self.draw_tuple(&mut rng)?);
            }
            self.tuple_rng = rng;
        }
        for t in &tuples {
            order.extend([t.anchor, t.positive, t.negative]);
            if let Some(s) = t.similar {
                order.push(s);
            }
        }

        let images: Vec<&SpectrogramImage> = order.iter().map(|&i| self.data.images[i]).collect();
        let fwd = self.net.forward(&images)?;
        let dim = self.net.embed_dim();
        let mut d_emb = vec![vec![0f32; dim]; order.len()];
        let mut base = 0f64;

        if let Some((support, query)) = &episode {
            let base_emb = &fwd.embeddings[..n_base];
            let (l, g) = prototype_loss(base_emb, support, query)?;
            base += l as f64;
            d_emb[..n_base].clone_from_slice(&g);
        }
        let mut d_logits = None;
        if let Some(logits) = &fwd.logits {
            let k = logits[0].len();
            let mut dl = vec![vec![0f32; k]; order.len()];
            let scale = 1.0 / n_base as f32;
            for r in 0..n_base {
                let (l, g) = cross_entropy(&logits[r], self.data.labels[order[r]] as usize)?;
                base += (l * scale) as f64;
                dl[r] = g.into_iter().map(|v| v * scale).collect();
            }
            d_logits = Some(dl);
        }

        let mut pair = 0f64;
        if let (Some(loss), false) = (cfg.pairwise(), tuples.is_empty()) {
            let norm = cfg.pairwise_norm;
            let mut batch = PairBatch::<f32>::default();
            let quad = loss.needs_similar();
            if quad {
                batch.similars = Some(Vec::new());
            }
            let mut rows = Vec::new();
            let mut r = n_base;
            for _ in &tuples {
                let width = if quad { 4 } else { 3 };
                batch.anchors.push(norm.apply(&fwd.embeddings[r]));
                batch.positives.push(norm.apply(&fwd.embeddings[r + 1]));
                batch.negatives.push(norm.apply(&fwd.embeddings[r + 2]));
                if quad {
                    batch.similars.as_mut().unwrap().push(norm.apply(&fwd.embeddings[r + 3]));
                }
                rows.push(r);
                r += width;
            }
            let out = loss.evaluate(&batch)?;
            let scale = cfg.lambda as f32 / tuples.len() as f32;
            pair = (out.loss * scale) as f64;
            for (t, &r) in rows.iter().enumerate() {
                let mut grads = vec![(r, &out.d_anchors[t]), (r + 1, &out.d_positives[t]), (r + 2, &out.d_negatives[t])];
                if let Some(ds) = &out.d_similars {
                    grads.push((r + 3, &ds[t]));
                }
                for (row, g) in grads {
                    let scaled: Vec<f32> = g.iter().map(|v| v * scale).collect();
                    d_emb[row] = norm.backward(&fwd.embeddings[row], &scaled);
                }
            }
        }

        let total = base + pair;
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {} (base {base}, pairwise {pair})",
                self.epoch
            )));
        }
        let grad: GradientVector<f32> = self.net.backward(&fwd, &d_emb, d_logits.as_deref())?;
        sgd_step(&mut self.net.params, &grad, cfg.lr as f32, cfg.decay as f32, &self.bias_mask)?;
        Ok((total, base, pair))
    }

    /// Runs one epoch. On error the network keeps its last finite parameters.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        self.refresh_fallback()?;
        let (mut total, mut base, mut pair) = (0.0, 0.0, 0.0);
        for _ in 0..self.cfg.episodes_per_epoch {
            let (t, b, p) = self.step()?;
            total += t;
            base += b;
            pair += p;
        }
        let n = self.cfg.episodes_per_epoch as f64;
        let log = EpochLog {
            epoch: self.epoch,
            loss: total / n,
            base_loss: base / n,
            pairwise_loss: pair / n,
            satisfaction: self.satisfaction()?,
        };
        log::debug!("epoch {} loss {:.5}", log.epoch, log.loss);
        self.epoch += 1;
        Ok(log)
    }

    pub fn run(mut self) -> Result<TrainRun> {
        let initial_satisfaction = self.satisfaction()?;
        let mut log = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            log.push(self.run_epoch()?);
        }
        Ok(TrainRun { net: self.net, log, initial_satisfaction })
    }
}

/// Trains a fresh network for `cfg.epochs` epochs.
pub fn train(data: &Dataset, arch: ArchConfig, cfg: &TrainConfig, map: &SimilarityMap) -> Result<TrainRun> {
    Trainer::new(data.clone(), arch, cfg.clone(), map)?.run()
}

/// `m` members seeded `cfg.seed + i`; the architecture must carry a classifier head.
pub fn train_ensemble(data: &Dataset, arch: ArchConfig, cfg: &TrainConfig, m: usize, map: &SimilarityMap) -> Result<Ensemble> {
    ensure!(m >= 1, "ensemble size must be positive");
    ensure!(arch.num_classes.is_some(), "ensemble members need a classifier head");
    let mut members = Vec::with_capacity(m);
    for i in 0..m {
        let member_cfg = TrainConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
        members.push(train(data, arch.clone(), &member_cfg, map)?.net);
    }
    Ensemble::trained(members)
}

/// Extends `base` with prototypes of the unseen classes in `support`, using
/// the first `k` samples of each. The backbone is never modified.
pub fn adapt<T: crate::Scalar>(
    net: &EmbeddingNetwork<T>,
    base: &PrototypeClassifier,
    support: &Dataset,
    k: usize,
) -> Result<PrototypeClassifier> {
    ensure!(k >= 1, "k must be at least 1");
    let by_class = support.by_class();
    ensure!(!by_class.is_empty(), "adaptation support is empty");
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (&c, idx) in &by_class {
        ensure!(!base.prototypes.contains_key(&c), "class {c} is already known to the classifier");
        ensure!(idx.len() >= k, "class {c} has {} support samples, k = {k}", idx.len());
        for &i in &idx[..k] {
            images.push(support.images[i]);
            labels.push(c);
        }
    }
    let new = compute_prototypes(net, &Dataset { images, labels })?;
    let mut prototypes: BTreeMap<u8, Vec<f64>> = base.prototypes.clone();
    prototypes.extend(new.prototypes);
    Ok(PrototypeClassifier { prototypes })
}
