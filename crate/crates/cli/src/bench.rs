//! Seeded PN-versus-quadruplet comparison on the benchmark corpus.
//!
//! Per seed, one network is pre-trained with cross-entropy for
//! `shared_epochs`; both models then continue from that checkpoint on the
//! same base-batch stream, the quadruplet model with the pairwise term added.
//! Scores are computed on the adaptation query set of [`AdaptationProtocol`].

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use gnss_fsl::corpus::{CorpusProfile, LabeledCorpus};
use gnss_fsl::fsl::{
    evaluate_fsl, train, AdaptationProtocol, Dataset, LossKind, PretrainMode, SimilarityMap, Split, Trainer,
    DEFAULT_ADAPTATION_CLASSES,
};
use gnss_fsl::nn::{EmbeddingNetwork, EmbeddingNorm};
use gnss_fsl::seed::derive_seed;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const BENCH_CORPUS_SEED: u64 = 42;
pub const PN_ACCURACY_TARGET: f64 = 0.70;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub corpus_seed: u64,
    pub first_seed: u64,
    pub seeds: u64,
    /// Cross-entropy epochs common to both models, run with the `pn` config.
    pub shared_epochs: usize,
    pub pn: PipelineConfig,
    pub quadruplet: PipelineConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let pn = PipelineConfig {
            loss: LossKind::Ce,
            pretrain: PretrainMode::Classifier,
            epochs: 130,
            lr: 0.01,
            audit_size: 0,
            adaptation_classes: DEFAULT_ADAPTATION_CLASSES.to_vec(),
            k_shot: 5,
            ..PipelineConfig::default()
        };
        let quadruplet = PipelineConfig {
            loss: LossKind::Quadruplet,
            alpha1: 2.0,
            alpha2: 5.0,
            lambda: 0.1,
            pairwise_norm: EmbeddingNorm::None,
            ..pn.clone()
        };
        Self { corpus_seed: BENCH_CORPUS_SEED, first_seed: 0, seeds: 5, shared_epochs: 100, pn, quadruplet }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelScore {
    /// Mean recall over the adaptation classes.
    pub adaptation_accuracy: f64,
    pub macro_f2: f64,
    pub accuracy: f64,
    /// Includes the shared prefix.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub pn: ModelScore,
    pub quadruplet: ModelScore,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub corpus_size: usize,
    pub results: Vec<SeedResult>,
    pub elapsed: Duration,
}

impl BenchReport {
    pub fn pn_mean_adaptation_accuracy(&self) -> f64 {
        self.results.iter().map(|r| r.pn.adaptation_accuracy).sum::<f64>() / self.results.len().max(1) as f64
    }

    /// Seeds where the quadruplet model's macro F2 is at least the PN baseline's.
    pub fn quadruplet_wins(&self) -> usize {
        self.results.iter().filter(|r| r.quadruplet.macro_f2 >= r.pn.macro_f2).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,model,adaptation_accuracy,macro_f2,accuracy\n");
        for r in &self.results {
            for (name, s) in [("pn", &r.pn), ("quadruplet", &r.quadruplet)] {
                writeln!(out, "{},{name},{:.6},{:.6},{:.6}", r.seed, s.adaptation_accuracy, s.macro_f2, s.accuracy).unwrap();
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            writeln!(
                out,
                "seed {}: pn acc {:.3} f2 {:.3} ({:.0}s) | quadruplet acc {:.3} f2 {:.3} ({:.0}s)",
                r.seed,
                r.pn.adaptation_accuracy,
                r.pn.macro_f2,
                r.pn.seconds,
                r.quadruplet.adaptation_accuracy,
                r.quadruplet.macro_f2,
                r.quadruplet.seconds
            )
            .unwrap();
        }
        writeln!(
            out,
            "corpus {} images; pn mean adaptation accuracy {:.3}; quadruplet >= pn macro F2 in {}/{} seeds; {:.0}s",
            self.corpus_size,
            self.pn_mean_adaptation_accuracy(),
            self.quadruplet_wins(),
            self.results.len(),
            self.elapsed.as_secs_f64()
        )
        .unwrap();
        out
    }
}

struct RoleData<'a> {
    base: Dataset<'a>,
    support: Dataset<'a>,
    query: Dataset<'a>,
}

fn datasets<'a>(corpus: &'a LabeledCorpus, p: &AdaptationProtocol) -> RoleData<'a> {
    let ds = |idx: &[usize]| Dataset {
        images: idx.iter().map(|&i| &corpus.images[i]).collect(),
        labels: idx.iter().map(|&i| corpus.records[i].label).collect(),
    };
    RoleData { base: ds(&p.base_train), support: ds(&p.support), query: ds(&p.query) }
}

fn map_for(cfg: &PipelineConfig) -> SimilarityMap {
    SimilarityMap::paper_fixture().restrict_to(&cfg.base_classes())
}

/// Continues `start` for the epochs `cfg` has beyond the shared prefix, then scores it.
fn finish(
    cfg: &PipelineConfig,
    seed: u64,
    start: &EmbeddingNetwork<f32>,
    shared: usize,
    data: &RoleData,
    prefix_seconds: f64,
) -> Result<ModelScore> {
    let t = Instant::now();
    let train_cfg = gnss_fsl::fsl::TrainConfig {
        epochs: cfg.epochs - shared,
        seed: derive_seed(seed, 1),
        ..cfg.train_config()
    };
    let run = Trainer::from_net(data.base.clone(), start.clone(), train_cfg, &map_for(cfg))?.run()?;
    let ev = evaluate_fsl(&run.net, &data.base, &data.support, cfg.k_shot, &data.query)?;
    Ok(ModelScore {
        adaptation_accuracy: ev.adaptation_accuracy,
        macro_f2: ev.report.macro_f2,
        accuracy: ev.report.accuracy,
        seconds: prefix_seconds + t.elapsed().as_secs_f64(),
    })
}

fn run_seed(cfg: &BenchConfig, seed: u64, corpus: &LabeledCorpus, data: &RoleData) -> Result<SeedResult> {
    let t = Instant::now();
    let pn_cfg = PipelineConfig { seed, epochs: cfg.shared_epochs, ..cfg.pn.clone() };
    let (h, w) = (corpus.profile.image_height, corpus.profile.image_width);
    let arch = pn_cfg.arch(h, w, true);
    let prefix = train(&data.base, arch, &pn_cfg.train_config(), &map_for(&pn_cfg))?.net;
    let prefix_seconds = t.elapsed().as_secs_f64();
    Ok(SeedResult {
        seed,
        pn: finish(&cfg.pn, seed, &prefix, cfg.shared_epochs, data, prefix_seconds)?,
        quadruplet: finish(&cfg.quadruplet, seed, &prefix, cfg.shared_epochs, data, prefix_seconds)?,
    })
}

fn validate(cfg: &BenchConfig) -> Result<()> {
    cfg.pn.validate()?;
    cfg.quadruplet.validate()?;
    let bad = |m: &str| Err(CliError::Config(m.to_string()));
    if cfg.pn.pretrain != PretrainMode::Classifier || cfg.quadruplet.pretrain != PretrainMode::Classifier {
        return bad("the benchmark pre-trains through the classifier head");
    }
    if cfg.shared_epochs > cfg.pn.epochs || cfg.shared_epochs > cfg.quadruplet.epochs {
        return bad("shared_epochs exceeds a model's epoch count");
    }
    let arch = |c: &PipelineConfig| (c.channels.clone(), c.embed_dim, c.adaptation_classes.clone(), c.k_shot);
    if arch(&cfg.pn) != arch(&cfg.quadruplet) {
        return bad("both models need the same architecture, adaptation classes and k");
    }
    Ok(())
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    let t = Instant::now();
    validate(cfg)?;
    let corpus = LabeledCorpus::synthesize(&CorpusProfile::bench(), cfg.corpus_seed)?;
    let splits: Vec<Split> = corpus.records.iter().map(|r| r.split).collect();
    let protocol = AdaptationProtocol::new(&corpus.labels(), &splits, &cfg.pn.adaptation_classes, cfg.pn.k_shot)?;
    let data = datasets(&corpus, &protocol);
    let mut results = Vec::new();
    for seed in cfg.first_seed..cfg.first_seed + cfg.seeds {
        let r = run_seed(cfg, seed, &corpus, &data)?;
        log::info!("seed {seed}: pn f2 {:.3}, quadruplet f2 {:.3}", r.pn.macro_f2, r.quadruplet.macro_f2);
        results.push(r);
    }
    Ok(BenchReport { corpus_size: corpus.len(), results, elapsed: t.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(f2: f64, acc: f64) -> ModelScore {
        ModelScore { adaptation_accuracy: acc, macro_f2: f2, accuracy: acc, seconds: 0.0 }
    }

    #[test]
    fn report_counts_ties_as_wins() {
        let results = vec![
            SeedResult { seed: 0, pn: score(0.5, 0.6), quadruplet: score(0.5, 0.7) },
            SeedResult { seed: 1, pn: score(0.6, 0.8), quadruplet: score(0.4, 0.7) },
        ];
        let r = BenchReport { corpus_size: 10, results, elapsed: Duration::ZERO };
        assert_eq!(r.quadruplet_wins(), 1);
        assert!((r.pn_mean_adaptation_accuracy() - 0.7).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 5);
    }

    #[test]
    fn default_is_valid_and_inconsistent_configs_are_rejected() {
        let cfg = BenchConfig::default();
        validate(&cfg).unwrap();
        let long_prefix = BenchConfig { shared_epochs: cfg.pn.epochs + 1, ..cfg.clone() };
        assert!(validate(&long_prefix).is_err());
        let mut other_arch = cfg.clone();
        other_arch.quadruplet.channels = vec![4];
        assert!(validate(&other_arch).is_err());
        let mut episodic = cfg;
        episodic.pn.pretrain = PretrainMode::Episodic;
        assert!(validate(&episodic).is_err());
    }
}
