//! Pipeline stages. Each stage verifies its upstream manifests, writes its
//! artifacts into the run directory and seals a manifest linking back.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gnss_fsl::corpus::{CorpusProfile, LabeledCorpus, MANIFEST_FILE, PROFILE_FILE};
use gnss_fsl::fsl::{
    adapt, build_similarity_map, compute_prototypes, confusion_uncertainty, evaluate_fsl, train, train_ensemble,
    AdaptationProtocol, Dataset, LossKind, PretrainMode, PrototypeClassifier, SimilarityMap, Split, TrainConfig,
    TrainRun, Trainer,
};
use gnss_fsl::metrics::{confusion, tsne, MetricReport};
use gnss_fsl::nn::{load_checkpoint, save_checkpoint, AdaptationHead, EmbeddingNetwork};
use gnss_fsl::uncertainty::{decompose_uncertainty, Ensemble};
use gnss_fsl::NUM_CLASSES;

use crate::config::{MapSource, PipelineConfig};
use crate::error::{CliError, Result};
use crate::manifest::{corpus_hash, manifest_file, read_text, write_bytes, RunManifest};

pub const GEN_DATA: &str = "gen-data";
pub const ENSEMBLE: &str = "ensemble";
pub const MINE: &str = "mine";
pub const TRAIN: &str = "train";
pub const ADAPT: &str = "adapt";
pub const EVAL: &str = "eval";
pub const EMBED: &str = "embed";
pub const SWEEP: &str = "sweep";

pub const MODEL_FILE: &str = "model.gnssnet";
pub const ADAPTED_FILE: &str = "adapted.gnssnet";
pub const PROTOTYPES_FILE: &str = "prototypes.json";
pub const SIMILARITY_FILE: &str = "similarity_map.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const UNCERTAINTY_FILE: &str = "uncertainty.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TSNE_FILE: &str = "tsne.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Locations shared by every stage after corpus generation.
#[derive(Debug, Clone)]
pub struct StageContext {
    pub corpus: PathBuf,
    pub run: PathBuf,
    pub allow_config_change: bool,
}

/// Verified corpus plus the index partition used by every learning stage.
pub struct LoadedCorpus {
    pub corpus: LabeledCorpus,
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub protocol: AdaptationProtocol,
}

impl LoadedCorpus {
    pub fn dataset(&self, idx: &[usize]) -> Dataset<'_> {
        Dataset {
            images: idx.iter().map(|&i| &self.corpus.images[i]).collect(),
            labels: idx.iter().map(|&i| self.corpus.records[i].label).collect(),
        }
    }
}

fn since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Writes a fresh corpus to `out`.
pub fn gen_data(out: &Path, profile: &str, seed: u64, counts: Option<Vec<usize>>) -> Result<RunManifest> {
    let t = Instant::now();
    let mut profile = CorpusProfile::by_name(profile)?;
    if let Some(c) = counts {
        if c.len() != NUM_CLASSES {
            return Err(CliError::Config(format!("--counts needs {NUM_CLASSES} values, got {}", c.len())));
        }
        if let Some(&low) = c.iter().find(|&&n| n < gnss_fsl::corpus::DESK_MIN_PER_CLASS) {
            return Err(CliError::Config(format!(
                "class count {low} is below the minimum {}",
                gnss_fsl::corpus::DESK_MIN_PER_CLASS
            )));
        }
        profile.counts = c;
    }
    let corpus = LabeledCorpus::synthesize(&profile, seed)?;
    corpus.write(out).map_err(|e| match e {
        gnss_fsl::Error::Io(source) => CliError::io(out, source),
        other => other.into(),
    })?;
    let mut m = RunManifest::new(GEN_DATA, None, seed, corpus_hash(out)?);
    m.outputs.push(RunManifest::artifact(out, MANIFEST_FILE)?);
    m.outputs.push(RunManifest::artifact(out, PROFILE_FILE)?);
    m.timings_ms.insert("total".into(), since(t));
    log::info!("wrote {} records to {}", corpus.len(), out.display());
    m.write(out)
}

/// Reads and verifies the corpus: manifest chain plus recomputed content hash.
pub fn load_corpus(ctx: &StageContext, cfg: &PipelineConfig, stage: &str) -> Result<LoadedCorpus> {
    let manifest_path = ctx.corpus.join(manifest_file(GEN_DATA));
    let manifest = RunManifest::load(&manifest_path, stage)?;
    if corpus_hash(&ctx.corpus)? != manifest.corpus_hash {
        return Err(CliError::Tampered { path: ctx.corpus.clone() });
    }
    let corpus = LabeledCorpus::read(&ctx.corpus)?;
    let splits: Vec<Split> = corpus.records.iter().map(|r| r.split).collect();
    let protocol = AdaptationProtocol::new(&corpus.labels(), &splits, &cfg.adaptation_classes, cfg.k_shot)?;
    Ok(LoadedCorpus { corpus, manifest, manifest_path, protocol })
}

/// Loads an upstream stage manifest from the run directory and checks its config.
fn upstream(ctx: &StageContext, cfg: &PipelineConfig, name: &str, consumer: &str) -> Result<(RunManifest, PathBuf)> {
    let path = ctx.run.join(manifest_file(name));
    let m = RunManifest::load(&path, consumer)?;
    m.check_config(cfg, ctx.allow_config_change)?;
    Ok((m, path))
}

fn stage_manifest(stage: &str, cfg: &PipelineConfig, data: &LoadedCorpus) -> RunManifest {
    let mut m = RunManifest::new(stage, Some(cfg), data.manifest.master_seed, data.manifest.corpus_hash.clone());
    m.link(&data.manifest, &data.manifest_path);
    m
}

fn image_dims(data: &LoadedCorpus) -> (usize, usize) {
    (data.corpus.profile.image_height, data.corpus.profile.image_width)
}

fn load_net(ctx: &StageContext, stage: &str, file: &str) -> Result<EmbeddingNetwork<f32>> {
    let path = ctx.run.join(file);
    if !path.exists() {
        return Err(CliError::MissingArtifact { stage: stage.to_string(), path });
    }
    Ok(load_checkpoint(&path)?)
}

fn save_net(ctx: &StageContext, file: &str, net: &EmbeddingNetwork<f32>) -> Result<()> {
    let path = ctx.run.join(file);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(save_checkpoint(&path, net)?)
}

fn member_file(i: usize) -> String {
    format!("ensemble/member_{i:02}.gnssnet")
}

/// Trains `ensemble_size` classifiers with seeds `seed + i` on the base classes.
pub fn ensemble(ctx: &StageContext, cfg: &PipelineConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let data = load_corpus(ctx, cfg, ENSEMBLE)?;
    let base = data.dataset(&data.protocol.base_train);
    let (h, w) = image_dims(&data);
    let ens = train_ensemble(&base, cfg.arch(h, w, true), &cfg.ensemble_train_config(), cfg.ensemble_size, &SimilarityMap::default())?;
    let mut m = stage_manifest(ENSEMBLE, cfg, &data);
    for (i, member) in ens.members().iter().enumerate() {
        save_net(ctx, &member_file(i), member)?;
        m.checkpoints.push(RunManifest::artifact(&ctx.run, &member_file(i))?);
    }
    m.timings_ms.insert("total".into(), since(t));
    m.write(&ctx.run)
}

fn load_ensemble(ctx: &StageContext, manifest: &RunManifest) -> Result<Ensemble> {
    let members = manifest
        .checkpoints
        .iter()
        .map(|a| load_net(ctx, MINE, &a.path))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble::trained(members)?)
}

/// Mines the similarity map from ensemble uncertainty on the base training data.
pub fn mine(ctx: &StageContext, cfg: &PipelineConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let data = load_corpus(ctx, cfg, MINE)?;
    let (ens_manifest, ens_path) = upstream(ctx, cfg, ENSEMBLE, MINE)?;
    let ens = load_ensemble(ctx, &ens_manifest)?;
    let idx = &data.protocol.base_train;
    let base = data.dataset(idx);
    let map = build_similarity_map(&ens, &base, cfg.mining_quantile, cfg.mining_floor)?;
    write_bytes(&ctx.run.join(SIMILARITY_FILE), map.to_json()?.as_bytes())?;

    let preds = ens.predict_batch(&base.images)?;
    let mut csv = String::from("sample_id,true_label,predicted_label,aleatoric_trace,epistemic_trace\n");
    for ((&i, &label), softmax) in idx.iter().zip(&base.labels).zip(&preds) {
        let r = decompose_uncertainty(softmax)?;
        writeln!(csv, "{i},{label},{},{:.9},{:.9}", r.predicted_class(), r.aleatoric_trace(), r.epistemic_trace()).unwrap();
    }
    write_bytes(&ctx.run.join(UNCERTAINTY_FILE), csv.as_bytes())?;

    let mut cells = String::from("true_class,confused_with,mean_epistemic_trace\n");
    for ((c, o), v) in confusion_uncertainty(&ens, &base)? {
        writeln!(cells, "{c},{o},{v:.9}").unwrap();
    }
    write_bytes(&ctx.run.join("mining_cells.csv"), cells.as_bytes())?;

    let mut m = stage_manifest(MINE, cfg, &data);
    m.link(&ens_manifest, &ens_path);
    for f in [SIMILARITY_FILE, UNCERTAINTY_FILE, "mining_cells.csv"] {
        m.outputs.push(RunManifest::artifact(&ctx.run, f)?);
    }
    m.timings_ms.insert("total".into(), since(t));
    m.write(&ctx.run)
}

fn train_log_csv(run: &TrainRun) -> String {
    let mut csv = String::from("epoch,loss,base_loss,pairwise_loss,satisfaction\n");
    for e in &run.log {
        let sat = e.satisfaction.map_or(String::new(), |s| format!("{s:.6}"));
        writeln!(csv, "{},{:.9},{:.9},{:.9},{sat}", e.epoch, e.loss, e.base_loss, e.pairwise_loss).unwrap();
    }
    csv
}

/// Pre-trains the embedding network on the base classes.
pub fn train_stage(ctx: &StageContext, cfg: &PipelineConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let data = load_corpus(ctx, cfg, TRAIN)?;
    let base_classes = cfg.base_classes();
    let mut m = stage_manifest(TRAIN, cfg, &data);
    let map = match cfg.similarity_map {
        MapSource::PaperFixture => SimilarityMap::paper_fixture(),
        MapSource::Computed => {
            let (mine_manifest, mine_path) = upstream(ctx, cfg, MINE, TRAIN)?;
            m.link(&mine_manifest, &mine_path);
            SimilarityMap::from_json(&read_text(&ctx.run.join(SIMILARITY_FILE))?)?
        }
    }
    .restrict_to(&base_classes);
    let base = data.dataset(&data.protocol.base_train);
    let (h, w) = image_dims(&data);
    let run = train(&base, cfg.arch(h, w, cfg.pretrain == PretrainMode::Classifier), &cfg.train_config(), &map)?;
    save_net(ctx, MODEL_FILE, &run.net)?;
    write_bytes(&ctx.run.join(TRAIN_LOG_FILE), train_log_csv(&run).as_bytes())?;
    m.checkpoints.push(RunManifest::artifact(&ctx.run, MODEL_FILE)?);
    m.outputs.push(RunManifest::artifact(&ctx.run, TRAIN_LOG_FILE)?);
    m.timings_ms.insert("total".into(), since(t));
    m.write(&ctx.run)
}

/// Episodic config for post-training the adaptation head on a `k`-shot support set.
fn post_train_config(cfg: &PipelineConfig) -> TrainConfig {
    let shots = (cfg.k_shot / 2).max(1);
    TrainConfig {
        loss: LossKind::Ce,
        pretrain: PretrainMode::Episodic,
        epochs: cfg.post_train_epochs,
        n_way: cfg.adaptation_classes.len(),
        train_shots: shots,
        train_queries: cfg.k_shot - shots,
        audit_size: 0,
        ..cfg.train_config()
    }
}

/// Adds the adaptation classes: optional head post-training, then prototypes.
pub fn adapt_stage(ctx: &StageContext, cfg: &PipelineConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let data = load_corpus(ctx, cfg, ADAPT)?;
    let (train_manifest, train_path) = upstream(ctx, cfg, TRAIN, ADAPT)?;
    let mut net = load_net(ctx, ADAPT, MODEL_FILE)?;
    let support = data.dataset(&data.protocol.support);
    if cfg.post_train_epochs > 0 {
        if cfg.k_shot < 2 {
            return Err(CliError::Config("head post-training needs k_shot >= 2".into()));
        }
        let channels = *cfg.channels.last().expect("validated channels");
        let head = net.with_adaptation_head(AdaptationHead { channels, post_train: true }, cfg.seed)?;
        net = Trainer::from_net(support.clone(), head, post_train_config(cfg), &SimilarityMap::default())?.run()?.net;
    }
    let base = compute_prototypes(&net, &data.dataset(&data.protocol.base_train))?;
    let classifier = adapt(&net, &base, &support, cfg.k_shot)?;
    save_net(ctx, ADAPTED_FILE, &net)?;
    let protos = serde_json::to_string_pretty(&classifier).expect("prototypes serialize");
    write_bytes(&ctx.run.join(PROTOTYPES_FILE), protos.as_bytes())?;

    let mut m = stage_manifest(ADAPT, cfg, &data);
    m.link(&train_manifest, &train_path);
    m.checkpoints.push(RunManifest::artifact(&ctx.run, ADAPTED_FILE)?);
    m.outputs.push(RunManifest::artifact(&ctx.run, PROTOTYPES_FILE)?);
    m.timings_ms.insert("total".into(), since(t));
    m.write(&ctx.run)
}

/// Scores the adapted classifier on the query set.
pub fn eval_stage(ctx: &StageContext, cfg: &PipelineConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let data = load_corpus(ctx, cfg, EVAL)?;
    let (adapt_manifest, adapt_path) = upstream(ctx, cfg, ADAPT, EVAL)?;
    let net = load_net(ctx, EVAL, ADAPTED_FILE)?;
    let classifier: PrototypeClassifier = serde_json::from_str(&read_text(&ctx.run.join(PROTOTYPES_FILE))?)
        .map_err(|e| CliError::Json { path: ctx.run.join(PROTOTYPES_FILE), source: e })?;
    let query = data.dataset(&data.protocol.query);
    let predictions = classifier.predict(&net, &query.images)?;
    let truth: Vec<usize> = query.labels.iter().map(|&l| l as usize).collect();
    let pred: Vec<usize> = predictions.iter().map(|&p| p as usize).collect();
    let cm = confusion(&truth, &pred, NUM_CLASSES)?;
    let report = MetricReport::from_confusion(&cm);
    let adapt_classes: Vec<usize> = cfg.adaptation_classes.iter().map(|&c| c as usize).collect();
    let mut metrics = report.to_csv();
    writeln!(metrics, "adaptation_accuracy,{:.6}", cm.mean_recall(&adapt_classes)).unwrap();
    write_bytes(&ctx.run.join(METRICS_FILE), metrics.as_bytes())?;
    write_bytes(&ctx.run.join(CONFUSION_FILE), cm.to_csv().as_bytes())?;
    let mut csv = String::from("sample_id,true_label,predicted_label\n");
    for ((&i, &l), &p) in data.protocol.query.iter().zip(&query.labels).zip(&predictions) {
        writeln!(csv, "{i},{l},{p}").unwrap();
    }
    write_bytes(&ctx.run.join(PREDICTIONS_FILE), csv.as_bytes())?;

    let mut m = stage_manifest(EVAL, cfg, &data);
    m.link(&adapt_manifest, &adapt_path);
    for f in [METRICS_FILE, CONFUSION_FILE, PREDICTIONS_FILE] {
        m.outputs.push(RunManifest::artifact(&ctx.run, f)?);
    }
    m.timings_ms.insert("total".into(), since(t));
    m.write(&ctx.run)
}

/// Evenly strided subset of at most `max` indices.
fn stride_subset(idx: &[usize], max: usize) -> Vec<usize> {
    if idx.len() <= max {
        return idx.to_vec();
    }
    (0..max).map(|i| idx[i * idx.len() / max]).collect()
}

/// Projects query embeddings of the adapted network to 2-D.
pub fn embed_stage(ctx: &StageContext, cfg: &PipelineConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let data = load_corpus(ctx, cfg, EMBED)?;
    let (adapt_manifest, adapt_path) = upstream(ctx, cfg, ADAPT, EMBED)?;
    let net = load_net(ctx, EMBED, ADAPTED_FILE)?;
    let idx = stride_subset(&data.protocol.query, cfg.tsne_max_points);
    let subset = data.dataset(&idx);
    let emb = gnss_fsl::fsl::embed_f64(&net, &subset.images)?;
    let result = tsne(&emb, &cfg.tsne_config())?;
    let labels: Vec<usize> = subset.labels.iter().map(|&l| l as usize).collect();
    write_bytes(&ctx.run.join(TSNE_FILE), result.to_csv(&labels)?.as_bytes())?;
    log::info!("t-SNE KL {:.4} -> {:.4}", result.kl_initial, result.kl_final);

    let mut m = stage_manifest(EMBED, cfg, &data);
    m.link(&adapt_manifest, &adapt_path);
    m.outputs.push(RunManifest::artifact(&ctx.run, TSNE_FILE)?);
    m.timings_ms.insert("total".into(), since(t));
    m.write(&ctx.run)
}

/// Every margin setting of the evaluation grid, trained and scored in turn.
pub fn sweep_settings(cfg: &PipelineConfig) -> Vec<PipelineConfig> {
    let mut out = Vec::new();
    for a in gnss_fsl::losses::TRIPLET_MARGIN_GRID {
        out.push(PipelineConfig { loss: LossKind::Triplet, alpha: a, ..cfg.clone() });
    }
    for (a1, a2) in gnss_fsl::losses::QUADRUPLET_MARGIN_GRID {
        out.push(PipelineConfig { loss: LossKind::Quadruplet, alpha1: a1, alpha2: a2, ..cfg.clone() });
    }
    out
}

/// Margin sweep: one row per setting with the query-set scores.
pub fn sweep_stage(ctx: &StageContext, cfg: &PipelineConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let data = load_corpus(ctx, cfg, SWEEP)?;
    let base = data.dataset(&data.protocol.base_train);
    let support = data.dataset(&data.protocol.support);
    let query = data.dataset(&data.protocol.query);
    let (h, w) = image_dims(&data);
    let map = SimilarityMap::paper_fixture().restrict_to(&cfg.base_classes());
    let mut csv = String::from("loss,alpha1,alpha2,accuracy,macro_f1,macro_f2,adaptation_accuracy\n");
    for s in sweep_settings(cfg) {
        let run = train(&base, s.arch(h, w, s.pretrain == PretrainMode::Classifier), &s.train_config(), &map)?;
        let ev = evaluate_fsl(&run.net, &base, &support, s.k_shot, &query)?;
        let (a1, a2) = match s.loss {
            LossKind::Quadruplet => (s.alpha1, s.alpha2),
            _ => (s.alpha, f64::NAN),
        };
        let loss = serde_json::to_value(s.loss).expect("loss kind serializes");
        let a2 = if a2.is_nan() { String::new() } else { format!("{a2}") };
        writeln!(
            csv,
            "{},{a1},{a2},{:.6},{:.6},{:.6},{:.6}",
            loss.as_str().unwrap_or_default(),
            ev.report.accuracy,
            ev.report.macro_f1,
            ev.report.macro_f2,
            ev.adaptation_accuracy
        )
        .unwrap();
    }
    write_bytes(&ctx.run.join(SWEEP_FILE), csv.as_bytes())?;
    let mut m = stage_manifest(SWEEP, cfg, &data);
    m.outputs.push(RunManifest::artifact(&ctx.run, SWEEP_FILE)?);
    m.timings_ms.insert("total".into(), since(t));
    m.write(&ctx.run)
}

/// The learning chain after corpus generation. The ensemble and mining
/// stages only run when the similarity map is computed.
pub fn run_chain(ctx: &StageContext, cfg: &PipelineConfig, with_embed: bool) -> Result<Vec<RunManifest>> {
    let mut out = Vec::new();
    if cfg.similarity_map == MapSource::Computed {
        out.push(ensemble(ctx, cfg)?);
        out.push(mine(ctx, cfg)?);
    }
    out.push(train_stage(ctx, cfg)?);
    out.push(adapt_stage(ctx, cfg)?);
    out.push(eval_stage(ctx, cfg)?);
    if with_embed {
        out.push(embed_stage(ctx, cfg)?);
    }
    Ok(out)
}
