use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gnss_fsl_cli::bench::{run_benchmark, BenchConfig};
use gnss_fsl_cli::{stages, PipelineConfig, Result, StageContext};

#[derive(Parser)]
#[command(name = "gnss-fsl", version, about = "Few-shot GNSS interference classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory holding checkpoints, reports and stage manifests.
    #[arg(long)]
    run: PathBuf,
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Proceed even if the config differs from the upstream stage's.
    #[arg(long)]
    allow_config_change: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labelled spectrogram corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Eleven comma-separated per-class counts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Train the deep ensemble used for uncertainty mining.
    Ensemble(StageArgs),
    /// Mine the similarity map from ensemble uncertainty.
    Mine(StageArgs),
    /// Pre-train the embedding network on the base classes.
    Train(StageArgs),
    /// Add the adaptation classes from k-shot support samples.
    Adapt(StageArgs),
    /// Score the adapted classifier on the query set.
    Eval(StageArgs),
    /// Write a t-SNE projection of query embeddings.
    Embed(StageArgs),
    /// Train and score every margin setting of the evaluation grid.
    Sweep(StageArgs),
    /// Run the whole chain after gen-data.
    Run {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        embed: bool,
    },
    /// Seeded PN versus quadruplet comparison on the benchmark corpus.
    Bench {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Optional CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default run configuration.
    DefaultConfig,
}

fn context(a: &StageArgs) -> Result<(StageContext, PipelineConfig)> {
    let cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok((StageContext { corpus: a.corpus.clone(), run: a.run.clone(), allow_config_change: a.allow_config_change }, cfg))
}

fn dispatch(cmd: Command) -> Result<()> {
    let stage = |a: &StageArgs, f: fn(&StageContext, &PipelineConfig) -> Result<gnss_fsl_cli::RunManifest>| {
        let (ctx, cfg) = context(a)?;
        let m = f(&ctx, &cfg)?;
        println!("{} done: {}", m.stage, m.hash);
        Ok(())
    };
    match cmd {
        Command::GenData { out, profile, seed, counts } => {
            let m = stages::gen_data(&out, &profile, seed, counts)?;
            println!("corpus {}", m.corpus_hash);
            Ok(())
        }
        Command::Ensemble(a) => stage(&a, stages::ensemble),
        Command::Mine(a) => stage(&a, stages::mine),
        Command::Train(a) => stage(&a, stages::train_stage),
        Command::Adapt(a) => stage(&a, stages::adapt_stage),
        Command::Eval(a) => stage(&a, stages::eval_stage),
        Command::Embed(a) => stage(&a, stages::embed_stage),
        Command::Sweep(a) => stage(&a, stages::sweep_stage),
        Command::Run { stage: a, embed } => {
            let (ctx, cfg) = context(&a)?;
            for m in stages::run_chain(&ctx, &cfg, embed)? {
                println!("{} done: {}", m.stage, m.hash);
            }
            Ok(())
        }
        Command::Bench { seeds, out } => {
            let report = run_benchmark(&BenchConfig { seeds, ..BenchConfig::default() })?;
            print!("{}", report.summary());
            if let Some(p) = out {
                gnss_fsl_cli::manifest::write_bytes(&p, report.to_csv().as_bytes())?;
            }
            Ok(())
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&PipelineConfig::default()).expect("config serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
