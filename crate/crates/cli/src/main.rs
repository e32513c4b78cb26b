use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use epidiv_core::corpus::DecompositionPromptId;
use epidiv_core::manifest::{BootstrapConfig, RarefactionConfig, RunManifest, SimilarityFloor};
use epidiv_core::pipeline::{diversity_reports, CellKey, Pipeline, RunOptions, Stage};
use epidiv_core::{Execution, GenerationSetting, SCHEMA_VERSION};

const EXIT_HELP: &str = "\
Exit codes:
  0  the stage completed without failures
  1  partial failure: some cells failed and are listed in failures.jsonl,
     or an output file could not be written
  2  configuration error: invalid manifest or arguments, or a required
     checkpoint from an earlier stage is missing";

#[derive(Parser)]
#[command(name = "epidiv", about = "Claim-level epistemic diversity of text generators", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Log level (error, warn, info, debug, trace); RUST_LOG overrides it.
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

fn version() -> String {
    format!("{} (schema {SCHEMA_VERSION})", env!("CARGO_PKG_VERSION"))
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Run manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Root seed for this stage's per-cell seeds, instead of the manifest seed.
    #[arg(long)]
    stage_seed: Option<u64>,
    /// Continue in a run directory written under a different manifest.
    #[arg(long)]
    resume: bool,
    /// Cosine floor for RAG paragraph shuffling: `auto` or a number.
    #[arg(long)]
    similarity_floor: Option<SimilarityFloor>,
    /// Decomposition prompt.
    #[arg(long = "decomp-prompt")]
    decomp_prompt: Option<DecompositionPromptId>,
    /// Run data-parallel loops on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate responses (and ingest search pages).
    Generate(StageArgs),
    /// Split responses into chunks and decompose them into claims.
    Decompose(StageArgs),
    /// Group claims into meaning classes per (topic, generator, setting).
    Cluster(StageArgs),
    /// Coverage-rarefied Hill-Shannon diversity per cell.
    Diversity(DiversityArgs),
    /// Jensen-Shannon divergence between generators.
    Compare(StageArgs),
    /// Match claims against reference corpora.
    Represent(StageArgs),
    /// Write oracle claim populations with known diversity.
    Simulate(StageArgs),
    /// Emit CSV tables, plot data and summary.md.
    Report(StageArgs),
}

#[derive(Args)]
struct DiversityArgs {
    #[command(flatten)]
    stage: OptionalStage,
    /// Score a CSV of `sample,count` rows instead of a run's clusters.jsonl;
    /// reports are printed as JSONL.
    #[arg(long, value_name = "CSV")]
    counts: Option<PathBuf>,
}

#[derive(Args)]
struct OptionalStage {
    /// Run manifest (JSON); with --counts only its rarefaction settings are used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Root seed for this stage's per-cell seeds, instead of the manifest seed.
    #[arg(long)]
    stage_seed: Option<u64>,
    /// Continue in a run directory written under a different manifest.
    #[arg(long)]
    resume: bool,
    /// Run data-parallel loops on one thread.
    #[arg(long)]
    sequential: bool,
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn load(path: &Path) -> Result<RunManifest, ExitCode> {
    RunManifest::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn run_stage(stage: Stage, args: StageArgs) -> ExitCode {
    let manifest = match load(&args.manifest) {
        Ok(m) => m,
        Err(code) => return code,
    };
    let options = RunOptions {
        stage_seed: args.stage_seed,
        resume: args.resume,
        similarity_floor: args.similarity_floor,
        decomposition_prompt: args.decomp_prompt,
        exec: exec(args.sequential),
    };
    let result = Pipeline::new(manifest, options).and_then(|p| p.run(stage));
    match result {
        Ok(summary) => {
            print!("{summary}");
            if summary.failures > 0 {
                eprintln!("{} failure(s) recorded in failures.jsonl", summary.failures);
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn score_counts(csv: &Path, args: &OptionalStage) -> ExitCode {
    let (rarefaction, bootstrap, seed) = match &args.manifest {
        Some(p) => match load(p) {
            Ok(m) => (m.rarefaction, m.bootstrap, args.stage_seed.unwrap_or(m.seed)),
            Err(code) => return code,
        },
        None => (RarefactionConfig::default(), BootstrapConfig::default(), args.stage_seed.unwrap_or(0)),
    };
    let samples = match epidiv_core::io::read_counts_csv(csv) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cells: BTreeMap<CellKey, Vec<usize>> = samples
        .into_iter()
        .map(|(id, v)| {
            let key = CellKey { topic_id: "csv".into(), generator_id: id, setting: GenerationSetting::Ift };
            (key, v.expand_labels())
        })
        .collect();
    for r in diversity_reports(&cells, &rarefaction, &bootstrap, seed, exec(args.sequential)) {
        println!("{}", serde_json::to_string(&r).expect("reports serialize"));
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let matches = Cli::command().version(version()).get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    match cli.command {
        Command::Generate(a) => run_stage(Stage::Generate, a),
        Command::Decompose(a) => run_stage(Stage::Decompose, a),
        Command::Cluster(a) => run_stage(Stage::Cluster, a),
        Command::Compare(a) => run_stage(Stage::Compare, a),
        Command::Represent(a) => run_stage(Stage::Represent, a),
        Command::Simulate(a) => run_stage(Stage::Simulate, a),
        Command::Report(a) => run_stage(Stage::Report, a),
        Command::Diversity(a) => {
            if let Some(csv) = &a.counts {
                return score_counts(csv, &a.stage);
            }
            let Some(manifest) = a.stage.manifest else {
                eprintln!("error: diversity needs --manifest (or --counts)");
                return ExitCode::from(2);
            };
            let args = StageArgs {
                manifest,
                stage_seed: a.stage.stage_seed,
                resume: a.stage.resume,
                similarity_floor: None,
                decomp_prompt: None,
                sequential: a.stage.sequential,
            };
            run_stage(Stage::Diversity, args)
        }
    }
}
