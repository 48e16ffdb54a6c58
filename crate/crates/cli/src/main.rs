use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod output;

use config::RunConfig;
use output::{sha256_hex, FileDigest, Manifest, RunLog};

const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "chatasu", version, about = "Aspect-sentiment quadruple extraction toolkit for dialogues")]
pub struct Cli {
    /// Random seed (mock generation, simulation). Default 42, or the
    /// scenario's own seed for `simulate`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the report as JSON, or write it to PATH when one is given.
    #[arg(long, global = true, value_name = "PATH", num_args = 0..=1, default_missing_value = "-")]
    json: Option<PathBuf>,
    /// Directory for the run manifest. Defaults to the directory of the
    /// first output file, else the current directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// TOML run configuration with per-subcommand sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Asu,
    Acr,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check dialogues against the annotation rules.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Corpus statistics table.
    Stats { file: PathBuf },
    /// Inter-annotator agreement between two annotations of the same dialogues.
    Agreement { first: PathBuf, second: PathBuf },
    /// Build task prompts for every dialogue (JSONL).
    Prompt {
        task: TaskArg,
        file: PathBuf,
        /// Built-in template: asu, acr, asu-zh, acr-zh.
        #[arg(long)]
        template: Option<String>,
        /// TOML template file (task, instruction, joiner).
        #[arg(long, conflicts_with = "template")]
        template_file: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run prompts through a generation backend (JSONL generations log).
    Generate(GenerateArgs),
    /// Parse the top output of each generation into predictions (JSONL).
    Parse {
        task: TaskArg,
        #[arg(long)]
        generations: PathBuf,
        /// Gold dialogues; required for chain outputs (utterance counts).
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score predictions against gold annotations.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Aspect-chain predictions to score as well.
        #[arg(long)]
        acr_pred: Option<PathBuf>,
        /// Also write per-dialogue quadruple F1, one value per line.
        #[arg(long)]
        per_dialogue: Option<PathBuf>,
    },
    /// Reward breakdown per dialogue from a generations log (JSONL).
    Reward {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train the toy policy on a scenario and write the learning curve (CSV).
    Simulate {
        /// Built-in scenario: faithful or repetitive.
        #[arg(long)]
        scenario: Option<String>,
        /// Scenario TOML file.
        #[arg(long, conflicts_with = "scenario")]
        scenario_file: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Print the resolved scenario as TOML instead of running it.
        #[arg(long)]
        dump_scenario: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Paired t-test on two score files (one number per line).
    Significance { first: PathBuf, second: PathBuf },
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Gold dialogues the mock answers from.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Mock profile: faithful, noisy, repetitive or gibberish.
    #[arg(long)]
    behavior: Option<String>,
    /// Candidate outputs per prompt.
    #[arg(long)]
    candidates: Option<usize>,
    /// Scores per mock output.
    #[arg(long)]
    scores: Option<usize>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    auth_env: Option<String>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Stats { .. } => "stats",
            Command::Agreement { .. } => "agreement",
            Command::Prompt { .. } => "prompt",
            Command::Generate(_) => "generate",
            Command::Parse { .. } => "parse",
            Command::Eval { .. } => "eval",
            Command::Reward { .. } => "reward",
            Command::Simulate { .. } => "simulate",
            Command::Significance { .. } => "significance",
        }
    }
}

/// Problems with how the tool was invoked rather than with the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A run that completed but found problems in its input (exit 1).
#[derive(Debug)]
pub struct DataProblems(pub String);

impl std::fmt::Display for DataProblems {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataProblems {}

/// Settings shared by every subcommand after merging flags and config.
pub struct Context {
    /// Seed from the flag or config, if either set one.
    pub seed: Option<u64>,
    pub json: Option<PathBuf>,
    pub config: RunConfig,
}

fn run(cli: Cli, log: &mut RunLog) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(config.seed);
    if let Some(jobs) = cli.jobs.or(config.jobs) {
        if jobs == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    log.setting("seed", seed.unwrap_or(DEFAULT_SEED));
    if let Some(dir) = &config.out {
        log.manifest_dir.get_or_insert_with(|| dir.clone());
    }
    let ctx = Context { seed, json: cli.json.clone(), config };
    commands::dispatch(cli.command, &ctx, log)
}

fn write_manifest(
    subcommand: &str,
    argv: Vec<String>,
    seed: u64,
    jobs: Option<usize>,
    config: Option<&PathBuf>,
    log: &RunLog,
) -> anyhow::Result<()> {
    let dir = match (&log.manifest_dir, log.outputs.first()) {
        (Some(dir), _) => dir.clone(),
        (None, Some(first)) => first.parent().map(PathBuf::from).unwrap_or_default(),
        (None, None) => PathBuf::new(),
    };
    let settings = serde_json::Value::Object(log.settings.clone());
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        core_version: chatasu::VERSION,
        subcommand: subcommand.into(),
        argv,
        seed,
        jobs,
        config: config.map(|p| FileDigest::of(p)).transpose()?,
        settings_sha256: sha256_hex(settings.to_string().as_bytes()),
        settings,
        inputs: log.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
        outputs: log.outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
    };
    let path = dir.join(format!("{subcommand}.manifest.json"));
    output::write_atomic(&path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let subcommand = cli.command.name();
    let config_path = cli.config.clone();
    let jobs = cli.jobs;
    let mut log = RunLog { manifest_dir: cli.out.clone(), ..RunLog::default() };
    let result = run(cli, &mut log);
    let seed = log.settings.get("seed").and_then(|v| v.as_u64()).unwrap_or(DEFAULT_SEED);
    let finished = match result {
        Ok(()) => Ok(()),
        Err(e) if e.is::<DataProblems>() => Err((1, e)),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = write_manifest(subcommand, argv, seed, jobs, config_path.as_ref(), &log) {
        eprintln!("error: writing manifest: {e:#}");
        return ExitCode::from(1);
    }
    match finished {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("{e}");
            ExitCode::from(code)
        }
    }
}
