use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s2st::config::{load_config_with, RunConfig, OUTPUT_ROOT_ENV};
use s2st::data::Category;
use s2st::eval::EvalConfig;
use s2st::run::{self, RunError, RunManifest};
use s2st::train::{load_checkpoint, FeatureConfig, StageKind};

#[derive(Parser)]
#[command(name = "s2st", version, about = "Direct speech-to-speech translation: data, training, inference, evaluation")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set stages.0.max_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct OptionalConfig {
    /// Run configuration (TOML); sample rates and synthesis settings come
    /// from it when given.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Start from this checkpoint instead of the pretrain stage's output.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptArg {
    Primary,
    Secondary,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain corpus described by `[toy]`.
    GenToy(ConfigArgs),
    /// Pseudo-label an ASR corpus through the MT and TTS clients.
    Prepare(ConfigArgs),
    /// Auxiliary-task pre-training on the secondary corpus.
    Pretrain(StageArgs),
    /// Fine-tune on the primary corpus.
    Finetune(StageArgs),
    /// Fine-tune on upsampled primary plus secondary data.
    Mixtune(StageArgs),
    /// Mixed-tuning with category prompts.
    Prompttune(StageArgs),
    /// Translate one WAV file; writes the WAV and a `.mel` next to it.
    Translate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        prompt: Option<PromptArg>,
        #[command(flatten)]
        config: OptionalConfig,
    },
    /// Score a checkpoint on a manifest; writes report.json and report.txt.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to `paths.eval` of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `<output_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        seeds: Vec<u64>,
        /// Directory for gradcheck.json and the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenToy(_) => "gen-toy",
            Command::Prepare(_) => "prepare",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Mixtune(_) => "mixtune",
            Command::Prompttune(_) => "prompttune",
            Command::Translate { .. } => "translate",
            Command::Evaluate { .. } => "evaluate",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Per-invocation state: the run manifest and where it will be written.
struct Session {
    manifest: RunManifest,
    dir: PathBuf,
}

fn load(args: &ConfigArgs, session: &mut Session) -> Result<RunConfig, RunError> {
    session.manifest.config = Some(args.config.clone());
    let cfg = load_config_with(&args.config, &args.set)?;
    session.manifest.seed = Some(cfg.seed);
    session.dir = cfg.paths.output_dir.clone();
    Ok(cfg)
}

fn load_optional(args: &OptionalConfig, session: &mut Session) -> Result<Option<RunConfig>, RunError> {
    match &args.config {
        Some(c) => load(
            &ConfigArgs {
                config: c.clone(),
                set: args.set.clone(),
            },
            session,
        )
        .map(Some),
        None => Ok(None),
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Runs `command` and returns the files it wrote.
fn execute(command: &Command, session: &mut Session) -> Result<Vec<PathBuf>, RunError> {
    let stage = |args: &StageArgs, kind: StageKind, session: &mut Session| {
        let cfg = load(&args.config, session)?;
        let r = run::train_stage(&cfg, kind, args.init.as_deref())?;
        if let Some(last) = r.log.last() {
            println!("{} step {}: total loss {:.5}", kind.name(), last.step, last.total);
        }
        println!("{}", cfg.final_checkpoint(kind).display());
        Ok::<_, RunError>(r.artifacts)
    };
    let files = match command {
        Command::GenToy(args) => {
            run::gen_toy(&load(args, session)?)?
        }
        Command::Prepare(args) => {
            run::prepare(&load(args, session)?)?
        }
        Command::Pretrain(a) => stage(a, StageKind::Pretrain, session)?,
        Command::Finetune(a) => stage(a, StageKind::Finetune, session)?,
        Command::Mixtune(a) => stage(a, StageKind::Mixed, session)?,
        Command::Prompttune(a) => stage(a, StageKind::Prompt, session)?,
        Command::Translate {
            input,
            ckpt,
            out,
            prompt,
            config,
        } => {
            if let Some(parent) = out.parent() {
                session.dir = parent.to_path_buf();
            }
            let cfg = load_optional(config, session)?;
            let eval = match &cfg {
                Some(c) => c.eval.clone(),
                None => EvalConfig {
                    features: FeatureConfig::default(),
                    ..EvalConfig::default()
                },
            };
            let expected = cfg.as_ref().map(|c| c.model.fingerprint());
            let model = load_checkpoint(ckpt, expected.as_deref())?.model;
            let prompt = prompt.map(|p| match p {
                PromptArg::Primary => Category::Primary,
                PromptArg::Secondary => Category::Secondary,
            });
            run::translate(&model, &eval, input, prompt, out)?
        }
        Command::Evaluate {
            ckpt,
            manifest: eval_manifest,
            out,
            config,
        } => {
            let cfg = load(config, session)?;
            let Some(m) = eval_manifest.clone().or_else(|| cfg.paths.eval.clone()) else {
                return Err(RunError::Contract("no --manifest and no paths.eval in the config".into()));
            };
            let model = load_checkpoint(ckpt, Some(&cfg.model.fingerprint()))?.model;
            let out_dir = out.clone().unwrap_or_else(|| cfg.paths.output_dir.join("eval"));
            let (report, files) = run::evaluate_run(&cfg, &model, &m, &out_dir)?;
            print!("{}", s2st::eval::EvalReport::table(&[("eval", &report)]));
            files
        }
        Command::Gradcheck { seeds, out } => {
            let dir = out.clone().unwrap_or_else(output_root);
            session.dir = dir.clone();
            let summary = run::gradcheck(seeds)?;
            for (kind, seed, err) in &summary.primitives {
                println!("{kind:<24} seed {seed}  {err:.3e}");
            }
            for (seed, err, worst) in &summary.model {
                println!("{:<24} seed {seed}  {err:.3e}  worst {}", "full loss", worst.as_deref().unwrap_or("-"));
            }
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("gradcheck.json");
            std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serialises"))?;
            if !summary.passed {
                session.manifest.errors.push(format!(
                    "gradient check above tolerance ({} primitives, {} full loss)",
                    run::PRIMITIVE_TOLERANCE,
                    run::MODEL_TOLERANCE
                ));
            }
            vec![path]
        }
    };
    Ok(files)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let name = cli.command.name();
    let mut session = Session {
        manifest: RunManifest::new(name, std::env::args().skip(1).collect()),
        dir: output_root(),
    };
    match execute(&cli.command, &mut session) {
        Ok(files) => session.manifest.record(&files),
        Err(e) => {
            eprintln!("error: {e}");
            session.manifest.errors.push(e.to_string());
        }
    }
    let path = session.dir.join(format!("run-{name}.json"));
    if let Err(e) = session.manifest.write(&path) {
        eprintln!("error: writing {}: {e}", path.display());
        return ExitCode::from(1);
    }
    if session.manifest.ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
