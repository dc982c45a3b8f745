//! Serves the toy MT, TTS and ASR backends over the client line protocol:
//! JSON requests on stdin, JSON responses on stdout.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use s2st::data::{ToyClient, ToyMtMode, ToySpec};

#[derive(Parser)]
#[command(name = "s2st-toy-client", version, about = "Toy MT/TTS/ASR backend for the s2st client protocol")]
struct Cli {
    /// Corpus spec written by `s2st gen-toy` (toy_spec.json).
    #[arg(long)]
    spec: PathBuf,
    /// Fail requests with this id.
    #[arg(long = "fail-id")]
    fail_ids: Vec<String>,
    #[command(subcommand)]
    task: Task,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Primary,
    Secondary,
}

#[derive(Subcommand)]
enum Task {
    /// Phone-by-phone translation with one domain's mapping.
    Mt {
        #[arg(long, value_enum, default_value = "secondary")]
        domain: Domain,
    },
    /// Renders target phone text to WAV files in `out_dir`.
    Tts {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Template recogniser for target speech.
    Asr,
}

fn run(cli: Cli) -> Result<(), String> {
    let text = std::fs::read_to_string(&cli.spec).map_err(|e| format!("{}: {e}", cli.spec.display()))?;
    let spec: ToySpec = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", cli.spec.display()))?;
    spec.validate().map_err(|e| e.to_string())?;
    let mut client = match cli.task {
        Task::Mt { domain } => {
            let mapping = match domain {
                Domain::Primary => &spec.mapping_primary,
                Domain::Secondary => &spec.mapping_secondary,
            };
            let table: BTreeMap<String, String> = spec.src_vocab.iter().cloned().zip(mapping.iter().cloned()).collect();
            ToyClient::mt(ToyMtMode::Map(table))
        }
        Task::Tts { out_dir } => ToyClient::tts(spec.tgt_voice().map_err(|e| e.to_string())?, out_dir),
        Task::Asr => ToyClient::asr(spec.tgt_voice().map_err(|e| e.to_string())?),
    };
    client.fail_ids.extend(cli.fail_ids);
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    client
        .serve(BufReader::new(stdin.lock()), BufWriter::new(stdout.lock()))
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("s2st-toy-client: {e}");
            ExitCode::from(1)
        }
    }
}
