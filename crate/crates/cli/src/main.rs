//! `iclp`: runs pipeline stages against an output directory.
//!
//! On failure a single JSON object describing the error is written to
//! stderr and the process exits nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use iclp_core::pipeline::{run, Command, PipelineConfig};
use iclp_core::Error;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "iclp", version, about = "Latent-plan pipeline: corpus, codec, latentized SFT, evaluation")]
struct Cli {
    /// gen-corpus, distill, train-codec, latentize, finetune, evaluate,
    /// analyze, ablate or all.
    command: String,
    /// JSON config merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `codec.K=64`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn report(err: &Error) -> (serde_json::Value, u8) {
    let (kind, code, extra) = match err {
        Error::Config(list) => ("config", 2, json!({ "violations": list })),
        Error::MissingArtifact { path, stage } => ("missing_artifact", 3, json!({ "path": path, "run_first": stage })),
        Error::Locked(path) => ("locked", 4, json!({ "lock": path })),
        Error::HashMismatch { what, expected, found } => {
            ("hash_mismatch", 5, json!({ "what": what, "expected": expected, "found": found }))
        }
        Error::Auth(_) => ("auth", 6, json!({})),
        Error::Diverged(_) => ("diverged", 7, json!({})),
        _ => ("error", 1, json!({})),
    };
    let mut v = json!({ "error": kind, "message": err.to_string() });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    (v, code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = (|| {
        let command: Command = cli.command.parse()?;
        let mut config = PipelineConfig::load(cli.config.as_deref(), &cli.set)?;
        if let Some(out) = &cli.out {
            config.out_dir = out.clone();
        }
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        if cli.print_config {
            println!("{}", serde_json::to_string_pretty(&config)?);
            return Ok(());
        }
        let summary = run(command, &config)?;
        println!("{}", serde_json::to_string(&summary)?);
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (v, code) = report(&e);
            eprintln!("{v}");
            ExitCode::from(code)
        }
    }
}
