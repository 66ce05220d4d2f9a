use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use streamspr::run::{self, RunConfig};
use streamspr::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "streamspr", version, about = "Streaming deep RL with self-predictive representations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration.
    Train {
        /// `key = value` configuration file; omit for defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides as `--key value` pairs, e.g. `--seed 7 --spr.enabled true`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run every configuration in a directory over several seeds.
    Suite {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Report directory; defaults to `$STREAM_RL_OUT/suite`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective rank of an exported latent matrix.
    Analyze {
        #[arg(long)]
        latents: PathBuf,
    },
}

fn pairs(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::config(a.clone(), "expected `--key value`"));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let Some(v) = it.next() else {
            return Err(Error::config(key, "missing value"));
        };
        out.push((key.to_string(), v.clone()));
    }
    Ok(out)
}

fn train(config: Option<&Path>, overrides: &[String]) -> Result<(), Error> {
    let flags = pairs(overrides)?;
    let cfg = match config {
        Some(p) => RunConfig::from_file(p, &flags)?,
        None => RunConfig::parse("", &flags)?,
    };
    let out = run::run_training(&cfg)?;
    println!("{}", serde_json::to_string(&out.summary)?);
    eprintln!("artifacts in {}", out.dir.display());
    Ok(())
}

fn suite(dir: &Path, seeds: u64, out: Option<PathBuf>) -> Result<bool, Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("cfg" | "conf" | "txt")))
        .collect();
    files.sort();
    let mut configs = Vec::new();
    for f in &files {
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("config").to_string();
        configs.push((name, RunConfig::from_file(f, &[])?));
    }
    let root = out.unwrap_or_else(|| {
        std::env::var_os(run::OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join("suite")
    });
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = run::run_suite(&configs, &seeds, &root)?;
    print!("{}", std::fs::read_to_string(&report.path)?);
    Ok(report.complete())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, overrides } => train(config.as_deref(), &overrides).map(|_| true),
        Cmd::Suite { configs, seeds, out } => suite(&configs, seeds, out),
        Cmd::Analyze { latents } => run::analyze_latents(&latents).map(|(m, e)| {
            println!(
                "{}",
                serde_json::json!({"rows": m.rows(), "cols": m.cols(), "effective_rank": e, "centered": true})
            );
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some runs are absent from the report");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
