use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use stereovol::synth;
use stereovol_cli::{layout, CliError, CliResult};

/// Food volume estimation from two images of a dish.
#[derive(Debug, Parser)]
#[command(name = "stereovol", version)]
struct Cli {
    /// Pipeline config (JSON); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file instead of stdout (output directory for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory for rectified images, disparity maps and meshes.
    #[arg(long, global = true)]
    debug_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimates the item volumes of one pair directory.
    Estimate { pair: PathBuf },
    /// Estimates every pair under a directory; writes JSON-lines records.
    Batch {
        root: PathBuf,
        /// Runs per pair; run j uses seed + j.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Accuracy and stability of estimate records against ground truth.
    Metrics {
        records: PathBuf,
        /// Truth records (JSON lines), a pair directory or a directory of pairs.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Renders synthetic pairs with ground truth.
    Synth {
        /// Scene description (JSON); overrides --kind and --angle.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "hemisphere")]
        kind: String,
        /// Relative viewing angle in degrees.
        #[arg(long, default_value_t = 20.0)]
        angle: f64,
        /// Writes a suite of this many scenes into subdirectories instead.
        #[arg(long)]
        count: Option<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let input = |e: anyhow::Error| CliError::Input(e);
    match cli.command {
        Command::Estimate { pair } => {
            let cfg = stereovol_cli::load_config(cli.config.as_deref(), cli.seed)?;
            let (json, timings) = stereovol_cli::estimate(&pair, &cfg, cli.debug_dir.as_deref())?;
            for (stage, secs) in timings {
                eprintln!("{stage}: {secs:.3} s");
            }
            stereovol_cli::emit(cli.out.as_deref(), &json)
        }
        Command::Batch { root, repeats } => {
            let cfg = stereovol_cli::load_config(cli.config.as_deref(), cli.seed)?;
            let (records, failures) = stereovol_cli::batch(&root, &cfg, repeats, cli.debug_dir.as_deref())?;
            stereovol_cli::emit(cli.out.as_deref(), &stereovol_cli::records_to_jsonl(&records))?;
            for f in &failures {
                eprintln!("error: {}", f.message());
            }
            let summary = || anyhow!("{} pair runs failed", failures.len());
            match failures.first() {
                Some(CliError::Input(_)) => Err(CliError::Input(summary())),
                Some(CliError::Pipeline(_)) => Err(CliError::Pipeline(summary())),
                None => Ok(()),
            }
        }
        Command::Metrics { records, truth } => {
            let report = stereovol_cli::metrics_report(&records, &truth)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| input(e.into()))?;
            stereovol_cli::emit(cli.out.as_deref(), &(json + "\n"))
        }
        Command::Synth { spec, kind, angle, count } => {
            let out = cli.out.ok_or_else(|| input(anyhow!("synth needs --out <dir>")))?;
            let seed = cli.seed.unwrap_or(0);
            if let Some(n) = count {
                stereovol_cli::synth_suite(&out, n, seed)?;
                return Ok(());
            }
            let spec = match spec {
                Some(p) => layout::load_scene_spec(&p).map_err(input)?,
                None => synth::generated_scene(stereovol_cli::parse_kind(&kind).map_err(input)?, angle, seed),
            };
            layout::write_synth_pair(&out, spec, &synth::default_intrinsics()).map_err(input)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
