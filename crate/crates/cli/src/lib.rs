//! Command implementations of the `stereovol` binary.

pub mod layout;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use stereovol::metrics::{self, EstimateRecord, MetricsReport};
use stereovol::pipeline::{run_pipeline_detailed, PipelineError};
use stereovol::synth::{self, SceneKind};
use stereovol::volume::VolumeReport;
use stereovol::PipelineConfig;

use crate::layout::PairData;

/// A command failure with the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid inputs or configuration (exit code 2).
    Input(anyhow::Error),
    /// A pipeline stage failed on valid inputs (exit code 3).
    Pipeline(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            CliError::Input(e) | CliError::Pipeline(e) => e,
        }
    }

    /// The error and its causes on one line, skipping causes whose text an
    /// outer message already includes.
    pub fn message(&self) -> String {
        let mut msg = String::new();
        for cause in self.error().chain() {
            let s = cause.to_string();
            if !msg.contains(&s) {
                if !msg.is_empty() {
                    msg.push_str(": ");
                }
                msg.push_str(&s);
            }
        }
        msg
    }

    fn with_context(self, ctx: String) -> Self {
        match self {
            CliError::Input(e) => CliError::Input(e.context(ctx)),
            CliError::Pipeline(e) => CliError::Pipeline(e.context(ctx)),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_input_error() {
            CliError::Input(e.into())
        } else {
            CliError::Pipeline(e.into())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn input<T>(r: anyhow::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Input)
}

/// Loads the config file (defaults without one) and applies the seed
/// override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => input(PipelineConfig::load(p).map_err(Into::into))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Writes `text` to `out`, or to stdout without one.
pub fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => input(std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            input(stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).map_err(Into::into))
        }
    }
}

fn run_one(pair: &PairData, cfg: &PipelineConfig, debug_dir: Option<&Path>) -> CliResult<VolumeReport> {
    let out = run_pipeline_detailed(&pair.inputs(), cfg)
        .map_err(|e| CliError::from(e).with_context(format!("pair {}", pair.name)))?;
    if let Some(dir) = debug_dir {
        input(out.write_artifacts(dir).with_context(|| format!("cannot write artifacts to {}", dir.display())))?;
    }
    Ok(out.report)
}

/// Runs one pair directory; returns the report as pretty JSON and the stage
/// timings.
pub fn estimate(dir: &Path, cfg: &PipelineConfig, debug_dir: Option<&Path>) -> CliResult<(String, Vec<(String, f64)>)> {
    let pair = input(layout::load_pair(dir, cfg))?;
    let report = run_one(&pair, cfg, debug_dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Pipeline(e.into()))?;
    Ok((json + "\n", report.diagnostics.timings.clone()))
}

/// Estimate records of every pair under `root`, `repeats` runs each, in
/// (pair, run, label) order. Run `j` uses seed `cfg.seed + j`. Pairs that
/// fail are reported in the second field, in pair order.
pub fn batch(
    root: &Path,
    cfg: &PipelineConfig,
    repeats: usize,
    debug_dir: Option<&Path>,
) -> CliResult<(Vec<EstimateRecord>, Vec<CliError>)> {
    if repeats == 0 {
        return Err(CliError::Input(anyhow!("repeats must be positive")));
    }
    let dirs = input(layout::find_pairs(root))?;
    let pairs: Vec<PairData> = dirs.par_iter().map(|d| input(layout::load_pair(d, cfg))).collect::<CliResult<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|p| (0..repeats).map(move |r| (p, r))).collect();
    let results: Vec<CliResult<Vec<EstimateRecord>>> = jobs
        .par_iter()
        .map(|&(p, run)| {
            let pair = &pairs[p];
            let cfg = PipelineConfig { seed: cfg.seed.wrapping_add(run as u64), ..cfg.clone() };
            let debug: Option<PathBuf> = debug_dir.map(|d| d.join(&pair.name).join(format!("run_{run}")));
            let report = run_one(pair, &cfg, debug.as_deref())?;
            Ok(report
                .items
                .iter()
                .map(|it| EstimateRecord {
                    item: layout::item_id(&pair.name, it.label),
                    pair: p,
                    run,
                    estimate_ml: it.volume_ml,
                })
                .collect())
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(mut v) => records.append(&mut v),
            Err(e) => failures.push(e),
        }
    }
    Ok((records, failures))
}

pub fn records_to_jsonl(records: &[EstimateRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

pub fn read_records(path: &Path) -> CliResult<Vec<EstimateRecord>> {
    let text = input(std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            input(serde_json::from_str(l).with_context(|| format!("{}:{}: malformed estimate record", path.display(), i + 1)))
        })
        .collect()
}

pub fn metrics_report(records: &Path, truth: &Path) -> CliResult<MetricsReport> {
    let records = read_records(records)?;
    let truth = input(layout::load_truth(truth))?;
    input(metrics::compute_report(&records, &truth).map_err(Into::into))
}

/// Scene kinds cycled by [`synth_suite`].
pub const SUITE_KINDS: [SceneKind; 4] = [SceneKind::Hemisphere, SceneKind::Box, SceneKind::TwoItems, SceneKind::Dome];

/// Relative angle of suite scene `i`: 15° to 25° in 2.5° steps.
pub fn suite_angle(i: usize) -> f64 {
    15.0 + (i % 5) as f64 * 2.5
}

pub fn parse_kind(s: &str) -> anyhow::Result<SceneKind> {
    Ok(match s {
        "hemisphere" => SceneKind::Hemisphere,
        "box" => SceneKind::Box,
        "dome" => SceneKind::Dome,
        "two-items" => SceneKind::TwoItems,
        other => return Err(anyhow!("unknown scene kind `{other}` (hemisphere, box, dome, two-items)")),
    })
}

/// Writes `count` generated pairs `scene_000`, `scene_001`, … under `root`;
/// scene `i` uses seed `seed + i`.
pub fn synth_suite(root: &Path, count: usize, seed: u64) -> CliResult<Vec<PathBuf>> {
    let k = synth::default_intrinsics();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let dir = root.join(format!("scene_{i:03}"));
            let spec = synth::generated_scene(SUITE_KINDS[i % SUITE_KINDS.len()], suite_angle(i), seed.wrapping_add(i as u64));
            input(layout::write_synth_pair(&dir, spec, &k))?;
            Ok(dir)
        })
        .collect()
}
