//! Report files and multi-compressor comparisons.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::tensor::write_atomic;

use super::{train_observed, CompressorSpec, Config, Observer, RoundReport, TrainOutcome, Trainer};

/// One JSON object per round.
pub fn reports_jsonl(reports: &[RoundReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn summary_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,mean_loss,test_accuracy,uplink_bytes,downlink_bytes,comm_seconds,compute_seconds,elapsed_seconds\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round, r.mean_loss, r.test_accuracy, r.uplink_bytes, r.downlink_bytes, r.comm_seconds, r.compute_seconds, r.elapsed_seconds
        )
        .expect("string write");
    }
    out
}

/// Writes `reports.jsonl`, `summary.csv`, `ledger.csv` and the host-time
/// log `timing.csv` into `dir`, each atomically.
pub fn write_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("reports.jsonl"), reports_jsonl(&outcome.reports)?.as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary_csv(&outcome.reports).as_bytes())?;
    write_atomic(&dir.join("ledger.csv"), outcome.ledger.to_csv().as_bytes())?;
    let mut timing = String::from("round,wall_seconds\n");
    for r in &outcome.reports {
        writeln!(timing, "{},{}", r.round, r.wall_seconds).expect("string write");
    }
    write_atomic(&dir.join("timing.csv"), timing.as_bytes())
}

pub struct CompareRun {
    pub label: String,
    pub compressor: CompressorSpec,
    pub outcome: TrainOutcome,
}

/// The compressors of a standard comparison.
pub fn comparison_set() -> Vec<CompressorSpec> {
    vec![
        CompressorSpec::Slacc,
        CompressorSpec::Uniform { bits: 8 },
        CompressorSpec::Uniform { bits: 2 },
        CompressorSpec::Topk { keep: 0.05, rand: 0.01 },
        CompressorSpec::None,
    ]
}

/// Trains once per compressor with everything else (seed, data, partition)
/// held fixed.
pub fn compare(config: &Config, compressors: &[CompressorSpec], observer: &mut dyn Observer) -> Result<Vec<CompareRun>> {
    config.validate()?;
    let (train, test) = config.dataset.load(config.seed)?;
    compressors
        .iter()
        .map(|&compressor| {
            let cfg = Config { compressor, ..config.clone() };
            let trainer = Trainer::with_data(cfg, train.clone(), test.clone())?;
            Ok(CompareRun {
                label: compressor.label(),
                compressor,
                outcome: train_observed(trainer, observer)?,
            })
        })
        .collect()
}

/// Accuracy against round and simulated time for every run.
pub fn compare_csv(runs: &[CompareRun]) -> String {
    let mut out = String::from("compressor,round,test_accuracy,elapsed_seconds,uplink_bytes,downlink_bytes\n");
    for run in runs {
        for r in &run.outcome.reports {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                run.label, r.round, r.test_accuracy, r.elapsed_seconds, r.uplink_bytes, r.downlink_bytes
            )
            .expect("string write");
        }
    }
    out
}
