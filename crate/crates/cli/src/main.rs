//! `slacc`: train split-learning experiments, benchmark the codec and trace
//! channel entropies.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use slacc::acii::{score_channels, ChannelScore, EntropyState};
use slacc::cgc::{self, baseline_topk, baseline_uniform, compress, decompress, error_stats, GroupingParams};
use slacc::codec;
use slacc::harness::{self, CompressorSpec, Config, Observer, PartitionSpec, RoundReport, Trainer};
use slacc::tensor::{write_atomic, Direction, SmashedData, Tensor};

#[derive(Parser)]
#[command(name = "slacc", version, about = "Split learning with entropy-driven channel compression")]
struct Cli {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment and write reports.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory for reports.jsonl, summary.csv and ledger.csv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Accuracy target for the time-to-accuracy line.
        #[arg(long, default_value_t = 0.9)]
        target: f64,
    },
    /// Compress one SLT1 tensor dump and print size and error statistics.
    CompressBench {
        tensor: PathBuf,
        #[arg(long, default_value_t = 4)]
        g: usize,
        #[arg(long, default_value_t = 2)]
        bmin: u8,
        #[arg(long, default_value_t = 8)]
        bmax: u8,
        /// slacc, none, uniform:<bits> or topk:<keep>[:<rand>].
        #[arg(long, default_value = "slacc")]
        compressor: String,
        /// Where to write the encoded blob.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train while writing the per-round channel entropy trace as CSV.
    InspectEntropy {
        #[command(flatten)]
        run: RunArgs,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trace gradients instead of activations.
        #[arg(long)]
        gradients: bool,
        /// Device whose messages are traced.
        #[arg(long, default_value_t = 0)]
        device: usize,
    },
    /// Train once per compressor with identical seeds and data.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
        /// Accuracy targets for the time-to-accuracy table.
        #[arg(long, value_delimiter = ',', default_value = "0.85,0.9")]
        targets: Vec<f64>,
    },
}

/// Config file plus one-for-one key overrides.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    bmin: Option<u8>,
    #[arg(long)]
    bmax: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// iid or dirichlet:<beta>.
    #[arg(long)]
    partition: Option<String>,
    /// slacc, none, uniform:<bits> or topk:<keep>[:<rand>].
    #[arg(long)]
    compressor: Option<String>,
}

impl RunArgs {
    fn config(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => Config::default(),
        };
        if let Some(v) = self.rounds {
            c.rounds = v;
        }
        if let Some(v) = self.devices {
            c.devices = v;
        }
        if let Some(v) = self.g {
            c.groups = v;
        }
        if let Some(v) = self.bmin {
            c.b_min = v;
        }
        if let Some(v) = self.bmax {
            c.b_max = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(p) = &self.partition {
            c.partition = PartitionSpec::parse(p)?;
        }
        if let Some(s) = &self.compressor {
            c.compressor = CompressorSpec::parse(s)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Train { run, out, target } => cmd_train(&run.config()?, &out, target),
        Command::CompressBench {
            tensor,
            g,
            bmin,
            bmax,
            compressor,
            out,
        } => cmd_compress_bench(&tensor, g, bmin, bmax, &compressor, out.as_deref()),
        Command::InspectEntropy { run, out, gradients, device } => {
            let direction = if gradients { Direction::Gradients } else { Direction::Activations };
            cmd_inspect_entropy(&run.config()?, out.as_deref(), direction, device)
        }
        Command::Compare { run, out, targets } => cmd_compare(&run.config()?, &out, &targets),
    }
}

/// Prints one progress line per round on stderr.
struct Progress;

impl Observer for Progress {
    fn on_round(&mut self, r: &RoundReport) {
        eprintln!(
            "round {:>3}  loss {:.4}  acc {:.4}  up {} B  down {} B",
            r.round, r.mean_loss, r.test_accuracy, r.uplink_bytes, r.downlink_bytes
        );
    }
}

fn cmd_train(config: &Config, out: &Path, target: f64) -> Result<()> {
    let outcome = harness::train_observed(Trainer::new(config.clone())?, &mut Progress)?;
    harness::write_outputs(out, &outcome)?;
    let tta = outcome.time_to_accuracy(target);
    println!(
        "{}",
        json!({
            "final_accuracy": outcome.final_accuracy(),
            "total_bytes": outcome.total_bytes(),
            "target": target,
            "time_to_target": tta,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_compress_bench(path: &Path, g: usize, b_min: u8, b_max: u8, compressor: &str, out: Option<&Path>) -> Result<()> {
    let tensor = Tensor::read_slt1(path).with_context(|| format!("reading {}", path.display()))?;
    let raw_bytes = fs::metadata(path)?.len();
    let s = SmashedData::new(tensor, 0, Direction::Activations)?;
    let (blob, restored, per_group_bits) = match CompressorSpec::parse(compressor)? {
        CompressorSpec::Slacc => {
            let mut state = EntropyState::new(s.channels(), 1)?;
            let scores = score_channels(&s, &mut state, 0, 1, Default::default())?;
            let params = GroupingParams {
                groups: g,
                b_min,
                b_max,
                ..Default::default()
            };
            let (q, plan) = compress(&s, &scores, &params)?;
            (codec::encode(&q), decompress(&q)?, plan.bits())
        }
        CompressorSpec::Uniform { bits } => {
            let q = baseline_uniform(&s, bits)?;
            (codec::encode(&q), decompress(&q)?, vec![bits])
        }
        CompressorSpec::Topk { keep, rand } => {
            let sp = baseline_topk(&s, keep, rand, 0)?;
            (codec::encode_sparse(&sp), sp.densify()?, vec![])
        }
        CompressorSpec::None => bail!("compress-bench needs a compressor other than none"),
    };
    let stats: cgc::ErrorStats = error_stats(s.tensor(), restored.tensor())?;
    if let Some(p) = out {
        write_atomic(p, blob.as_bytes())?;
    }
    let compressed = blob.len() as u64;
    println!(
        "{}",
        json!({
            "raw_bytes": raw_bytes,
            "compressed_bytes": compressed,
            "ratio": raw_bytes as f64 / compressed as f64,
            "max_abs_err": stats.max_abs_err,
            "mse": stats.mse,
            "per_group_bits": per_group_bits,
        })
    );
    Ok(())
}

struct EntropyTrace<W: std::io::Write> {
    sink: W,
    direction: Direction,
    device: usize,
    error: Option<std::io::Error>,
}

impl<W: std::io::Write> Observer for EntropyTrace<W> {
    fn on_scores(&mut self, round: u32, device: usize, direction: Direction, scores: &[ChannelScore]) {
        if device != self.device || direction != self.direction || self.error.is_some() {
            return;
        }
        for s in scores {
            if let Err(e) = writeln!(self.sink, "{},{},{},{},{},{}", round, s.channel, s.h_inst, s.h_hist, s.alpha, s.h_blend) {
                self.error = Some(e);
                return;
            }
        }
    }
}

const ENTROPY_HEADER: &str = "round,channel,h_inst,h_hist,alpha,h_blend";

fn cmd_inspect_entropy(config: &Config, out: Option<&Path>, direction: Direction, device: usize) -> Result<()> {
    if device >= config.devices {
        bail!("device {device} does not exist ({} devices)", config.devices);
    }
    let trainer = Trainer::new(config.clone())?;
    let mut trace = EntropyTrace {
        sink: Vec::new(),
        direction,
        device,
        error: None,
    };
    writeln!(trace.sink, "{ENTROPY_HEADER}")?;
    harness::train_observed(trainer, &mut trace)?;
    if let Some(e) = trace.error {
        return Err(e.into());
    }
    match out {
        Some(p) => write_atomic(p, &trace.sink)?,
        None => std::io::stdout().write_all(&trace.sink)?,
    }
    Ok(())
}

fn cmd_compare(config: &Config, out: &Path, targets: &[f64]) -> Result<()> {
    let runs = harness::compare(config, &harness::comparison_set(), &mut Progress)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("compare.csv"), harness::compare_csv(&runs).as_bytes())?;
    for run in &runs {
        harness::write_outputs(&out.join(&run.label), &run.outcome)?;
        let tta: Vec<_> = targets
            .iter()
            .map(|&t| json!({"target": t, "time": run.outcome.time_to_accuracy(t)}))
            .collect();
        println!(
            "{}",
            json!({
                "compressor": run.label,
                "final_accuracy": run.outcome.final_accuracy(),
                "total_bytes": run.outcome.total_bytes(),
                "time_to_accuracy": tta,
            })
        );
    }
    Ok(())
}
