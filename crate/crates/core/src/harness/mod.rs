//! Multi-device split training with compressed smashed data.
//!
//! Each round, every device runs its client sub-model on one mini-batch and
//! sends the compressed activations up; the server completes the forward
//! and backward passes and sends compressed activation gradients back; the
//! device finishes backpropagation and takes an SGD step. Client sub-models
//! are then averaged (or relayed, see [`ClientSync`]).
//!
//! The receiver-side reconstruction of a gradient is used as if it were
//! exact: there is no quantizer derivative.

mod config;
mod output;
mod transport;

pub use config::{ClientSync, CompressorSpec, Config, DatasetSpec, ModelSpec, PartitionSpec, ServerUpdate};
pub use output::{compare, compare_csv, comparison_set, reports_jsonl, summary_csv, write_outputs, CompareRun};
pub use transport::{transmit, Delivered, MessageStats};

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::acii::{ChannelScore, EntropyState};
use crate::data::{partition_dirichlet, partition_iid, Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::{
    average_models, client_backward_tape, client_forward_tape, layers, server_forward_backward, server_logits, sgd_step,
    ClientModel, ClientTape, Gradients, ServerModel,
};
use crate::netsim::{time_to_accuracy, CommLedger, Progress, TimeToAccuracy};
use crate::rng::{self, Rng};
use crate::tensor::Direction;

/// Endless shuffled pass over a shard: each epoch is a fresh permutation.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    shard: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(shard: Vec<usize>, seed: u64, device: usize) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::arg(format!("device {device} has an empty shard")));
        }
        let rng = rng::stream(seed, rng::streams::DEVICE_BASE + device as u64);
        let pos = shard.len();
        Ok(Self {
            order: shard.clone(),
            shard,
            pos,
            rng,
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.clone_from(&self.shard);
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// An edge device: its data shard, client replica and entropy histories.
#[derive(Debug, Clone)]
pub struct Device {
    pub id: usize,
    pub shard: Vec<usize>,
    pub client: ClientModel,
    pub activation_state: EntropyState,
    pub gradient_state: EntropyState,
    pub sampler: BatchSampler,
}

/// Everything measured in one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub device_loss: Vec<f64>,
    pub mean_loss: f64,
    pub test_accuracy: f64,
    pub uplink: Vec<MessageStats>,
    pub downlink: Vec<MessageStats>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub comm_seconds: f64,
    pub compute_seconds: f64,
    /// Simulated time since the start of training, this round included.
    pub elapsed_seconds: f64,
    /// Host time; varies between runs, so kept out of the JSON reports.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Hooks for streaming diagnostics out of a run.
pub trait Observer {
    fn on_scores(&mut self, _round: u32, _device: usize, _direction: Direction, _scores: &[ChannelScore]) {}
    fn on_round(&mut self, _report: &RoundReport) {}
}

impl Observer for () {}

pub struct TrainOutcome {
    pub reports: Vec<RoundReport>,
    /// Client weights used for evaluation: the average under FedAvg, the
    /// last device's under relay.
    pub client: ClientModel,
    pub server: ServerModel,
    pub ledger: CommLedger,
}

impl TrainOutcome {
    pub fn progress(&self) -> Vec<Progress> {
        self.reports
            .iter()
            .map(|r| Progress {
                round: r.round,
                accuracy: r.test_accuracy,
                seconds: r.comm_seconds + r.compute_seconds,
            })
            .collect()
    }

    pub fn time_to_accuracy(&self, target: f64) -> TimeToAccuracy {
        time_to_accuracy(&self.progress(), target)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.reports.last().map_or(0.0, |r| r.test_accuracy)
    }

    pub fn total_bytes(&self) -> u64 {
        self.ledger.total_bytes()
    }
}

/// Top-1 accuracy of the uncompressed composite network.
pub fn evaluate(server: &ServerModel, client: &ClientModel, test: &Dataset, batch: usize) -> Result<f64> {
    let batch = batch.max(1);
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch) {
        let (x, labels) = test.batch(chunk)?;
        let (s, _) = client_forward_tape(client, &x)?;
        let logits = server_logits(server, s.tensor())?;
        let pred = layers::argmax_rows(&logits, server.classes());
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// State of a training run between rounds.
pub struct Trainer {
    config: Config,
    train: Dataset,
    test: Dataset,
    pub partition: Partition,
    pub devices: Vec<Device>,
    pub server: ServerModel,
    /// Current shared client weights.
    pub client: ClientModel,
    pub ledger: CommLedger,
    elapsed: f64,
}

struct Uplink {
    labels: Vec<usize>,
    tape: ClientTape,
    delivered: Delivered,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.dataset.load(config.seed)?;
        Self::with_data(config, train, test)
    }

    pub fn with_data(config: Config, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        if train.sample_dims() != test.sample_dims() || train.num_classes() != test.num_classes() {
            return Err(Error::Config("train and test sets differ in shape or classes".into()));
        }
        let partition = match config.partition {
            PartitionSpec::Iid => partition_iid(train.len(), config.devices, config.seed)?,
            PartitionSpec::Dirichlet { beta } => partition_dirichlet(train.labels(), config.devices, beta, config.seed)?,
        };
        partition.validate(train.len())?;
        let [c_in, h, w] = train.sample_dims();
        let mut widths = vec![c_in];
        widths.extend_from_slice(&config.model.client_channels);
        let client = ClientModel::new(&widths, config.model.kernel, config.seed)?;
        let c = client.out_channels();
        let server = ServerModel::new(c, h, w, config.model.hidden, train.num_classes(), config.seed)?;
        let devices = partition
            .shards
            .iter()
            .enumerate()
            .map(|(id, shard)| {
                Ok(Device {
                    id,
                    shard: shard.clone(),
                    client: client.clone(),
                    activation_state: EntropyState::new(c, config.window)?,
                    gradient_state: EntropyState::new(c, config.window)?,
                    sampler: BatchSampler::new(shard.clone(), config.seed, id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ledger = CommLedger::new(config.link)?;
        Ok(Self {
            config,
            train,
            test,
            partition,
            devices,
            server,
            client,
            ledger,
            elapsed: 0.0,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    /// Client forward, scoring and uplink for one device.
    fn uplink(&self, dev: &mut Device, t: u32) -> Result<Uplink> {
        let idx = dev.sampler.next_batch(self.config.batch_size);
        let (x, labels) = self.train.batch(&idx)?;
        let (s, tape) = client_forward_tape(&dev.client, &x)?;
        let s = s.with_round(t);
        let delivered = transmit(&s, &mut dev.activation_state, t, &self.config, dev.id)?;
        Ok(Uplink { labels, tape, delivered })
    }

    /// Runs round `t` (0-based) over all devices.
    pub fn run_round(&mut self, t: u32, observer: &mut dyn Observer) -> Result<RoundReport> {
        if t >= self.config.rounds {
            return Err(Error::arg(format!("round {t} outside 0..{}", self.config.rounds)));
        }
        let start = Instant::now();
        let n = self.devices.len();
        let mut losses = vec![0.0; n];
        let mut uplink_stats = Vec::with_capacity(n);
        let mut downlink_stats = Vec::with_capacity(n);
        let mut server_grads = Vec::new();
        let lr = self.config.lr;

        match self.config.client_sync {
            ClientSync::Fedavg => {
                // client-side work is independent across devices
                let mut devices = std::mem::take(&mut self.devices);
                let ups = devices
                    .par_iter_mut()
                    .map(|d| self.uplink(d, t))
                    .collect::<Result<Vec<_>>>();
                self.devices = devices;
                let ups = ups?;
                let mut downs = Vec::with_capacity(n);
                for (i, up) in ups.into_iter().enumerate() {
                    observer.on_scores(t, i, Direction::Activations, &up.delivered.scores);
                    let (loss, grads, down) = self.server_side(i, t, &up)?;
                    observer.on_scores(t, i, Direction::Gradients, &down.scores);
                    losses[i] = loss;
                    uplink_stats.push(up.delivered.stats);
                    downlink_stats.push(down.stats.clone());
                    server_grads.extend(grads);
                    downs.push((up.tape, down));
                }
                self.devices
                    .par_iter_mut()
                    .zip(downs.par_iter())
                    .map(|(d, (tape, down))| {
                        let g = client_backward_tape(&d.client, tape, &down.restored)?;
                        sgd_step(&mut d.client, &g, lr)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let clients: Vec<ClientModel> = self.devices.iter().map(|d| d.client.clone()).collect();
                self.client = average_models(&clients)?;
                for d in &mut self.devices {
                    d.client.clone_from(&self.client);
                }
            }
            ClientSync::Relay => {
                for i in 0..n {
                    let mut dev = self.devices[i].clone();
                    dev.client.clone_from(&self.client);
                    let up = self.uplink(&mut dev, t)?;
                    observer.on_scores(t, i, Direction::Activations, &up.delivered.scores);
                    self.devices[i] = dev;
                    let (loss, grads, down) = self.server_side(i, t, &up)?;
                    observer.on_scores(t, i, Direction::Gradients, &down.scores);
                    let dev = &mut self.devices[i];
                    let g = client_backward_tape(&dev.client, &up.tape, &down.restored)?;
                    sgd_step(&mut dev.client, &g, lr)?;
                    self.client.clone_from(&dev.client);
                    losses[i] = loss;
                    uplink_stats.push(up.delivered.stats);
                    downlink_stats.push(down.stats);
                    server_grads.extend(grads);
                }
            }
        }
        if self.config.server_update == ServerUpdate::Averaged {
            let mean = Gradients::mean(&server_grads)?;
            sgd_step(&mut self.server, &mean, lr)?;
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged(format!("non-finite loss in round {t}")));
        }

        for (u, d) in uplink_stats.iter().zip(&downlink_stats) {
            self.ledger.record(t, u.device, Direction::Activations, u.bytes);
            self.ledger.record(t, d.device, Direction::Gradients, d.bytes);
        }
        let test_accuracy = evaluate(&self.server, &self.client, &self.test, self.config.eval_batch)?;
        let comm_seconds = self.ledger.round_seconds(t, self.config.comm_aggregation);
        let compute_seconds = self.config.compute_seconds_per_round;
        self.elapsed += comm_seconds + compute_seconds;
        let report = RoundReport {
            round: t,
            mean_loss: losses.iter().sum::<f64>() / n as f64,
            device_loss: losses,
            test_accuracy,
            uplink_bytes: uplink_stats.iter().map(|s| s.bytes).sum(),
            downlink_bytes: downlink_stats.iter().map(|s| s.bytes).sum(),
            uplink: uplink_stats,
            downlink: downlink_stats,
            comm_seconds,
            compute_seconds,
            elapsed_seconds: self.elapsed,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observer.on_round(&report);
        Ok(report)
    }

    /// Server forward/backward on the delivered activations, the server
    /// update (sequential mode) and the gradient downlink.
    fn server_side(&mut self, i: usize, t: u32, up: &Uplink) -> Result<(f64, Option<Gradients>, Delivered)> {
        let out = server_forward_backward(&self.server, &up.delivered.restored, &up.labels)?;
        let grads = match self.config.server_update {
            ServerUpdate::Sequential => {
                sgd_step(&mut self.server, &out.grads, self.config.lr)?;
                None
            }
            ServerUpdate::Averaged => Some(out.grads),
        };
        let grad_s = out.grad_s.with_round(t);
        let down = transmit(&grad_s, &mut self.devices[i].gradient_state, t, &self.config, i)?;
        Ok((out.loss, grads, down))
    }

    pub fn finish(self, reports: Vec<RoundReport>) -> TrainOutcome {
        TrainOutcome {
            reports,
            client: self.client,
            server: self.server,
            ledger: self.ledger,
        }
    }
}

pub fn train(config: &Config) -> Result<TrainOutcome> {
    train_observed(Trainer::new(config.clone())?, &mut ())
}

/// Runs every round of a prepared trainer.
pub fn train_observed(mut trainer: Trainer, observer: &mut dyn Observer) -> Result<TrainOutcome> {
    let rounds = trainer.config.rounds;
    let reports = (0..rounds)
        .map(|t| trainer.run_round(t, observer))
        .collect::<Result<Vec<_>>>()?;
    Ok(trainer.finish(reports))
}
