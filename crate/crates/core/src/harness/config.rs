use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acii::{EntropyOptions, LogBase};
use crate::cgc::{quant, GroupingMethod, GroupingParams};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::netsim::{Aggregation, LinkModel};

/// How smashed data is compressed in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorSpec {
    /// Entropy-scored channel grouping.
    Slacc,
    /// One global range at a fixed bit width.
    Uniform { bits: u8 },
    /// Largest magnitudes plus a uniformly sampled tail, sent sparse.
    Topk {
        keep: f64,
        #[serde(default)]
        rand: f64,
    },
    /// Raw f32 transfer; the server sees the client's f64 values unchanged.
    None,
}

impl CompressorSpec {
    pub fn label(&self) -> String {
        match self {
            CompressorSpec::Slacc => "slacc".into(),
            CompressorSpec::Uniform { bits } => format!("uniform{bits}"),
            CompressorSpec::Topk { keep, rand } => format!("topk{keep}+{rand}"),
            CompressorSpec::None => "none".into(),
        }
    }

    /// Parses `slacc`, `none`, `uniform:<bits>`, `topk:<keep>[:<rand>]`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("unknown compressor {s:?}"));
        let num = |p: &str| p.parse::<f64>().map_err(|_| bad());
        match parts.as_slice() {
            ["slacc"] => Ok(CompressorSpec::Slacc),
            ["none"] => Ok(CompressorSpec::None),
            ["uniform", b] => Ok(CompressorSpec::Uniform { bits: b.parse().map_err(|_| bad())? }),
            ["topk", k] => Ok(CompressorSpec::Topk { keep: num(k)?, rand: 0.0 }),
            ["topk", k, r] => Ok(CompressorSpec::Topk { keep: num(k)?, rand: num(r)? }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    Dirichlet { beta: f64 },
}

impl PartitionSpec {
    /// Parses `iid` or `dirichlet:<beta>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "iid" => Ok(PartitionSpec::Iid),
            Some(("dirichlet", beta)) => Ok(PartitionSpec::Dirichlet {
                beta: beta.parse().map_err(|_| Error::Config(format!("bad beta in {s:?}")))?,
            }),
            _ => Err(Error::Config(format!("unknown partition {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX files; a seeded shuffle carves disjoint train and test subsets.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        train: usize,
        test: usize,
    },
    /// Template-plus-noise images, generated in memory.
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        noise: f64,
        side: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Mnist {
            images: PathBuf::from("data/mnist/mnist5k-images-idx3-ubyte"),
            labels: PathBuf::from("data/mnist/mnist5k-labels-idx1-ubyte"),
            train: 2000,
            test: 1000,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Mnist { images, labels, train, test } => {
                data::load_mnist_idx(images, labels)?.split_train_test(*train, *test, seed)
            }
            DatasetSpec::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                noise,
                side,
            } => Ok((
                data::synth_blobs(*classes, *train_per_class, *noise, *side, seed)?,
                data::synth_blobs(*classes, *test_per_class, *noise, *side, seed ^ 0x7E57)?,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Output widths of the client conv stages.
    pub client_channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            client_channels: vec![8, 8, 8],
            kernel: 3,
            hidden: 128,
        }
    }
}

/// Whether client sub-models are averaged after each round or handed from
/// device to device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientSync {
    #[default]
    Fedavg,
    /// No averaging: device `i` starts from device `i−1`'s weights.
    Relay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerUpdate {
    /// One server step per device batch, in device order.
    #[default]
    Sequential,
    /// Server gradients of all devices are averaged into one step per round.
    Averaged,
}

/// Experiment configuration, read from JSON. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub devices: usize,
    pub rounds: u32,
    pub batch_size: usize,
    pub lr: f64,
    /// Requested channel group count g.
    pub groups: usize,
    pub b_min: u8,
    pub b_max: u8,
    pub grouping: GroupingMethod,
    /// History window k of the entropy blend.
    pub window: usize,
    pub log_base: LogBase,
    pub constant_channel_zero: bool,
    pub partition: PartitionSpec,
    pub compressor: CompressorSpec,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub client_sync: ClientSync,
    pub server_update: ServerUpdate,
    pub link: LinkModel,
    pub comm_aggregation: Aggregation,
    /// Constant simulated compute cost added to each round.
    pub compute_seconds_per_round: f64,
    pub eval_batch: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            devices: 5,
            rounds: 60,
            batch_size: 128,
            lr: 0.05,
            groups: 4,
            b_min: 2,
            b_max: 8,
            grouping: GroupingMethod::Exact,
            window: 5,
            log_base: LogBase::E,
            constant_channel_zero: false,
            partition: PartitionSpec::Iid,
            compressor: CompressorSpec::Slacc,
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            client_sync: ClientSync::Fedavg,
            server_update: ServerUpdate::Sequential,
            link: LinkModel::default(),
            comm_aggregation: Aggregation::Parallel,
            compute_seconds_per_round: 0.0,
            eval_batch: 500,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; relative dataset paths resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            c.resolve_paths(dir);
        }
        Ok(c)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::Mnist { images, labels, .. } = &mut self.dataset {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn grouping_params(&self) -> GroupingParams {
        GroupingParams {
            groups: self.groups,
            b_min: self.b_min,
            b_max: self.b_max,
            method: self.grouping,
        }
    }

    pub fn entropy_options(&self) -> EntropyOptions {
        EntropyOptions {
            base: self.log_base,
            constant_channel_zero: self.constant_channel_zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.devices == 0 || self.rounds == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return fail("devices, rounds, batch_size and eval_batch must be positive".into());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.groups == 0 || self.groups > u16::MAX as usize {
            return fail(format!("groups must be in [1, 65535], got {}", self.groups));
        }
        quant::check_bounds(self.b_min, self.b_max).map_err(|e| Error::Config(e.to_string()))?;
        if self.window == 0 {
            return fail("window must be at least 1".into());
        }
        if let PartitionSpec::Dirichlet { beta } = self.partition {
            if !(beta > 0.0) || !beta.is_finite() {
                return fail(format!("dirichlet beta must be positive, got {beta}"));
            }
        }
        match self.compressor {
            CompressorSpec::Uniform { bits } if !(1..=quant::MAX_BITS).contains(&bits) => {
                return fail(format!("uniform bits must be in [1, 32], got {bits}"));
            }
            CompressorSpec::Topk { keep, rand } if !(keep > 0.0 && keep <= 1.0 && (0.0..1.0).contains(&rand) && keep + rand <= 1.0) => {
                return fail(format!("topk fractions keep={keep} rand={rand} invalid"));
            }
            _ => {}
        }
        let m = &self.model;
        if m.client_channels.is_empty() || m.client_channels.contains(&0) || m.kernel.is_multiple_of(2) || m.hidden == 0 {
            return fail(format!("invalid model spec {m:?}"));
        }
        self.link.validate()?;
        if !self.compute_seconds_per_round.is_finite() || self.compute_seconds_per_round < 0.0 {
            return fail("compute_seconds_per_round must be non-negative".into());
        }
        match &self.dataset {
            DatasetSpec::Mnist { train, test, .. } if *train < self.devices || *test == 0 => {
                fail(format!("need at least one training sample per device and a test set, got {train}/{test}"))
            }
            DatasetSpec::Synthetic { classes, train_per_class, test_per_class, side, .. }
                if *classes == 0 || classes * train_per_class < self.devices || *test_per_class == 0 || *side < 2 =>
            {
                fail("synthetic dataset too small".into())
            }
            _ => Ok(()),
        }
    }
}
