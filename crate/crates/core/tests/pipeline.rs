use slacc::acii::{score_channels, EntropyState};
use slacc::cgc::{baseline_uniform, compress, decompress, GroupingParams};
use slacc::codec;
use slacc::harness::{self, ClientSync, CompressorSpec, Config, DatasetSpec, ModelSpec, PartitionSpec};
use slacc::model::{load_checkpoint, save_checkpoint, Parameters};
use slacc::netsim::Aggregation;
use slacc::tensor::{Direction, SmashedData, Tensor};

fn tiny(compressor: CompressorSpec) -> Config {
    Config {
        devices: 5,
        rounds: 3,
        batch_size: 6,
        lr: 0.05,
        compressor,
        dataset: DatasetSpec::Synthetic { classes: 4, train_per_class: 10, test_per_class: 4, noise: 0.25, side: 6 },
        model: ModelSpec { client_channels: vec![3, 5], kernel: 3, hidden: 12 },
        ..Config::default()
    }
}

fn smashed(seed: u64) -> SmashedData {
    let mut x = seed;
    let data = (0..2 * 6 * 16)
        .map(|i| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * (1.0 + (i % 6) as f64)
        })
        .collect();
    SmashedData::new(Tensor::new(vec![2, 6, 4, 4], data).unwrap(), 2, Direction::Activations).unwrap()
}

#[test]
fn single_group_at_fixed_width_is_uniform_quantization() {
    let s = smashed(9);
    let mut st = EntropyState::new(6, 5).unwrap();
    let scores = score_channels(&s, &mut st, 2, 10, Default::default()).unwrap();
    let params = GroupingParams { groups: 1, b_min: 8, b_max: 8, ..Default::default() };
    let (q, plan) = compress(&s, &scores, &params).unwrap();
    assert_eq!(plan.bits(), vec![8]);
    let u = baseline_uniform(&s, 8).unwrap();
    assert_eq!(codec::encode(&q), codec::encode(&u));
    assert_eq!(decompress(&q).unwrap(), decompress(&u).unwrap());
}

#[test]
fn encoded_size_follows_group_widths() {
    let s = smashed(3);
    let mut st = EntropyState::new(6, 5).unwrap();
    let scores = score_channels(&s, &mut st, 0, 10, Default::default()).unwrap();
    for b_max in 2..=8 {
        let params = GroupingParams { groups: 3, b_min: 2, b_max, ..Default::default() };
        let (q, plan) = compress(&s, &scores, &params).unwrap();
        let n = s.elements_per_channel();
        let payload: usize = plan.grouping.sizes().iter().zip(plan.bits()).map(|(&m, b)| m * (n * b as usize).div_ceil(8)).sum();
        assert_eq!(codec::encode(&q).len(), codec::header_len(6, plan.params.len()) + payload);
        assert!(plan.bits().iter().all(|&b| (2..=b_max).contains(&b)));
    }
}

#[test]
fn ledger_rows_cover_every_device_and_direction() {
    let out = harness::train(&tiny(CompressorSpec::Slacc)).unwrap();
    let csv = out.ledger.to_csv();
    assert_eq!(csv.lines().count(), 1 + 3 * 5 * 2);
    for t in 0..3 {
        for d in 0..5 {
            for dir in [Direction::Activations, Direction::Gradients] {
                let hits = out.ledger.entries().iter().filter(|e| e.round == t && e.device == d && e.direction == dir);
                assert_eq!(hits.filter(|e| e.bytes > 0).count(), 1);
            }
        }
        assert!(out.ledger.bytes_for(t, Direction::Activations) > 0);
        let parallel = out.ledger.round_seconds(t, Aggregation::Parallel);
        let sequential = out.ledger.round_seconds(t, Aggregation::Sequential);
        assert!(parallel > 0.0 && parallel <= sequential);
    }
    let elapsed: Vec<f64> = out.reports.iter().map(|r| r.elapsed_seconds).collect();
    assert!(elapsed.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn every_compressor_trains_in_every_mode() {
    for compressor in harness::comparison_set() {
        for sync in [ClientSync::Fedavg, ClientSync::Relay] {
            for partition in [PartitionSpec::Iid, PartitionSpec::Dirichlet { beta: 0.5 }] {
                let c = Config { client_sync: sync, partition, ..tiny(compressor) };
                let out = harness::train(&c).unwrap();
                assert_eq!(out.reports.len(), 3);
                assert!(out.reports.iter().all(|r| r.mean_loss.is_finite()));
            }
        }
    }
}

#[test]
fn compressed_runs_send_fewer_bytes_than_uncompressed() {
    let none = harness::train(&tiny(CompressorSpec::None)).unwrap().total_bytes();
    for c in [CompressorSpec::Slacc, CompressorSpec::Uniform { bits: 4 }, CompressorSpec::Topk { keep: 0.05, rand: 0.0 }] {
        assert!(harness::train(&tiny(c)).unwrap().total_bytes() < none, "{c:?}");
    }
}

#[test]
fn checkpoint_of_trained_models_round_trips() {
    let out = harness::train(&tiny(CompressorSpec::Slacc)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &out.client, &out.server, 0, 3).unwrap();
    let (client, server, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.round, 3);
    for (a, b) in client.params().iter().zip(out.client.params()).chain(server.params().iter().zip(out.server.params())) {
        assert!(a.max_abs_diff(b).unwrap() <= 1e-6 * b.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
    }
}

#[test]
fn output_files_are_written() {
    let out = harness::train(&tiny(CompressorSpec::Uniform { bits: 8 })).unwrap();
    let dir = tempfile::tempdir().unwrap();
    harness::write_outputs(dir.path(), &out).unwrap();
    let jsonl = std::fs::read_to_string(dir.path().join("reports.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["round"], 0);
    assert!(first.get("wall_seconds").is_none());
    for f in ["summary.csv", "ledger.csv", "timing.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
