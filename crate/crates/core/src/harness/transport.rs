//! One message across the cut layer: score, compress, encode, decode,
//! reconstruct.

use serde::Serialize;

use crate::acii::{score_channels_detailed, ChannelScore, EntropyState};
use crate::cgc::{baseline_topk, baseline_uniform, compress, decompress, QuantizedSmashed};
use crate::codec;
use crate::error::{Error, Result};
use crate::tensor::{slt1_len, Direction, SmashedData};

use super::config::{CompressorSpec, Config};

/// Size breakdown of one encoded message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageStats {
    pub device: usize,
    /// Encoded length; exactly what the ledger records.
    pub bytes: u64,
    pub header_bytes: u64,
    pub payload_bytes: u64,
    /// Information bits before per-channel byte padding.
    pub payload_bits: u64,
    pub elements_per_channel: usize,
    pub group_bits: Vec<u8>,
    pub group_sizes: Vec<usize>,
    /// FNV-1a of the encoded bytes.
    pub digest: String,
}

pub struct Delivered {
    /// What the receiver reconstructs.
    pub restored: SmashedData,
    pub stats: MessageStats,
    pub scores: Vec<ChannelScore>,
}

/// Sends `s` through the configured compressor and returns the receiver's
/// view. Channel scores are computed (and the history advanced) for every
/// compressor so the entropy trace is available regardless.
pub fn transmit(s: &SmashedData, state: &mut EntropyState, t: u32, config: &Config, device: usize) -> Result<Delivered> {
    let (importance, scores) = score_channels_detailed(s, state, t, config.rounds, config.entropy_options())?;
    let n = s.elements_per_channel();
    let c = s.channels();
    let (restored, stats) = match config.compressor {
        CompressorSpec::Slacc => {
            let (q, _) = compress(s, &importance, &config.grouping_params())?;
            through_dense_codec(&q, device)?
        }
        CompressorSpec::Uniform { bits } => through_dense_codec(&baseline_uniform(s, bits)?, device)?,
        CompressorSpec::Topk { keep, rand } => {
            let sparse = baseline_topk(s, keep, rand, topk_seed(config.seed, t, device, s.direction()))?;
            let blob = codec::encode_sparse(&sparse);
            let back = codec::decode_sparse(blob.as_bytes()).map_err(|e| wire_error(device, s.direction(), e))?;
            let header = codec::sparse_len(0) as u64;
            let bytes = blob.len() as u64;
            let stats = MessageStats {
                device,
                bytes,
                header_bytes: header,
                payload_bytes: bytes - header,
                payload_bits: 8 * (bytes - header),
                elements_per_channel: n,
                group_bits: Vec::new(),
                group_sizes: Vec::new(),
                digest: fnv1a(blob.as_bytes()),
            };
            (back.densify()?, stats)
        }
        CompressorSpec::None => {
            let numel = (n * c) as u64;
            let bytes = slt1_len(s.tensor().shape()) as u64;
            let stats = MessageStats {
                device,
                bytes,
                header_bytes: bytes - 4 * numel,
                payload_bytes: 4 * numel,
                payload_bits: 32 * numel,
                elements_per_channel: n,
                group_bits: vec![32],
                group_sizes: vec![c],
                digest: String::new(),
            };
            (s.clone(), stats)
        }
    };
    Ok(Delivered { restored, stats, scores })
}

fn through_dense_codec(q: &QuantizedSmashed, device: usize) -> Result<(SmashedData, MessageStats)> {
    let blob = codec::encode(q);
    let back = codec::decode(blob.as_bytes()).map_err(|e| wire_error(device, q.direction(), e))?;
    let bytes = blob.len() as u64;
    let header = codec::header_len(q.channels(), q.groups().len()) as u64;
    let stats = MessageStats {
        device,
        bytes,
        header_bytes: header,
        payload_bytes: bytes - header,
        payload_bits: q.payload_bits(),
        elements_per_channel: q.elements_per_channel(),
        group_bits: q.groups().iter().map(|g| g.bits).collect(),
        group_sizes: q.group_sizes(),
        digest: fnv1a(blob.as_bytes()),
    };
    Ok((decompress(&back)?, stats))
}

fn wire_error(device: usize, direction: Direction, e: Error) -> Error {
    Error::State(format!("device {device} {direction:?} message failed to decode: {e}"))
}

fn topk_seed(seed: u64, t: u32, device: usize, direction: Direction) -> u64 {
    seed ^ ((t as u64) << 32) ^ ((device as u64) << 1) ^ direction.to_byte() as u64
}

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn smashed() -> SmashedData {
        let data: Vec<f64> = (0..2 * 4 * 9).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        SmashedData::new(Tensor::new(vec![2, 4, 3, 3], data).unwrap(), 1, Direction::Activations).unwrap()
    }

    fn config(compressor: CompressorSpec) -> Config {
        Config { compressor, rounds: 10, ..Config::default() }
    }

    #[test]
    fn none_is_lossless_and_counts_f32() {
        let s = smashed();
        let mut st = EntropyState::new(4, 5).unwrap();
        let d = transmit(&s, &mut st, 1, &config(CompressorSpec::None), 0).unwrap();
        assert_eq!(d.restored, s);
        assert_eq!(d.stats.bytes, slt1_len(&[2, 4, 3, 3]) as u64);
        assert_eq!(d.stats.payload_bytes, 4 * 72);
        assert_eq!(st.history(0).unwrap().len(), 1);
    }

    #[test]
    fn slacc_bytes_match_codec_accounting() {
        let s = smashed();
        let mut st = EntropyState::new(4, 5).unwrap();
        let d = transmit(&s, &mut st, 1, &config(CompressorSpec::Slacc), 3).unwrap();
        let st2 = &d.stats;
        assert_eq!(st2.device, 3);
        assert_eq!(st2.header_bytes + st2.payload_bytes, st2.bytes);
        let per_channel: u64 = st2
            .group_bits
            .iter()
            .zip(&st2.group_sizes)
            .map(|(&b, &m)| m as u64 * (18 * b as u64).div_ceil(8))
            .sum();
        assert_eq!(st2.payload_bytes, per_channel);
        let analytic: u64 = st2.group_bits.iter().zip(&st2.group_sizes).map(|(&b, &m)| m as u64 * 18 * b as u64).sum();
        assert_eq!(st2.payload_bits, analytic);
        assert_eq!(d.restored.dims(), s.dims());
    }

    #[test]
    fn uniform_and_topk_paths() {
        let s = smashed();
        let mut st = EntropyState::new(4, 5).unwrap();
        let u = transmit(&s, &mut st, 1, &config(CompressorSpec::Uniform { bits: 8 }), 0).unwrap();
        assert_eq!(u.stats.group_bits, vec![8]);
        assert!(u.restored.tensor().max_abs_diff(s.tensor()).unwrap() <= 1.0 / 255.0);
        let k = transmit(&s, &mut st, 1, &config(CompressorSpec::Topk { keep: 0.25, rand: 0.0 }), 0).unwrap();
        assert_eq!(k.stats.bytes, codec::sparse_len(18) as u64);
        let kept = k.restored.tensor().data().iter().filter(|&&v| v != 0.0).count();
        assert!(kept <= 18);
    }
}
