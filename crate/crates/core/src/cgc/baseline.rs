//! Comparison compressors: fixed-bit uniform quantization and top-k
//! sparsification with a random tail.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Direction, SmashedData, Tensor};

use super::quant::{check_bounds, f32_ceil, f32_floor};
use super::{quantize_channels, GroupParams, QuantizedSmashed};

/// One group holding every channel, fixed width `bits`, global range.
pub fn baseline_uniform(s: &SmashedData, bits: u8) -> Result<QuantizedSmashed> {
    check_bounds(bits, bits)?;
    let data = s.tensor().data();
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let group = GroupParams {
        bits,
        x_min: f32_floor(lo),
        x_max: f32_ceil(hi),
    };
    let assignment = vec![0u16; s.channels()];
    let codes = quantize_channels(&s.channel_views(), &assignment, &[group])?;
    QuantizedSmashed::new(s.dims(), s.round(), s.direction(), assignment, vec![group], codes)
}

/// Sparse smashed data: flat indices (ascending) into the `[B,C,H,W]`
/// buffer and their f32 values. Everything else reconstructs as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSmashed {
    dims: [usize; 4],
    round: u32,
    direction: Direction,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseSmashed {
    pub fn new(
        dims: [usize; 4],
        round: u32,
        direction: Direction,
        indices: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dims {dims:?} must be in [1, 2^32)")));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= u32::MAX as usize + 1)
            .ok_or_else(|| Error::Shape("sparse tensor too large for u32 indices".into()))?;
        if indices.len() != values.len() {
            return Err(Error::Shape("index/value length mismatch".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("indices must be strictly ascending"));
        }
        if indices.last().is_some_and(|&i| i as usize >= numel) {
            return Err(Error::arg("index out of range"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("non-finite sparse value"));
        }
        Ok(Self {
            dims,
            round,
            direction,
            indices,
            values,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn densify(&self) -> Result<SmashedData> {
        let mut data = vec![0.0; self.dims.iter().product()];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            data[i as usize] = v as f64;
        }
        SmashedData::new(Tensor::new(self.dims.to_vec(), data)?, self.round, self.direction)
    }
}

/// Keeps the `ceil(keep·numel)` largest-magnitude elements (ties to the
/// lower flat index) plus `ceil(rand·numel)` elements sampled uniformly from
/// the rest.
pub fn baseline_topk(s: &SmashedData, keep_fraction: f64, rand_fraction: f64, seed: u64) -> Result<SparseSmashed> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::arg(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    if !(0.0..1.0).contains(&rand_fraction) {
        return Err(Error::arg(format!("random fraction {rand_fraction} outside [0, 1)")));
    }
    if keep_fraction + rand_fraction > 1.0 + 1e-12 {
        return Err(Error::arg("keep + random fractions exceed 1"));
    }
    let data = s.tensor().data();
    let total = data.len();
    if total > u32::MAX as usize + 1 {
        return Err(Error::Shape("tensor too large for u32 indices".into()));
    }
    let k = fraction_count(keep_fraction, total);
    let r = fraction_count(rand_fraction, total).min(total - k);

    let by_magnitude = |a: &usize, b: &usize| data[*b].abs().total_cmp(&data[*a].abs()).then(a.cmp(b));
    let mut order: Vec<usize> = (0..total).collect();
    if k < total {
        order.select_nth_unstable_by(k, by_magnitude);
    }
    let (top, rest) = order.split_at_mut(k);
    let mut chosen: Vec<usize> = top.to_vec();
    if r > 0 {
        // canonical order before sampling so the draw does not depend on
        // the selection algorithm's permutation
        rest.sort_unstable();
        let mut rng = rng::stream(seed, rng::streams::TOPK);
        chosen.extend(index::sample(&mut rng, rest.len(), r).into_iter().map(|i| rest[i]));
    }
    chosen.sort_unstable();

    let values = chosen
        .iter()
        .map(|&i| {
            let v = data[i] as f32;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::arg(format!("value {} overflows f32", data[i])))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SparseSmashed::new(
        s.dims(),
        s.round(),
        s.direction(),
        chosen.into_iter().map(|i| i as u32).collect(),
        values,
    )
}

/// `ceil(fraction · total)`, ignoring float noise right at an integer.
fn fraction_count(fraction: f64, total: usize) -> usize {
    let x = fraction * total as f64;
    let nearest = x.round();
    let n = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (n as usize).min(total)
}
