//! Channel grouping compression.
//!
//! Channels are clustered by importance score, each group gets a bit width
//! from its mean entropy, and every channel is linearly quantized against its
//! group's value range. The baseline compressors used for comparison live in
//! [`baseline`].

pub mod baseline;
pub mod kmeans;
pub mod quant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acii::ImportanceVector;
use crate::error::{Error, Result};
use crate::tensor::{Direction, SmashedData, Tensor};

pub use baseline::{baseline_topk, baseline_uniform, SparseSmashed};
pub use kmeans::{group_channels, group_channels_with, lloyd_1d, ChannelGrouping, GroupingMethod};
pub use quant::{allocate_bits, dequantize, group_mean_entropy, quantize};

/// Wire-level parameters of one channel group. Ranges are f32 because that
/// is what travels on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupParams {
    pub bits: u8,
    pub x_min: f32,
    pub x_max: f32,
}

/// Everything the grouping step decided, including the diagnostic values
/// (centroids, group entropies) that are not transmitted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionPlan {
    pub grouping: ChannelGrouping,
    pub group_entropy: Vec<f64>,
    pub params: Vec<GroupParams>,
}

impl CompressionPlan {
    pub fn bits(&self) -> Vec<u8> {
        self.params.iter().map(|p| p.bits).collect()
    }
}

/// Quantized smashed data: what the codec serializes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSmashed {
    dims: [usize; 4],
    round: u32,
    direction: Direction,
    assignment: Vec<u16>,
    groups: Vec<GroupParams>,
    codes: Vec<Vec<u32>>,
}

impl QuantizedSmashed {
    pub fn new(
        dims: [usize; 4],
        round: u32,
        direction: Direction,
        assignment: Vec<u16>,
        groups: Vec<GroupParams>,
        codes: Vec<Vec<u32>>,
    ) -> Result<Self> {
        let [b, c, h, w] = dims;
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dims {dims:?} must be in [1, 2^32)")));
        }
        if groups.is_empty() || groups.len() > u16::MAX as usize {
            return Err(Error::arg(format!("group count {} out of range", groups.len())));
        }
        if assignment.len() != c || codes.len() != c {
            return Err(Error::Shape(format!(
                "{} channels but {} group ids and {} code vectors",
                c,
                assignment.len(),
                codes.len()
            )));
        }
        let mut used = vec![false; groups.len()];
        for &a in &assignment {
            *used
                .get_mut(a as usize)
                .ok_or(Error::Index { index: a as usize, len: groups.len() })? = true;
        }
        if used.contains(&false) {
            return Err(Error::arg("every group needs at least one channel"));
        }
        for p in &groups {
            if !(1..=quant::MAX_BITS).contains(&p.bits) {
                return Err(Error::arg(format!("bit width {} outside [1, 32]", p.bits)));
            }
            if !p.x_min.is_finite() || !p.x_max.is_finite() || p.x_min > p.x_max {
                return Err(Error::arg(format!("invalid range [{}, {}]", p.x_min, p.x_max)));
            }
        }
        let n = b * h * w;
        for (ch, (cv, &a)) in codes.iter().zip(&assignment).enumerate() {
            if cv.len() != n {
                return Err(Error::Shape(format!("channel {ch} has {} codes, expected {n}", cv.len())));
            }
            let top = quant::levels(groups[a as usize].bits);
            if cv.iter().any(|&x| x as f64 > top) {
                return Err(Error::arg(format!("channel {ch} has a code wider than its bit width")));
            }
        }
        Ok(Self {
            dims,
            round,
            direction,
            assignment,
            groups,
            codes,
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

    pub fn assignment(&self) -> &[u16] {
        &self.assignment
    }

    pub fn groups(&self) -> &[GroupParams] {
        &self.groups
    }

    pub fn codes(&self) -> &[Vec<u32>] {
        &self.codes
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn elements_per_channel(&self) -> usize {
        self.dims[0] * self.dims[2] * self.dims[3]
    }

    pub fn channel_params(&self, c: usize) -> GroupParams {
        self.groups[self.assignment[c] as usize]
    }

    /// m_j per group.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut m = vec![0; self.groups.len()];
        for &a in &self.assignment {
            m[a as usize] += 1;
        }
        m
    }

    /// Σ_j m_j · N · b_j.
    pub fn payload_bits(&self) -> u64 {
        let n = self.elements_per_channel() as u64;
        self.group_sizes()
            .iter()
            .zip(&self.groups)
            .map(|(&m, p)| m as u64 * n * p.bits as u64)
            .sum()
    }
}

/// Knobs of the grouping compressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    /// Requested group count; clamped to the channel count.
    pub groups: usize,
    pub b_min: u8,
    pub b_max: u8,
    #[serde(default)]
    pub method: GroupingMethod,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            groups: 4,
            b_min: 2,
            b_max: 8,
            method: GroupingMethod::Exact,
        }
    }
}

/// Groups channels by score, allocates bits per group and quantizes.
pub fn compress(
    s: &SmashedData,
    scores: &ImportanceVector,
    params: &GroupingParams,
) -> Result<(QuantizedSmashed, CompressionPlan)> {
    let c = s.channels();
    if scores.scores.len() != c {
        return Err(Error::arg(format!(
            "{} scores for {} channels",
            scores.scores.len(),
            c
        )));
    }
    quant::check_bounds(params.b_min, params.b_max)?;
    if params.groups == 0 || params.groups > u16::MAX as usize {
        return Err(Error::arg(format!("group count {} outside [1, 65535]", params.groups)));
    }
    let g = params.groups.min(c);
    let grouping = group_channels_with(&scores.scores, g, params.method)?;
    let group_entropy = group_mean_entropy(&grouping, &scores.scores)?;
    let views = s.channel_views();

    let mut lo = vec![f64::INFINITY; g];
    let mut hi = vec![f64::NEG_INFINITY; g];
    for (view, &a) in views.iter().zip(&grouping.assignment) {
        for &v in view {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let params_per_group = group_entropy
        .iter()
        .enumerate()
        .map(|(j, &h)| {
            Ok(GroupParams {
                bits: allocate_bits(h, params.b_min, params.b_max)?,
                x_min: quant::f32_floor(lo[j]),
                x_max: quant::f32_ceil(hi[j]),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let assignment: Vec<u16> = grouping.assignment.iter().map(|&a| a as u16).collect();
    let codes = quantize_channels(&views, &assignment, &params_per_group)?;
    let q = QuantizedSmashed::new(
        s.dims(),
        s.round(),
        s.direction(),
        assignment,
        params_per_group.clone(),
        codes,
    )?;
    Ok((
        q,
        CompressionPlan {
            grouping,
            group_entropy,
            params: params_per_group,
        },
    ))
}

pub(crate) fn quantize_channels(
    views: &[Vec<f64>],
    assignment: &[u16],
    groups: &[GroupParams],
) -> Result<Vec<Vec<u32>>> {
    views
        .par_iter()
        .zip(assignment.par_iter())
        .map(|(view, &a)| {
            let p = groups[a as usize];
            quantize(view, p.bits, p.x_min as f64, p.x_max as f64)
        })
        .collect()
}

/// Dequantizes every channel with its group's parameters.
pub fn decompress(q: &QuantizedSmashed) -> Result<SmashedData> {
    let channels = q
        .codes
        .par_iter()
        .enumerate()
        .map(|(c, codes)| {
            let p = q.channel_params(c);
            dequantize(codes, p.bits, p.x_min as f64, p.x_max as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    SmashedData::from_channels(q.dims, &channels, q.round, q.direction)
}

/// Reconstruction error statistics between two tensors of equal shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub max_abs_err: f64,
    pub mse: f64,
}

pub fn error_stats(original: &Tensor, restored: &Tensor) -> Result<ErrorStats> {
    let max_abs_err = original.max_abs_diff(restored)?;
    let mse = original
        .data()
        .iter()
        .zip(restored.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / original.len().max(1) as f64;
    Ok(ErrorStats { max_abs_err, mse })
}
