//! Bit allocation and linear quantization.

use crate::error::{Error, Result};

use super::kmeans::ChannelGrouping;

pub const MAX_BITS: u8 = 32;

/// Mean entropy of each group.
pub fn group_mean_entropy(grouping: &ChannelGrouping, entropies: &[f64]) -> Result<Vec<f64>> {
    if grouping.assignment.len() != entropies.len() {
        return Err(Error::arg(format!(
            "grouping covers {} channels, got {} entropies",
            grouping.assignment.len(),
            entropies.len()
        )));
    }
    let g = grouping.groups();
    let mut sums = vec![0.0; g];
    let mut counts = vec![0usize; g];
    for (&a, &h) in grouping.assignment.iter().zip(entropies) {
        if a >= g {
            return Err(Error::Index { index: a, len: g });
        }
        sums[a] += h;
        counts[a] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::arg("grouping has an empty group"));
    }
    Ok(sums.iter().zip(&counts).map(|(s, &m)| s / m as f64).collect())
}

/// `min(b_max, max(b_min, floor(h)))`.
pub fn allocate_bits(h_group: f64, b_min: u8, b_max: u8) -> Result<u8> {
    check_bounds(b_min, b_max)?;
    if h_group.is_nan() {
        return Err(Error::arg("entropy is NaN"));
    }
    let floor = h_group.floor().clamp(0.0, MAX_BITS as f64) as u8;
    Ok(floor.max(b_min).min(b_max))
}

pub fn check_bounds(b_min: u8, b_max: u8) -> Result<()> {
    if b_min < 1 || b_min > b_max || b_max > MAX_BITS {
        return Err(Error::arg(format!(
            "bit bounds must satisfy 1 <= b_min <= b_max <= 32, got [{b_min}, {b_max}]"
        )));
    }
    Ok(())
}

fn check_bits(b: u8) -> Result<()> {
    if !(1..=MAX_BITS).contains(&b) {
        return Err(Error::arg(format!("bit width {b} outside [1, 32]")));
    }
    Ok(())
}

/// 2^b − 1 as an exact float.
pub fn levels(b: u8) -> f64 {
    ((1u64 << b) - 1) as f64
}

/// Linear quantization onto `[0, 2^b − 1]`, rounding half away from zero.
pub fn quantize(values: &[f64], b: u8, x_min: f64, x_max: f64) -> Result<Vec<u32>> {
    check_bits(b)?;
    if !(x_min <= x_max) || !x_min.is_finite() || !x_max.is_finite() {
        return Err(Error::arg(format!("invalid range [{x_min}, {x_max}]")));
    }
    if let Some(v) = values.iter().find(|&&v| !(x_min..=x_max).contains(&v)) {
        return Err(Error::arg(format!("value {v} outside [{x_min}, {x_max}]")));
    }
    if x_min == x_max {
        return Ok(vec![0; values.len()]);
    }
    let span = x_max - x_min;
    let top = levels(b);
    Ok(values
        .iter()
        // f64::round rounds half-way cases away from zero
        .map(|&v| ((v - x_min) / span * top).round().min(top) as u32)
        .collect())
}

pub fn dequantize(codes: &[u32], b: u8, x_min: f64, x_max: f64) -> Result<Vec<f64>> {
    check_bits(b)?;
    let top = levels(b);
    if let Some(&c) = codes.iter().find(|&&c| c as f64 > top) {
        return Err(Error::arg(format!("code {c} does not fit in {b} bits")));
    }
    if x_min == x_max {
        return Ok(vec![x_min; codes.len()]);
    }
    let span = x_max - x_min;
    Ok(codes
        .iter()
        .map(|&c| (x_min + c as f64 / top * span).min(x_max))
        .collect())
}

/// Largest f32 not above `x`.
pub fn f32_floor(x: f64) -> f32 {
    let f = x as f32;
    if (f as f64) > x {
        f.next_down()
    } else {
        f
    }
}

/// Smallest f32 not below `x`.
pub fn f32_ceil(x: f64) -> f32 {
    let f = x as f32;
    if (f as f64) < x {
        f.next_up()
    } else {
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_entropy_examples() {
        let one = ChannelGrouping {
            assignment: vec![0, 0],
            centroids: vec![3.0],
        };
        assert_eq!(group_mean_entropy(&one, &[2.0, 4.0]).unwrap(), vec![3.0]);
        let two = ChannelGrouping {
            assignment: vec![0, 1, 1],
            centroids: vec![1.5, 4.0],
        };
        assert_eq!(group_mean_entropy(&two, &[1.5, 3.5, 4.5]).unwrap(), vec![1.5, 4.0]);
        let flat = ChannelGrouping {
            assignment: vec![0, 1, 2, 1],
            centroids: vec![0.7; 3],
        };
        assert_eq!(group_mean_entropy(&flat, &[0.7; 4]).unwrap(), vec![0.7; 3]);
        assert!(group_mean_entropy(&two, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bit_allocation_examples() {
        assert_eq!(allocate_bits(5.7, 2, 8).unwrap(), 5);
        assert_eq!(allocate_bits(0.3, 2, 8).unwrap(), 2);
        assert_eq!(allocate_bits(11.2, 2, 8).unwrap(), 8);
        assert!(allocate_bits(3.0, 8, 2).is_err());
        assert!(allocate_bits(3.0, 0, 2).is_err());
        assert!(allocate_bits(3.0, 2, 33).is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.0, 1.0], 4, 0.0, 1.0).unwrap(), vec![0, 15]);
        // 0.5 * 3 = 1.5 rounds away from zero
        assert_eq!(quantize(&[0.5], 2, 0.0, 1.0).unwrap(), vec![2]);
        assert_eq!(quantize(&[3.0], 3, 0.0, 7.0).unwrap(), vec![3]);
        assert_eq!(quantize(&[2.0, 2.0], 5, 2.0, 2.0).unwrap(), vec![0, 0]);
        assert!(quantize(&[1.5], 2, 0.0, 1.0).is_err());
        assert!(quantize(&[0.5], 0, 0.0, 1.0).is_err());
        assert_eq!(quantize(&[1.0], 32, 0.0, 1.0).unwrap(), vec![u32::MAX]);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(&[0, 3], 2, -1.0, 2.0).unwrap(), vec![-1.0, 2.0]);
        assert!((dequantize(&[2], 2, 0.0, 1.0).unwrap()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dequantize(&[0, 0], 3, 4.0, 4.0).unwrap(), vec![4.0, 4.0]);
        assert!(dequantize(&[4], 2, 0.0, 1.0).is_err());
    }

    #[test]
    fn f32_widening() {
        let x = 0.1f64;
        assert!((f32_floor(x) as f64) <= x && (f32_ceil(x) as f64) >= x);
        assert_eq!(f32_ceil(x).next_down(), f32_floor(x));
        assert_eq!(f32_floor(0.5), 0.5);
        assert_eq!(f32_ceil(0.5), 0.5);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            values in prop::collection::vec(-1e3f64..1e3, 1..100),
            b in 1u8..=16,
        ) {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let codes = quantize(&values, b, lo, hi).unwrap();
            prop_assert!(codes.iter().all(|&c| (c as f64) <= levels(b)));
            let back = dequantize(&codes, b, lo, hi).unwrap();
            let bound = (hi - lo) / (2.0 * levels(b));
            for (x, y) in values.iter().zip(&back) {
                let ulp = 4.0 * f64::EPSILON * x.abs().max(lo.abs()).max(hi.abs());
                prop_assert!((x - y).abs() <= bound + ulp);
            }
        }

        #[test]
        fn allocation_is_monotone(a in -2.0f64..40.0, b in -2.0f64..40.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(allocate_bits(lo, 2, 8).unwrap() <= allocate_bits(hi, 2, 8).unwrap());
        }
    }
}
