//! Channel importance from Shannon entropy.
//!
//! Each channel is min-max normalized to `[0, 1]`, pushed through a softmax,
//! and scored by the entropy of the resulting distribution. The per-round
//! score blends the current entropy with the mean over a sliding window of
//! past rounds, shifting weight toward history as training progresses
//! (`alpha = t / T`).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SmashedData;

/// Logarithm base used for entropies. Natural log unless configured otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LogBase {
    #[default]
    #[serde(rename = "e")]
    E,
    #[serde(rename = "2")]
    Two,
}

impl LogBase {
    fn ln(self) -> f64 {
        match self {
            LogBase::E => 1.0,
            LogBase::Two => std::f64::consts::LN_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EntropyOptions {
    #[serde(default)]
    pub base: LogBase,
    /// Score constant channels as zero entropy instead of the maximum the
    /// normalize-then-softmax pipeline assigns them.
    #[serde(default)]
    pub constant_channel_zero: bool,
}

/// Min-max normalization to `[0, 1]`. A constant channel maps to all zeros.
pub fn normalize_channel(values: &[f64]) -> Result<Vec<f64>> {
    let (min, max) = min_max(values)?;
    if max == min {
        return Ok(vec![0.0; values.len()]);
    }
    let span = max - min;
    Ok(values.iter().map(|&v| ((v - min) / span).clamp(0.0, 1.0)).collect())
}

/// Numerically stable softmax.
pub fn softmax_distribution(values: &[f64]) -> Result<Vec<f64>> {
    let (_, max) = min_max(values)?;
    let mut p: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

/// Entropy (nats) of `softmax(normalize(channel))`.
pub fn instantaneous_entropy(channel: &[f64]) -> Result<f64> {
    instantaneous_entropy_with(channel, EntropyOptions::default())
}

/// Entropy in the configured base, bounded to `[0, log N]`.
pub fn instantaneous_entropy_with(channel: &[f64], opts: EntropyOptions) -> Result<f64> {
    let (min, max) = min_max(channel)?;
    if opts.constant_channel_zero && min == max {
        return Ok(0.0);
    }
    let p = softmax_distribution(&normalize_channel(channel)?)?;
    let h: f64 = -p
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| pi * pi.ln())
        .sum::<f64>();
    let upper = (channel.len() as f64).ln();
    Ok(h.clamp(0.0, upper) / opts.base.ln())
}

/// `alpha = t / T`.
pub fn alpha_schedule(t: u32, total: u32) -> Result<f64> {
    if total == 0 {
        return Err(Error::arg("total rounds must be positive"));
    }
    if t > total {
        return Err(Error::arg(format!("round {t} beyond total {total}")));
    }
    Ok(t as f64 / total as f64)
}

/// `(1 - alpha) * h_now + alpha * h_hist`.
pub fn blend_entropy(h_now: f64, h_hist: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("alpha {alpha} outside [0, 1]")));
    }
    if !h_now.is_finite() || !h_hist.is_finite() || h_now < 0.0 || h_hist < 0.0 {
        return Err(Error::arg("entropies must be finite and non-negative"));
    }
    Ok((1.0 - alpha) * h_now + alpha * h_hist)
}

/// Per-channel entropy history over the last `window` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyState {
    window: usize,
    history: Vec<VecDeque<f64>>,
    last_scores: Vec<f64>,
}

impl EntropyState {
    pub fn new(channels: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::arg("history window must be positive"));
        }
        if channels == 0 {
            return Err(Error::arg("need at least one channel"));
        }
        Ok(Self {
            window,
            history: vec![VecDeque::with_capacity(window); channels],
            last_scores: vec![0.0; channels],
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.history.len()
    }

    /// Oldest first.
    pub fn history(&self, c: usize) -> Result<&VecDeque<f64>> {
        self.history.get(c).ok_or(Error::Index {
            index: c,
            len: self.history.len(),
        })
    }

    pub fn last_scores(&self) -> &[f64] {
        &self.last_scores
    }

    /// Appends an instantaneous entropy, evicting the oldest beyond the window.
    pub fn push(&mut self, c: usize, h: f64) -> Result<()> {
        let len = self.history.len();
        let buf = self.history.get_mut(c).ok_or(Error::Index { index: c, len })?;
        if buf.len() == self.window {
            buf.pop_front();
        }
        buf.push_back(h);
        Ok(())
    }

    /// Mean of the buffered entropies for channel `c`; 0 when empty.
    pub fn historical_entropy(&self, c: usize) -> Result<f64> {
        let buf = self.history(c)?;
        if buf.is_empty() {
            return Ok(0.0);
        }
        Ok(buf.iter().sum::<f64>() / buf.len() as f64)
    }
}

/// Blended entropy per channel for one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub round: u32,
}

/// One row of the entropy trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelScore {
    pub channel: usize,
    pub h_inst: f64,
    pub h_hist: f64,
    pub alpha: f64,
    pub h_blend: f64,
}

pub fn score_channels(
    s: &SmashedData,
    state: &mut EntropyState,
    t: u32,
    total: u32,
    opts: EntropyOptions,
) -> Result<ImportanceVector> {
    score_channels_detailed(s, state, t, total, opts).map(|(v, _)| v)
}

/// Scores every channel and records the instantaneous entropies in `state`.
/// The history is read before it is updated, so round `t` blends with
/// rounds `t-k .. t-1`.
pub fn score_channels_detailed(
    s: &SmashedData,
    state: &mut EntropyState,
    t: u32,
    total: u32,
    opts: EntropyOptions,
) -> Result<(ImportanceVector, Vec<ChannelScore>)> {
    if state.channels() != s.channels() {
        return Err(Error::State(format!(
            "entropy state tracks {} channels, smashed data has {}",
            state.channels(),
            s.channels()
        )));
    }
    let alpha = alpha_schedule(t, total)?;
    let mut rows = Vec::with_capacity(s.channels());
    for c in 0..s.channels() {
        let h_inst = instantaneous_entropy_with(&s.channel_view(c)?, opts)?;
        let h_hist = state.historical_entropy(c)?;
        let h_blend = blend_entropy(h_inst, h_hist, alpha)?;
        rows.push(ChannelScore {
            channel: c,
            h_inst,
            h_hist,
            alpha,
            h_blend,
        });
    }
    for row in &rows {
        state.push(row.channel, row.h_inst)?;
    }
    let scores: Vec<f64> = rows.iter().map(|r| r.h_blend).collect();
    state.last_scores.clone_from(&scores);
    Ok((ImportanceVector { scores, round: t }, rows))
}

fn min_max(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::arg("empty channel"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::arg("non-finite channel value"));
        }
        min = min.min(v);
        max = max.max(v);
    }
    Ok((min, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Direction, Tensor};
    use proptest::prelude::*;

    /// Independent route: H = ln Z - E_p[v] with compensated sums and no
    /// max-subtraction.
    fn oracle_entropy(values: &[f64]) -> f64 {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v: Vec<f64> = if max == min {
            vec![0.0; values.len()]
        } else {
            values.iter().map(|x| (x - min) / (max - min)).collect()
        };
        let w: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let z = neumaier(w.iter().cloned());
        let ev = neumaier(w.iter().zip(&v).map(|(a, b)| a * b)) / z;
        z.ln() - ev
    }

    fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for x in xs {
            let t = s + x;
            if s.abs() >= x.abs() {
                c += (s - t) + x;
            } else {
                c += (x - t) + s;
            }
            s = t;
        }
        s + c
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_channel(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_channel(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(normalize_channel(&[-1.0, 0.0, 3.0]).unwrap(), vec![0.0, 0.25, 1.0]);
        assert!(normalize_channel(&[]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_distribution(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax_distribution(&[0.0, 1.0]).unwrap();
        // 1/(1+e), e/(1+e) evaluated at 40 digits
        assert!(close(p[0], 0.268_941_421_369_995_1, 1e-15));
        assert!(close(p[1], 0.731_058_578_630_004_9, 1e-15));
        assert_eq!(softmax_distribution(&[-3.7]).unwrap(), vec![1.0]);
        let big = softmax_distribution(&[1000.0, 1000.0, 999.0]).unwrap();
        assert!(close(big.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(instantaneous_entropy(&[7.3]).unwrap(), 0.0);
        assert!(close(
            instantaneous_entropy(&[5.0; 4]).unwrap(),
            std::f64::consts::LN_2 * 2.0,
            1e-12
        ));
        // ln(1+e) - e/(1+e) at 40 digits
        assert!(close(
            instantaneous_entropy(&[0.0, 1.0]).unwrap(),
            0.582_203_108_888_217_9,
            1e-12
        ));
        assert!(instantaneous_entropy(&[]).is_err());
    }

    #[test]
    fn entropy_options() {
        let two = EntropyOptions {
            base: LogBase::Two,
            ..Default::default()
        };
        assert!(close(instantaneous_entropy_with(&[1.0; 8], two).unwrap(), 3.0, 1e-12));
        let zero = EntropyOptions {
            constant_channel_zero: true,
            ..Default::default()
        };
        assert_eq!(instantaneous_entropy_with(&[2.0; 8], zero).unwrap(), 0.0);
        assert!(instantaneous_entropy_with(&[2.0, 3.0], zero).unwrap() > 0.0);
    }

    #[test]
    fn history_mean_and_cold_start() {
        let mut st = EntropyState::new(2, 3).unwrap();
        assert_eq!(st.historical_entropy(0).unwrap(), 0.0);
        st.push(1, 0.58220).unwrap();
        assert_eq!(st.historical_entropy(1).unwrap(), 0.58220);
        for h in [1.0, 2.0, 3.0] {
            st.push(0, h).unwrap();
        }
        assert_eq!(st.historical_entropy(0).unwrap(), 2.0);
        st.push(0, 10.0).unwrap();
        assert_eq!(st.history(0).unwrap().iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 10.0]);
        assert!(matches!(st.historical_entropy(2), Err(Error::Index { .. })));
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_schedule(0, 60).unwrap(), 0.0);
        assert_eq!(alpha_schedule(60, 60).unwrap(), 1.0);
        assert_eq!(alpha_schedule(30, 60).unwrap(), 0.5);
        assert!(alpha_schedule(0, 0).is_err());
        assert!(alpha_schedule(61, 60).is_err());
    }

    #[test]
    fn blend_examples() {
        assert_eq!(blend_entropy(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert_eq!(blend_entropy(2.0, 4.0, 1.0).unwrap(), 4.0);
        assert_eq!(blend_entropy(2.0, 4.0, 0.25).unwrap(), 2.5);
        assert!(blend_entropy(2.0, 4.0, 1.5).is_err());
        assert!(blend_entropy(2.0, 4.0, -0.1).is_err());
    }

    fn smashed(c: usize, n: usize, seed: u64) -> SmashedData {
        let data: Vec<f64> = (0..c * n)
            .map(|i| (((i as u64 + 1).wrapping_mul(seed * 2 + 1) >> 7) % 997) as f64 / 100.0)
            .collect();
        SmashedData::new(Tensor::new(vec![1, c, 1, n], data).unwrap(), 0, Direction::Activations)
            .unwrap()
    }

    #[test]
    fn cold_start_score_is_instantaneous() {
        let s = smashed(1, 16, 3);
        let mut st = EntropyState::new(1, 5).unwrap();
        let v = score_channels(&s, &mut st, 0, 10, EntropyOptions::default()).unwrap();
        let h = instantaneous_entropy(&s.channel_view(0).unwrap()).unwrap();
        assert_eq!(v.scores, vec![h]);
        assert_eq!(st.history(0).unwrap().len(), 1);
    }

    #[test]
    fn score_matches_scalar_pipeline() {
        let prior = [smashed(2, 32, 11), smashed(2, 32, 12)];
        let now = smashed(2, 32, 13);
        let mut st = EntropyState::new(2, 3).unwrap();
        for (t, s) in prior.iter().enumerate() {
            score_channels(s, &mut st, t as u32, 10, EntropyOptions::default()).unwrap();
        }
        let v = score_channels(&now, &mut st, 2, 10, EntropyOptions::default()).unwrap();
        for c in 0..2 {
            let hist = (oracle_entropy(&prior[0].channel_view(c).unwrap())
                + oracle_entropy(&prior[1].channel_view(c).unwrap()))
                / 2.0;
            let inst = oracle_entropy(&now.channel_view(c).unwrap());
            let expected = 0.8 * inst + 0.2 * hist;
            assert!(close(v.scores[c], expected, 1e-12), "{} vs {}", v.scores[c], expected);
        }
    }

    #[test]
    fn channel_mismatch_is_state_error() {
        let mut st = EntropyState::new(3, 5).unwrap();
        let s = smashed(4, 4, 1);
        assert!(matches!(
            score_channels(&s, &mut st, 0, 10, EntropyOptions::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn scoring_is_deterministic_with_copied_state() {
        let s = smashed(3, 20, 5);
        let mut a = EntropyState::new(3, 2).unwrap();
        score_channels(&smashed(3, 20, 4), &mut a, 0, 4, Default::default()).unwrap();
        let mut b = a.clone();
        let va = score_channels(&s, &mut a, 1, 4, Default::default()).unwrap();
        let vb = score_channels(&s, &mut b, 1, 4, Default::default()).unwrap();
        assert_eq!(va, vb);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn entropy_matches_oracle_and_bounds(
            values in prop::collection::vec(-100.0f64..100.0, 1..300)
        ) {
            let h = instantaneous_entropy(&values).unwrap();
            let n = values.len() as f64;
            prop_assert!(h >= 0.0 && h <= n.ln());
            prop_assert!((h - oracle_entropy(&values)).abs() < 1e-9);
        }

        #[test]
        fn entropy_is_affine_invariant(
            values in prop::collection::vec(-10.0f64..10.0, 2..64),
            a in 0.5f64..4.0,
            b in -5.0f64..5.0,
        ) {
            let mapped: Vec<f64> = values.iter().map(|v| a * v + b).collect();
            let h0 = instantaneous_entropy(&values).unwrap();
            let h1 = instantaneous_entropy(&mapped).unwrap();
            prop_assert!((h0 - h1).abs() < 1e-9);
        }

        #[test]
        fn blend_moves_toward_history(now in 0.0f64..10.0, hist in 0.0f64..10.0, a in 0.0f64..1.0, d in 0.0f64..1.0) {
            let a2 = (a + d).min(1.0);
            let x1 = (blend_entropy(now, hist, a).unwrap() - hist).abs();
            let x2 = (blend_entropy(now, hist, a2).unwrap() - hist).abs();
            prop_assert!(x2 <= x1 + 1e-12);
        }

        #[test]
        fn history_keeps_last_k(k in 1usize..6, rounds in 0usize..15) {
            let mut st = EntropyState::new(1, k).unwrap();
            for r in 0..rounds {
                st.push(0, r as f64).unwrap();
            }
            let h: Vec<f64> = st.history(0).unwrap().iter().copied().collect();
            let expected: Vec<f64> = (rounds.saturating_sub(k)..rounds).map(|r| r as f64).collect();
            prop_assert_eq!(h, expected);
        }
    }
}
