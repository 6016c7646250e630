//! Timestamp and position enrichment: sinusoidal absolute positions,
//! logarithmic temporal decay, cyclic (rotary) time rotation, clipped
//! relative-position bias and log-bucketed pairwise time-delta bias.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfeeConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Seconds.
    pub decay_tau: f64,
    /// `B`: bucket magnitudes run over `0..B`.
    pub n_time_buckets: usize,
    /// `δ` in seconds.
    pub bucket_base_delta: i64,
    /// `w`: relative offsets are clipped to `[-w, w]`.
    pub relpos_window: usize,
    /// Seconds; daily and weekly by default.
    pub cyclic_periods: Vec<i64>,
}

impl CfeeConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        CfeeConfig {
            d_model,
            n_heads,
            decay_tau: 3600.0,
            n_time_buckets: 32,
            bucket_base_delta: 60,
            relpos_window: 64,
            cyclic_periods: vec![86_400, 604_800],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cyclic_periods.is_empty() || self.cyclic_periods.iter().any(|&p| p <= 0) {
            return Err(Error::config("cfee.cyclic_periods", "need at least one positive period"));
        }
        if self.d_model == 0 || self.d_model % (2 * self.cyclic_periods.len()) != 0 {
            return Err(Error::config(
                "cfee.d_model",
                "must be a positive multiple of 2 x number of cyclic periods",
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 || (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config("cfee.n_heads", "d_model / n_heads must be a positive even integer"));
        }
        if self.n_time_buckets < 1 {
            return Err(Error::config("cfee.n_time_buckets", "must be >= 1"));
        }
        if self.bucket_base_delta < 1 {
            return Err(Error::config("cfee.bucket_base_delta", "must be >= 1"));
        }
        if self.relpos_window < 1 {
            return Err(Error::config("cfee.relpos_window", "must be >= 1"));
        }
        if !(self.decay_tau > 0.0 && self.decay_tau.is_finite()) {
            return Err(Error::config("cfee.decay_tau", "must be positive"));
        }
        Ok(())
    }

    pub fn relpos_table_len(&self) -> usize {
        2 * self.relpos_window + 1
    }

    pub fn time_table_len(&self) -> usize {
        2 * self.n_time_buckets + 1
    }
}

/// Learned CFEE state for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct CfeeParams {
    /// Affine map of the scalar decay feature: `w·s + b`.
    pub decay_w: Vec<f64>,
    pub decay_b: Vec<f64>,
    /// `n_heads × (2w+1)`.
    pub relpos: Mat,
    /// `n_heads × (2B+1)`.
    pub time_bias: Mat,
}

impl CfeeParams {
    pub fn zeros(cfg: &CfeeConfig) -> Self {
        CfeeParams {
            decay_w: vec![0.0; cfg.d_model],
            decay_b: vec![0.0; cfg.d_model],
            relpos: Mat::zeros(cfg.n_heads, cfg.relpos_table_len()),
            time_bias: Mat::zeros(cfg.n_heads, cfg.time_table_len()),
        }
    }

    pub fn random<R: Rng>(cfg: &CfeeConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        CfeeParams {
            decay_w: (0..d).map(|_| rng.random_range(-0.1..0.1)).collect(),
            decay_b: (0..d).map(|_| rng.random_range(-0.1..0.1)).collect(),
            relpos: Mat::random(cfg.n_heads, cfg.relpos_table_len(), 0.1, rng),
            time_bias: Mat::random(cfg.n_heads, cfg.time_table_len(), 0.1, rng),
        }
    }
}

/// Sinusoidal encoding: `out[2i] = sin(pos / 10000^(2i/d))`, `out[2i+1] = cos(..)`.
pub fn absolute_position_encoding(position: usize, d_model: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_model];
    let pos = position as f64;
    for i in 0..d_model / 2 {
        let angle = pos / 10_000f64.powf((2 * i) as f64 / d_model as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// `ln(1 + (t_ref − t_event)/τ)`.
pub fn temporal_decay_feature(t_ref: i64, t_event: i64, tau: f64) -> Result<f64> {
    if t_event > t_ref {
        return Err(Error::FutureEvent { t_ref, t_event });
    }
    Ok(((t_ref - t_event) as f64 / tau).ln_1p())
}

pub fn temporal_decay_encoding(params: &CfeeParams, feature: f64) -> Vec<f64> {
    params
        .decay_w
        .iter()
        .zip(&params.decay_b)
        .map(|(w, b)| w * feature + b)
        .collect()
}

/// Rotation angle for `period` at `timestamp`.
#[inline]
pub fn cyclic_angle(timestamp: i64, period: i64) -> f64 {
    TAU * timestamp.rem_euclid(period) as f64 / period as f64
}

/// Rotates consecutive pairs in place; the dimensions are split evenly across
/// `periods`, and every pair inside a partition turns by that period's angle.
/// `inverse` rotates by the negated angle (the transpose).
pub fn cyclic_rotate_in_place(x: &mut [f64], timestamp: i64, periods: &[i64], inverse: bool) {
    let part = x.len() / periods.len();
    for (p, &period) in periods.iter().enumerate() {
        let theta = cyclic_angle(timestamp, period);
        let (s, c) = theta.sin_cos();
        let s = if inverse { -s } else { s };
        for pair in x[p * part..(p + 1) * part].chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}

pub fn cyclic_rotate(x: &[f64], timestamp: i64, periods: &[i64]) -> Vec<f64> {
    let mut out = x.to_vec();
    cyclic_rotate_in_place(&mut out, timestamp, periods, false);
    out
}

/// Rotates every row `r` of `m` by its own timestamp `ts[r]`.
pub fn cyclic_rotate_rows(m: &mut Mat, ts: &[i64], periods: &[i64], inverse: bool) {
    for (r, &t) in ts.iter().enumerate() {
        cyclic_rotate_in_place(m.row_mut(r), t, periods, inverse);
    }
}

/// Table column for list offset `i − j`, clipped to `[-w, w]`.
#[inline]
pub fn relpos_index(i: usize, j: usize, window: usize) -> usize {
    let w = window as i64;
    ((i as i64 - j as i64).clamp(-w, w) + w) as usize
}

pub fn relative_position_bias(i: usize, j: usize, head: usize, params: &CfeeParams, window: usize) -> f64 {
    params.relpos.get(head, relpos_index(i, j, window))
}

/// Signed log bucket of `t_i − t_j`:
/// `sign(Δ)·min(B−1, floor(log2(1 + |Δ|/δ)))`, computed in integers.
pub fn time_delta_bucket(t_i: i64, t_j: i64, n_buckets: usize, delta: i64) -> i64 {
    let diff = t_i as i128 - t_j as i128;
    let mag = diff.unsigned_abs();
    let delta = delta as u128;
    // floor(log2((δ + |Δ|)/δ)) = largest k with δ·2^k <= δ + |Δ|.
    let limit = delta + mag;
    let cap = n_buckets as u32 - 1;
    let mut k = 0u32;
    while k < cap && (delta << (k + 1)) <= limit {
        k += 1;
    }
    diff.signum() as i64 * k as i64
}

/// Table column for a pair of timestamps.
#[inline]
pub fn time_bucket_index(t_i: i64, t_j: i64, cfg: &CfeeConfig) -> usize {
    (time_delta_bucket(t_i, t_j, cfg.n_time_buckets, cfg.bucket_base_delta) + cfg.n_time_buckets as i64) as usize
}

/// `M[i][j] = time_bias[head][bucket(t_i − t_j) + B]`.
pub fn pairwise_time_bias(params: &CfeeParams, cfg: &CfeeConfig, timestamps: &[i64], head: usize) -> Mat {
    let n = timestamps.len();
    let mut m = Mat::zeros(n, n);
    for (i, &ti) in timestamps.iter().enumerate() {
        for (j, &tj) in timestamps.iter().enumerate() {
            m.set(i, j, params.time_bias.get(head, time_bucket_index(ti, tj, cfg)));
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{dot, l2_norm};

    #[test]
    fn absolute_position_closed_forms() {
        assert_eq!(absolute_position_encoding(0, 4), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(absolute_position_encoding(1, 2), vec![1f64.sin(), 1f64.cos()]);
        for pos in [0usize, 3, 17, 1000] {
            let v = absolute_position_encoding(pos, 16);
            for pair in v.chunks(2) {
                assert!((pair[0].powi(2) + pair[1].powi(2) - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decay_feature_closed_forms() {
        assert_eq!(temporal_decay_feature(100, 100, 3600.0).unwrap(), 0.0);
        let tau = 3600.0;
        let delta = (tau * (std::f64::consts::E - 1.0)).round() as i64;
        let s = temporal_decay_feature(delta, 0, tau).unwrap();
        assert!((s - 1.0).abs() < 1e-4, "{s}");
        let s = temporal_decay_feature(tau as i64, 0, tau).unwrap();
        assert!((s - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            temporal_decay_feature(5, 6, tau),
            Err(Error::FutureEvent { .. })
        ));
    }

    #[test]
    fn decay_feature_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = rng.random_range(0..10_000_000i64);
            let b = rng.random_range(0..10_000_000i64);
            let (lo, hi) = (a.min(b), a.max(b));
            let f_lo = temporal_decay_feature(hi + 5, hi + 5 - lo, 3600.0).unwrap();
            let f_hi = temporal_decay_feature(hi + 5, 5, 3600.0).unwrap();
            assert!(f_lo <= f_hi);
        }
    }

    #[test]
    fn rotation_at_period_multiples_is_identity() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let periods = [86_400, 604_800];
        assert_eq!(cyclic_rotate(&x, 604_800 * 3, &periods), x);
        assert_eq!(cyclic_rotate(&x, 0, &periods), x);
    }

    #[test]
    fn relpos_center_and_clipping() {
        let cfg = CfeeConfig::new(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CfeeParams::random(&cfg, &mut rng);
        let w = cfg.relpos_window;
        assert_eq!(relative_position_bias(5, 5, 0, &p, w), p.relpos.get(0, w));
        assert_eq!(
            relative_position_bias(w + 100, 0, 0, &p, w),
            relative_position_bias(w, 0, 0, &p, w)
        );
        // +k and -k are separate entries.
        assert_ne!(relpos_index(3, 0, w), relpos_index(0, 3, w));
    }

    #[test]
    fn bucket_closed_forms() {
        assert_eq!(time_delta_bucket(7, 7, 32, 60), 0);
        assert_eq!(time_delta_bucket(60, 0, 32, 60), 1);
        assert_eq!(time_delta_bucket(0, 60, 32, 60), -1);
        assert_eq!(time_delta_bucket(59, 0, 32, 60), 0);
        // 1 + 180/60 = 4 -> 2
        assert_eq!(time_delta_bucket(180, 0, 32, 60), 2);
        assert_eq!(time_delta_bucket(179, 0, 32, 60), 1);
        assert_eq!(time_delta_bucket(i64::MAX, i64::MIN, 32, 60), 31);
        assert_eq!(time_delta_bucket(0, 1_000_000, 1, 60), 0);
    }

    #[test]
    fn bucket_saturates() {
        for b in 1..12usize {
            let delta = 60i64;
            let threshold = delta * ((1i64 << (b - 1)) - 1);
            for extra in [0i64, 1, 1000, 1 << 40] {
                assert_eq!(time_delta_bucket(threshold + extra, 0, b, delta), b as i64 - 1);
                assert_eq!(time_delta_bucket(0, threshold + extra, b, delta), -(b as i64 - 1).max(0));
            }
        }
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(x in prop::collection::vec(-100.0f64..100.0, 8), t in any::<i64>()) {
            let y = cyclic_rotate(&x, t, &[86_400, 604_800]);
            prop_assert!((l2_norm(&x) - l2_norm(&y)).abs() <= 1e-12 * l2_norm(&x).max(1.0));
        }

        #[test]
        fn rotation_relative_phase(
            q in prop::collection::vec(-1.0f64..1.0, 8),
            k in prop::collection::vec(-1.0f64..1.0, 8),
            t1 in 0i64..4_000_000_000, t2 in 0i64..4_000_000_000, s in -1_000_000_000i64..1_000_000_000,
        ) {
            let p = [86_400, 604_800];
            let a = dot(&cyclic_rotate(&q, t1, &p), &cyclic_rotate(&k, t2, &p));
            let b = dot(&cyclic_rotate(&q, t1 + s, &p), &cyclic_rotate(&k, t2 + s, &p));
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn time_bias_shift_invariant(ts in prop::collection::vec(0i64..1_000_000_000, 1..12), shift in -1_000_000_000i64..1_000_000_000) {
            let cfg = CfeeConfig::new(8, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let p = CfeeParams::random(&cfg, &mut rng);
            let shifted: Vec<i64> = ts.iter().map(|t| t + shift).collect();
            for head in 0..2 {
                prop_assert_eq!(pairwise_time_bias(&p, &cfg, &ts, head), pairwise_time_bias(&p, &cfg, &shifted, head));
            }
        }
    }
}
