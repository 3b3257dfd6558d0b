//! Rotary position embedding under half-split pairing.
//!
//! Channel `m` owns dimensions `(m, m + d/2)` and rotates with angular
//! frequency `theta_m = base^(-2m/d)`. `rotate(v, n)` turns every channel
//! counter-clockwise by `n * theta_m`, so `rotate(rotate(v, n), -m)` equals
//! `rotate(v, n - m)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Dimension `m` pairs with `m + d/2` (Llama / Qwen layout).
    #[default]
    HalfSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    base: f64,
    head_dim: usize,
    #[serde(default)]
    pairing: Pairing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPair {
    pub low_index: usize,
    pub high_index: usize,
}

impl RopeConfig {
    pub fn new(base: f64, head_dim: usize) -> Result<Self> {
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::Parameter(format!(
                "rope base must be > 1, got {base}"
            )));
        }
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "head_dim must be even and positive, got {head_dim}"
            )));
        }
        Ok(RopeConfig {
            base,
            head_dim,
            pairing: Pairing::HalfSplit,
        })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    /// Number of 2-D channels, `d / 2`.
    pub fn channels(&self) -> usize {
        self.head_dim / 2
    }

    pub fn pair(&self, m: usize) -> Result<ChannelPair> {
        check_index("channel", m, self.channels())?;
        Ok(ChannelPair {
            low_index: m,
            high_index: m + self.channels(),
        })
    }

    pub fn channel_freq(&self, m: usize) -> Result<f64> {
        check_index("channel", m, self.channels())?;
        Ok(self.freq_unchecked(m))
    }

    pub(crate) fn freq_unchecked(&self, m: usize) -> f64 {
        self.base.powf(-2.0 * m as f64 / self.head_dim as f64)
    }

    /// All channel frequencies, strictly decreasing from 1.
    pub fn freqs(&self) -> Vec<f64> {
        (0..self.channels())
            .map(|m| self.freq_unchecked(m))
            .collect()
    }

    /// Channel that owns raw dimension `j`.
    pub fn channel_of_dimension(&self, j: usize) -> Result<usize> {
        check_index("dimension", j, self.head_dim)?;
        Ok(j % self.channels())
    }

    pub(crate) fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() == self.head_dim {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: self.head_dim,
                found: v.len(),
            })
        }
    }

    /// Rotate `v` as if it sat at position `n`.
    pub fn rotate(&self, v: &[f64], n: i64) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let mut out = v.to_vec();
        self.rotate_in_place(&mut out, n);
        Ok(out)
    }

    pub(crate) fn rotate_in_place(&self, v: &mut [f64], n: i64) {
        let half = self.channels();
        for m in 0..half {
            let (s, c) = rotation_angle(n, self.freq_unchecked(m)).sin_cos();
            let (a, b) = (v[m], v[m + half]);
            v[m] = a * c - b * s;
            v[m + half] = a * s + b * c;
        }
    }

    /// Max-abs gap between `R_m^T R_n v` and `R_(n-m) v`; zero up to rounding.
    pub fn relative_rotation_check(&self, m: i64, n: i64, v: &[f64]) -> Result<f64> {
        let composed = self.rotate(&self.rotate(v, n)?, -m)?;
        let direct = self.rotate(v, n - m)?;
        Ok(composed
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// `n * theta` reduced into `[0, 2pi)`.
pub(crate) fn rotation_angle(n: i64, theta: f64) -> f64 {
    (n as f64 * theta).rem_euclid(TAU)
}

pub(crate) fn channel_of(v: &[f64], m: usize) -> [f64; 2] {
    let half = v.len() / 2;
    [v[m], v[m + half]]
}

pub(crate) fn norm2(p: [f64; 2]) -> f64 {
    p[0].hypot(p[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn theta_zero_is_one() {
        let cfg = RopeConfig::new(10_000.0, 4).unwrap();
        assert_eq!(cfg.channel_freq(0).unwrap(), 1.0);
    }

    #[test]
    fn theta_one_for_d4_is_a_hundredth() {
        let cfg = RopeConfig::new(10_000.0, 4).unwrap();
        assert_relative_eq!(cfg.channel_freq(1).unwrap(), 0.01, max_relative = 1e-12);
    }

    #[test]
    fn theta_two_for_qwen_config() {
        // 1e6^(-1/32), evaluated independently at high precision.
        let cfg = RopeConfig::new(1e6, 128).unwrap();
        assert_relative_eq!(
            cfg.channel_freq(2).unwrap(),
            0.649_381_631_576_211_3,
            max_relative = 1e-12
        );
    }

    #[test]
    fn out_of_range_channel() {
        let cfg = RopeConfig::new(10_000.0, 8).unwrap();
        assert!(matches!(cfg.channel_freq(4), Err(Error::Bounds { .. })));
        assert!(cfg.pair(4).is_err());
        assert_eq!(
            cfg.pair(1).unwrap(),
            ChannelPair {
                low_index: 1,
                high_index: 5
            }
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(RopeConfig::new(1.0, 8).is_err());
        assert!(RopeConfig::new(10_000.0, 7).is_err());
        assert!(RopeConfig::new(f64::NAN, 8).is_err());
    }

    #[test]
    fn freqs_strictly_decrease() {
        let cfg = RopeConfig::new(500_000.0, 128).unwrap();
        let f = cfg.freqs();
        assert!(f.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn position_zero_is_identity() {
        let cfg = RopeConfig::new(10_000.0, 8).unwrap();
        let v = [1.0, -2.0, 3.0, 0.5, 0.25, -1.0, 2.0, 4.0];
        assert_eq!(cfg.rotate(&v, 0).unwrap(), v.to_vec());
    }

    #[test]
    fn rotation_matches_pairwise_formula() {
        let cfg = RopeConfig::new(100.0, 4).unwrap();
        let v = [1.0, 2.0, 3.0, 4.0];
        let r = cfg.rotate(&v, 3).unwrap();
        for m in 0..2 {
            let th = cfg.channel_freq(m).unwrap() * 3.0;
            let (a, b) = (v[m], v[m + 2]);
            assert_relative_eq!(r[m], a * th.cos() - b * th.sin(), epsilon = 1e-12);
            assert_relative_eq!(r[m + 2], a * th.sin() + b * th.cos(), epsilon = 1e-12);
        }
    }

    #[test]
    fn wrong_length_is_shape_error() {
        let cfg = RopeConfig::new(10_000.0, 8).unwrap();
        assert!(matches!(cfg.rotate(&[1.0; 6], 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn dimension_maps_modulo_half() {
        let cfg = RopeConfig::new(1e6, 128).unwrap();
        assert_eq!(cfg.channel_of_dimension(124).unwrap(), 60);
        assert_eq!(cfg.channel_of_dimension(60).unwrap(), 60);
        assert!(cfg.channel_of_dimension(128).is_err());
    }

    #[test]
    fn relative_check_trivial_cases() {
        let cfg = RopeConfig::new(10_000.0, 16).unwrap();
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!(cfg.relative_rotation_check(0, 0, &v).unwrap() < 1e-15);
        assert!(cfg.relative_rotation_check(0, 12, &v).unwrap() < 1e-12);
        assert!(cfg.relative_rotation_check(77, 77, &v).unwrap() < 1e-12);
    }
}
