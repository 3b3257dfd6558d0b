//! Attention logits, softmax maps, and the per-channel logit decomposition.
//!
//! Logits are unscaled: `a[t][i] = q_t . rotate(k_i, i - t)`, with no `1/sqrt(d)`
//! factor. This is the same quantity a model computes from post-RoPE vectors,
//! `(R_t q_t) . (R_i k_i)`, before its softmax temperature. Compare against
//! model logits only after multiplying by `sqrt(d)`.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{check_index, Error, Result};
use crate::rope::{channel_of, norm2, rotation_angle, RopeConfig};
use crate::tensors::Series;

/// Query and key series of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct QkSeries {
    queries: Series,
    keys: Series,
    cfg: RopeConfig,
    rope_enabled: bool,
}

impl QkSeries {
    pub fn new(queries: Series, keys: Series, cfg: RopeConfig) -> Result<Self> {
        for s in [&queries, &keys] {
            if s.dim() != cfg.head_dim() {
                return Err(Error::Shape {
                    expected: cfg.head_dim(),
                    found: s.dim(),
                });
            }
        }
        if queries.row_count() != keys.row_count() {
            return Err(Error::Shape {
                expected: queries.row_count(),
                found: keys.row_count(),
            });
        }
        Ok(QkSeries {
            queries,
            keys,
            cfg,
            rope_enabled: true,
        })
    }

    /// Same series with rotations replaced by the identity.
    pub fn without_rope(mut self) -> Self {
        self.rope_enabled = false;
        self
    }

    pub fn with_queries(&self, queries: Series) -> Result<Self> {
        let mut out = QkSeries::new(queries, self.keys.clone(), self.cfg)?;
        out.rope_enabled = self.rope_enabled;
        Ok(out)
    }

    pub fn with_keys(&self, keys: Series) -> Result<Self> {
        let mut out = QkSeries::new(self.queries.clone(), keys, self.cfg)?;
        out.rope_enabled = self.rope_enabled;
        Ok(out)
    }

    pub fn queries(&self) -> &Series {
        &self.queries
    }

    pub fn keys(&self) -> &Series {
        &self.keys
    }

    pub fn cfg(&self) -> &RopeConfig {
        &self.cfg
    }

    pub fn rope_enabled(&self) -> bool {
        self.rope_enabled
    }

    /// Sequence length `T`.
    pub fn len(&self) -> usize {
        self.queries.row_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q(&self, t: usize) -> &[f64] {
        self.queries.row(t)
    }

    pub fn k(&self, i: usize) -> &[f64] {
        self.keys.row(i)
    }

    fn offset_for(&self, t: usize, i: usize) -> i64 {
        if self.rope_enabled {
            i as i64 - t as i64
        } else {
            0
        }
    }

    /// Logit between query `t` and key `i` for any pair of positions.
    pub fn logit(&self, t: usize, i: usize) -> f64 {
        pair_logit(&self.cfg, self.q(t), self.k(i), self.offset_for(t, i))
    }

    /// Logit contribution of a single channel.
    pub fn channel_logit(&self, t: usize, i: usize, m: usize) -> f64 {
        let theta = self.cfg.freq_unchecked(m);
        let (s, c) = rotation_angle(self.offset_for(t, i), theta).sin_cos();
        let q = channel_of(self.q(t), m);
        let k = channel_of(self.k(i), m);
        rotated_dot(q, k, c, s)
    }
}

/// `q . rotate(k, offset)` for one channel, given `cos`/`sin` of the angle.
fn rotated_dot(q: [f64; 2], k: [f64; 2], c: f64, s: f64) -> f64 {
    let rk0 = k[0] * c - k[1] * s;
    let rk1 = k[0] * s + k[1] * c;
    q[0] * rk0 + q[1] * rk1
}

fn pair_logit(cfg: &RopeConfig, q: &[f64], k: &[f64], offset: i64) -> f64 {
    let half = cfg.channels();
    (0..half)
        .map(|m| {
            let (s, c) = rotation_angle(offset, cfg.freq_unchecked(m)).sin_cos();
            rotated_dot([q[m], q[m + half]], [k[m], k[m + half]], c, s)
        })
        .sum()
}

/// One channel's share of a logit: `weight * cos(phase + (i - t) * freq)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelContribution {
    pub weight: f64,
    /// Signed angle from the query channel to the key channel, in `[-pi, pi]`.
    pub phase: f64,
    pub freq: f64,
    pub value: f64,
}

pub fn logits_at(series: &QkSeries, t: usize) -> Result<Vec<f64>> {
    check_index("t", t, series.len())?;
    Ok((0..=t).map(|i| series.logit(t, i)).collect())
}

pub fn channel_decompose(
    series: &QkSeries,
    t: usize,
    i: usize,
) -> Result<Vec<ChannelContribution>> {
    check_index("t", t, series.len())?;
    if i > t {
        return Err(Error::Bounds {
            what: "key index",
            index: i,
            limit: t + 1,
        });
    }
    let cfg = series.cfg();
    let offset = series.offset_for(t, i);
    Ok((0..cfg.channels())
        .map(|m| {
            let q = channel_of(series.q(t), m);
            let k = channel_of(series.k(i), m);
            let freq = cfg.freq_unchecked(m);
            let (s, c) = rotation_angle(offset, freq).sin_cos();
            let weight = norm2(q) * norm2(k);
            let phase = if weight > 0.0 {
                wrap_angle(k[1].atan2(k[0]) - q[1].atan2(q[0]))
            } else {
                0.0
            };
            let value = rotated_dot(q, k, c, s).clamp(-weight, weight);
            ChannelContribution {
                weight,
                phase,
                freq,
                value,
            }
        })
        .collect())
}

pub(crate) fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Causal logit matrix in packed lower-triangular storage.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    len: usize,
    logits: Vec<f64>,
    rope_enabled: bool,
}

fn row_start(t: usize) -> usize {
    t * (t + 1) / 2
}

impl AttentionMap {
    /// Build a map from an arbitrary logit function over `i <= t`.
    pub fn from_fn(
        len: usize,
        rope_enabled: bool,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::Invariant("attention map needs T > 0".into()));
        }
        let mut logits = Vec::with_capacity(row_start(len));
        for t in 0..len {
            for i in 0..=t {
                logits.push(f(t, i));
            }
        }
        if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(AttentionMap {
            len,
            logits,
            rope_enabled,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rope_enabled(&self) -> bool {
        self.rope_enabled
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.logits[row_start(t)..row_start(t + 1)]
    }

    /// Entry `(t, i)`, or `None` above the diagonal or out of range.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        (t < self.len && i <= t).then(|| self.logits[row_start(t) + i])
    }
}

pub fn full_map(series: &QkSeries) -> AttentionMap {
    let len = series.len();
    let cfg = series.cfg();
    let half = cfg.channels();
    let freqs = cfg.freqs();
    // cos/sin per (offset, channel); offsets are i - t = -o for o in 0..T.
    let table: Vec<(f64, f64)> = (0..len)
        .flat_map(|o| {
            let offset = if series.rope_enabled() {
                -(o as i64)
            } else {
                0
            };
            freqs
                .iter()
                .map(move |&th| {
                    let (s, c) = rotation_angle(offset, th).sin_cos();
                    (c, s)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..len)
        .into_par_iter()
        .map(|t| {
            let q = series.q(t);
            (0..=t)
                .map(|i| {
                    let k = series.k(i);
                    let trig = &table[(t - i) * half..(t - i + 1) * half];
                    (0..half)
                        .map(|m| {
                            let (c, s) = trig[m];
                            rotated_dot([q[m], q[m + half]], [k[m], k[m + half]], c, s)
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    AttentionMap {
        len,
        logits: rows.into_iter().flatten().collect(),
        rope_enabled: series.rope_enabled(),
    }
}

/// Row-stochastic causal matrix, same packing as [`AttentionMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMap {
    len: usize,
    probs: Vec<f64>,
}

impl SoftmaxMap {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[row_start(t)..row_start(t + 1)]
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        (t < self.len && i <= t).then(|| self.probs[row_start(t) + i])
    }

    /// Binary PGM (`P5`), one byte per cell, masked cells black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.len, self.len).into_bytes();
        for t in 0..self.len {
            let row = self.row(t);
            for i in 0..self.len {
                let byte = row
                    .get(i)
                    .map_or(0, |&p| (p * 255.0).round().clamp(0.0, 255.0) as u8);
                out.push(byte);
            }
        }
        out
    }
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_rows(map: &AttentionMap) -> SoftmaxMap {
    let probs = (0..map.len())
        .flat_map(|t| softmax_row(map.row(t)))
        .collect();
    SoftmaxMap {
        len: map.len(),
        probs,
    }
}
