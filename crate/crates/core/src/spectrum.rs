//! Dominant-channel spectra, period prediction and measurement, and the
//! channel-relocation intervention.

use std::f64::consts::TAU;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{channel_decompose, AttentionMap, QkSeries};
use crate::error::{check_index, Error, Result};
use crate::rope::RopeConfig;
use crate::similarity::median_sorted;
use crate::tensors::Series;

/// Normalized per-channel share of absolute logit mass at one key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpectrum {
    pub weights: Vec<f64>,
    pub dominant: usize,
    pub dominant_share: f64,
}

impl ChannelSpectrum {
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::DegenerateSpectrum);
        }
        let weights: Vec<f64> = masses.into_iter().map(|m| m / total).collect();
        let dominant = argmax(&weights);
        Ok(ChannelSpectrum {
            dominant_share: weights[dominant],
            dominant,
            weights,
        })
    }
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Aggregate `|value_m(t, key_index)|` over `t_range`.
pub fn channel_spectrum(
    series: &QkSeries,
    key_index: usize,
    t_range: Range<usize>,
) -> Result<ChannelSpectrum> {
    if t_range.is_empty() {
        return Err(Error::Parameter("empty query range".into()));
    }
    check_index("t_range end", t_range.end - 1, series.len())?;
    if key_index > t_range.start {
        return Err(Error::Precondition(format!(
            "key {key_index} is after the first query {}",
            t_range.start
        )));
    }
    let mut masses = vec![0.0; series.cfg().channels()];
    for t in t_range {
        for (m, c) in channel_decompose(series, t, key_index)?.iter().enumerate() {
            masses[m] += c.value.abs();
        }
    }
    ChannelSpectrum::from_masses(masses)
}

/// Distance between adjacent diagonals for a dominant channel:
/// `2 pi base^(2 m / d)`.
pub fn predicted_period(cfg: &RopeConfig, m_star: usize) -> Result<f64> {
    Ok(TAU / cfg.channel_freq(m_star)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured: Option<f64>,
    pub peak_offsets: Vec<usize>,
    pub confidence: f64,
}

impl PeriodEstimate {
    pub fn with_prediction(mut self, cfg: &RopeConfig, m_star: usize) -> Result<Self> {
        self.predicted = Some(predicted_period(cfg, m_star)?);
        Ok(self)
    }
}

/// `s(o)`: mean logit on the `o`-th sub-diagonal, `o` in `0..=max_offset`.
pub fn diagonal_profile(map: &AttentionMap, max_offset: usize) -> Result<Vec<f64>> {
    if max_offset >= map.len() {
        return Err(Error::Bounds {
            what: "max_offset",
            index: max_offset,
            limit: map.len(),
        });
    }
    Ok((0..=max_offset)
        .map(|o| {
            let n = map.len() - o;
            (o..map.len()).map(|t| map.row(t)[t - o]).sum::<f64>() / n as f64
        })
        .collect())
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Interior local maxima whose topographic prominence reaches `min_prominence`.
pub fn find_peaks(s: &[f64], min_prominence: f64) -> Vec<usize> {
    let n = s.len();
    let mut peaks = Vec::new();
    for p in 1..n.saturating_sub(1) {
        if !(s[p] > s[p - 1] && s[p] >= s[p + 1]) {
            continue;
        }
        // Lowest point on each side before the signal rises above the peak.
        let mut left = s[p];
        for &v in s[..p].iter().rev() {
            if v > s[p] {
                break;
            }
            left = left.min(v);
        }
        let mut right = s[p];
        for &v in &s[p + 1..] {
            if v > s[p] {
                break;
            }
            right = right.min(v);
        }
        if s[p] - left.max(right) >= min_prominence {
            peaks.push(p);
        }
    }
    peaks
}

/// Spacing of parallel diagonals read off the diagonal profile.
pub fn measure_period(map: &AttentionMap, max_offset: usize) -> Result<PeriodEstimate> {
    let profile = diagonal_profile(map, max_offset)?;
    let threshold = 0.5 * population_std(&profile);
    let peaks = if threshold > 0.0 {
        find_peaks(&profile, threshold)
    } else {
        Vec::new()
    };
    if peaks.len() < 2 {
        return Ok(PeriodEstimate {
            predicted: None,
            measured: None,
            peak_offsets: peaks,
            confidence: 0.0,
        });
    }
    let gaps: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let cv = population_std(&gaps) / mean;
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(PeriodEstimate {
        predicted: None,
        measured: Some(median_sorted(&sorted)),
        peak_offsets: peaks,
        confidence: (1.0 - cv).clamp(0.0, 1.0),
    })
}

/// Swap the 2-D components of channels `src` and `dst` in every row.
pub fn relocate_channel(series: &Series, src: usize, dst: usize) -> Result<Series> {
    let dim = series.dim();
    if !dim.is_multiple_of(2) {
        return Err(Error::Invariant(format!(
            "odd dimension {dim} has no channel pairing"
        )));
    }
    let half = dim / 2;
    check_index("src channel", src, half)?;
    check_index("dst channel", dst, half)?;
    if src == dst {
        return Err(Error::Parameter("src and dst channels must differ".into()));
    }
    let mut out = series.clone();
    for t in 0..out.row_count() {
        let row = out.row_mut(t);
        row.swap(src, dst);
        row.swap(src + half, dst + half);
    }
    Ok(out)
}
