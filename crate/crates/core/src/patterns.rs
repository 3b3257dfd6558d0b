//! Per-head regime classification and the query-order perturbation.
//!
//! Decision order, first match wins:
//!
//! 1. `unpredictable`: normalized query similarity below `tau`.
//! 2. `reaccess`: one key column holds at least `reaccess_mass` of the
//!    softmax row mass in at least `reaccess_row_frac` of all rows.
//! 3. `seasonal`: the column-mass profile autocorrelates at some lag
//!    `L >= seasonal_min_lag` and the queries repeat with lag `L`.
//! 4. `periodic_sequential`: the diagonal profile of the logits has at least
//!    two peaks with regular spacing.
//! 5. `sequential`: the first `diag_band` offsets hold more mean softmax mass
//!    than any other band of offsets of the same width.
//! 6. `mixed` otherwise.
//!
//! Seasonal is tested before periodic because a map that repeats in both
//! directions with lag `L` also has a diagonal profile with period `L`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{softmax_rows, AttentionMap, QkSeries, SoftmaxMap};
use crate::error::{Error, Result};
use crate::similarity::{q_similarity, SimilarityMetric, SimilarityScore, DEFAULT_WINDOW};
use crate::spectrum::{argmax, channel_spectrum, measure_period, PeriodEstimate};
use crate::synth::spec_rng;
use crate::tensors::Series;

const PERIOD_MIN_CONFIDENCE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Unpredictable,
    Reaccess,
    Sequential,
    PeriodicSequential,
    Seasonal,
    Mixed,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Unpredictable => "unpredictable",
            Regime::Reaccess => "reaccess",
            Regime::Sequential => "sequential",
            Regime::PeriodicSequential => "periodic_sequential",
            Regime::Seasonal => "seasonal",
            Regime::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub tau: f64,
    pub reaccess_mass: f64,
    pub reaccess_row_frac: f64,
    pub diag_band: usize,
    pub seasonal_min_lag: usize,
    pub seasonal_ac_threshold: f64,
    /// Upper limit on `mean |q_{t+L} - q_t|` relative to the mean step over
    /// shorter lags.
    pub seasonal_q_ratio: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            tau: 0.8,
            reaccess_mass: 0.2,
            reaccess_row_frac: 0.8,
            diag_band: 2,
            seasonal_min_lag: 4,
            seasonal_ac_threshold: 0.5,
            seasonal_q_ratio: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!(
                    "{name} must be in (0, 1), got {v}"
                )))
            }
        };
        open_unit("tau", self.tau)?;
        open_unit("reaccess_mass", self.reaccess_mass)?;
        open_unit("reaccess_row_frac", self.reaccess_row_frac)?;
        open_unit("seasonal_ac_threshold", self.seasonal_ac_threshold)?;
        open_unit("seasonal_q_ratio", self.seasonal_q_ratio)?;
        if self.diag_band == 0 {
            return Err(Error::Parameter("diag_band must be positive".into()));
        }
        if self.seasonal_min_lag < 2 {
            return Err(Error::Parameter("seasonal_min_lag must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub layer: usize,
    pub head: usize,
    pub q_sim: SimilarityScore,
    pub k_sim: SimilarityScore,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dominant_channel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<PeriodEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seasonal_interval: Option<usize>,
    pub evidence: String,
}

impl PatternReport {
    pub fn at(mut self, layer: usize, head: usize) -> Self {
        self.layer = layer;
        self.head = head;
        self
    }
}

/// Entry `i`: mean over rows `t >= i` of the softmax mass at `(t, i)`.
pub fn column_mass_profile(probs: &SoftmaxMap) -> Vec<f64> {
    let n = probs.len();
    let mut sums = vec![0.0; n];
    for t in 0..n {
        for (i, p) in probs.row(t).iter().enumerate() {
            sums[i] += p;
        }
    }
    sums.iter()
        .enumerate()
        .map(|(i, s)| s / (n - i) as f64)
        .collect()
}

/// Mean softmax mass per offset `t - i`, averaged over all rows.
pub fn offset_mass_profile(probs: &SoftmaxMap) -> Vec<f64> {
    let n = probs.len();
    let mut mass = vec![0.0; n];
    for t in 0..n {
        for (i, p) in probs.row(t).iter().enumerate() {
            mass[t - i] += p;
        }
    }
    mass.iter().map(|m| m / n as f64).collect()
}

/// Mean softmax mass per row at offsets `>= band`.
pub fn off_band_mass(probs: &SoftmaxMap, band: usize) -> f64 {
    offset_mass_profile(probs).iter().skip(band).sum()
}

/// Sample autocorrelation for lags `0..=max_lag`.
pub fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let var: f64 = c.iter().map(|x| x * x).sum();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|l| {
            if var > 0.0 {
                c.iter().zip(&c[l..]).map(|(a, b)| a * b).sum::<f64>() / var
            } else {
                0.0
            }
        })
        .collect()
}

fn mean_lag_distance(qs: &Series, lag: usize) -> f64 {
    let n = qs.row_count() - lag;
    (0..n)
        .map(|t| {
            qs.row(t + lag)
                .iter()
                .zip(qs.row(t))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

struct SeasonalEvidence {
    lag: usize,
    acf: f64,
    q_ratio: f64,
}

fn seasonal_test(qs: &Series, profile: &[f64], cfg: &ClassifierConfig) -> Option<SeasonalEvidence> {
    let n = profile.len();
    let max_lag = n / 2;
    if max_lag <= cfg.seasonal_min_lag {
        return None;
    }
    let acf = autocorrelation(profile, max_lag + 1);
    let lag = (cfg.seasonal_min_lag..=max_lag)
        .filter(|&l| l + 1 < acf.len() && acf[l] > acf[l - 1] && acf[l] >= acf[l + 1])
        .filter(|&l| acf[l] >= cfg.seasonal_ac_threshold)
        .max_by(|&a, &b| acf[a].total_cmp(&acf[b]).then(b.cmp(&a)))?;
    let at_lag = mean_lag_distance(qs, lag);
    let shorter = (1..lag).map(|l| mean_lag_distance(qs, l)).sum::<f64>() / (lag - 1) as f64;
    let q_ratio = if shorter > 0.0 {
        at_lag / shorter
    } else {
        f64::INFINITY
    };
    (q_ratio <= cfg.seasonal_q_ratio).then_some(SeasonalEvidence {
        lag,
        acf: acf[lag],
        q_ratio,
    })
}

fn reaccess_test(probs: &SoftmaxMap, cfg: &ClassifierConfig) -> (usize, f64) {
    let n = probs.len();
    let mut hits = vec![0usize; n];
    for t in 0..n {
        for (i, &p) in probs.row(t).iter().enumerate() {
            if p >= cfg.reaccess_mass {
                hits[i] += 1;
            }
        }
    }
    let fractions: Vec<f64> = hits.iter().map(|&h| h as f64 / n as f64).collect();
    let col = argmax(&fractions);
    (col, fractions[col])
}

/// `(band mass, best other band mass)` over disjoint offset bands.
fn band_masses(probs: &SoftmaxMap, band: usize) -> (f64, f64) {
    let offsets = offset_mass_profile(probs);
    let bands: Vec<f64> = offsets.chunks(band).map(|c| c.iter().sum()).collect();
    let rest = bands.iter().skip(1).copied().fold(0.0, f64::max);
    (bands[0], rest)
}

fn clamp_window(window: usize, len: usize) -> usize {
    window.min(len)
}

/// Classify one head. Errors only on invalid configuration, a series shorter
/// than two rows, or a zero query or key row under the chosen metric.
pub fn classify(
    series: &QkSeries,
    map: &AttentionMap,
    cfg: &ClassifierConfig,
    window: usize,
    metric: &SimilarityMetric,
) -> Result<PatternReport> {
    cfg.validate()?;
    if map.len() != series.len() {
        return Err(Error::Shape {
            expected: series.len(),
            found: map.len(),
        });
    }
    let n = series.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("series of length {n}")));
    }
    let window = clamp_window(window, n);
    let q_sim = q_similarity(series.queries(), window, metric)?;
    let k_sim = q_similarity(series.keys(), window, metric)?;
    let mut report = PatternReport {
        layer: 0,
        head: 0,
        q_sim,
        k_sim,
        regime: Regime::Mixed,
        dominant_channel: None,
        period: None,
        seasonal_interval: None,
        evidence: String::new(),
    };
    if q_sim.normalized < cfg.tau {
        report.regime = Regime::Unpredictable;
        report.evidence = format!("q_sim {:.4} < tau {}", q_sim.normalized, cfg.tau);
        return Ok(report);
    }

    let probs = softmax_rows(map);
    let spectrum_at = |key: usize| {
        channel_spectrum(series, key, key..n)
            .ok()
            .map(|s| s.dominant)
    };

    let (column, frac) = reaccess_test(&probs, cfg);
    if frac >= cfg.reaccess_row_frac {
        report.regime = Regime::Reaccess;
        report.dominant_channel = spectrum_at(column);
        report.evidence = format!(
            "column {column} holds >= {} of row mass in {:.3} of rows",
            cfg.reaccess_mass, frac
        );
        return Ok(report);
    }

    let profile = column_mass_profile(&probs);
    if let Some(s) = seasonal_test(series.queries(), &profile, cfg) {
        report.regime = Regime::Seasonal;
        report.seasonal_interval = Some(s.lag);
        report.dominant_channel = spectrum_at(0);
        report.evidence = format!(
            "column-mass autocorrelation {:.3} at lag {}, query lag ratio {:.3}",
            s.acf, s.lag, s.q_ratio
        );
        return Ok(report);
    }

    let estimate = measure_period(map, n / 2)?;
    if estimate.peak_offsets.len() >= 2 && estimate.confidence >= PERIOD_MIN_CONFIDENCE {
        report.regime = Regime::PeriodicSequential;
        report.dominant_channel = spectrum_at(0);
        report.evidence = format!(
            "{} diagonal peaks, confidence {:.3}",
            estimate.peak_offsets.len(),
            estimate.confidence
        );
        report.period = Some(match report.dominant_channel {
            Some(m) => estimate.with_prediction(series.cfg(), m)?,
            None => estimate,
        });
        return Ok(report);
    }

    let (band, rest) = band_masses(&probs, cfg.diag_band);
    report.dominant_channel = spectrum_at(0);
    if band > rest {
        report.regime = Regime::Sequential;
        report.evidence = format!(
            "offsets 0..{} hold {:.3} of row mass, best other band {:.3}",
            cfg.diag_band, band, rest
        );
    } else {
        report.evidence = format!(
            "no rule matched (diagonal band {:.3} vs {:.3}, reaccess fraction {:.3})",
            band, rest, frac
        );
    }
    Ok(report)
}

/// [`classify`] with the default window and cosine metric.
pub fn classify_default(series: &QkSeries, map: &AttentionMap) -> Result<PatternReport> {
    classify(
        series,
        map,
        &ClassifierConfig::default(),
        DEFAULT_WINDOW,
        &SimilarityMetric::cosine(),
    )
}

/// Replace `round(strength * T)` rows by copies of rows within `radius`
/// positions of them, chosen uniformly with a seeded generator.
pub fn perturb_query_order_within(
    qs: &Series,
    strength: f64,
    seed: u64,
    radius: usize,
) -> Result<Series> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Parameter(format!(
            "strength must be in [0, 1], got {strength}"
        )));
    }
    let n = qs.row_count();
    let count = (strength * n as f64).round() as usize;
    if count == 0 || radius == 0 {
        return Ok(qs.clone());
    }
    let mut rng = spec_rng(seed);
    let mut rows = sample(&mut rng, n, count).into_vec();
    rows.sort_unstable();
    let mut out = qs.clone();
    for t in rows {
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(n - 1);
        let src = rng.random_range(lo..=hi);
        out.row_mut(t).copy_from_slice(qs.row(src));
    }
    Ok(out)
}

/// [`perturb_query_order_within`] with the default similarity window as radius.
pub fn perturb_query_order(qs: &Series, strength: f64, seed: u64) -> Result<Series> {
    perturb_query_order_within(qs, strength, seed, DEFAULT_WINDOW)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::full_map;
    use crate::rope::RopeConfig;
    use approx::assert_relative_eq;

    fn uniform(n: usize) -> SoftmaxMap {
        softmax_rows(&AttentionMap::from_fn(n, true, |_, _| 0.0).unwrap())
    }

    #[test]
    fn uniform_profile_is_harmonic_tail() {
        let p = column_mass_profile(&uniform(6));
        for (i, v) in p.iter().enumerate() {
            let expect = (i..6).map(|t| 1.0 / (t + 1) as f64).sum::<f64>() / (6 - i) as f64;
            assert_relative_eq!(*v, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn perfect_sink_profile() {
        let map = AttentionMap::from_fn(5, true, |_, i| if i == 0 { 1e3 } else { 0.0 }).unwrap();
        let p = column_mass_profile(&softmax_rows(&map));
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-12);
        assert!(p[1..].iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn single_row_profile() {
        assert_eq!(column_mass_profile(&uniform(1)), vec![1.0]);
    }

    #[test]
    fn offsets_sum_to_one() {
        let m = offset_mass_profile(&uniform(7));
        assert_relative_eq!(m.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn autocorrelation_of_period() {
        let xs: Vec<f64> = (0..60)
            .map(|i| if i % 6 == 0 { 1.0 } else { 0.0 })
            .collect();
        let acf = autocorrelation(&xs, 12);
        assert_relative_eq!(acf[0], 1.0, epsilon = 1e-12);
        assert!(acf[6] > 0.7 && acf[6] > acf[5] && acf[6] > acf[7]);
        assert!(autocorrelation(&[2.0; 5], 2).iter().all(|&a| a == 0.0));
    }

    #[test]
    fn perturb_strength_zero_is_identity() {
        let s = Series::from_fn(10, 4, |t, j| (t * 4 + j) as f64).unwrap();
        assert_eq!(perturb_query_order(&s, 0.0, 3).unwrap(), s);
    }

    #[test]
    fn perturb_constant_stays_constant() {
        let s = Series::from_fn(40, 4, |_, j| j as f64 + 1.0).unwrap();
        let p = perturb_query_order(&s, 1.0, 3).unwrap();
        assert_eq!(p, s);
        let m = SimilarityMetric::cosine();
        assert_eq!(q_similarity(&p, 32, &m).unwrap().raw, 1.0);
    }

    #[test]
    fn perturb_is_seeded_and_local() {
        let s = Series::from_fn(50, 1, |t, _| t as f64).unwrap();
        let a = perturb_query_order_within(&s, 0.5, 11, 3).unwrap();
        assert_eq!(a, perturb_query_order_within(&s, 0.5, 11, 3).unwrap());
        for t in 0..50 {
            assert!((a.row(t)[0] - t as f64).abs() <= 3.0);
        }
        assert!(perturb_query_order(&s, 1.5, 0).is_err());
    }

    #[test]
    fn constant_series_is_sequential() {
        let cfg = RopeConfig::new(1e6, 8).unwrap();
        let v = [0.0, 0.0, 0.5, 3.0, 0.0, 0.0, 0.0, 1.0];
        let q = Series::from_rows(&vec![v; 48]).unwrap();
        let series = QkSeries::new(q.clone(), q, cfg).unwrap();
        let report = classify_default(&series, &full_map(&series)).unwrap();
        assert_eq!(report.regime, Regime::Sequential, "{}", report.evidence);
        assert_eq!(report.q_sim.raw, 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = ClassifierConfig {
            tau: 1.0,
            ..ClassifierConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig {
            diag_band: 0,
            ..ClassifierConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ClassifierConfig::default().validate().is_ok());
    }

    #[test]
    fn regime_names_match_serde() {
        for r in [
            Regime::Unpredictable,
            Regime::Reaccess,
            Regime::Sequential,
            Regime::PeriodicSequential,
            Regime::Seasonal,
            Regime::Mixed,
        ] {
            assert_eq!(
                serde_json::to_value(r).unwrap(),
                serde_json::json!(r.name())
            );
        }
    }
}
