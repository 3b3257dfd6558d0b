//! Numerical checks of the temporal-stability bounds.
//!
//! Every check evaluates both sides of one inequality on a concrete series
//! and reports the slack: `bound - measured` for upper bounds and
//! `measured - bound` for the lower bound on logit jumps. A check is violated
//! when it is not vacuous and its slack is below `-SLACK_TOL`.
//!
//! Bound names:
//!
//! * `prop1_lower`: a large query jump forces a large logit jump.
//! * `thm1_vertical`: a small query step moves each column logit by at most
//!   `delta`.
//! * `thm2_sequential`: a joint step moves the logit along its diagonal by at
//!   most `|dq| |k_{i+1}| + |q_t| |dk|`, itself at most `(K + Q) eps`.
//! * `thm3_period`: the measured diagonal spacing lies within one token of
//!   `2 pi / theta_{m*}`.
//! * `thm4_seasonal_q`, `thm4_seasonal_k`: dominant-channel logit changes
//!   under a shift by `L` of the query or key index.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{full_map, QkSeries};
use crate::error::{check_index, Error, Result};
use crate::rope::{channel_of, norm2, RopeConfig};
use crate::spectrum::{measure_period, predicted_period};
use crate::synth::{epsilon_of, generate, normal_vec, trial_rng, GenRegime, GenSpec};
use crate::tensors::Series;

/// Absolute tolerance on slack before a check counts as violated.
pub const SLACK_TOL: f64 = 1e-6;

/// `r_m` at or below this is treated as a vanishing query channel.
pub const DEGENERATE_RADIUS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundName {
    Prop1Lower,
    Thm1Vertical,
    Thm2Sequential,
    Thm3Period,
    Thm4SeasonalQ,
    Thm4SeasonalK,
}

impl BoundName {
    pub fn name(self) -> &'static str {
        match self {
            BoundName::Prop1Lower => "prop1_lower",
            BoundName::Thm1Vertical => "thm1_vertical",
            BoundName::Thm2Sequential => "thm2_sequential",
            BoundName::Thm3Period => "thm3_period",
            BoundName::Thm4SeasonalQ => "thm4_seasonal_q",
            BoundName::Thm4SeasonalK => "thm4_seasonal_k",
        }
    }

    pub fn is_lower(self) -> bool {
        self == BoundName::Prop1Lower
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<usize>,
    /// Second, looser bound of a chained inequality.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loose_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resonance_defect: Option<f64>,
    /// Change of the logit summed over all non-dominant channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: BoundName,
    pub measured: f64,
    pub bound: f64,
    pub slack: f64,
    pub vacuous: bool,
    pub context: CheckContext,
}

impl BoundCheck {
    fn upper(name: BoundName, measured: f64, bound: f64, context: CheckContext) -> Self {
        BoundCheck {
            name,
            measured,
            bound,
            slack: bound - measured,
            vacuous: false,
            context,
        }
    }

    pub fn violated(&self) -> bool {
        !self.vacuous && self.slack < -SLACK_TOL
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Key `i` as seen from query position `t`.
fn rotated_key(series: &QkSeries, t: usize, i: usize) -> Vec<f64> {
    let offset = if series.rope_enabled() {
        i as i64 - t as i64
    } else {
        0
    };
    let mut k = series.k(i).to_vec();
    series.cfg().rotate_in_place(&mut k, offset);
    k
}

fn theta(series: &QkSeries, m: usize) -> f64 {
    if series.rope_enabled() {
        series.cfg().freq_unchecked(m)
    } else {
        0.0
    }
}

fn ctx(t: usize, i: Option<usize>) -> CheckContext {
    CheckContext {
        t: Some(t),
        i,
        ..CheckContext::default()
    }
}

/// Lower bound on `max_j |a_{t+1,j} - a_{t,j}|` over shared keys `j <= t`.
pub fn check_prop1(series: &QkSeries, t: usize) -> Result<BoundCheck> {
    check_index("t + 1", t + 1, series.len())?;
    let dq = diff(series.q(t + 1), series.q(t));
    let dq_norm = norm(&dq);
    if dq_norm == 0.0 {
        return Err(Error::Precondition(format!("q_{} equals q_{t}", t + 1)));
    }
    let measured = (0..=t)
        .map(|j| (series.logit(t + 1, j) - series.logit(t, j)).abs())
        .fold(0.0, f64::max);
    let mut best = (0.0, 0.0, 0);
    let mut key_max: f64 = 0.0;
    for j in 0..=t {
        let k = rotated_key(series, t + 1, j);
        let kn = norm(&k);
        key_max = key_max.max(kn);
        if kn > 0.0 {
            let alpha = (dot(&dq, &k) / (dq_norm * kn)).abs();
            if alpha > best.0 {
                best = (alpha, kn, j);
            }
        }
    }
    let (alpha, k_star, j_star) = best;
    let bound = alpha * k_star * dq_norm - 2.0 * norm(series.q(t)) * key_max;
    Ok(BoundCheck {
        name: BoundName::Prop1Lower,
        measured,
        bound,
        slack: measured - bound,
        vacuous: bound <= 0.0,
        context: ctx(t, Some(j_star)),
    })
}

/// Per-channel `delta` bound on `|a_{t+1,i} - a_{t,i}|`.
pub fn check_thm1(series: &QkSeries, t: usize, i: usize) -> Result<BoundCheck> {
    check_index("t + 1", t + 1, series.len())?;
    check_index("i", i, t + 1)?;
    let measured = (series.logit(t + 1, i) - series.logit(t, i)).abs();
    let (q0, q1, k) = (series.q(t), series.q(t + 1), series.k(i));
    let eps = norm(&diff(q1, q0));
    let mut bound = 0.0;
    for m in 0..series.cfg().channels() {
        let kn = norm2(channel_of(k, m));
        let n0 = norm2(channel_of(q0, m));
        let n1 = norm2(channel_of(q1, m));
        let w = n0 * kn;
        let r = n0.min(n1);
        let middle = if r <= DEGENERATE_RADIUS {
            2.0 * kn * n0.max(n1)
        } else {
            FRAC_PI_2 * eps * w / r
        };
        bound += eps * kn + middle + w * theta(series, m);
    }
    Ok(BoundCheck::upper(
        BoundName::Thm1Vertical,
        measured,
        bound,
        ctx(t, Some(i)),
    ))
}

/// Chained bound on `|a_{t+1,i+1} - a_{t,i}|`.
pub fn check_thm2(series: &QkSeries, t: usize, i: usize) -> Result<BoundCheck> {
    check_index("t + 1", t + 1, series.len())?;
    check_index("i", i, t + 1)?;
    let measured = (series.logit(t + 1, i + 1) - series.logit(t, i)).abs();
    let dq = norm(&diff(series.q(t + 1), series.q(t)));
    let dk = norm(&diff(series.k(i + 1), series.k(i)));
    let tight = dq * norm(series.k(i + 1)) + norm(series.q(t)) * dk;
    let q_max = series.queries().rows().map(norm).fold(0.0, f64::max);
    let k_max = series.keys().rows().map(norm).fold(0.0, f64::max);
    let (eq, ek) = epsilon_of(series);
    let loose = (k_max + q_max) * eq.max(ek);
    let mut check = BoundCheck::upper(
        BoundName::Thm2Sequential,
        measured,
        tight,
        CheckContext {
            loose_bound: Some(loose),
            ..ctx(t, Some(i))
        },
    );
    check.slack = check.slack.min(loose - tight);
    Ok(check)
}

/// Measured diagonal spacing against `2 pi / theta_{m*}`, one token of
/// tolerance. Slack is `1 - |measured - predicted|`.
pub fn check_thm3(series: &QkSeries, m_star: usize, max_offset: usize) -> Result<BoundCheck> {
    let predicted = predicted_period(series.cfg(), m_star)?;
    let estimate = measure_period(&full_map(series), max_offset)?;
    let measured = estimate.measured.ok_or_else(|| {
        Error::InsufficientData("no period measured in the diagonal profile".into())
    })?;
    Ok(BoundCheck {
        name: BoundName::Thm3Period,
        measured,
        bound: predicted,
        slack: 1.0 - (measured - predicted).abs(),
        vacuous: false,
        context: CheckContext {
            channel: Some(m_star),
            ..CheckContext::default()
        },
    })
}

/// `min_{k >= 1} |L theta - 2 k pi|`.
pub fn resonance_defect(lag: usize, theta: f64) -> f64 {
    let x = lag as f64 * theta;
    let k = (x / TAU).floor().max(1.0);
    (x - k * TAU).abs().min((x - (k + 1.0) * TAU).abs())
}

/// Dominant-channel bounds under a shift by `lag` of the query index and of
/// the key index.
pub fn check_thm4(
    series: &QkSeries,
    lag: usize,
    m_star: usize,
    t: usize,
    i: usize,
) -> Result<(BoundCheck, BoundCheck)> {
    let n = series.len();
    check_index("lag", lag, n)?;
    check_index("channel", m_star, series.cfg().channels())?;
    check_index("t + lag", t + lag, n)?;
    check_index("i + lag", i + lag, t + 1)?;
    if lag == 0 {
        return Err(Error::Parameter("lag must be positive".into()));
    }
    let defect = resonance_defect(lag, theta(series, m_star));
    let qn = norm2(channel_of(series.q(t), m_star));
    let kn = norm2(channel_of(series.k(i), m_star));
    let eps_q = norm(&diff(series.q(t + lag), series.q(t)));
    let eps_k = norm(&diff(series.k(i + lag), series.k(i)));

    let dom = |tt: usize, ii: usize| series.channel_logit(tt, ii, m_star);
    let rest = |tt: usize, ii: usize| series.logit(tt, ii) - dom(tt, ii);
    let base = dom(t, i);

    let q_ctx = CheckContext {
        t: Some(t),
        i: Some(i),
        lag: Some(lag),
        channel: Some(m_star),
        resonance_defect: Some(defect),
        residual: Some((rest(t + lag, i) - rest(t, i)).abs()),
        loose_bound: None,
    };
    let k_ctx = CheckContext {
        residual: Some((rest(t, i + lag) - rest(t, i)).abs()),
        ..q_ctx.clone()
    };
    let query_shift = BoundCheck::upper(
        BoundName::Thm4SeasonalQ,
        (dom(t + lag, i) - base).abs(),
        kn * eps_q + kn * qn * defect,
        q_ctx,
    );
    let key_shift = BoundCheck::upper(
        BoundName::Thm4SeasonalK,
        (dom(t, i + lag) - base).abs(),
        qn * eps_k + qn * kn * defect,
        k_ctx,
    );
    Ok((query_shift, key_shift))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: BoundName,
    pub trials: usize,
    pub checks: usize,
    /// Smallest slack among non-vacuous checks; absent when all are vacuous.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_slack: Option<f64>,
    pub vacuous: usize,
    pub violations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst: Option<BoundCheck>,
}

impl SweepSummary {
    pub fn non_vacuous(&self) -> usize {
        self.checks - self.vacuous
    }
}

/// Run `trials` independent trials and summarize the checks they return,
/// one summary per bound name in declaration order. Trial `n` draws from
/// ChaCha stream `n` under `seed`, so summaries do not depend on the worker
/// count.
pub fn sweep<F>(trials: usize, seed: u64, trial: F) -> Result<Vec<SweepSummary>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Vec<BoundCheck>> + Sync,
{
    if trials == 0 {
        return Err(Error::Parameter("a sweep needs at least one trial".into()));
    }
    let results: Vec<Vec<BoundCheck>> = (0..trials)
        .into_par_iter()
        .map(|n| trial(&mut trial_rng(seed, n as u64)))
        .collect::<Result<_>>()?;
    let mut summaries: BTreeMap<BoundName, SweepSummary> = BTreeMap::new();
    for check in results.into_iter().flatten() {
        let summary = summaries.entry(check.name).or_insert_with(|| SweepSummary {
            name: check.name,
            trials,
            checks: 0,
            min_slack: None,
            vacuous: 0,
            violations: 0,
            worst: None,
        });
        summary.checks += 1;
        if check.vacuous {
            summary.vacuous += 1;
            continue;
        }
        if check.violated() {
            summary.violations += 1;
        }
        if summary.min_slack.is_none_or(|m| check.slack < m) {
            summary.min_slack = Some(check.slack);
            summary.worst = Some(check);
        }
    }
    Ok(summaries.into_values().collect())
}

fn random_cfg(rng: &mut ChaCha8Rng, dims: &[usize]) -> Result<RopeConfig> {
    let d = dims[rng.random_range(0..dims.len())];
    let base = 10f64.powf(rng.random_range(2.0..6.5));
    RopeConfig::new(base, d)
}

fn gaussian_series(rng: &mut ChaCha8Rng, rows: usize, d: usize, sigma: f64) -> Result<Series> {
    Series::new(rows, d, normal_vec(rng, rows * d, sigma))
}

/// Random walk of `rows` steps with log-uniform step size.
fn walk_series(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Result<Series> {
    let step = 10f64.powf(rng.random_range(-3.0..0.0));
    let mut v = normal_vec(rng, d, 1.0);
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        data.extend_from_slice(&v);
        for (x, s) in v.iter_mut().zip(normal_vec(rng, d, step)) {
            *x += s;
        }
    }
    Series::new(rows, d, data)
}

/// Queries with small norm followed by a large jump, random keys.
pub fn prop1_trial(rng: &mut ChaCha8Rng) -> Result<Vec<BoundCheck>> {
    let cfg = random_cfg(rng, &[4, 8, 16, 64])?;
    let d = cfg.head_dim();
    let rows = rng.random_range(2..12);
    let small = 10f64.powf(rng.random_range(-4.0..-1.0));
    let mut q = gaussian_series(rng, rows, d, small)?;
    let t = rows - 2;
    let scale = rng.random_range(0.5..3.0);
    let jump = normal_vec(rng, d, scale);
    for (x, j) in q.row_mut(t + 1).iter_mut().zip(jump) {
        *x += j;
    }
    let k = gaussian_series(rng, rows, d, 1.0)?;
    Ok(vec![check_prop1(&QkSeries::new(q, k, cfg)?, t)?])
}

/// Smooth query walks, random keys, and occasionally a query channel zeroed
/// at one of the two steps.
pub fn thm1_trial(rng: &mut ChaCha8Rng) -> Result<Vec<BoundCheck>> {
    let cfg = random_cfg(rng, &[4, 8, 16, 64])?;
    let d = cfg.head_dim();
    let rows = rng.random_range(2..12);
    let mut q = walk_series(rng, rows, d)?;
    let key_scale = rng.random_range(0.1..3.0);
    let k = gaussian_series(rng, rows, d, key_scale)?;
    let t = rng.random_range(0..rows - 1);
    if rng.random_bool(0.25) {
        let m = rng.random_range(0..cfg.channels());
        let row = q.row_mut(t + rng.random_range(0..2));
        row[m] = 0.0;
        row[m + d / 2] = 0.0;
    }
    let i = rng.random_range(0..=t);
    Ok(vec![check_thm1(&QkSeries::new(q, k, cfg)?, t, i)?])
}

/// Unconstrained Gaussian or random-walk series.
pub fn thm2_trial(rng: &mut ChaCha8Rng) -> Result<Vec<BoundCheck>> {
    let cfg = random_cfg(rng, &[4, 8, 16, 64])?;
    let d = cfg.head_dim();
    let rows = rng.random_range(2..12);
    let (q, k) = if rng.random_bool(0.5) {
        let sigma = rng.random_range(0.1..3.0);
        (
            gaussian_series(rng, rows, d, sigma)?,
            gaussian_series(rng, rows, d, sigma)?,
        )
    } else {
        (walk_series(rng, rows, d)?, walk_series(rng, rows, d)?)
    };
    let t = rng.random_range(0..rows - 1);
    let i = rng.random_range(0..=t);
    Ok(vec![check_thm2(&QkSeries::new(q, k, cfg)?, t, i)?])
}

/// Seasonal generator output at random resonant settings.
pub fn thm4_trial(rng: &mut ChaCha8Rng) -> Result<Vec<BoundCheck>> {
    let cfg = random_cfg(rng, &[8, 16, 32])?;
    let mut spec = GenSpec::new(GenRegime::Seasonal, cfg).with_len(128);
    spec.seed = rng.random();
    // Channels fast enough for a resonant season within a quarter of the series.
    let fast = cfg.freqs().iter().take_while(|&&f| f >= TAU / 32.0).count();
    spec.dominant_channel = Some(rng.random_range(0..fast));
    spec.drift_sigma = rng.random_range(0.0..0.1);
    spec.dominant_scale = rng.random_range(1.0..8.0);
    let lag = spec.effective_season_length()?;
    let series = generate(&spec)?;
    let t = rng.random_range(lag..series.len() - lag);
    let i = rng.random_range(0..=t - lag);
    let (q, k) = check_thm4(
        &series,
        lag,
        spec.dominant_channel.expect("set above"),
        t,
        i,
    )?;
    Ok(vec![q, k])
}

/// Sweeps used by the `verify` command.
pub fn default_sweeps(trials: usize, seed: u64) -> Result<Vec<SweepSummary>> {
    let mut out = Vec::new();
    for trial in [prop1_trial, thm1_trial, thm2_trial, thm4_trial] {
        out.extend(sweep(trials, seed, trial)?);
    }
    Ok(out)
}
