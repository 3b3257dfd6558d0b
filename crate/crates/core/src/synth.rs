//! Seeded generators for query/key series in each attention regime.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, and normals from `rand_distr::StandardNormal`. Both
//! algorithms are portable, so a spec maps to bit-identical series on every
//! platform. Sweeps derive per-trial generators with [`trial_rng`], which
//! selects ChaCha stream `trial` under the sweep seed.
//!
//! Regime constructions:
//!
//! * `random`: i.i.d. standard-normal queries and keys.
//! * `reaccess`: a norm-preserving query drift plus a sink key at position 0
//!   that is aligned with the first query on a low-frequency channel.
//! * `sequential`: queries and keys follow one shared random walk from an
//!   anchor whose energy sits on slow channels (period of 25 tokens or more)
//!   plus a dominant low-frequency channel. Every row then gets a small
//!   independent jitter.
//! * `periodic`: the sequential construction with the dominant channel moved
//!   to `dominant_channel`.
//! * `seasonal`: `q_t = Q[t mod L] + noise`, `k_t = K[t mod L] + noise`. On
//!   the dominant channel the season pre-rotates against RoPE, so resonant
//!   `L` makes its post-rotation vector nearly constant. The key at phase 0
//!   is accented.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::QkSeries;
use crate::error::{Error, Result};
use crate::rope::RopeConfig;
use crate::spectrum::relocate_channel;
use crate::tensors::{Metadata, Series, TensorDump, TensorKind};

/// Channels slower than this carry the spread energy of sequential series.
const SPREAD_MAX_FREQ: f64 = 0.25;
const REACCESS_KEY_SCALE: f64 = 0.3;
const REACCESS_SINK_NOISE: f64 = 0.05;
const SEASON_KEY_ACCENT: f64 = 2.0;
const MAX_RESONANCE_MULTIPLE: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenRegime {
    Random,
    Reaccess,
    Sequential,
    Periodic,
    Seasonal,
}

impl GenRegime {
    pub const ALL: [GenRegime; 5] = [
        GenRegime::Random,
        GenRegime::Reaccess,
        GenRegime::Sequential,
        GenRegime::Periodic,
        GenRegime::Seasonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GenRegime::Random => "random",
            GenRegime::Reaccess => "reaccess",
            GenRegime::Sequential => "sequential",
            GenRegime::Periodic => "periodic",
            GenRegime::Seasonal => "seasonal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        GenRegime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub regime: GenRegime,
    pub len: usize,
    pub cfg: RopeConfig,
    pub seed: u64,
    /// Per-coordinate std of drift steps (or of seasonal noise).
    pub drift_sigma: f64,
    pub dominant_channel: Option<usize>,
    pub dominant_scale: f64,
    pub season_length: Option<usize>,
    pub resonance: bool,
    /// Per-channel norm of structured components.
    pub amplitude: f64,
}

/// Default slow channel for dominant energy: four below the top, as the
/// 60th of 64 channels in a 128-dim head.
pub fn default_low_channel(channels: usize) -> usize {
    if channels > 8 {
        channels - 4
    } else {
        channels - 1
    }
}

impl GenSpec {
    /// Defaults under which each regime is produced with a clear margin.
    pub fn new(regime: GenRegime, cfg: RopeConfig) -> Self {
        let low = default_low_channel(cfg.channels());
        let high = 2.min(cfg.channels() - 1);
        let base = GenSpec {
            regime,
            len: 256,
            cfg,
            seed: 0,
            drift_sigma: 0.0,
            dominant_channel: None,
            dominant_scale: 1.0,
            season_length: None,
            resonance: false,
            amplitude: 1.0,
        };
        match regime {
            GenRegime::Random => base,
            GenRegime::Reaccess => GenSpec {
                drift_sigma: 0.05,
                dominant_channel: Some(low),
                dominant_scale: 8.0,
                ..base
            },
            GenRegime::Sequential => GenSpec {
                drift_sigma: 0.005,
                dominant_channel: Some(low),
                dominant_scale: 6.0,
                amplitude: 5.0,
                ..base
            },
            GenRegime::Periodic => GenSpec {
                drift_sigma: 0.005,
                dominant_channel: Some(high),
                dominant_scale: 6.0,
                amplitude: 5.0,
                ..base
            },
            GenRegime::Seasonal => GenSpec {
                drift_sigma: 0.02,
                dominant_channel: Some(high),
                dominant_scale: 6.0,
                season_length: Some(29),
                resonance: true,
                ..base
            },
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_len(mut self, len: usize) -> Self {
        self.len = len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.len < 2 {
            return Err(Error::Spec(format!(
                "length must be >= 2, got {}",
                self.len
            )));
        }
        let positive = |name: &str, v: f64, allow_zero: bool| {
            if v.is_finite() && (v > 0.0 || (allow_zero && v == 0.0)) {
                Ok(())
            } else {
                Err(Error::Spec(format!("{name} out of range: {v}")))
            }
        };
        positive("drift_sigma", self.drift_sigma, true)?;
        positive("dominant_scale", self.dominant_scale, false)?;
        positive("amplitude", self.amplitude, false)?;
        if let Some(m) = self.dominant_channel {
            if m >= self.cfg.channels() {
                return Err(Error::Spec(format!(
                    "dominant channel {m} out of range for {} channels",
                    self.cfg.channels()
                )));
            }
        }
        let needs_channel = matches!(
            self.regime,
            GenRegime::Reaccess | GenRegime::Periodic | GenRegime::Seasonal
        );
        if needs_channel && self.dominant_channel.is_none() {
            return Err(Error::Spec(format!(
                "{} needs a dominant channel",
                self.regime.name()
            )));
        }
        if self.regime == GenRegime::Seasonal {
            match self.season_length {
                None => return Err(Error::Spec("seasonal needs a season length".into())),
                Some(l) if !self.resonance && (l < 2 || l > self.len / 2) => {
                    return Err(Error::Spec(format!(
                        "season length {l} must be in 2..={}",
                        self.len / 2
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Season length after optional resonance snapping.
    pub fn effective_season_length(&self) -> Result<usize> {
        self.validate()?;
        let requested = self
            .season_length
            .ok_or_else(|| Error::Spec("no season length".into()))?;
        if !self.resonance {
            return Ok(requested);
        }
        let m = self.dominant_channel.expect("validated");
        let theta = self.cfg.channel_freq(m)?;
        snap_season_length(theta, self.len / 4)
            .map(|r| r.length)
            .ok_or_else(|| Error::Spec(format!("no resonant season fits in {} tokens", self.len)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resonance {
    pub length: usize,
    pub multiple: u32,
    pub defect: f64,
}

/// Season length `L <= max_len` minimizing `|L theta - 2 k pi|` over
/// `L = round(2 k pi / theta)`, `k = 1..=8`.
pub fn snap_season_length(theta: f64, max_len: usize) -> Option<Resonance> {
    (1..=MAX_RESONANCE_MULTIPLE)
        .filter_map(|k| {
            let length = (TAU * k as f64 / theta).round() as usize;
            (length >= 2 && length <= max_len).then(|| Resonance {
                length,
                multiple: k,
                defect: (length as f64 * theta - TAU * k as f64).abs(),
            })
        })
        .min_by(|a, b| a.defect.total_cmp(&b.defect))
}

pub fn spec_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for trial `trial` of a sweep seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    (0..n).map(|_| sigma * normal(rng)).collect()
}

fn set_channel(v: &mut [f64], m: usize, norm: f64, angle: f64) {
    let half = v.len() / 2;
    v[m] = norm * angle.cos();
    v[m + half] = norm * angle.sin();
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn generate(spec: &GenSpec) -> Result<QkSeries> {
    spec.validate()?;
    let mut rng = spec_rng(spec.seed);
    let d = spec.cfg.head_dim();
    let (q, k) = match spec.regime {
        GenRegime::Random => {
            let q = Series::new(spec.len, d, normal_vec(&mut rng, spec.len * d, 1.0))?;
            let k = Series::new(spec.len, d, normal_vec(&mut rng, spec.len * d, 1.0))?;
            (q, k)
        }
        GenRegime::Reaccess => reaccess(spec, &mut rng)?,
        GenRegime::Sequential => sequential(spec, spec.dominant_channel, &mut rng)?,
        GenRegime::Periodic => {
            let target = spec.dominant_channel.expect("validated");
            let source = default_low_channel(spec.cfg.channels());
            if source == target {
                sequential(spec, Some(target), &mut rng)?
            } else {
                let (q, k) = sequential(spec, Some(source), &mut rng)?;
                (
                    relocate_channel(&q, source, target)?,
                    relocate_channel(&k, source, target)?,
                )
            }
        }
        GenRegime::Seasonal => seasonal(spec, &mut rng)?,
    };
    QkSeries::new(q, k, spec.cfg)
}

fn reaccess(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<(Series, Series)> {
    let d = spec.cfg.head_dim();
    let m = spec.dominant_channel.expect("validated");
    let angle = rng.random_range(0.0..TAU);
    let mut q = normal_vec(rng, d, 1.0);
    set_channel(&mut q, m, spec.dominant_scale / 2.0, angle);

    let mut queries = Vec::with_capacity(spec.len * d);
    for _ in 0..spec.len {
        queries.extend_from_slice(&q);
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let stepped = add(&q, &normal_vec(rng, d, spec.drift_sigma));
        let stepped_norm = stepped.iter().map(|x| x * x).sum::<f64>().sqrt();
        q = stepped
            .into_iter()
            .map(|x| x * norm / stepped_norm)
            .collect();
    }

    let mut sink = normal_vec(rng, d, REACCESS_SINK_NOISE);
    set_channel(&mut sink, m, spec.dominant_scale, angle);
    let mut keys = sink;
    keys.extend(normal_vec(rng, (spec.len - 1) * d, REACCESS_KEY_SCALE));
    Ok((
        Series::new(spec.len, d, queries)?,
        Series::new(spec.len, d, keys)?,
    ))
}

fn sequential(
    spec: &GenSpec,
    dominant: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(Series, Series)> {
    let cfg = &spec.cfg;
    let d = cfg.head_dim();
    let freqs = cfg.freqs();
    let mut spread: Vec<usize> = (0..cfg.channels())
        .filter(|&m| freqs[m] <= SPREAD_MAX_FREQ && Some(m) != dominant)
        .collect();
    if spread.is_empty() {
        spread = (0..cfg.channels())
            .filter(|&m| Some(m) != dominant)
            .collect();
    }
    let mut anchor = vec![0.0; d];
    for &m in &spread {
        set_channel(&mut anchor, m, spec.amplitude, rng.random_range(0.0..TAU));
    }
    if let Some(m) = dominant {
        set_channel(
            &mut anchor,
            m,
            spec.amplitude * spec.dominant_scale,
            rng.random_range(0.0..TAU),
        );
    }
    let sigma = spec.drift_sigma;
    let mut walk = anchor;
    let mut queries = Vec::with_capacity(spec.len * d);
    let mut keys = Vec::with_capacity(spec.len * d);
    for _ in 0..spec.len {
        queries.extend(add(&walk, &normal_vec(rng, d, sigma)));
        keys.extend(add(&walk, &normal_vec(rng, d, sigma)));
        walk = add(&walk, &normal_vec(rng, d, sigma));
    }
    Ok((
        Series::new(spec.len, d, queries)?,
        Series::new(spec.len, d, keys)?,
    ))
}

fn seasonal(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<(Series, Series)> {
    let cfg = &spec.cfg;
    let d = cfg.head_dim();
    let season = spec.effective_season_length()?;
    let m_star = spec.dominant_channel.expect("validated");
    let theta = cfg.channel_freq(m_star)?;
    let rho = spec.amplitude;

    let u = rng.random_range(0.0..TAU);
    let q_phase: Vec<f64> = (0..cfg.channels())
        .map(|_| rng.random_range(0.0..TAU))
        .collect();
    let k_phase: Vec<f64> = (0..cfg.channels())
        .map(|_| rng.random_range(0.0..TAU))
        .collect();
    let mut q_base = Vec::with_capacity(season);
    let mut k_base = Vec::with_capacity(season);
    for s in 0..season {
        let turn = TAU * s as f64 / season as f64;
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        for m in 0..cfg.channels() {
            if m == m_star {
                let angle = u - s as f64 * theta;
                let accent = if s == 0 { SEASON_KEY_ACCENT } else { 1.0 };
                set_channel(&mut q, m, rho * spec.dominant_scale, angle);
                set_channel(&mut k, m, rho * spec.dominant_scale * accent, angle);
            } else {
                set_channel(&mut q, m, rho, q_phase[m] + turn);
                set_channel(&mut k, m, rho, k_phase[m] + turn);
            }
        }
        q_base.push(q);
        k_base.push(k);
    }
    let mut queries = Vec::with_capacity(spec.len * d);
    let mut keys = Vec::with_capacity(spec.len * d);
    for t in 0..spec.len {
        queries.extend(add(
            &q_base[t % season],
            &normal_vec(rng, d, spec.drift_sigma),
        ));
        keys.extend(add(
            &k_base[t % season],
            &normal_vec(rng, d, spec.drift_sigma),
        ));
    }
    Ok((
        Series::new(spec.len, d, queries)?,
        Series::new(spec.len, d, keys)?,
    ))
}

fn max_step(s: &Series, lag: usize) -> f64 {
    (0..s.row_count().saturating_sub(lag))
        .map(|t| {
            s.row(t + lag)
                .iter()
                .zip(s.row(t))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// `(max_t |q_{t+1} - q_t|, max_i |k_{i+1} - k_i|)`.
pub fn epsilon_of(series: &QkSeries) -> (f64, f64) {
    (max_step(series.queries(), 1), max_step(series.keys(), 1))
}

/// Same maxima at an arbitrary lag; seasonal checks use the season length.
pub fn epsilon_at_lag(series: &QkSeries, lag: usize) -> (f64, f64) {
    (
        max_step(series.queries(), lag),
        max_step(series.keys(), lag),
    )
}

/// Queries and keys as single-head dumps with a descriptive sidecar.
pub fn to_dumps(series: &QkSeries, spec: &GenSpec) -> Result<(TensorDump, TensorDump)> {
    let meta = |kind: TensorKind| {
        let mut meta = Metadata {
            model_id: Some(format!("synthetic-{}", spec.regime.name())),
            rope_base: Some(spec.cfg.base()),
            head_dim: Some(spec.cfg.head_dim() as u32),
            num_layers: Some(1),
            num_heads: Some(1),
            dataset: Some(format!("seed-{}", spec.seed)),
            ..Metadata::default()
        };
        meta.extra
            .insert("tensor_kind".into(), serde_json::Value::from(kind.name()));
        if let Ok(v) = serde_json::to_value(spec) {
            meta.extra.insert("generator".into(), v);
        }
        meta
    };
    let q = TensorDump::from_heads(TensorKind::Queries, 1, 1, &[series.queries().clone()])?
        .with_metadata(meta(TensorKind::Queries));
    let k = TensorDump::from_heads(TensorKind::Keys, 1, 1, &[series.keys().clone()])?
        .with_metadata(meta(TensorKind::Keys));
    Ok((q, k))
}
