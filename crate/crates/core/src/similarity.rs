//! q-similarity: how alike consecutive query (or key) vectors are within a
//! trailing window, under eight interchangeable metrics.
//!
//! Every score carries a `normalized` value in `[0, 1]` where higher always
//! means more similar:
//!
//! | metric              | normalized                         |
//! |---------------------|------------------------------------|
//! | cosine, pearson     | `(raw + 1) / 2`                    |
//! | angular, rbf        | `raw`                              |
//! | dot                 | `1 / (1 + exp(-raw / s))`, `s` = median pair magnitude |
//! | euclidean, l1, kl   | `1 / (1 + raw)`                    |

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};
use crate::tensors::{Series, TensorDump, TensorKind};

pub const DEFAULT_WINDOW: usize = 32;
const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Cosine,
    Dot,
    Pearson,
    Euclidean,
    L1,
    Angular,
    Rbf,
    Kl,
}

impl MetricKind {
    pub const ALL: [MetricKind; 8] = [
        MetricKind::Cosine,
        MetricKind::Dot,
        MetricKind::Pearson,
        MetricKind::Euclidean,
        MetricKind::L1,
        MetricKind::Angular,
        MetricKind::Rbf,
        MetricKind::Kl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
            MetricKind::Dot => "dot",
            MetricKind::Pearson => "pearson",
            MetricKind::Euclidean => "euclidean",
            MetricKind::L1 => "l1",
            MetricKind::Angular => "angular",
            MetricKind::Rbf => "rbf",
            MetricKind::Kl => "kl",
        }
    }

    /// Distance-type metrics: lower raw value means more similar.
    pub fn is_distance(self) -> bool {
        matches!(
            self,
            MetricKind::Euclidean | MetricKind::L1 | MetricKind::Kl
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMetric {
    pub kind: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rbf_gamma: Option<f64>,
}

impl SimilarityMetric {
    pub fn new(kind: MetricKind) -> Self {
        let rbf_gamma = (kind == MetricKind::Rbf).then_some(1.0);
        SimilarityMetric { kind, rbf_gamma }
    }

    pub fn cosine() -> Self {
        SimilarityMetric::new(MetricKind::Cosine)
    }

    pub fn rbf(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Parameter(format!(
                "rbf gamma must be positive, got {gamma}"
            )));
        }
        Ok(SimilarityMetric {
            kind: MetricKind::Rbf,
            rbf_gamma: Some(gamma),
        })
    }

    fn gamma(&self) -> f64 {
        self.rbf_gamma.unwrap_or(1.0)
    }
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        SimilarityMetric::cosine()
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.rbf_gamma) {
            (MetricKind::Rbf, Some(g)) => write!(f, "rbf:{g}"),
            (kind, _) => f.write_str(kind.name()),
        }
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    /// Accepts a metric name, or `rbf:<gamma>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(gamma) = lower.strip_prefix("rbf:") {
            let gamma = gamma
                .parse()
                .map_err(|_| Error::Parameter(format!("bad rbf gamma in {s:?}")))?;
            return SimilarityMetric::rbf(gamma);
        }
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .map(SimilarityMetric::new)
            .ok_or_else(|| Error::Parameter(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub raw: f64,
    pub normalized: f64,
    pub metric: SimilarityMetric,
    pub window: usize,
}

/// Counts scalar multiply-add steps spent inside metric evaluations.
#[derive(Debug, Default)]
pub struct OpCounter(AtomicU64);

impl OpCounter {
    pub fn new() -> Self {
        OpCounter::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn cosine_of(u: &[f64], v: &[f64], what: &str) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity(format!(
            "zero vector under {what}"
        )));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn stable_softmax(u: &[f64]) -> Vec<f64> {
    crate::attention::softmax_row(u)
}

pub fn pairwise(metric: &SimilarityMetric, u: &[f64], v: &[f64]) -> Result<f64> {
    pairwise_counted(metric, u, v, &OpCounter::new())
}

pub fn pairwise_counted(
    metric: &SimilarityMetric,
    u: &[f64],
    v: &[f64],
    ops: &OpCounter,
) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            expected: u.len(),
            found: v.len(),
        });
    }
    let d = u.len();
    let raw = match metric.kind {
        MetricKind::Cosine => {
            ops.add(3 * d);
            cosine_of(u, v, "cosine")?
        }
        MetricKind::Dot => {
            ops.add(d);
            dot(u, v)
        }
        MetricKind::Pearson => {
            ops.add(5 * d);
            let center = |x: &[f64]| {
                let mean = x.iter().sum::<f64>() / d as f64;
                x.iter().map(|a| a - mean).collect::<Vec<_>>()
            };
            cosine_of(&center(u), &center(v), "pearson")?
        }
        MetricKind::Euclidean => {
            ops.add(d);
            u.iter()
                .zip(v)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        }
        MetricKind::L1 => {
            ops.add(d);
            u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum()
        }
        MetricKind::Angular => {
            ops.add(3 * d);
            1.0 - cosine_of(u, v, "angular")?.acos() / std::f64::consts::PI
        }
        MetricKind::Rbf => {
            ops.add(d);
            let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            (-metric.gamma() * sq).exp()
        }
        MetricKind::Kl => {
            ops.add(5 * d);
            let p = stable_softmax(u);
            let q = stable_softmax(v);
            p.iter()
                .zip(&q)
                .map(|(&pi, &qi)| {
                    let pi = pi.max(KL_FLOOR);
                    pi * (pi / qi.max(KL_FLOOR)).ln()
                })
                .sum::<f64>()
                .max(0.0)
        }
    };
    Ok(raw)
}

fn normalize(metric: &SimilarityMetric, raw: f64, pair_raws: &[f64]) -> f64 {
    let n = match metric.kind {
        MetricKind::Cosine | MetricKind::Pearson => (raw + 1.0) / 2.0,
        MetricKind::Angular | MetricKind::Rbf => raw,
        MetricKind::Euclidean | MetricKind::L1 | MetricKind::Kl => 1.0 / (1.0 + raw),
        MetricKind::Dot => {
            let mut mags: Vec<f64> = pair_raws.iter().map(|x| x.abs()).collect();
            mags.sort_by(f64::total_cmp);
            let scale = median_sorted(&mags);
            if scale > 0.0 {
                1.0 / (1.0 + (-raw / scale).exp())
            } else {
                0.5
            }
        }
    };
    n.clamp(0.0, 1.0)
}

pub(crate) fn median_sorted(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        n if n % 2 == 1 => xs[n / 2],
        n => 0.5 * (xs[n / 2 - 1] + xs[n / 2]),
    }
}

/// Mean similarity between consecutive rows among the last `window` rows.
pub fn q_similarity(
    qs: &Series,
    window: usize,
    metric: &SimilarityMetric,
) -> Result<SimilarityScore> {
    q_similarity_counted(qs, window, metric, &OpCounter::new())
}

pub fn q_similarity_counted(
    qs: &Series,
    window: usize,
    metric: &SimilarityMetric,
    ops: &OpCounter,
) -> Result<SimilarityScore> {
    if window < 2 {
        return Err(Error::Parameter(format!(
            "window must be >= 2, got {window}"
        )));
    }
    let t = qs.row_count();
    if window > t {
        return Err(Error::InsufficientData(format!(
            "window {window} exceeds series length {t}"
        )));
    }
    let start = t - window;
    let raws = (start..t - 1)
        .map(|r| pairwise_counted(metric, qs.row(r), qs.row(r + 1), ops))
        .collect::<Result<Vec<_>>>()?;
    let raw = raws.iter().sum::<f64>() / raws.len() as f64;
    Ok(SimilarityScore {
        raw,
        normalized: normalize(metric, raw, &raws),
        metric: *metric,
        window,
    })
}

/// Per-head scores of one layer of a query dump, in head order.
pub fn head_q_similarities(
    dump: &TensorDump,
    layer: usize,
    window: usize,
    metric: &SimilarityMetric,
) -> Result<Vec<SimilarityScore>> {
    if dump.kind() != TensorKind::Queries {
        return Err(Error::Kind {
            expected: TensorKind::Queries.name(),
            found: dump.kind().name(),
        });
    }
    check_index("layer", layer, dump.num_layers())?;
    (0..dump.num_heads())
        .into_par_iter()
        .map(|h| q_similarity(&dump.slice_head(layer, h)?, window, metric))
        .collect()
}

/// Layer score: mean over heads of raw and normalized q-similarity.
pub fn layer_q_similarity(
    dump: &TensorDump,
    layer: usize,
    window: usize,
    metric: &SimilarityMetric,
) -> Result<SimilarityScore> {
    let heads = head_q_similarities(dump, layer, window, metric)?;
    Ok(mean_score(&heads, metric, window))
}

pub(crate) fn mean_score(
    scores: &[SimilarityScore],
    metric: &SimilarityMetric,
    window: usize,
) -> SimilarityScore {
    let n = scores.len() as f64;
    SimilarityScore {
        raw: scores.iter().map(|s| s.raw).sum::<f64>() / n,
        normalized: scores.iter().map(|s| s.normalized).sum::<f64>() / n,
        metric: *metric,
        window,
    }
}
