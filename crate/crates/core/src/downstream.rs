//! Layer-level uses of query similarity: KV-cache budget allocation and
//! layer pruning by adjusted Block Influence.
//!
//! Budgets: `P'_l = P_l + alpha (1 - S_l)`, then `B_l` proportional to `P'_l`
//! with largest-remainder rounding, so the budgets always sum to the total.
//! Infinite `alpha` allocates in proportion to `1 - S_l` alone.
//!
//! Pruning: `BI'_l = BI_l + beta (1 - S_l)`; the `count` layers with the
//! smallest `BI'` are removed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensors::{TensorDump, TensorKind};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub p: Vec<f64>,
    pub s: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bi: Option<Vec<f64>>,
}

impl LayerScores {
    pub fn new(p: Vec<f64>, s: Vec<f64>, bi: Option<Vec<f64>>) -> Result<Self> {
        let scores = LayerScores { p, s, bi };
        scores.validate()?;
        Ok(scores)
    }

    pub fn layer_count(&self) -> usize {
        self.s.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.s.len();
        if n == 0 {
            return Err(Error::Score("no layers".into()));
        }
        let len_ok = |name: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::Score(format!("{name} has {len} entries, s has {n}")))
            }
        };
        len_ok("p", self.p.len())?;
        if let Some(bi) = &self.bi {
            len_ok("bi", bi.len())?;
            if let Some(l) = bi.iter().position(|b| !b.is_finite()) {
                return Err(Error::Score(format!("bi[{l}] is not finite")));
            }
        }
        if let Some(l) = self.s.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Score(format!(
                "s[{l}] = {} is outside [0, 1]",
                self.s[l]
            )));
        }
        if let Some(l) = self.p.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Score(format!(
                "p[{l}] = {} must be finite and >= 0",
                self.p[l]
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scores: LayerScores = serde_json::from_str(text)?;
        scores.validate()?;
        Ok(scores)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        LayerScores::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Weight of the similarity term; `Infinite` ranks by `1 - S` alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Finite(f64),
    Infinite,
}

impl Alpha {
    pub fn validate(self) -> Result<Self> {
        match self {
            Alpha::Finite(a) if !(a.is_finite() && a >= 0.0) => {
                Err(Error::Parameter(format!("alpha must be >= 0, got {a}")))
            }
            _ => Ok(self),
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Finite(a) => write!(f, "{a}"),
            Alpha::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(Alpha::Infinite),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::Parameter(format!("bad alpha {s:?}")))
                .and_then(|a| {
                    if a.is_infinite() && a > 0.0 {
                        Ok(Alpha::Infinite)
                    } else {
                        Alpha::Finite(a).validate()
                    }
                }),
        }
    }
}

/// JSON form: a number, or the string `"inf"`.
impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::Finite(a) => serializer.serialize_f64(*a),
            Alpha::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(a) => Alpha::Finite(a).validate(),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub budgets: Vec<u64>,
    pub total: u64,
    pub alpha: Alpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub removed: Vec<usize>,
    pub beta: f64,
    pub scores: Vec<f64>,
}

/// Real-valued shares before rounding; they sum to 1.
pub fn budget_shares(scores: &LayerScores, alpha: Alpha) -> Result<Vec<f64>> {
    scores.validate()?;
    let alpha = alpha.validate()?;
    let adjusted: Vec<f64> = match alpha {
        Alpha::Finite(a) => scores
            .p
            .iter()
            .zip(&scores.s)
            .map(|(p, s)| p + a * (1.0 - s))
            .collect(),
        Alpha::Infinite => scores.s.iter().map(|s| 1.0 - s).collect(),
    };
    let total: f64 = adjusted.iter().sum();
    let n = adjusted.len() as f64;
    Ok(if total > 0.0 {
        adjusted.iter().map(|a| a / total).collect()
    } else {
        vec![1.0 / n; adjusted.len()]
    })
}

/// Integer apportionment of `total` by `shares` (summing to 1). Floors first,
/// then one extra unit to the largest remainders, ties to the lower index.
pub fn largest_remainder(shares: &[f64], total: u64) -> Vec<u64> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut budgets: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = budgets.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total.saturating_sub(assigned) as usize;
    for &l in order.iter().cycle().take(missing) {
        budgets[l] += 1;
    }
    // Floors of shares that overshoot by rounding are trimmed from the back.
    let mut excess = budgets.iter().sum::<u64>().saturating_sub(total);
    for &l in order.iter().rev() {
        if excess == 0 {
            break;
        }
        if budgets[l] > 0 {
            budgets[l] -= 1;
            excess -= 1;
        }
    }
    budgets
}

pub fn allocate_budget(scores: &LayerScores, alpha: Alpha, total: u64) -> Result<BudgetPlan> {
    let shares = budget_shares(scores, alpha)?;
    Ok(BudgetPlan {
        budgets: largest_remainder(&shares, total),
        total,
        alpha,
    })
}

pub fn adjusted_bi(scores: &LayerScores, beta: f64) -> Result<Vec<f64>> {
    scores.validate()?;
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Parameter(format!("beta must be >= 0, got {beta}")));
    }
    let bi = scores
        .bi
        .as_ref()
        .ok_or_else(|| Error::Score("block influence scores are missing".into()))?;
    Ok(bi
        .iter()
        .zip(&scores.s)
        .map(|(b, s)| b + beta * (1.0 - s))
        .collect())
}

/// Layer indices in ascending adjusted score, ties to the lower index.
pub fn prune_order(adjusted: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..adjusted.len()).collect();
    order.sort_by(|&a, &b| adjusted[a].total_cmp(&adjusted[b]).then(a.cmp(&b)));
    order
}

pub fn prune_layers(scores: &LayerScores, beta: f64, count: usize) -> Result<PrunePlan> {
    let adjusted = adjusted_bi(scores, beta)?;
    if count == 0 || count >= adjusted.len() {
        return Err(Error::Parameter(format!(
            "prune count must be in 1..{}, got {count}",
            adjusted.len()
        )));
    }
    let mut removed: Vec<usize> = prune_order(&adjusted).into_iter().take(count).collect();
    removed.sort_unstable();
    Ok(PrunePlan {
        removed,
        beta,
        scores: adjusted,
    })
}

/// `BI_l = 1 - mean_t cos(h_{l,t}, h_{l+1,t})` for each consecutive layer
/// pair of a hidden-state dump, averaged over heads when the dump has more
/// than one.
pub fn compute_block_influence(hidden: &TensorDump) -> Result<Vec<f64>> {
    if hidden.kind() != TensorKind::Hidden {
        return Err(Error::Kind {
            expected: TensorKind::Hidden.name(),
            found: hidden.kind().name(),
        });
    }
    let layers = hidden.num_layers();
    if layers < 2 {
        return Err(Error::InsufficientData(format!(
            "{layers} layer(s) give no boundary"
        )));
    }
    let heads = hidden.num_heads();
    let mut out = Vec::with_capacity(layers - 1);
    for l in 0..layers - 1 {
        let mut total = 0.0;
        for h in 0..heads {
            let a = hidden.slice_head(l, h)?;
            let b = hidden.slice_head(l + 1, h)?;
            let mut sum = 0.0;
            for t in 0..a.row_count() {
                let (x, y) = (a.row(t), b.row(t));
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nx == 0.0 || ny == 0.0 {
                    return Err(Error::UndefinedSimilarity(format!(
                        "zero hidden row at layer {}, token {t}",
                        if nx == 0.0 { l } else { l + 1 }
                    )));
                }
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                sum += (dot / (nx * ny)).clamp(-1.0, 1.0);
            }
            total += 1.0 - sum / a.row_count() as f64;
        }
        out.push(total / heads as f64);
    }
    Ok(out)
}
