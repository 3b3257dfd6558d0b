//! Property tests against independent oracles: explicit rotation matrices,
//! brute-force offsets, and closed-form allocation algebra.

use approx::assert_relative_eq;
use proptest::prelude::*;

use qkscope_core::downstream::{largest_remainder, prune_order};
use qkscope_core::{
    allocate_budget, budget_shares, channel_decompose, full_map, q_similarity, relocate_channel,
    softmax_rows, Alpha, DumpHeader, LayerScores, MetricKind, QkSeries, RopeConfig, Series,
    SimilarityMetric, TensorDump, TensorKind,
};

/// Dense `d x d` rotation for position offset `n`, built entry by entry.
fn rotation_matrix(cfg: &RopeConfig, n: i64) -> Vec<Vec<f64>> {
    let d = cfg.head_dim();
    let h = d / 2;
    let mut r = vec![vec![0.0; d]; d];
    for m in 0..h {
        let angle = n as f64 * cfg.base().powf(-2.0 * m as f64 / d as f64);
        r[m][m] = angle.cos();
        r[m][m + h] = -angle.sin();
        r[m + h][m] = angle.sin();
        r[m + h][m + h] = angle.cos();
    }
    r
}

fn mat_vec(r: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    r.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

fn head_dim() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![2usize, 4, 8, 16, 64])
}

fn base() -> impl Strategy<Value = f64> {
    (2.0f64..7.0).prop_map(|e| 10f64.powf(e))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dump_bytes_round_trip(
        layers in 1usize..3, heads in 1usize..3, seq in 1usize..6, half in 1usize..4,
        kind in prop::sample::select(vec![TensorKind::Queries, TensorKind::Keys, TensorKind::Hidden]),
        seed in any::<u32>(),
    ) {
        let d = 2 * half;
        let n = layers * heads * seq * d;
        let payload: Vec<f32> = (0..n).map(|x| ((x as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6).collect();
        let header = DumpHeader {
            num_layers: layers as u32,
            num_heads: heads as u32,
            seq_len: seq as u32,
            head_dim: d as u32,
            kind,
        };
        let dump = TensorDump::new(header, payload).unwrap();
        let bytes = dump.to_bytes();
        prop_assert_eq!(bytes.len(), 28 + 4 * n);
        prop_assert_eq!(TensorDump::from_bytes(&bytes).unwrap(), dump);
    }

    #[test]
    fn slice_head_matches_flat_offsets(layers in 1usize..4, heads in 1usize..4, seq in 1usize..5, half in 1usize..3) {
        let d = 2 * half;
        let n = layers * heads * seq * d;
        let payload: Vec<f32> = (0..n).map(|x| x as f32).collect();
        let header = DumpHeader {
            num_layers: layers as u32,
            num_heads: heads as u32,
            seq_len: seq as u32,
            head_dim: d as u32,
            kind: TensorKind::Queries,
        };
        let dump = TensorDump::new(header, payload).unwrap();
        for l in 0..layers {
            for h in 0..heads {
                let s = dump.slice_head(l, h).unwrap();
                for t in 0..seq {
                    for j in 0..d {
                        let flat = ((l * heads + h) * seq + t) * d + j;
                        prop_assert_eq!(s.row(t)[j], flat as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_matches_explicit_matrix(d in head_dim(), b in base(), n in -5000i64..5000, seed in 0u64..1000) {
        let cfg = RopeConfig::new(b, d).unwrap();
        let v: Vec<f64> = (0..d).map(|j| ((j as u64 * 7919 + seed) % 97) as f64 / 10.0 - 4.8).collect();
        let fast = cfg.rotate(&v, n).unwrap();
        let slow = mat_vec(&rotation_matrix(&cfg, n), &v);
        for (a, e) in fast.iter().zip(&slow) {
            prop_assert!((a - e).abs() <= 1e-9 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn rotation_preserves_norm(d in head_dim(), b in base(), n in any::<i32>(), v in finite_vec(64)) {
        let cfg = RopeConfig::new(b, d).unwrap();
        let v = &v[..d];
        let r = cfg.rotate(v, n as i64).unwrap();
        let (a, e) = (dot(&r, &r).sqrt(), dot(v, v).sqrt());
        prop_assert!((a - e).abs() <= 1e-12 * (1.0 + e));
    }

    #[test]
    fn relative_positions_compose(d in head_dim(), b in base(), m in -100_000i64..100_000, n in -100_000i64..100_000, v in finite_vec(64)) {
        let cfg = RopeConfig::new(b, d).unwrap();
        prop_assert!(cfg.relative_rotation_check(m, n, &v[..d]).unwrap() <= 1e-8);
    }

    #[test]
    fn decomposition_sums_to_matrix_logit(
        d in head_dim(), b in base(), len in 1usize..40, q in finite_vec(64), k in finite_vec(64), pick in any::<(u16, u16)>(),
    ) {
        let cfg = RopeConfig::new(b, d).unwrap();
        let t = pick.0 as usize % len;
        let i = pick.1 as usize % (t + 1);
        let mut qs = Series::from_fn(len, d, |_, _| 0.0).unwrap();
        let mut ks = qs.clone();
        qs.row_mut(t).copy_from_slice(&q[..d]);
        ks.row_mut(i).copy_from_slice(&k[..d]);
        let series = QkSeries::new(qs, ks, cfg).unwrap();
        let oracle = dot(&q[..d], &mat_vec(&rotation_matrix(&cfg, i as i64 - t as i64), &k[..d]));
        let parts = channel_decompose(&series, t, i).unwrap();
        let total: f64 = parts.iter().map(|c| c.value).sum();
        let scale: f64 = parts.iter().map(|c| c.weight).sum::<f64>() + 1.0;
        prop_assert!((total - oracle).abs() <= 1e-9 * scale);
        prop_assert!((series.logit(t, i) - oracle).abs() <= 1e-9 * scale);
        for c in &parts {
            prop_assert!(c.value.abs() <= c.weight);
            prop_assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&c.phase));
            let closed = c.weight * (c.phase + (i as f64 - t as f64) * c.freq).cos();
            prop_assert!((closed - c.value).abs() <= 1e-9 * (1.0 + c.weight));
        }
    }

    #[test]
    fn softmax_rows_are_stochastic(d in prop::sample::select(vec![2usize, 4, 8]), len in 1usize..24, seed in any::<u64>()) {
        let cfg = RopeConfig::new(1e4, d).unwrap();
        let f = |t: usize, j: usize| (((t * 31 + j * 17) as u64 ^ seed) % 41) as f64 / 4.0 - 5.0;
        let series = QkSeries::new(Series::from_fn(len, d, f).unwrap(), Series::from_fn(len, d, |t, j| f(j, t)).unwrap(), cfg).unwrap();
        let p = softmax_rows(&full_map(&series));
        for t in 0..len {
            let row = p.row(t);
            prop_assert_eq!(row.len(), t + 1);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn normalized_similarity_is_in_unit_interval(
        kind in prop::sample::select(MetricKind::ALL.to_vec()), rows in 2usize..12, seed in any::<u64>(),
    ) {
        let s = Series::from_fn(rows, 6, |t, j| (((t * 13 + j * 5) as u64 ^ seed) % 23) as f64 / 3.0 + 0.5).unwrap();
        let score = q_similarity(&s, rows, &SimilarityMetric::new(kind)).unwrap();
        prop_assert!((0.0..=1.0).contains(&score.normalized), "{kind:?} {}", score.normalized);
    }

    #[test]
    fn relocation_preserves_logit_totals_without_rope(len in 1usize..8, seed in any::<u64>()) {
        let cfg = RopeConfig::new(1e4, 8).unwrap();
        let f = |t: usize, j: usize| (((t * 7 + j * 3) as u64 ^ seed) % 19) as f64 - 9.0;
        let q = Series::from_fn(len, 8, f).unwrap();
        let k = Series::from_fn(len, 8, |t, j| f(j + 1, t)).unwrap();
        let base = QkSeries::new(q.clone(), k.clone(), cfg).unwrap().without_rope();
        let moved = QkSeries::new(relocate_channel(&q, 0, 3).unwrap(), relocate_channel(&k, 0, 3).unwrap(), cfg)
            .unwrap()
            .without_rope();
        for t in 0..len {
            for i in 0..=t {
                prop_assert!((base.logit(t, i) - moved.logit(t, i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn budgets_sum_exactly(
        p in prop::collection::vec(0.0f64..100.0, 1..40), s_seed in any::<u64>(), total in 0u64..100_000,
        alpha in prop::sample::select(vec![Alpha::Finite(0.0), Alpha::Finite(0.5), Alpha::Finite(1.0), Alpha::Finite(10.0), Alpha::Infinite]),
    ) {
        let s: Vec<f64> = (0..p.len()).map(|l| (((l as u64 * 2654435761) ^ s_seed) % 1001) as f64 / 1000.0).collect();
        let scores = LayerScores::new(p, s, None).unwrap();
        let plan = allocate_budget(&scores, alpha, total).unwrap();
        prop_assert_eq!(plan.budgets.iter().sum::<u64>(), total);
        let shares = budget_shares(&scores, alpha).unwrap();
        for (b, sh) in plan.budgets.iter().zip(&shares) {
            prop_assert!((*b as f64 - sh * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn allocation_is_permutation_equivariant(
        p in prop::collection::vec(0.0f64..10.0, 2..16), rot in any::<usize>(), total in 1u64..5000,
    ) {
        // Integer plans can differ on remainder ties, so compare real shares.
        let n = p.len();
        let s: Vec<f64> = (0..n).map(|l| (l as f64 * 0.37).fract()).collect();
        let r = rot % n;
        let rotate = |v: &[f64]| -> Vec<f64> { (0..n).map(|l| v[(l + r) % n]).collect() };
        let a = budget_shares(&LayerScores::new(p.clone(), s.clone(), None).unwrap(), Alpha::Finite(1.0)).unwrap();
        let b = budget_shares(&LayerScores::new(rotate(&p), rotate(&s), None).unwrap(), Alpha::Finite(1.0)).unwrap();
        for (x, y) in rotate(&a).iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let plan = allocate_budget(&LayerScores::new(p, s, None).unwrap(), Alpha::Finite(1.0), total).unwrap();
        prop_assert_eq!(plan.budgets.iter().sum::<u64>(), total);
    }

    #[test]
    fn lowering_similarity_never_lowers_share(
        p in prop::collection::vec(0.0f64..10.0, 2..12), s in prop::collection::vec(0.0f64..=1.0, 12),
        layer in any::<usize>(), drop in 0.0f64..1.0, alpha in 0.01f64..20.0,
    ) {
        let n = p.len();
        let s = s[..n].to_vec();
        let l = layer % n;
        let mut lowered = s.clone();
        lowered[l] = (s[l] - drop).max(0.0);
        let before = budget_shares(&LayerScores::new(p.clone(), s, None).unwrap(), Alpha::Finite(alpha)).unwrap();
        let after = budget_shares(&LayerScores::new(p, lowered, None).unwrap(), Alpha::Finite(alpha)).unwrap();
        prop_assert!(after[l] >= before[l] - 1e-12);
    }

    #[test]
    fn largest_remainder_sums(shares_raw in prop::collection::vec(0.0f64..1.0, 1..30), total in 0u64..10_000) {
        let sum: f64 = shares_raw.iter().sum();
        prop_assume!(sum > 0.0);
        let shares: Vec<f64> = shares_raw.iter().map(|x| x / sum).collect();
        prop_assert_eq!(largest_remainder(&shares, total).iter().sum::<u64>(), total);
    }

    #[test]
    fn beta_zero_prunes_in_bi_order(bi in prop::collection::vec(0.0f64..2.0, 2..20), s_val in 0.0f64..=1.0) {
        let n = bi.len();
        let scores = LayerScores::new(vec![1.0; n], vec![s_val; n], Some(bi.clone())).unwrap();
        let adjusted = qkscope_core::adjusted_bi(&scores, 0.0).unwrap();
        prop_assert_eq!(&adjusted, &bi);
        let order = prune_order(&adjusted);
        for w in order.windows(2) {
            prop_assert!(bi[w[0]] < bi[w[1]] || (bi[w[0]] == bi[w[1]] && w[0] < w[1]));
        }
    }
}

#[test]
fn alpha_zero_equals_preference_only_plan() {
    let p = vec![3.0, 1.0, 0.5, 2.5];
    let with_s = LayerScores::new(p.clone(), vec![0.1, 0.9, 0.4, 0.0], None).unwrap();
    let without_s = LayerScores::new(p, vec![1.0; 4], None).unwrap();
    let a = allocate_budget(&with_s, Alpha::Finite(0.0), 1001).unwrap();
    let b = allocate_budget(&without_s, Alpha::Finite(5.0), 1001).unwrap();
    assert_eq!(a.budgets, b.budgets);
    assert_relative_eq!(a.budgets.iter().sum::<u64>() as f64, 1001.0);
}
