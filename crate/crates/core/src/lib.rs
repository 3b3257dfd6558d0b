//! Temporal analysis of rotary-position attention: channel decomposition,
//! query similarity, regime classification, bound verification, period
//! analysis, and the budget and pruning procedures built on top of them.

pub mod attention;
pub mod downstream;
pub mod error;
pub mod patterns;
pub mod report;
pub mod rope;
pub mod similarity;
pub mod spectrum;
pub mod synth;
pub mod tensors;
pub mod theorems;

pub use attention::{
    channel_decompose, full_map, logits_at, softmax_row, softmax_rows, AttentionMap,
    ChannelContribution, QkSeries, SoftmaxMap,
};
pub use downstream::{
    adjusted_bi, allocate_budget, budget_shares, compute_block_influence, prune_layers, Alpha,
    BudgetPlan, LayerScores, PrunePlan,
};
pub use error::{Error, Result};
pub use patterns::{
    classify, classify_default, column_mass_profile, perturb_query_order, ClassifierConfig,
    PatternReport, Regime,
};
pub use report::{emit_report, read_report, Record, Report, SCHEMA_VERSION};
pub use rope::{ChannelPair, Pairing, RopeConfig};
pub use similarity::{
    layer_q_similarity, pairwise, q_similarity, MetricKind, OpCounter, SimilarityMetric,
    SimilarityScore, DEFAULT_WINDOW,
};
pub use spectrum::{
    channel_spectrum, measure_period, predicted_period, relocate_channel, ChannelSpectrum,
    PeriodEstimate,
};
pub use synth::{epsilon_of, generate, GenRegime, GenSpec};
pub use tensors::{read_dump, write_dump, DumpHeader, Metadata, Series, TensorDump, TensorKind};
pub use theorems::{
    check_prop1, check_thm1, check_thm2, check_thm3, check_thm4, sweep, BoundCheck, BoundName,
    SweepSummary,
};
