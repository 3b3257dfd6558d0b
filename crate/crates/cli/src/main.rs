//! `qkscope`: analyze query/key dumps, verify bounds, generate fixtures,
//! and plan KV budgets or layer pruning.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use qkscope_core::patterns::classify;
use qkscope_core::report::{Record, Report};
use qkscope_core::synth::{to_dumps, GenRegime, GenSpec};
use qkscope_core::theorems::default_sweeps;
use qkscope_core::{
    allocate_budget, channel_spectrum, full_map, generate, measure_period, prune_layers, read_dump,
    softmax_rows, write_dump, Alpha, ClassifierConfig, LayerScores, QkSeries, RopeConfig,
    SimilarityMetric, TensorDump, TensorKind,
};

#[derive(Parser)]
#[command(
    name = "qkscope",
    version,
    about = "Temporal analysis of rotary-position attention"
)]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every (layer, head) and write a JSON report.
    Analyze(AnalyzeArgs),
    /// Print one line per (layer, head): regime and query similarity.
    Classify(AnalyzeArgs),
    /// Per-channel logit mass at one key of one head.
    Spectrum(SpectrumArgs),
    /// Measured and predicted diagonal period of one head.
    Period(PeriodArgs),
    /// Run the seeded bound sweeps; exits with status 2 on any violation.
    Verify(VerifyArgs),
    /// Write a synthetic query/key fixture pair.
    Synth(SynthArgs),
    /// KV-cache budgets from per-layer scores.
    Allocate(AllocateArgs),
    /// Layers to remove by adjusted Block Influence.
    Prune(PruneArgs),
    /// Softmax map of one head as a binary PGM.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct DumpArgs {
    /// Query and key dumps; the kind is read from each header.
    #[arg(long = "input", required = true, num_args = 1)]
    inputs: Vec<PathBuf>,
    /// Overrides the `rope_base` of the sidecar.
    #[arg(long)]
    rope_base: Option<f64>,
    /// Must match the dumps when given.
    #[arg(long)]
    head_dim: Option<usize>,
}

#[derive(Args)]
struct HeadArgs {
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    dumps: DumpArgs,
    #[arg(long, default_value_t = qkscope_core::DEFAULT_WINDOW)]
    window: usize,
    /// cosine, dot, pearson, euclidean, l1, angular, rbf[:gamma], kl
    #[arg(long, default_value = "cosine")]
    metric: SimilarityMetric,
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    dumps: DumpArgs,
    #[command(flatten)]
    at: HeadArgs,
    #[arg(long, default_value_t = 0)]
    key: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PeriodArgs {
    #[command(flatten)]
    dumps: DumpArgs,
    #[command(flatten)]
    at: HeadArgs,
    /// Largest diagonal offset examined; half the sequence when absent.
    #[arg(long)]
    max_offset: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// random, reaccess, sequential, periodic or seasonal
    #[arg(long)]
    regime: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    len: usize,
    #[arg(long, default_value_t = 1e6)]
    rope_base: f64,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long)]
    dominant_channel: Option<usize>,
    #[arg(long)]
    drift_sigma: Option<f64>,
    #[arg(long)]
    season_length: Option<usize>,
    /// Directory receiving `<stem>.queries.tqkd` and `<stem>.keys.tqkd`.
    #[arg(long)]
    output: PathBuf,
    /// File stem; the regime name when absent.
    #[arg(long)]
    stem: Option<String>,
}

#[derive(Args)]
struct AllocateArgs {
    /// LayerScores JSON: {"p": [...], "s": [...], "bi": [...]}
    #[arg(long)]
    input: PathBuf,
    /// Non-negative weight, or `inf`.
    #[arg(long, default_value = "1")]
    alpha: Alpha,
    #[arg(long)]
    total: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = qkscope_core::downstream::DEFAULT_BETA)]
    beta: f64,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    dumps: DumpArgs,
    #[command(flatten)]
    at: HeadArgs,
    /// Build the map with rotations disabled.
    #[arg(long)]
    no_rope: bool,
    #[arg(long)]
    output: PathBuf,
}

/// Query and key dumps of one model with the rotary configuration.
struct Inputs {
    queries: TensorDump,
    keys: TensorDump,
    cfg: RopeConfig,
}

impl Inputs {
    fn load(args: &DumpArgs) -> Result<Self> {
        let mut queries = None;
        let mut keys = None;
        for path in &args.inputs {
            let dump = read_dump(path).with_context(|| format!("reading {}", path.display()))?;
            let slot = match dump.kind() {
                TensorKind::Queries => &mut queries,
                TensorKind::Keys => &mut keys,
                TensorKind::Hidden => bail!(
                    "{} holds hidden states, expected queries or keys",
                    path.display()
                ),
            };
            ensure!(
                slot.is_none(),
                "more than one {} dump given",
                dump.kind().name()
            );
            *slot = Some(dump);
        }
        let queries = queries.context("no query dump among the inputs")?;
        let keys = keys.context("no key dump among the inputs")?;
        let (qh, kh) = (queries.header(), keys.header());
        ensure!(
            (qh.num_layers, qh.num_heads, qh.seq_len, qh.head_dim)
                == (kh.num_layers, kh.num_heads, kh.seq_len, kh.head_dim),
            "query and key dumps differ in shape"
        );
        if let Some(d) = args.head_dim {
            ensure!(
                d == queries.head_dim(),
                "--head-dim {d} but the dumps have {}",
                queries.head_dim()
            );
        }
        let base = args
            .rope_base
            .or_else(|| {
                [&queries, &keys]
                    .iter()
                    .find_map(|d| d.metadata.as_ref()?.rope_base)
            })
            .context("rope base unknown: pass --rope-base or provide a sidecar")?;
        let cfg = RopeConfig::new(base, queries.head_dim())?;
        Ok(Inputs { queries, keys, cfg })
    }

    fn heads(&self) -> Vec<(usize, usize)> {
        let (layers, heads) = (self.queries.num_layers(), self.queries.num_heads());
        (0..layers)
            .flat_map(|l| (0..heads).map(move |h| (l, h)))
            .collect()
    }

    fn series(&self, layer: usize, head: usize) -> Result<QkSeries> {
        let q = self.queries.slice_head(layer, head)?;
        let k = self.keys.slice_head(layer, head)?;
        Ok(QkSeries::new(q, k, self.cfg)?)
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(bytes).context("writing to stdout"),
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_output(path, text.as_bytes())
}

fn analyze_heads(args: &AnalyzeArgs) -> Result<Vec<qkscope_core::PatternReport>> {
    let inputs = Inputs::load(&args.dumps)?;
    let cfg = ClassifierConfig {
        tau: args.tau,
        ..ClassifierConfig::default()
    };
    cfg.validate()?;
    // Collected in (layer, head) order regardless of completion order.
    inputs
        .heads()
        .into_par_iter()
        .map(|(l, h)| {
            let series = inputs.series(l, h)?;
            let report = classify(&series, &full_map(&series), &cfg, args.window, &args.metric)
                .with_context(|| format!("classifying layer {l} head {h}"))?;
            Ok(report.at(l, h))
        })
        .collect()
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Analyze(args) => {
            let records = analyze_heads(&args)?
                .into_iter()
                .map(Record::Pattern)
                .collect();
            write_output(
                args.output.as_deref(),
                Report::new(records).to_json()?.as_bytes(),
            )?;
        }
        Command::Classify(args) => {
            let mut text = String::new();
            for r in analyze_heads(&args)? {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{:.6}\n",
                    r.layer,
                    r.head,
                    r.regime.name(),
                    r.q_sim.normalized
                ));
            }
            write_output(args.output.as_deref(), text.as_bytes())?;
        }
        Command::Spectrum(args) => {
            let inputs = Inputs::load(&args.dumps)?;
            let series = inputs.series(args.at.layer, args.at.head)?;
            let spectrum = channel_spectrum(&series, args.key, args.key..series.len())?;
            write_json(args.output.as_deref(), &spectrum)?;
        }
        Command::Period(args) => {
            let inputs = Inputs::load(&args.dumps)?;
            let series = inputs.series(args.at.layer, args.at.head)?;
            let max_offset = args.max_offset.unwrap_or(series.len() / 2);
            let estimate = measure_period(&full_map(&series), max_offset)?;
            let estimate = match channel_spectrum(&series, 0, 0..series.len()) {
                Ok(s) => estimate.with_prediction(&inputs.cfg, s.dominant)?,
                Err(_) => estimate,
            };
            write_json(args.output.as_deref(), &estimate)?;
        }
        Command::Verify(args) => {
            let summaries = default_sweeps(args.trials, args.seed)?;
            let violations: usize = summaries.iter().map(|s| s.violations).sum();
            for s in &summaries {
                eprintln!(
                    "{:<16} checks {:>6}  vacuous {:>6}  violations {}  min slack {}",
                    s.name.name(),
                    s.checks,
                    s.vacuous,
                    s.violations,
                    s.min_slack
                        .map_or("n/a".to_string(), |m| format!("{m:.3e}"))
                );
            }
            let records = summaries.into_iter().map(Record::Sweep).collect();
            write_output(
                args.output.as_deref(),
                Report::new(records).to_json()?.as_bytes(),
            )?;
            if violations > 0 {
                eprintln!("{violations} bound violation(s)");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Synth(args) => {
            let regime = GenRegime::parse(&args.regime)?;
            let cfg = RopeConfig::new(args.rope_base, args.head_dim)?;
            let mut spec = GenSpec::new(regime, cfg)
                .with_seed(args.seed)
                .with_len(args.len);
            if args.dominant_channel.is_some() {
                spec.dominant_channel = args.dominant_channel;
            }
            if let Some(sigma) = args.drift_sigma {
                spec.drift_sigma = sigma;
            }
            if args.season_length.is_some() {
                spec.season_length = args.season_length;
            }
            let series = generate(&spec)?;
            let (q, k) = to_dumps(&series, &spec)?;
            fs::create_dir_all(&args.output)
                .with_context(|| format!("creating {}", args.output.display()))?;
            let stem = args.stem.unwrap_or_else(|| regime.name().to_string());
            for (dump, kind) in [(q, "queries"), (k, "keys")] {
                let path = args.output.join(format!("{stem}.{kind}.tqkd"));
                write_dump(&dump, &path).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Allocate(args) => {
            let scores = LayerScores::read(&args.input)
                .with_context(|| format!("reading {}", args.input.display()))?;
            write_json(
                args.output.as_deref(),
                &allocate_budget(&scores, args.alpha, args.total)?,
            )?;
        }
        Command::Prune(args) => {
            let scores = LayerScores::read(&args.input)
                .with_context(|| format!("reading {}", args.input.display()))?;
            write_json(
                args.output.as_deref(),
                &prune_layers(&scores, args.beta, args.count)?,
            )?;
        }
        Command::Heatmap(args) => {
            let inputs = Inputs::load(&args.dumps)?;
            let mut series = inputs.series(args.at.layer, args.at.head)?;
            if args.no_rope {
                series = series.without_rope();
            }
            let pgm = softmax_rows(&full_map(&series)).to_pgm();
            write_output(Some(&args.output), &pgm)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n.max(1));
    }
    let result = pool
        .build()
        .context("starting worker pool")
        .and_then(|pool| pool.install(|| run(cli.command)));
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
