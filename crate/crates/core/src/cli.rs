//! Command-line interface: configuration, commands and output files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::analytics::{
    adjust_trend, aggregate_forecast, backtest, groups_summing_over, improvement_surface, AggregateConfig,
    BacktestConfig, ImprovementCell, MetricReport, PopulationSelector,
};
use crate::artifact::ModelArtifact;
use crate::datastore::{parse_csv, subset, DesignRow, SchemaConfig, StackedDataset, ZeroPolicy};
use crate::error::{Error, Result};
use crate::inference::{optimize, select_rank, OptimizerConfig};
use crate::kernels::ModelFamily;
use crate::gp_core::{FittedModel, PredictionMode};

/// Settings read from a TOML file; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Input CSV. Relative paths are resolved against the config file.
    pub data: Option<PathBuf>,
    pub factor_columns: Vec<String>,
    /// Level order per factor column; lexicographic when absent.
    pub level_orders: BTreeMap<String, Vec<String>>,
    pub zero_policy: ZeroPolicy,
    /// `sogp`, `icm`, `slfm` or `multi-level-icm`.
    pub family: String,
    pub rank: usize,
    /// Per-dimension ranks for `multi-level-icm`.
    pub ranks: Vec<usize>,
    pub shared_intercept: bool,
    pub seed: u64,
    pub starts: usize,
    pub max_iter: usize,
    pub tolerance: f64,
    /// Inclusive age and year filters applied after loading.
    pub ages: Option<[f64; 2]>,
    pub years: Option<[f64; 2]>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        Self {
            data: None,
            factor_columns: Vec::new(),
            level_orders: BTreeMap::new(),
            zero_policy: ZeroPolicy::Drop,
            family: "icm".into(),
            rank: 2,
            ranks: Vec::new(),
            shared_intercept: false,
            seed: opt.seed,
            starts: opt.starts,
            max_iter: opt.max_iter,
            tolerance: opt.tolerance,
            ages: None,
            years: None,
            out: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    pub fn family_spec(&self) -> Result<ModelFamily> {
        family_from(&self.family, self.rank, &self.ranks)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.seed,
            starts: self.starts,
            max_iter: self.max_iter,
            tolerance: self.tolerance,
            shared_intercept: self.shared_intercept,
        }
    }

    pub fn schema_config(&self) -> Result<SchemaConfig> {
        if self.factor_columns.is_empty() {
            return Err(Error::Config("factor_columns is required".into()));
        }
        let level_orders = if self.level_orders.is_empty() {
            None
        } else {
            if let Some(k) = self.level_orders.keys().find(|k| !self.factor_columns.contains(k)) {
                return Err(Error::Config(format!("level_orders names unknown column {k}")));
            }
            let orders = self
                .factor_columns
                .iter()
                .map(|c| {
                    self.level_orders
                        .get(c)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("level_orders is missing column {c}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(orders)
        };
        Ok(SchemaConfig { factor_columns: self.factor_columns.clone(), level_orders, zero_policy: self.zero_policy })
    }

    /// Loads and filters the configured dataset.
    pub fn dataset(&self) -> Result<StackedDataset> {
        let path = self.data.as_ref().ok_or_else(|| Error::Config("data path is required".into()))?;
        let ds = parse_csv(path, &self.schema_config()?)?;
        let ages = self.ages.unwrap_or([f64::NEG_INFINITY, f64::INFINITY]);
        let years = self.years.unwrap_or([f64::NEG_INFINITY, f64::INFINITY]);
        if self.ages.is_none() && self.years.is_none() {
            return Ok(ds);
        }
        subset(&ds, ages[0]..=ages[1], years[0]..=years[1], None)
    }
}

fn family_from(name: &str, rank: usize, ranks: &[usize]) -> Result<ModelFamily> {
    match name {
        "sogp" => Ok(ModelFamily::Sogp),
        "icm" => Ok(ModelFamily::Icm { rank }),
        "slfm" => Ok(ModelFamily::Slfm { rank }),
        "multi-level-icm" => {
            if ranks.is_empty() {
                return Err(Error::Config("multi-level-icm needs ranks".into()));
            }
            Ok(ModelFamily::MultiLevelIcm { ranks: ranks.to_vec() })
        }
        other => Err(Error::Config(format!("unknown family {other}"))),
    }
}

#[derive(Debug, Parser)]
#[command(name = "mortgp", version, about = "Joint mortality modelling with multi-output Gaussian processes")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for all randomness [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: .].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write model.json and fit_report.json.
    Fit(DataArgs),
    /// Predict on a grid and write predictions.csv.
    Predict(PredictArgs),
    /// Rolling-window comparison against per-population SOGPs.
    Backtest(BacktestArgs),
    /// Fit several ranks and pick one by BIC.
    SelectRank(SelectRankArgs),
    /// Monte-Carlo bands of rates summed over populations.
    Aggregate(AggregateArgs),
    /// Observed and modelled mortality-improvement factors.
    Improvement(ImprovementArgs),
    /// Scale the year slope of selected populations.
    AdjustTrend(AdjustTrendArgs),
}

/// Data and model settings overriding the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated factor columns, outermost first.
    #[arg(long, value_delimiter = ',')]
    pub factors: Vec<String>,
    /// sogp, icm, slfm or multi-level-icm [default: icm].
    #[arg(long)]
    pub family: Option<String>,
    /// Latent rank for icm and slfm [default: 2].
    #[arg(long)]
    pub rank: Option<usize>,
    /// Comma-separated per-dimension ranks for multi-level-icm.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Vec<usize>,
    /// Optimizer starts [default: 5].
    #[arg(long)]
    pub starts: Option<usize>,
    /// Iteration limit per start [default: 500].
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative log-likelihood tolerance [default: 1e-6].
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Share one intercept across populations.
    #[arg(long)]
    pub shared_intercept: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Latent,
    Observational,
}

impl From<ModeArg> for PredictionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Latent => PredictionMode::Latent,
            ModeArg::Observational => PredictionMode::Observational,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Ages as `a,b,c` or `start:end[:step]` [default: training ages].
    #[arg(long)]
    pub ages: Option<String>,
    /// Years as `a,b,c` or `start:end[:step]`.
    #[arg(long)]
    pub years: String,
    /// Comma-separated population labels, or `*` [default: *].
    #[arg(long, default_value = "*")]
    pub populations: String,
    #[arg(long, value_enum, default_value = "latent")]
    pub mode: ModeArg,
    /// Comma-separated probability levels for quantile columns.
    #[arg(long, value_delimiter = ',')]
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Training windows as `start-end`, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub windows: Vec<String>,
    /// Years forecast after each training end.
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    /// Score rates summed over these factor dimensions.
    #[arg(long, value_delimiter = ',')]
    pub aggregate_over: Vec<String>,
    /// Samples per aggregated cell.
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct SelectRankArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Ranks to try: `1,2,3` for icm/slfm, `3x5x2,2x3x1` for multi-level-icm.
    #[arg(long, value_delimiter = ',', required = true)]
    pub candidates: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Factor dimensions summed over, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sum_over: Vec<String>,
    #[arg(long, default_value_t = 500_000)]
    pub samples: usize,
    /// Ages as `a,b,c` or `start:end[:step]` [default: training ages].
    #[arg(long)]
    pub ages: Option<String>,
    #[arg(long)]
    pub years: String,
    /// Central band levels.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.6, 0.8, 0.95, 0.99])]
    pub levels: Vec<f64>,
    #[arg(long, value_enum, default_value = "latent")]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct ImprovementArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Years for model-based factors [default: training years].
    #[arg(long)]
    pub years: Option<String>,
}

#[derive(Debug, Args)]
pub struct AdjustTrendArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Population label, or `*` for all.
    #[arg(long)]
    pub population: String,
    #[arg(long)]
    pub scale: f64,
}

/// Parses `a,b,c` or `start:end[:step]` (inclusive).
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("invalid grid {s:?}"));
    if s.contains(':') {
        let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
        let (start, end, step) = match parts[..] {
            [a, b] => (a, b, 1.0),
            [a, b, c] => (a, b, c),
            _ => return Err(bad()),
        };
        if !(step > 0.0) || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| start + step * i as f64).collect())
    } else {
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect()
    }
}

/// Full-precision float text (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

struct Context {
    config: RunConfig,
    out: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        let out = cli.out.clone().unwrap_or_else(|| config.out.clone());
        std::fs::create_dir_all(&out)?;
        Ok(Self { config, out })
    }

    fn with_data_args(&self, args: &DataArgs) -> RunConfig {
        let mut c = self.config.clone();
        if let Some(d) = &args.data {
            c.data = Some(d.clone());
        }
        if !args.factors.is_empty() {
            c.factor_columns = args.factors.clone();
        }
        if let Some(f) = &args.family {
            c.family = f.clone();
        }
        if let Some(r) = args.rank {
            c.rank = r;
        }
        if !args.ranks.is_empty() {
            c.ranks = args.ranks.clone();
        }
        if let Some(s) = args.starts {
            c.starts = s;
        }
        if let Some(m) = args.max_iter {
            c.max_iter = m;
        }
        if let Some(t) = args.tolerance {
            c.tolerance = t;
        }
        c.shared_intercept |= args.shared_intercept;
        c
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let ctx = Context::new(&cli)?;
    match &cli.command {
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Backtest(a) => cmd_backtest(&ctx, a),
        Command::SelectRank(a) => cmd_select_rank(&ctx, a),
        Command::Aggregate(a) => cmd_aggregate(&ctx, a),
        Command::Improvement(a) => cmd_improvement(&ctx, a),
        Command::AdjustTrend(a) => cmd_adjust_trend(&ctx, a),
    }
}

fn cmd_fit(ctx: &Context, args: &DataArgs) -> Result<()> {
    let cfg = ctx.with_data_args(args);
    let family = cfg.family_spec()?;
    let ds = cfg.dataset()?;
    let (model, report) = optimize(&ds, &family, &cfg.optimizer())?;
    log::info!("fitted {} with logL {:.6}", family.name(), report.log_likelihood);
    ModelArtifact::from_model(&model, cfg.seed)?.save(&ctx.path("model.json"))?;
    let f = File::create(ctx.path("fit_report.json"))?;
    serde_json::to_writer_pretty(f, &report)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelArtifact, FittedModel)> {
    let art = ModelArtifact::load(path)?;
    let model = art.to_model()?;
    Ok((art, model))
}

fn training_ages(model: &FittedModel) -> Vec<f64> {
    let mut a: Vec<f64> = model.rows().iter().map(|r| r.age).collect();
    a.sort_by(f64::total_cmp);
    a.dedup();
    a
}

fn select_populations(model: &FittedModel, spec: &str) -> Result<Vec<usize>> {
    if spec.trim() == "*" {
        return Ok((0..model.populations().len()).collect());
    }
    spec.split(',')
        .map(|label| {
            let key = model
                .schema()
                .parse_label(label.trim())
                .map_err(|_| Error::UnknownPopulation(label.trim().to_string()))?;
            model.population_index(&key)
        })
        .collect()
}

fn cmd_predict(ctx: &Context, args: &PredictArgs) -> Result<()> {
    let (_, model) = load_model(&args.model)?;
    let ages = match &args.ages {
        Some(s) => parse_grid(s)?,
        None => training_ages(&model),
    };
    let years = parse_grid(&args.years)?;
    let pops = select_populations(&model, &args.populations)?;
    if let Some(q) = args.quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(Error::Config(format!("quantile {q} outside (0, 1)")));
    }
    let normal = Normal::standard();
    let mut w = csv::Writer::from_path(ctx.path("predictions.csv"))?;
    let mut header = vec!["population".to_string(), "age".into(), "year".into(), "mean".into(), "sd_latent".into(), "sd_obs".into()];
    header.extend(args.quantiles.iter().map(|q| format!("q_{q}")));
    header.push("extrapolation".into());
    w.write_record(&header)?;
    let mode: PredictionMode = args.mode.into();
    for &l in &pops {
        let span = model.year_span(l).unwrap_or((f64::NAN, f64::NAN));
        let rows: Vec<DesignRow> =
            years.iter().flat_map(|&t| ages.iter().map(move |&a| DesignRow { age: a, year: t, pop: l })).collect();
        for chunk in rows.chunks(256) {
            let dist = model.predict(chunk, mode)?;
            for (i, r) in chunk.iter().enumerate() {
                let sd = dist.variance(i).sqrt();
                let mut rec = vec![
                    model.population_label(l),
                    fmt_f64(r.age),
                    fmt_f64(r.year),
                    fmt_f64(dist.mean[i]),
                    fmt_f64(dist.latent_variance(i).sqrt()),
                    fmt_f64(dist.observational_variance(i).sqrt()),
                ];
                rec.extend(args.quantiles.iter().map(|&q| fmt_f64(dist.mean[i] + normal.inverse_cdf(q) * sd)));
                rec.push((r.year > span.1 || r.year < span.0).to_string());
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_window(s: &str) -> Result<(i32, i32)> {
    let bad = || Error::Config(format!("invalid window {s:?}, expected start-end"));
    let (a, b) = s.trim().split_once('-').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn cmd_backtest(ctx: &Context, args: &BacktestArgs) -> Result<()> {
    let cfg = ctx.with_data_args(&args.data);
    let config = BacktestConfig {
        windows: args.windows.iter().map(|w| parse_window(w)).collect::<Result<_>>()?,
        horizon: args.horizon,
        family: cfg.family_spec()?,
        optimizer: cfg.optimizer(),
        aggregate_over: (!args.aggregate_over.is_empty()).then(|| args.aggregate_over.clone()),
        aggregate_samples: args.samples,
    };
    let ds = cfg.dataset()?;
    let report = backtest(&ds, &config)?;
    let mut w = csv::Writer::from_path(ctx.path("backtest.csv"))?;
    w.write_record([
        "window", "train_start", "train_end", "test_years", "model_mean_ape", "model_mean_crps", "baseline_mean_ape",
        "baseline_mean_crps", "ape_improvement_pct", "crps_improvement_pct",
    ])?;
    for (k, win) in report.windows.iter().enumerate() {
        let years: Vec<String> = win.test_years.iter().map(|y| y.to_string()).collect();
        w.write_record([
            k.to_string(),
            win.train.0.to_string(),
            win.train.1.to_string(),
            years.join(" "),
            fmt_f64(win.model.mean_ape),
            fmt_f64(win.model.mean_crps),
            fmt_f64(win.baseline.mean_ape),
            fmt_f64(win.baseline.mean_crps),
            fmt_f64(win.improvement.ape),
            fmt_f64(win.improvement.crps),
        ])?;
    }
    let m = report.median_improvement;
    w.write_record(["median", "", "", "", "", "", "", "", &fmt_f64(m.ape), &fmt_f64(m.crps)])?;
    w.flush()?;
    let mut cells = csv::Writer::from_path(ctx.path("backtest_cells.csv"))?;
    cells.write_record(["window", "model", "population", "age", "year", "observed", "mean", "sd", "ape", "crps"])?;
    for (k, win) in report.windows.iter().enumerate() {
        for (name, rep) in [("joint", &win.model), ("baseline", &win.baseline)] {
            write_scores(&mut cells, k, name, rep)?;
        }
    }
    cells.flush()?;
    Ok(())
}

fn write_scores(w: &mut csv::Writer<File>, window: usize, name: &str, rep: &MetricReport) -> Result<()> {
    for c in &rep.cells {
        w.write_record([
            window.to_string(),
            name.to_string(),
            c.population.clone(),
            fmt_f64(c.age),
            fmt_f64(c.year),
            fmt_f64(c.observed),
            fmt_f64(c.mean),
            fmt_f64(c.sd),
            fmt_f64(c.ape),
            fmt_f64(c.crps),
        ])?;
    }
    Ok(())
}

fn parse_candidate(family: &str, s: &str) -> Result<ModelFamily> {
    let bad = || Error::Config(format!("invalid rank candidate {s:?}"));
    if family == "multi-level-icm" {
        let ranks = s.split('x').map(|p| p.trim().parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        family_from(family, 0, &ranks)
    } else {
        family_from(family, s.trim().parse().map_err(|_| bad())?, &[])
    }
}

fn cmd_select_rank(ctx: &Context, args: &SelectRankArgs) -> Result<()> {
    let cfg = ctx.with_data_args(&args.data);
    let candidates = args.candidates.iter().map(|c| parse_candidate(&cfg.family, c)).collect::<Result<Vec<_>>>()?;
    let ds = cfg.dataset()?;
    let table = select_rank(&ds, &candidates, &cfg.optimizer())?;
    let mut w = csv::Writer::from_path(ctx.path("rank_table.csv"))?;
    w.write_record(["family", "rank", "log_likelihood", "kernel_params", "total_params", "bic", "chosen", "error"])?;
    for (i, e) in table.entries.iter().enumerate() {
        let rank = match &e.family {
            ModelFamily::Sogp => "1".to_string(),
            ModelFamily::Icm { rank } | ModelFamily::Slfm { rank } => rank.to_string(),
            ModelFamily::MultiLevelIcm { ranks } => ranks.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("x"),
        };
        w.write_record([
            e.family.name().to_string(),
            rank,
            e.log_likelihood.map(fmt_f64).unwrap_or_default(),
            e.kernel_param_count.to_string(),
            e.total_param_count.to_string(),
            e.bic.map(fmt_f64).unwrap_or_default(),
            (i == table.chosen).to_string(),
            e.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_aggregate(ctx: &Context, args: &AggregateArgs) -> Result<()> {
    let (_, model) = load_model(&args.model)?;
    let dims: Vec<&str> = args.sum_over.iter().map(String::as_str).collect();
    let groups = groups_summing_over(&model, &dims)?;
    let ages = match &args.ages {
        Some(s) => parse_grid(s)?,
        None => training_ages(&model),
    };
    let years = parse_grid(&args.years)?;
    let config = AggregateConfig { n_samples: args.samples, seed: ctx.config.seed, levels: args.levels.clone(), mode: args.mode.into() };
    let fc = aggregate_forecast(&model, &groups, &ages, &years, &config)?;
    let mut w = csv::Writer::from_path(ctx.path("aggregate.csv"))?;
    let mut header = vec!["group".to_string(), "age".into(), "year".into(), "median".into(), "mean_log".into()];
    for lv in &fc.levels {
        header.push(format!("lower_{lv}"));
        header.push(format!("upper_{lv}"));
    }
    w.write_record(&header)?;
    for c in &fc.cells {
        let mut rec = vec![c.group.clone(), fmt_f64(c.age), fmt_f64(c.year), fmt_f64(c.median), fmt_f64(c.mean_log)];
        for b in &c.bands {
            rec.push(fmt_f64(b.lower));
            rec.push(fmt_f64(b.upper));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let f = File::create(ctx.path("aggregate.json"))?;
    serde_json::to_writer_pretty(f, &fc)?;
    Ok(())
}

fn cmd_improvement(ctx: &Context, args: &ImprovementArgs) -> Result<()> {
    let (_, model) = load_model(&args.model)?;
    let cfg = ctx.with_data_args(&args.data);
    let ds = cfg.dataset()?;
    let years = match &args.years {
        Some(s) => parse_grid(s)?,
        None => ds.years(),
    };
    let surface = improvement_surface(&ds, &model, &years)?;
    let mut w = csv::Writer::from_path(ctx.path("improvement.csv"))?;
    w.write_record(["source", "population", "age", "year", "improvement", "missing_previous_year"])?;
    let mut write = |source: &str, cells: &[ImprovementCell]| -> Result<()> {
        for c in cells {
            w.write_record([
                source.to_string(),
                c.population.clone(),
                fmt_f64(c.age),
                fmt_f64(c.year),
                c.value.map(fmt_f64).unwrap_or_default(),
                c.value.is_none().to_string(),
            ])?;
        }
        Ok(())
    };
    write("observed", &surface.observed)?;
    write("model", &surface.model)?;
    w.flush()?;
    Ok(())
}

fn cmd_adjust_trend(ctx: &Context, args: &AdjustTrendArgs) -> Result<()> {
    let (art, model) = load_model(&args.model)?;
    let adjusted = adjust_trend(&model, &PopulationSelector::parse(&args.population), args.scale)?;
    ModelArtifact::from_model(&adjusted, art.seed)?.save(&ctx.path("model_adjusted.json"))?;
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code. Errors are
/// reported as one `error[category]: detail` line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            let detail = e.to_string().replace('\n', " ");
            let _ = writeln!(std::io::stderr(), "error[{}]: {detail}", cat.as_str());
            cat.exit_code()
        }
    }
}
