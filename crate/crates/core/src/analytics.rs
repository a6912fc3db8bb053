//! Forecast scoring, mortality-improvement factors, aggregation of
//! populations by joint sampling, rolling backtests and trend adjustment.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::datastore::{subset, DesignRow, PopulationKey, StackedDataset};
use crate::error::{Error, Result};
use crate::inference::{optimize, OptimizerConfig};
use crate::kernels::ModelFamily;
use crate::gp_core::{sample_joint, FittedModel, PredictionMode, PredictiveDistribution, TrendAdjustment};

/// Absolute percentage error `|(y − m)/y|`.
pub fn ape(y_star: f64, m_star: f64) -> Result<f64> {
    if y_star == 0.0 {
        return Err(Error::Division("observed value is zero".into()));
    }
    Ok(((y_star - m_star) / y_star).abs())
}

/// CRPS of a Gaussian forecast with the given total variance.
pub fn crps_gaussian(mean: f64, variance: f64, y_star: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Parameter(format!("forecast variance must be positive, got {variance}")));
    }
    let s = variance.sqrt();
    let z = (y_star - mean) / s;
    let n = Normal::standard();
    let v = s * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt());
    Ok(v.max(0.0))
}

/// CRPS of the empirical distribution of `samples`: `E|X − y| − ½E|X − X'|`.
pub fn crps_ensemble(samples: &[f64], y_star: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("empty ensemble".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    let first: f64 = s.iter().map(|x| (x - y_star).abs()).sum::<f64>() / m;
    // Σ_i Σ_j |x_i − x_j| over sorted values = 2 Σ_i (2i − m + 1) x_i
    let spread: f64 = s.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x).sum::<f64>() * 2.0 / (m * m);
    Ok((first - 0.5 * spread).max(0.0))
}

/// Percentage by which `model` improves on `baseline`; positive is better.
pub fn relative_improvement(baseline: f64, model: f64) -> f64 {
    if baseline == model {
        return 0.0;
    }
    (baseline - model) / baseline * 100.0
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub population: String,
    pub age: f64,
    pub year: f64,
    pub observed: f64,
    pub mean: f64,
    pub sd: f64,
    pub ape: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub ape: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cells: Vec<CellScore>,
    pub mean_ape: f64,
    pub mean_crps: f64,
    pub improvement: Option<Improvement>,
}

impl MetricReport {
    pub fn new(cells: Vec<CellScore>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Parameter("no cells to score".into()));
        }
        let n = cells.len() as f64;
        let mean_ape = cells.iter().map(|c| c.ape).sum::<f64>() / n;
        let mean_crps = cells.iter().map(|c| c.crps).sum::<f64>() / n;
        Ok(Self { cells, mean_ape, mean_crps, improvement: None })
    }

    pub fn relative_to(&self, baseline: &MetricReport) -> Improvement {
        Improvement {
            ape: relative_improvement(baseline.mean_ape, self.mean_ape),
            crps: relative_improvement(baseline.mean_crps, self.mean_crps),
        }
    }
}

/// Scores a Gaussian predictive against observed log-rates, using the
/// observational variance for CRPS.
pub fn score_cells(model: &FittedModel, dist: &PredictiveDistribution, observed: &[f64]) -> Result<Vec<CellScore>> {
    dist.rows
        .iter()
        .zip(observed)
        .enumerate()
        .map(|(i, (r, &y))| {
            let var = dist.observational_variance(i);
            Ok(CellScore {
                population: model.population_label(r.pop),
                age: r.age,
                year: r.year,
                observed: y,
                mean: dist.mean[i],
                sd: var.sqrt(),
                ape: ape(y, dist.mean[i])?,
                crps: crps_gaussian(dist.mean[i], var, y)?,
            })
        })
        .collect()
}

/// One mortality-improvement factor `1 − exp(y_t)/exp(y_{t−1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementCell {
    pub population: String,
    pub age: f64,
    pub year: f64,
    /// `None` when the preceding year is missing.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSurface {
    pub observed: Vec<ImprovementCell>,
    pub model: Vec<ImprovementCell>,
}

pub fn improvement_factor(log_rate_prev: f64, log_rate: f64) -> f64 {
    -(log_rate - log_rate_prev).exp_m1()
}

/// Improvement factors from raw rates. Cells without a predecessor year are
/// kept with no value.
pub fn observed_improvement(dataset: &StackedDataset) -> Vec<ImprovementCell> {
    let schema = dataset.schema();
    dataset
        .cells()
        .iter()
        .map(|c| ImprovementCell {
            population: schema.label(&c.population),
            age: c.age,
            year: c.year,
            value: dataset.get(&c.population, c.age, c.year - 1.0).map(|p| improvement_factor(p.log_rate, c.log_rate)),
        })
        .collect()
}

/// Improvement factors from latent posterior means over `ages × years` for
/// every population of the model.
pub fn model_improvement(model: &FittedModel, ages: &[f64], years: &[f64]) -> Result<Vec<ImprovementCell>> {
    let mut out = Vec::new();
    for l in 0..model.populations().len() {
        let rows: Vec<DesignRow> = years
            .iter()
            .flat_map(|&t| ages.iter().flat_map(move |&a| [DesignRow { age: a, year: t - 1.0, pop: l }, DesignRow { age: a, year: t, pop: l }]))
            .collect();
        let mean = predictive_mean(model, &rows)?;
        for (k, pair) in rows.chunks(2).enumerate() {
            out.push(ImprovementCell {
                population: model.population_label(l),
                age: pair[1].age,
                year: pair[1].year,
                value: Some(improvement_factor(mean[2 * k], mean[2 * k + 1])),
            });
        }
    }
    Ok(out)
}

pub fn improvement_surface(dataset: &StackedDataset, model: &FittedModel, years: &[f64]) -> Result<ImprovementSurface> {
    Ok(ImprovementSurface { observed: observed_improvement(dataset), model: model_improvement(model, &dataset.ages(), years)? })
}

/// Posterior mean in chunks, avoiding large dense predictive covariances.
fn predictive_mean(model: &FittedModel, rows: &[DesignRow]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        out.extend(model.predict(chunk, PredictionMode::Latent)?.mean.iter());
    }
    Ok(out)
}

/// Populations summed together in an aggregate forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateGroup {
    pub label: String,
    pub populations: Vec<PopulationKey>,
}

/// Groups a model's populations by all factor dimensions except `sum_over`.
pub fn groups_summing_over(model: &FittedModel, sum_over: &[&str]) -> Result<Vec<AggregateGroup>> {
    let schema = model.schema();
    let mut summed = Vec::new();
    for name in sum_over {
        summed.push(schema.dimension_index(name).ok_or_else(|| Error::Grouping(format!("unknown dimension {name}")))?);
    }
    let mut groups: BTreeMap<Vec<usize>, Vec<PopulationKey>> = BTreeMap::new();
    for key in model.populations() {
        let kept: Vec<usize> = key.0.iter().enumerate().filter(|(d, _)| !summed.contains(d)).map(|(_, v)| *v).collect();
        groups.entry(kept).or_default().push(key.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(kept, populations)| {
            let label = schema
                .dimensions()
                .iter()
                .enumerate()
                .filter(|(d, _)| !summed.contains(d))
                .zip(&kept)
                .map(|((d, _), v)| schema.levels()[d][*v].clone())
                .collect::<Vec<_>>()
                .join(":");
            AggregateGroup { label: if label.is_empty() { "all".into() } else { label }, populations }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Central band levels, e.g. 0.95 for the 2.5%–97.5% band.
    pub levels: Vec<f64>,
    pub mode: PredictionMode,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self { n_samples: 500_000, seed: 0, levels: vec![0.6, 0.8, 0.95, 0.99], mode: PredictionMode::Latent }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Log-scale summary of the summed rate at one (age, year).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub group: String,
    pub age: f64,
    pub year: f64,
    pub median: f64,
    pub mean_log: f64,
    pub bands: Vec<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateForecast {
    pub cells: Vec<AggregateCell>,
    pub n_samples: usize,
    pub seed: u64,
    pub levels: Vec<f64>,
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_groups(model: &FittedModel, groups: &[AggregateGroup]) -> Result<Vec<Vec<usize>>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for g in groups {
        if g.populations.is_empty() {
            return Err(Error::Grouping(format!("group {} is empty", g.label)));
        }
        let mut idx = Vec::new();
        for key in &g.populations {
            let l = model.population_index(key)?;
            if let Some(other) = seen.insert(l, g.label.clone()) {
                return Err(Error::Grouping(format!(
                    "population {} is in both {other} and {}",
                    model.population_label(l),
                    g.label
                )));
            }
            idx.push(l);
        }
        out.push(idx);
    }
    Ok(out)
}

/// Log of summed unlogged rates drawn jointly from `dist`.
fn log_sum_samples(dist: &PredictiveDistribution, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    let draws = sample_joint(dist, n_samples, seed)?;
    Ok((0..n_samples).map(|s| draws.row(s).iter().map(|v| v.exp()).sum::<f64>().ln()).collect())
}

fn cell_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Monte-Carlo bands of the summed rate for each group over `ages × years`.
pub fn aggregate_forecast(
    model: &FittedModel,
    groups: &[AggregateGroup],
    ages: &[f64],
    years: &[f64],
    config: &AggregateConfig,
) -> Result<AggregateForecast> {
    if config.n_samples < 2 {
        return Err(Error::Parameter("at least two samples are required".into()));
    }
    if let Some(l) = config.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::Parameter(format!("band level {l} outside (0, 1)")));
    }
    let members = check_groups(model, groups)?;
    let mut levels = config.levels.clone();
    levels.sort_by(f64::total_cmp);
    let mut tasks = Vec::new();
    for (g, idx) in members.iter().enumerate() {
        for &t in years {
            for &a in ages {
                tasks.push((g, idx, a, t));
            }
        }
    }
    let cells = tasks
        .par_iter()
        .enumerate()
        .map(|(k, &(g, idx, a, t))| {
            let rows: Vec<DesignRow> = idx.iter().map(|&l| DesignRow { age: a, year: t, pop: l }).collect();
            let dist = model.predict(&rows, config.mode)?;
            let mut s = log_sum_samples(&dist, config.n_samples, cell_seed(config.seed, k))?;
            let mean_log = s.iter().sum::<f64>() / s.len() as f64;
            s.sort_by(f64::total_cmp);
            Ok(AggregateCell {
                group: groups[g].label.clone(),
                age: a,
                year: t,
                median: quantile_sorted(&s, 0.5),
                mean_log,
                bands: levels
                    .iter()
                    .map(|&lv| Band {
                        level: lv,
                        lower: quantile_sorted(&s, 0.5 * (1.0 - lv)),
                        upper: quantile_sorted(&s, 0.5 * (1.0 + lv)),
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AggregateForecast { cells, n_samples: config.n_samples, seed: config.seed, levels })
}

/// Rolling-origin evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    /// Inclusive training year ranges.
    pub windows: Vec<(i32, i32)>,
    /// Years scored after each training end.
    pub horizon: usize,
    pub family: ModelFamily,
    pub optimizer: OptimizerConfig,
    /// Score summed series over these dimensions instead of single cells.
    pub aggregate_over: Option<Vec<String>>,
    pub aggregate_samples: usize,
}

impl BacktestConfig {
    /// The three one-year-out windows ending at `last_year`, each training on
    /// the preceding `length` years.
    pub fn rolling(last_year: i32, length: i32, family: ModelFamily) -> Self {
        let windows = (0..3).rev().map(|k| (last_year - k - length, last_year - k - 1)).collect();
        Self { windows, horizon: 1, family, optimizer: OptimizerConfig::default(), aggregate_over: None, aggregate_samples: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub train: (i32, i32),
    pub test_years: Vec<i32>,
    pub model: MetricReport,
    pub baseline: MetricReport,
    pub improvement: Improvement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub windows: Vec<WindowResult>,
    pub median_improvement: Improvement,
}

/// Fits the joint model and one single-output baseline per population on each
/// window and scores both on the held-out years.
pub fn backtest(dataset: &StackedDataset, config: &BacktestConfig) -> Result<BacktestReport> {
    if config.windows.is_empty() {
        return Err(Error::Window("no windows".into()));
    }
    if config.horizon == 0 {
        return Err(Error::Window("horizon must be at least one year".into()));
    }
    let years = dataset.years();
    for &(start, end) in &config.windows {
        if start > end {
            return Err(Error::Window(format!("training window {start}-{end} is empty")));
        }
        for t in end + 1..=end + config.horizon as i32 {
            if !years.contains(&(t as f64)) {
                return Err(Error::Window(format!("test year {t} is not in the dataset")));
            }
        }
    }
    let windows = config
        .windows
        .par_iter()
        .map(|&w| run_window(dataset, config, w))
        .collect::<Result<Vec<_>>>()?;
    let ape: Vec<f64> = windows.iter().map(|w| w.improvement.ape).collect();
    let crps: Vec<f64> = windows.iter().map(|w| w.improvement.crps).collect();
    Ok(BacktestReport {
        median_improvement: Improvement { ape: median(&ape).unwrap(), crps: median(&crps).unwrap() },
        windows,
    })
}

fn run_window(dataset: &StackedDataset, config: &BacktestConfig, (start, end): (i32, i32)) -> Result<WindowResult> {
    let all_ages = f64::NEG_INFINITY..=f64::INFINITY;
    let train = subset(dataset, all_ages.clone(), start as f64..=end as f64, None)?;
    let last = end + config.horizon as i32;
    let test = subset(dataset, all_ages.clone(), (end + 1) as f64..=last as f64, None)?;
    let (joint, _) = optimize(&train, &config.family, &config.optimizer)?;
    let mut baselines = BTreeMap::new();
    for key in train.populations() {
        let single = subset(&train, all_ages.clone(), f64::NEG_INFINITY..=f64::INFINITY, Some(std::slice::from_ref(&key)))?;
        baselines.insert(key, optimize(&single, &ModelFamily::Sogp, &config.optimizer)?.0);
    }
    let test_cells: Vec<_> = test.cells().iter().filter(|c| baselines.contains_key(&c.population)).collect();
    let (model, baseline) = match &config.aggregate_over {
        None => {
            let rows: Vec<DesignRow> = test_cells
                .iter()
                .map(|c| joint.row(&c.population, c.age, c.year))
                .collect::<Result<_>>()?;
            let observed: Vec<f64> = test_cells.iter().map(|c| c.log_rate).collect();
            let dist = joint.predict(&rows, PredictionMode::Observational)?;
            let model = MetricReport::new(score_cells(&joint, &dist, &observed)?)?;
            let mut base_scores = Vec::new();
            for c in &test_cells {
                let m = &baselines[&c.population];
                let d = m.predict(&[m.row(&c.population, c.age, c.year)?], PredictionMode::Observational)?;
                base_scores.extend(score_cells(m, &d, &[c.log_rate])?);
            }
            (model, MetricReport::new(base_scores)?)
        }
        Some(dims) => {
            let dims: Vec<&str> = dims.iter().map(String::as_str).collect();
            let groups = groups_summing_over(&joint, &dims)?;
            score_aggregates(&joint, &baselines, &groups, &test, config)?
        }
    };
    let mut model = model;
    let improvement = model.relative_to(&baseline);
    model.improvement = Some(improvement);
    Ok(WindowResult { train: (start, end), test_years: (end + 1..=last).collect(), model, baseline, improvement })
}

/// Scores summed series: the joint model samples the group jointly, the
/// baselines sample each population independently.
fn score_aggregates(
    joint: &FittedModel,
    baselines: &BTreeMap<PopulationKey, FittedModel>,
    groups: &[AggregateGroup],
    test: &StackedDataset,
    config: &BacktestConfig,
) -> Result<(MetricReport, MetricReport)> {
    let mut model_scores = Vec::new();
    let mut base_scores = Vec::new();
    let mut k = 0;
    for g in groups {
        for &t in &test.years() {
            for &a in &test.ages() {
                let cells: Option<Vec<_>> = g.populations.iter().map(|p| test.get(p, a, t)).collect();
                let Some(cells) = cells else { continue };
                let observed = cells.iter().map(|c| c.log_rate.exp()).sum::<f64>().ln();
                let seed = cell_seed(config.optimizer.seed, k);
                k += 1;
                let rows: Vec<DesignRow> = g.populations.iter().map(|p| joint.row(p, a, t)).collect::<Result<_>>()?;
                let dist = joint.predict(&rows, PredictionMode::Observational)?;
                let s = log_sum_samples(&dist, config.aggregate_samples, seed)?;
                model_scores.push(ensemble_score(&g.label, a, t, observed, &s)?);
                let mut mean = Vec::new();
                let mut var = Vec::new();
                for p in &g.populations {
                    let m = &baselines[p];
                    let d = m.predict(&[m.row(p, a, t)?], PredictionMode::Observational)?;
                    mean.push(d.mean[0]);
                    var.push(d.cov[(0, 0)]);
                }
                let independent = PredictiveDistribution {
                    rows: rows.clone(),
                    mean: DVector::from_vec(mean),
                    cov: DMatrix::from_diagonal(&DVector::from_vec(var)),
                    mode: PredictionMode::Observational,
                    noise_variance: dist.noise_variance.clone(),
                };
                let s = log_sum_samples(&independent, config.aggregate_samples, seed)?;
                base_scores.push(ensemble_score(&g.label, a, t, observed, &s)?);
            }
        }
    }
    if model_scores.is_empty() {
        return Err(Error::Window("no test cell has every population of a group".into()));
    }
    Ok((MetricReport::new(model_scores)?, MetricReport::new(base_scores)?))
}

fn ensemble_score(group: &str, age: f64, year: f64, observed: f64, samples: &[f64]) -> Result<CellScore> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(CellScore {
        population: group.to_string(),
        age,
        year,
        observed,
        mean,
        sd,
        ape: ape(observed, mean)?,
        crps: crps_ensemble(samples, observed)?,
    })
}

/// Median improvements laid out with one row per model and an (APE, CRPS)
/// column pair per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub datasets: Vec<String>,
    pub rows: Vec<ImprovementRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub model: String,
    pub kernel_params: usize,
    /// One entry per dataset, in `datasets` order.
    pub improvements: Vec<Improvement>,
}

impl ImprovementTable {
    pub fn render(&self) -> String {
        let mut head = format!("{:<12} {:>8}", "model", "#kernel");
        let mut sub = format!("{:<12} {:>8}", "", "");
        for d in &self.datasets {
            head.push_str(&format!(" {:>17}", d));
            sub.push_str(&format!(" {:>8} {:>8}", "APE", "CRPS"));
        }
        let mut out = format!("{head}\n{sub}\n");
        for r in &self.rows {
            out.push_str(&format!("{:<12} {:>8}", r.model, r.kernel_params));
            for i in &r.improvements {
                out.push_str(&format!(" {:>8.2} {:>8.2}", i.ape, i.crps));
            }
            out.push('\n');
        }
        out
    }
}

/// Which populations a trend adjustment applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PopulationSelector {
    All,
    One(String),
}

impl PopulationSelector {
    /// `*` selects every population; anything else is a population label.
    pub fn parse(s: &str) -> Self {
        if s.trim() == "*" {
            PopulationSelector::All
        } else {
            PopulationSelector::One(s.trim().to_string())
        }
    }
}

/// Scales the year slope of the selected populations by `scale`, pivoting at
/// each population's last training year. The kriging weights are kept, so
/// forecasts of unselected populations are unchanged. Repeated adjustments
/// of one population compose multiplicatively.
pub fn adjust_trend(model: &FittedModel, selector: &PopulationSelector, scale: f64) -> Result<FittedModel> {
    if !scale.is_finite() {
        return Err(Error::Parameter(format!("scale must be finite, got {scale}")));
    }
    let targets: Vec<usize> = match selector {
        PopulationSelector::All => (0..model.populations().len()).collect(),
        PopulationSelector::One(label) => {
            let key = model.schema().parse_label(label).map_err(|_| Error::UnknownPopulation(label.clone()))?;
            vec![model.population_index(&key)?]
        }
    };
    let mut adjustments = model.adjustments().to_vec();
    for l in targets {
        match adjustments.iter_mut().find(|a| a.population == l) {
            Some(a) => a.scale *= scale,
            None => {
                let (_, last) = model.year_span(l).ok_or_else(|| Error::UnknownPopulation(model.population_label(l)))?;
                adjustments.push(TrendAdjustment { population: l, scale, pivot_year: last });
            }
        }
    }
    adjustments.sort_by_key(|a| a.population);
    Ok(model.clone().with_adjustments(adjustments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ape_examples() {
        assert_eq!(ape(-4.0, -4.0).unwrap(), 0.0);
        assert!((ape(-4.0, -3.8).unwrap() - 0.05).abs() < 1e-15);
        assert!((ape(-4.0, -4.2).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(ape(0.0, 1.0), Err(Error::Division(_))));
    }

    #[test]
    fn crps_examples() {
        assert!((crps_gaussian(0.0, 1.0, 0.0).unwrap() - 0.233695).abs() < 1e-6);
        assert!((crps_gaussian(1.0, 1e-16, 3.0).unwrap() - 2.0).abs() < 1e-7);
        assert!(crps_gaussian(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn ensemble_crps_of_point_mass() {
        assert!((crps_ensemble(&[2.0; 5], 0.5).unwrap() - 1.5).abs() < 1e-15);
        // two-point ensemble: E|X−y| = 1, E|X−X'|/2 = 0.5
        assert!((crps_ensemble(&[-1.0, 1.0], 0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement_factor(0.0025f64.ln(), 0.0025f64.ln()), 0.0);
        assert!((improvement_factor(0.0025f64.ln(), 0.0024f64.ln()) - 0.04).abs() < 1e-12);
        assert!(improvement_factor(-5.0, -4.9) < 0.0);
        assert_eq!(relative_improvement(2.0, 2.0), 0.0);
        assert_eq!(median(&[30.0, 10.0, 20.0]), Some(20.0));
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&s, 0.5), 3.0);
        assert_eq!(quantile_sorted(&s, 0.125), 1.5);
        assert_eq!(quantile_sorted(&s, 1.0), 5.0);
    }
}
