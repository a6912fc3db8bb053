//! Maximum marginal-likelihood estimation of kernel and noise
//! hyperparameters, BIC, and rank selection.
//!
//! Optimization runs in a transformed space: log-lengthscales, raw loadings
//! and log noise levels. The trend is profiled out at every evaluation, so
//! the gradient of the profiled likelihood is `½ tr((ααᵀ − K⁻¹) ∂K)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{design_matrix, DesignRow, FactorSchema, PopulationKey, StackedDataset};
use crate::error::{Error, Result};
use crate::kernels::{matern52_1d, matern52_1d_dlog_theta, KernelSpec, MaternParams, ModelFamily};
use crate::gp_core::{Evaluation, FittedModel, ModelParams, NoiseParams, TrendBasis};

/// Flat vector of transformed hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(pub Vec<f64>);

/// Shape information needed to map a [`ParameterVector`] to [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterLayout {
    pub family: ModelFamily,
    pub n_populations: usize,
    /// Level counts per factor dimension (multi-level models).
    pub level_counts: Vec<usize>,
}

impl ParameterLayout {
    pub fn new(family: ModelFamily, n_populations: usize, level_counts: Vec<usize>) -> Result<Self> {
        family.validate(n_populations, &level_counts)?;
        if let ModelFamily::MultiLevelIcm { .. } = family {
            if level_counts.iter().product::<usize>() != n_populations {
                return Err(Error::Parameter(
                    "multi-level ICM needs every factor combination present in the data".into(),
                ));
            }
        }
        Ok(Self { family, n_populations, level_counts })
    }

    fn n_lengthscale_pairs(&self) -> usize {
        match &self.family {
            ModelFamily::Slfm { rank } => *rank,
            _ => 1,
        }
    }

    fn loading_shapes(&self) -> Vec<(usize, usize)> {
        match &self.family {
            ModelFamily::Sogp => vec![(1, 1)],
            ModelFamily::Icm { rank } | ModelFamily::Slfm { rank } => vec![(self.n_populations, *rank)],
            ModelFamily::MultiLevelIcm { ranks } => {
                self.level_counts.iter().zip(ranks).map(|(&l, &q)| (l, q)).collect()
            }
        }
    }

    pub fn len(&self) -> usize {
        2 * self.n_lengthscale_pairs()
            + self.loading_shapes().iter().map(|(r, c)| r * c).sum::<usize>()
            + self.n_populations
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offset of the first noise coordinate.
    fn noise_offset(&self) -> usize {
        self.len() - self.n_populations
    }

    pub fn decode(&self, x: &ParameterVector) -> Result<ModelParams> {
        let x = &x.0;
        if x.len() != self.len() {
            return Err(Error::Parameter(format!("expected {} parameters, got {}", self.len(), x.len())));
        }
        let np = self.n_lengthscale_pairs();
        let materns: Vec<MaternParams> =
            (0..np).map(|q| MaternParams { theta_age: x[2 * q].exp(), theta_year: x[2 * q + 1].exp() }).collect();
        let mut off = 2 * np;
        let mut loadings = Vec::new();
        for (r, c) in self.loading_shapes() {
            loadings.push(DMatrix::from_row_slice(r, c, &x[off..off + r * c]));
            off += r * c;
        }
        let sigma = x[off..].iter().map(|v| v.exp()).collect();
        let kernel = match &self.family {
            ModelFamily::Sogp => KernelSpec::Sogp { matern: materns[0], eta: loadings[0][(0, 0)] },
            ModelFamily::Icm { .. } => KernelSpec::Icm { matern: materns[0], loadings: loadings.remove(0) },
            ModelFamily::Slfm { .. } => KernelSpec::Slfm { loadings: loadings.remove(0), latent: materns },
            ModelFamily::MultiLevelIcm { .. } => {
                KernelSpec::MultiLevelIcm { matern: materns[0], factor_loadings: loadings }
            }
        };
        let params = ModelParams { kernel, noise: NoiseParams { sigma } };
        params.validate()?;
        Ok(params)
    }

    pub fn encode(&self, params: &ModelParams) -> Result<ParameterVector> {
        params.validate()?;
        if params.kernel.family() != self.family || params.noise.sigma.len() != self.n_populations {
            return Err(Error::Parameter("parameters do not match layout".into()));
        }
        let mut x = Vec::with_capacity(self.len());
        let push_matern = |x: &mut Vec<f64>, m: &MaternParams| {
            x.push(m.theta_age.ln());
            x.push(m.theta_year.ln());
        };
        let push_matrix = |x: &mut Vec<f64>, a: &DMatrix<f64>| {
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    x.push(a[(i, j)]);
                }
            }
        };
        match &params.kernel {
            KernelSpec::Sogp { matern, eta } => {
                push_matern(&mut x, matern);
                x.push(*eta);
            }
            KernelSpec::Icm { matern, loadings } => {
                push_matern(&mut x, matern);
                push_matrix(&mut x, loadings);
            }
            KernelSpec::Slfm { loadings, latent } => {
                for m in latent {
                    push_matern(&mut x, m);
                }
                push_matrix(&mut x, loadings);
            }
            KernelSpec::MultiLevelIcm { matern, factor_loadings } => {
                push_matern(&mut x, matern);
                for a in factor_loadings {
                    push_matrix(&mut x, a);
                }
            }
        }
        if let Some(l) = level_mismatch(self, &params.kernel) {
            return Err(Error::Parameter(format!("loading shape mismatch in block {l}")));
        }
        x.extend(params.noise.sigma.iter().map(|s| s.ln()));
        Ok(ParameterVector(x))
    }
}

fn level_mismatch(layout: &ParameterLayout, kernel: &KernelSpec) -> Option<usize> {
    let shapes: Vec<(usize, usize)> = match kernel {
        KernelSpec::Sogp { .. } => vec![(1, 1)],
        KernelSpec::Icm { loadings, .. } | KernelSpec::Slfm { loadings, .. } => vec![loadings.shape()],
        KernelSpec::MultiLevelIcm { factor_loadings, .. } => factor_loadings.iter().map(|a| a.shape()).collect(),
    };
    layout.loading_shapes().iter().zip(&shapes).position(|(a, b)| a != b)
}

/// Training data bound to a parameter layout: the objective of the optimizer.
#[derive(Debug, Clone)]
pub struct LikelihoodProblem {
    pub layout: ParameterLayout,
    pub basis: TrendBasis,
    schema: FactorSchema,
    populations: Vec<PopulationKey>,
    rows: Vec<DesignRow>,
    y: DVector<f64>,
}

impl LikelihoodProblem {
    pub fn new(dataset: &StackedDataset, family: &ModelFamily, shared_intercept: bool) -> Result<Self> {
        let design = design_matrix(dataset);
        let level_counts = match family {
            ModelFamily::MultiLevelIcm { .. } => dataset.schema().level_counts(),
            _ => vec![design.n_populations()],
        };
        let layout = ParameterLayout::new(family.clone(), design.n_populations(), level_counts)?;
        Ok(Self {
            basis: TrendBasis::new(design.n_populations(), shared_intercept),
            layout,
            schema: dataset.schema().clone(),
            populations: design.populations,
            rows: design.rows,
            y: DVector::from_vec(design.y),
        })
    }

    pub fn rows(&self) -> &[DesignRow] {
        &self.rows
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn log_likelihood(&self, x: &ParameterVector) -> Result<f64> {
        let params = self.layout.decode(x)?;
        Ok(Evaluation::new(&params, &self.rows, &self.y, &self.basis, None)?.log_likelihood)
    }

    pub fn fitted_model(&self, x: &ParameterVector) -> Result<FittedModel> {
        FittedModel::from_parts(
            self.schema.clone(),
            self.populations.clone(),
            self.layout.decode(x)?,
            self.basis.shared_intercept,
            self.rows.clone(),
            self.y.as_slice().to_vec(),
            None,
        )
    }

    /// Log-likelihood and its analytic gradient in transformed coordinates.
    pub fn value_and_gradient(&self, x: &ParameterVector) -> Result<(f64, Vec<f64>)> {
        let params = self.layout.decode(x)?;
        let eval = Evaluation::new(&params, &self.rows, &self.y, &self.basis, None)?;
        let n = self.rows.len();
        let l = self.layout.n_populations;
        let alpha = eval.alpha();
        let mut w = eval.factor.inverse();
        w.neg_mut();
        w.ger(1.0, &alpha, &alpha, 1.0);
        let tr_w = w.trace();
        // the jitter is proportional to mean(diag K), so it moves with the parameters
        let jitter_weight = tr_w * eval.factor.relative_jitter / n as f64;
        let mut counts = vec![0.0; l];
        for r in &self.rows {
            counts[r.pop] += 1.0;
        }

        let mut grad = vec![0.0; self.layout.len()];
        let comps = params.kernel.components();
        // block sums M_q[m,n] = Σ W_ij C_q,ij over population pairs
        let mut block_sums = Vec::with_capacity(comps.len());
        for (q, comp) in comps.iter().enumerate() {
            let mut m = DMatrix::zeros(l, l);
            let (mut g_age, mut g_year) = (0.0, 0.0);
            let (ta, ty) = (comp.matern.theta_age, comp.matern.theta_year);
            for j in 0..n {
                let rj = &self.rows[j];
                m[(rj.pop, rj.pop)] += w[(j, j)];
                for i in j + 1..n {
                    let ri = &self.rows[i];
                    let ra = (ri.age - rj.age).abs() / ta;
                    let ry = (ri.year - rj.year).abs() / ty;
                    let ka = matern52_1d(ra);
                    let ky = matern52_1d(ry);
                    let wij = w[(i, j)];
                    let c = ka * ky;
                    m[(ri.pop, rj.pop)] += wij * c;
                    m[(rj.pop, ri.pop)] += wij * c;
                    let wb = wij * comp.b[(ri.pop, rj.pop)];
                    g_age += wb * matern52_1d_dlog_theta(ra) * ky;
                    g_year += wb * ka * matern52_1d_dlog_theta(ry);
                }
            }
            // off-diagonal pairs counted once, so ½·2 = 1
            let base = if comps.len() > 1 { 2 * q } else { 0 };
            grad[base] = g_age;
            grad[base + 1] = g_year;
            for p in 0..l {
                m[(p, p)] += jitter_weight * counts[p];
            }
            block_sums.push(m);
        }

        let off = 2 * if comps.len() > 1 { comps.len() } else { 1 };
        match &params.kernel {
            KernelSpec::Sogp { eta, .. } => grad[off] = block_sums[0][(0, 0)] * eta,
            KernelSpec::Icm { loadings, .. } => {
                let g = &block_sums[0] * loadings;
                write_row_major(&mut grad[off..], &g);
            }
            KernelSpec::Slfm { loadings, .. } => {
                let mut g = DMatrix::zeros(loadings.nrows(), loadings.ncols());
                for (q, m) in block_sums.iter().enumerate() {
                    g.set_column(q, &(m * loadings.column(q)));
                }
                write_row_major(&mut grad[off..], &g);
            }
            KernelSpec::MultiLevelIcm { factor_loadings, .. } => {
                let bs = params.kernel.factor_coregionalization().unwrap();
                let mut o = off;
                for (p, a) in factor_loadings.iter().enumerate() {
                    let g = factor_gradient(&block_sums[0], &bs, &self.layout.level_counts, p) * a;
                    write_row_major(&mut grad[o..], &g);
                    o += a.len();
                }
            }
        }

        let noff = self.layout.noise_offset();
        let mut diag_w = vec![0.0; l];
        for (i, r) in self.rows.iter().enumerate() {
            diag_w[r.pop] += w[(i, i)];
        }
        for p in 0..l {
            let s2 = params.noise.sigma[p].powi(2);
            grad[noff + p] = s2 * (diag_w[p] + jitter_weight * counts[p]);
        }
        Ok((eval.log_likelihood, grad))
    }

    /// Central finite-difference gradient in transformed coordinates.
    pub fn numerical_gradient(&self, x: &ParameterVector, h: f64) -> Result<Vec<f64>> {
        if !(h > 0.0) {
            return Err(Error::Parameter("finite-difference step must be positive".into()));
        }
        (0..x.0.len())
            .map(|k| {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus.0[k] += h;
                minus.0[k] -= h;
                let fp = self.log_likelihood(&plus).map_err(|_| Error::NonFinite(k))?;
                let fm = self.log_likelihood(&minus).map_err(|_| Error::NonFinite(k))?;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::NonFinite(k));
                }
                Ok((fp - fm) / (2.0 * h))
            })
            .collect()
    }

    /// Data-driven starting point; `rng` perturbs loadings, and for
    /// `perturb = true` also lengthscales and noise.
    pub fn initial_point(&self, rng: &mut ChaCha8Rng, perturb: bool) -> ParameterVector {
        let l = self.layout.n_populations;
        let range = |f: fn(&DesignRow) -> f64| {
            let (lo, hi) = self.rows.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if hi > lo { 0.5 * (hi - lo) } else { 1.0 }
        };
        let theta_age = range(|r| r.age);
        let theta_year = range(|r| r.year);
        let (sigma, scale) = empirical_scales(&self.rows, &self.y, l);
        let mut jitter = |s: f64| if perturb { s * (rng.random_range(-1.0f64..1.0) * 1.0986).exp() } else { s };
        let materns: Vec<MaternParams> = (0..self.layout.n_lengthscale_pairs())
            .map(|_| MaternParams { theta_age: jitter(theta_age), theta_year: jitter(theta_year) })
            .collect();
        let sigma: Vec<f64> = sigma.into_iter().map(&mut jitter).collect();
        let mut identity_like = |rows: usize, cols: usize, row_scale: &dyn Fn(usize) -> f64| {
            DMatrix::from_fn(rows, cols, |i, j| {
                let base = if i % cols == j { 1.0 } else { 0.0 };
                let e: f64 = rng.sample(StandardNormal);
                row_scale(i) * (base + 0.2 * e)
            })
        };
        let kernel = match &self.layout.family {
            ModelFamily::Sogp => {
                KernelSpec::Sogp { matern: materns[0], eta: identity_like(1, 1, &|_| scale[0])[(0, 0)] }
            }
            ModelFamily::Icm { rank } => {
                KernelSpec::Icm { matern: materns[0], loadings: identity_like(l, *rank, &|i| scale[i]) }
            }
            ModelFamily::Slfm { rank } => {
                KernelSpec::Slfm { loadings: identity_like(l, *rank, &|i| scale[i]), latent: materns }
            }
            ModelFamily::MultiLevelIcm { ranks } => {
                let overall = scale.iter().sum::<f64>() / l as f64;
                let factor_loadings = self
                    .layout
                    .level_counts
                    .iter()
                    .zip(ranks)
                    .enumerate()
                    .map(|(p, (&lp, &q))| identity_like(lp, q, &|_| if p == 0 { overall } else { 1.0 }))
                    .collect();
                KernelSpec::MultiLevelIcm { matern: materns[0], factor_loadings }
            }
        };
        let params = ModelParams { kernel, noise: NoiseParams { sigma } };
        self.layout.encode(&params).expect("initial point matches layout")
    }
}

fn write_row_major(out: &mut [f64], g: &DMatrix<f64>) {
    let mut k = 0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            out[k] = g[(i, j)];
            k += 1;
        }
    }
}

/// G_p[a,b] = Σ_{m_p=a, n_p=b} M[m,n]·∏_{r≠p} B̃_r[m_r,n_r].
fn factor_gradient(m: &DMatrix<f64>, bs: &[DMatrix<f64>], level_counts: &[usize], p: usize) -> DMatrix<f64> {
    let total = m.nrows();
    let digits = |mut flat: usize| {
        let mut d = vec![0; level_counts.len()];
        for (k, &lk) in level_counts.iter().enumerate().rev() {
            d[k] = flat % lk;
            flat /= lk;
        }
        d
    };
    let idx: Vec<Vec<usize>> = (0..total).map(digits).collect();
    let mut g = DMatrix::zeros(level_counts[p], level_counts[p]);
    for a in 0..total {
        for b in 0..total {
            let mut prod = m[(a, b)];
            for (r, br) in bs.iter().enumerate() {
                if r != p {
                    prod *= br[(idx[a][r], idx[b][r])];
                }
            }
            g[(idx[a][p], idx[b][p])] += prod;
        }
    }
    g
}

/// Per-population noise guess (SD of year-over-year differences ÷ √2) and
/// process-scale guess (SD of residuals from a per-population OLS trend).
fn empirical_scales(rows: &[DesignRow], y: &DVector<f64>, l: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sigma = Vec::with_capacity(l);
    let mut scale = Vec::with_capacity(l);
    for p in 0..l {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].pop == p).collect();
        let mut diffs = Vec::new();
        for &i in &idx {
            for &j in &idx {
                if rows[j].age == rows[i].age && rows[j].year == rows[i].year + 1.0 {
                    diffs.push(y[j] - y[i]);
                }
            }
        }
        let s = if diffs.len() >= 2 { sd(&diffs) / std::f64::consts::SQRT_2 } else { 0.05 };
        sigma.push(s.max(1e-3));
        let basis = TrendBasis::new(1, false);
        let sub: Vec<DesignRow> = idx.iter().map(|&i| DesignRow { pop: 0, ..rows[i] }).collect();
        let ys = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]));
        let h = basis.matrix(&sub);
        let resid_sd = h
            .clone()
            .svd(true, true)
            .solve(&ys, 1e-12)
            .ok()
            .map(|b| sd((&ys - &h * b).as_slice()))
            .filter(|v| v.is_finite() && *v > 0.0)
            .unwrap_or_else(|| sd(ys.as_slice()));
        scale.push(resid_sd.max(s).max(1e-3));
    }
    (sigma, scale)
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Penalized log-likelihood, larger is better: `logL − (k/2)·ln n`.
pub fn bic(log_likelihood: f64, n_params: usize, n_obs: usize) -> f64 {
    log_likelihood - 0.5 * n_params as f64 * (n_obs.max(1) as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub seed: u64,
    pub starts: usize,
    pub max_iter: usize,
    /// Relative log-likelihood improvement below which a start has converged.
    pub tolerance: f64,
    pub shared_intercept: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { seed: 0, starts: 5, max_iter: 500, tolerance: 1e-6, shared_intercept: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartResult {
    pub start: usize,
    pub converged: bool,
    pub initial_log_likelihood: f64,
    pub final_log_likelihood: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub message: String,
    pub parameters: ParameterVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub family: ModelFamily,
    pub best_start: usize,
    pub parameters: ParameterVector,
    pub log_likelihood: f64,
    pub bic: f64,
    pub kernel_param_count: usize,
    pub total_param_count: usize,
    pub n_obs: usize,
    pub starts: Vec<StartResult>,
    /// Set when a lengthscale exceeds ten times the data range.
    pub over_smoothed: bool,
    pub duration_secs: f64,
}

/// Multi-start quasi-Newton maximization of the profiled marginal likelihood.
pub fn optimize(dataset: &StackedDataset, family: &ModelFamily, config: &OptimizerConfig) -> Result<(FittedModel, FitReport)> {
    let started = Instant::now();
    if config.starts == 0 {
        return Err(Error::Parameter("at least one optimizer start is required".into()));
    }
    let problem = LikelihoodProblem::new(dataset, family, config.shared_intercept)?;
    let results: Vec<Result<StartResult>> = (0..config.starts)
        .into_par_iter()
        .map(|start| run_start(&problem, config, start))
        .collect();
    let mut starts = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => starts.push(s),
            Err(e) => failures.push(format!("start {i}: {e}")),
        }
    }
    let best = starts
        .iter()
        .filter(|s| s.converged)
        .fold(None::<&StartResult>, |acc, s| match acc {
            Some(b) if b.final_log_likelihood >= s.final_log_likelihood => Some(b),
            _ => Some(s),
        })
        .cloned();
    let Some(best) = best else {
        failures.extend(starts.iter().map(|s| format!("start {}: {}", s.start, s.message)));
        return Err(Error::Optimization(failures));
    };
    let model = problem.fitted_model(&best.parameters)?;
    let data_range = |f: fn(&DesignRow) -> f64| {
        let (lo, hi) = problem.rows.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        (hi - lo).max(1.0)
    };
    let maxes = model.params().kernel.max_lengthscales();
    let over_smoothed =
        maxes.theta_age > 10.0 * data_range(|r| r.age) || maxes.theta_year > 10.0 * data_range(|r| r.year);
    if over_smoothed {
        log::warn!("fitted lengthscales exceed ten times the data range");
    }
    let report = FitReport {
        family: family.clone(),
        best_start: best.start,
        parameters: best.parameters.clone(),
        log_likelihood: model.log_likelihood(),
        bic: model.bic(),
        kernel_param_count: model.kernel_param_count(),
        total_param_count: model.total_param_count(),
        n_obs: model.n_obs(),
        starts,
        over_smoothed,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn start_rng(seed: u64, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    rng
}

fn run_start(problem: &LikelihoodProblem, config: &OptimizerConfig, start: usize) -> Result<StartResult> {
    let mut rng = start_rng(config.seed, start);
    let x0 = problem.initial_point(&mut rng, start > 0);
    let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let (f, g) = problem.value_and_gradient(&ParameterVector(x.to_vec())).ok()?;
        Some((-f, g.into_iter().map(|v| -v).collect()))
    };
    let out = crate::optim::minimize_bfgs(objective, &x0.0, config.max_iter, config.tolerance)
        .map_err(|m| Error::Conditioning(format!("initial point: {m}")))?;
    Ok(StartResult {
        start,
        converged: out.converged,
        initial_log_likelihood: -out.initial_value,
        final_log_likelihood: -out.value,
        iterations: out.iterations,
        evaluations: out.evaluations,
        message: out.message,
        parameters: ParameterVector(out.x),
    })
}

/// One row of a rank-selection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub family: ModelFamily,
    pub log_likelihood: Option<f64>,
    pub kernel_param_count: usize,
    pub total_param_count: usize,
    pub bic: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub entries: Vec<RankEntry>,
    /// Index into `entries` of the BIC-maximizing candidate.
    pub chosen: usize,
}

impl RankTable {
    pub fn chosen_family(&self) -> &ModelFamily {
        &self.entries[self.chosen].family
    }
}

fn rank_size(f: &ModelFamily) -> usize {
    match f {
        ModelFamily::Sogp => 1,
        ModelFamily::Icm { rank } | ModelFamily::Slfm { rank } => *rank,
        ModelFamily::MultiLevelIcm { ranks } => ranks.iter().product(),
    }
}

/// Fits every candidate and picks the largest BIC; ties go to the smaller rank.
pub fn select_rank(dataset: &StackedDataset, candidates: &[ModelFamily], config: &OptimizerConfig) -> Result<RankTable> {
    if candidates.is_empty() {
        return Err(Error::Parameter("no rank candidates".into()));
    }
    let design = design_matrix(dataset);
    let l = design.n_populations();
    let n_obs = design.rows.len();
    let entries: Vec<RankEntry> = candidates
        .par_iter()
        .map(|family| {
            let level_counts = match family {
                ModelFamily::MultiLevelIcm { .. } => dataset.schema().level_counts(),
                _ => vec![l],
            };
            let kernel_count = crate::kernels::kernel_param_count(family, &level_counts);
            let total = kernel_count + l + TrendBasis::new(l, config.shared_intercept).n_coefficients();
            match optimize(dataset, family, config) {
                Ok((_, report)) => RankEntry {
                    family: family.clone(),
                    log_likelihood: Some(report.log_likelihood),
                    kernel_param_count: kernel_count,
                    total_param_count: total,
                    bic: Some(bic(report.log_likelihood, total, n_obs)),
                    error: None,
                },
                Err(e) => RankEntry {
                    family: family.clone(),
                    log_likelihood: None,
                    kernel_param_count: kernel_count,
                    total_param_count: total,
                    bic: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut chosen: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        let Some(b) = e.bic else { continue };
        chosen = match chosen {
            None => Some(i),
            Some(c) => {
                let cb = entries[c].bic.unwrap();
                if b > cb || (b == cb && rank_size(&e.family) < rank_size(&entries[c].family)) {
                    Some(i)
                } else {
                    Some(c)
                }
            }
        };
    }
    match chosen {
        Some(chosen) => Ok(RankTable { entries, chosen }),
        None => Err(Error::Optimization(
            entries.iter().map(|e| format!("{:?}: {}", e.family, e.error.clone().unwrap_or_default())).collect(),
        )),
    }
}
