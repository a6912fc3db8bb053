//! Universal kriging with a per-population polynomial trend.
//!
//! The trend coefficients are profiled out by generalized least squares at
//! every likelihood evaluation; predictions carry the extra variance from
//! estimating them.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datastore::{design_matrix, DesignRow, FactorSchema, PopulationKey, StackedDataset};
use crate::error::{Error, Result};
use crate::kernels::{assemble_covariance, cross_covariance, KernelSpec};
use crate::linalg::{cholesky_with_jitter, JitteredCholesky};

/// Per-population observation noise standard deviations σ_l.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma: Vec<f64>,
}

impl NoiseParams {
    pub fn validate(&self, n_populations: usize) -> Result<()> {
        if self.sigma.len() != n_populations {
            return Err(Error::Parameter(format!(
                "{} noise levels for {n_populations} populations",
                self.sigma.len()
            )));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("noise level must be positive, got {s}")));
        }
        Ok(())
    }
}

/// Kernel plus observation noise: everything the likelihood depends on
/// besides the profiled trend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kernel: KernelSpec,
    pub noise: NoiseParams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.noise.validate(self.kernel.n_populations())
    }
}

/// Trend basis h(x) = (1, age, age², year) per population, optionally with
/// one intercept shared by all populations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendBasis {
    pub n_populations: usize,
    pub shared_intercept: bool,
}

impl TrendBasis {
    pub fn new(n_populations: usize, shared_intercept: bool) -> Self {
        Self { n_populations, shared_intercept }
    }

    pub fn n_coefficients(&self) -> usize {
        if self.shared_intercept {
            3 * self.n_populations + 1
        } else {
            4 * self.n_populations
        }
    }

    /// Column indices of (intercept, age, age², year) for population `l`.
    pub fn columns(&self, l: usize) -> [usize; 4] {
        if self.shared_intercept {
            [0, 1 + 3 * l, 2 + 3 * l, 3 + 3 * l]
        } else {
            [4 * l, 4 * l + 1, 4 * l + 2, 4 * l + 3]
        }
    }

    pub fn year_column(&self, l: usize) -> usize {
        self.columns(l)[3]
    }

    pub fn matrix(&self, rows: &[DesignRow]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(rows.len(), self.n_coefficients());
        for (i, r) in rows.iter().enumerate() {
            let c = self.columns(r.pop);
            h[(i, c[0])] = 1.0;
            h[(i, c[1])] = r.age;
            h[(i, c[2])] = r.age * r.age;
            h[(i, c[3])] = r.year;
        }
        h
    }
}

/// Generalized least squares on the whitened design.
///
/// Columns are rescaled to unit norm before the QR so the rank test does not
/// depend on the units of age and year.
#[derive(Debug, Clone)]
pub(crate) struct WhitenedTrend {
    /// L⁻¹H.
    pub hw: DMatrix<f64>,
    /// R factor of the column-normalized whitened design.
    pub r: DMatrix<f64>,
    /// Column scale factors (reciprocal norms).
    pub scale: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl WhitenedTrend {
    fn new(factor: &JitteredCholesky, h: &DMatrix<f64>) -> Result<Self> {
        let hw = factor.solve_lower(h);
        let p = hw.ncols();
        if p > hw.nrows() {
            return Err(Error::SingularTrend);
        }
        let scale = DVector::from_iterator(
            p,
            hw.column_iter().map(|c| {
                let n = c.norm();
                if n > 0.0 { 1.0 / n } else { 0.0 }
            }),
        );
        if scale.iter().any(|s| *s == 0.0) {
            return Err(Error::SingularTrend);
        }
        let mut scaled = hw.clone();
        for (j, mut c) in scaled.column_iter_mut().enumerate() {
            c *= scale[j];
        }
        let qr = scaled.qr();
        let r = qr.r();
        let q = qr.q();
        let rmax = r.diagonal().amax();
        if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * rmax) {
            return Err(Error::SingularTrend);
        }
        Ok(Self { hw, r, scale, q })
    }

    /// β̂ from whitened observations z = L⁻¹y.
    fn beta(&self, z: &DVector<f64>) -> DVector<f64> {
        let qtz = self.q.tr_mul(z);
        let b = self.r.solve_upper_triangular(&qtz).expect("nonsingular R");
        b.component_mul(&self.scale)
    }

    /// Rows of T with TᵀT = Uᵀ(HᵀK⁻¹H)⁻¹U for a p×M matrix U.
    fn trend_factor(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut su = u.clone();
        for (i, mut row) in su.row_iter_mut().enumerate() {
            row *= self.scale[i];
        }
        self.r.tr_solve_upper_triangular(&su).expect("nonsingular R")
    }

    /// (HᵀK⁻¹H)⁻¹.
    pub fn beta_covariance(&self) -> DMatrix<f64> {
        let p = self.r.nrows();
        let t = self.trend_factor(&DMatrix::identity(p, p));
        t.tr_mul(&t)
    }
}

/// Factorization, profiled trend and likelihood at one parameter point.
#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub factor: JitteredCholesky,
    pub trend: WhitenedTrend,
    pub beta: DVector<f64>,
    /// Whitened residual L⁻¹(y − Hβ̂).
    pub w: DVector<f64>,
    pub log_likelihood: f64,
}

impl Evaluation {
    pub fn new(
        params: &ModelParams,
        rows: &[DesignRow],
        y: &DVector<f64>,
        basis: &TrendBasis,
        beta_override: Option<&DVector<f64>>,
    ) -> Result<Self> {
        params.validate()?;
        let k = training_covariance(params, rows)?;
        let factor = cholesky_with_jitter(&k)?;
        let h = basis.matrix(rows);
        let trend = WhitenedTrend::new(&factor, &h)?;
        let z = factor.solve_lower_vec(y);
        let beta = match beta_override {
            Some(b) => b.clone(),
            None => trend.beta(&z),
        };
        let w = z - &trend.hw * &beta;
        let n = y.len() as f64;
        let log_likelihood = -0.5 * w.norm_squared() - 0.5 * factor.log_det() - 0.5 * n * (2.0 * PI).ln();
        if !log_likelihood.is_finite() {
            return Err(Error::Conditioning("non-finite log-likelihood".into()));
        }
        Ok(Self { factor, trend, beta, w, log_likelihood })
    }

    /// α = K⁻¹(y − Hβ̂).
    pub fn alpha(&self) -> DVector<f64> {
        self.factor.solve_upper_vec(&self.w)
    }
}

/// Latent covariance plus per-population noise on the diagonal (before jitter).
pub fn training_covariance(params: &ModelParams, rows: &[DesignRow]) -> Result<DMatrix<f64>> {
    let mut k = assemble_covariance(&params.kernel, rows)?;
    for (i, r) in rows.iter().enumerate() {
        k[(i, i)] += params.noise.sigma[r.pop].powi(2);
    }
    Ok(k)
}

/// GLS trend estimate β̂ = (HᵀK⁻¹H)⁻¹HᵀK⁻¹y using the factor of K.
pub fn gls_beta(h: &DMatrix<f64>, factor: &JitteredCholesky, y: &DVector<f64>) -> Result<DVector<f64>> {
    let trend = WhitenedTrend::new(factor, h)?;
    Ok(trend.beta(&factor.solve_lower_vec(y)))
}

/// Log marginal likelihood of the dataset with β profiled out.
pub fn log_marginal_likelihood(params: &ModelParams, dataset: &StackedDataset, shared_intercept: bool) -> Result<f64> {
    let design = design_matrix(dataset);
    let basis = TrendBasis::new(design.n_populations(), shared_intercept);
    let y = DVector::from_vec(design.y);
    Ok(Evaluation::new(params, &design.rows, &y, &basis, None)?.log_likelihood)
}

/// Expert adjustment of one population's year slope, pivoting at `pivot_year`
/// so the trend stays continuous there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendAdjustment {
    pub population: usize,
    pub scale: f64,
    pub pivot_year: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    Latent,
    Observational,
}

/// A model whose hyperparameters are fixed, with cached kriging quantities.
#[derive(Debug, Clone)]
pub struct FittedModel {
    schema: FactorSchema,
    populations: Vec<PopulationKey>,
    params: ModelParams,
    basis: TrendBasis,
    rows: Vec<DesignRow>,
    y: DVector<f64>,
    eval: Evaluation,
    alpha: DVector<f64>,
    adjustments: Vec<TrendAdjustment>,
}

impl FittedModel {
    pub fn new(dataset: &StackedDataset, params: ModelParams, shared_intercept: bool) -> Result<Self> {
        let design = design_matrix(dataset);
        Self::from_parts(
            dataset.schema().clone(),
            design.populations,
            params,
            shared_intercept,
            design.rows,
            design.y,
            None,
        )
    }

    /// Rebuilds a model from stored training rows. A supplied β̂ is used
    /// verbatim instead of being re-estimated.
    pub fn from_parts(
        schema: FactorSchema,
        populations: Vec<PopulationKey>,
        params: ModelParams,
        shared_intercept: bool,
        rows: Vec<DesignRow>,
        y: Vec<f64>,
        beta: Option<Vec<f64>>,
    ) -> Result<Self> {
        if params.kernel.n_populations() != populations.len() {
            return Err(Error::Parameter(format!(
                "kernel covers {} populations, data has {}",
                params.kernel.n_populations(),
                populations.len()
            )));
        }
        let basis = TrendBasis::new(populations.len(), shared_intercept);
        let y = DVector::from_vec(y);
        let beta = beta.map(DVector::from_vec);
        if let Some(b) = &beta {
            if b.len() != basis.n_coefficients() {
                return Err(Error::Parameter("stored trend has wrong length".into()));
            }
        }
        let eval = Evaluation::new(&params, &rows, &y, &basis, beta.as_ref())?;
        let alpha = eval.alpha();
        Ok(Self { schema, populations, params, basis, rows, y, eval, alpha, adjustments: Vec::new() })
    }

    pub fn schema(&self) -> &FactorSchema {
        &self.schema
    }

    pub fn populations(&self) -> &[PopulationKey] {
        &self.populations
    }

    pub fn population_index(&self, key: &PopulationKey) -> Result<usize> {
        self.populations
            .iter()
            .position(|p| p == key)
            .ok_or_else(|| Error::UnknownPopulation(self.schema.label(key)))
    }

    pub fn population_label(&self, l: usize) -> String {
        self.schema.label(&self.populations[l])
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn basis(&self) -> &TrendBasis {
        &self.basis
    }

    pub fn rows(&self) -> &[DesignRow] {
        &self.rows
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// GLS trend coefficients.
    pub fn beta(&self) -> &DVector<f64> {
        &self.eval.beta
    }

    /// Sampling covariance of β̂, `(HᵀK⁻¹H)⁻¹`.
    pub fn beta_covariance(&self) -> DMatrix<f64> {
        self.eval.trend.beta_covariance()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn log_likelihood(&self) -> f64 {
        self.eval.log_likelihood
    }

    pub fn relative_jitter(&self) -> f64 {
        self.eval.factor.relative_jitter
    }

    pub fn adjustments(&self) -> &[TrendAdjustment] {
        &self.adjustments
    }

    /// Kernel hyperparameters only.
    pub fn kernel_param_count(&self) -> usize {
        self.params.kernel.kernel_param_count()
    }

    /// Kernel hyperparameters, noise levels and trend coefficients.
    pub fn total_param_count(&self) -> usize {
        self.kernel_param_count() + self.populations.len() + self.basis.n_coefficients()
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn bic(&self) -> f64 {
        crate::inference::bic(self.log_likelihood(), self.total_param_count(), self.n_obs())
    }

    /// Inclusive training year span of population `l`.
    pub fn year_span(&self, l: usize) -> Option<(f64, f64)> {
        self.rows.iter().filter(|r| r.pop == l).fold(None, |acc, r| match acc {
            None => Some((r.year, r.year)),
            Some((lo, hi)) => Some((lo.min(r.year), hi.max(r.year))),
        })
    }

    /// Effective trend coefficients after expert adjustments, written in the
    /// original basis (year slope scaled, intercept moved to the pivot).
    pub fn effective_beta(&self) -> DVector<f64> {
        let mut b = self.eval.beta.clone();
        for adj in &self.adjustments {
            let cols = self.basis.columns(adj.population);
            let slope = self.eval.beta[cols[3]];
            b[cols[3]] += (adj.scale - 1.0) * slope;
            if !self.basis.shared_intercept {
                b[cols[0]] -= (adj.scale - 1.0) * slope * adj.pivot_year;
            }
        }
        b
    }

    pub(crate) fn with_adjustments(mut self, adjustments: Vec<TrendAdjustment>) -> Self {
        self.adjustments = adjustments;
        self
    }

    /// Trend mean h(x)ᵀβ̂ including expert adjustments.
    pub fn trend_mean(&self, row: &DesignRow) -> f64 {
        let cols = self.basis.columns(row.pop);
        let b = &self.eval.beta;
        let mut year = row.year;
        for adj in self.adjustments.iter().filter(|a| a.population == row.pop) {
            year = adj.pivot_year + adj.scale * (year - adj.pivot_year);
        }
        b[cols[0]] + b[cols[1]] * row.age + b[cols[2]] * row.age * row.age + b[cols[3]] * year
    }

    pub fn noise_variance(&self, l: usize) -> f64 {
        self.params.noise.sigma[l].powi(2)
    }

    /// Joint predictive distribution at `rows`.
    pub fn predict(&self, rows: &[DesignRow], mode: PredictionMode) -> Result<PredictiveDistribution> {
        let l = self.populations.len();
        if let Some(r) = rows.iter().find(|r| r.pop >= l) {
            return Err(Error::UnknownPopulation(format!("index {} with {l} populations", r.pop)));
        }
        let cross = cross_covariance(&self.params.kernel, &self.rows, rows)?;
        let prior = assemble_covariance(&self.params.kernel, rows)?;
        let v = self.eval.factor.solve_lower(&cross);
        let mean_gp = v.tr_mul(&self.eval.w);
        let mean = DVector::from_iterator(rows.len(), rows.iter().enumerate().map(|(i, r)| self.trend_mean(r) + mean_gp[i]));
        let h_star = self.basis.matrix(rows);
        let u = h_star.transpose() - self.eval.trend.hw.tr_mul(&v);
        let t = self.eval.trend.trend_factor(&u);
        let mut cov = prior - v.tr_mul(&v) + t.tr_mul(&t);
        cov = (&cov + cov.transpose()) * 0.5;
        let noise_variance: Vec<f64> = rows.iter().map(|r| self.noise_variance(r.pop)).collect();
        if mode == PredictionMode::Observational {
            for (i, nv) in noise_variance.iter().enumerate() {
                cov[(i, i)] += nv;
            }
        }
        Ok(PredictiveDistribution { rows: rows.to_vec(), mean, cov, mode, noise_variance })
    }

    /// Row for a labelled population at (age, year).
    pub fn row(&self, key: &PopulationKey, age: f64, year: f64) -> Result<DesignRow> {
        Ok(DesignRow { age, year, pop: self.population_index(key)? })
    }
}

/// Joint Gaussian over a set of cells.
#[derive(Debug, Clone)]
pub struct PredictiveDistribution {
    pub rows: Vec<DesignRow>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mode: PredictionMode,
    /// σ²_l of each cell's population.
    pub noise_variance: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn latent_variance(&self, i: usize) -> f64 {
        let v = match self.mode {
            PredictionMode::Latent => self.cov[(i, i)],
            PredictionMode::Observational => self.cov[(i, i)] - self.noise_variance[i],
        };
        v.max(0.0)
    }

    pub fn observational_variance(&self, i: usize) -> f64 {
        self.latent_variance(i) + self.noise_variance[i]
    }

    /// Variance matching the distribution's mode.
    pub fn variance(&self, i: usize) -> f64 {
        match self.mode {
            PredictionMode::Latent => self.latent_variance(i),
            PredictionMode::Observational => self.observational_variance(i),
        }
    }

    /// Marginal distribution over a subset of cells.
    pub fn select(&self, idx: &[usize]) -> PredictiveDistribution {
        PredictiveDistribution {
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
            mean: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i])),
            cov: DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.cov[(idx[a], idx[b])]),
            mode: self.mode,
            noise_variance: idx.iter().map(|&i| self.noise_variance[i]).collect(),
        }
    }
}

/// Draws `n_samples` joint Gaussian samples, one per row of the result.
pub fn sample_joint(dist: &PredictiveDistribution, n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    let m = dist.len();
    let mut out = DMatrix::zeros(n_samples, m);
    for j in 0..m {
        out.column_mut(j).fill(dist.mean[j]);
    }
    if m == 0 || dist.cov.iter().all(|v| *v == 0.0) {
        return Ok(out);
    }
    let l = cholesky_with_jitter(&dist.cov)?.l;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; m];
    for s in 0..n_samples {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..m {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += l[(i, k)] * z[k];
            }
            out[(s, i)] += acc;
        }
    }
    Ok(out)
}
