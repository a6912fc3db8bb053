//! Matérn-5/2 ARD correlation over (age, year) and the coregionalization
//! structures that couple populations: ICM, SLFM and the multi-level
//! (Kronecker) ICM.
//!
//! The spatial kernel is a correlation; all process variance sits on the
//! diagonal of the coregionalization matrix `B`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datastore::DesignRow;
use crate::error::{Error, Result};
use crate::linalg::kron_all;

const SQRT5: f64 = 2.23606797749979;

/// Lengthscales of the Matérn-5/2 kernel, in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub theta_age: f64,
    pub theta_year: f64,
}

impl MaternParams {
    pub fn new(theta_age: f64, theta_year: f64) -> Result<Self> {
        let p = Self { theta_age, theta_year };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta_age", self.theta_age), ("theta_year", self.theta_year)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("lengthscale {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn correlation(&self, d_age: f64, d_year: f64) -> f64 {
        matern52_1d(d_age.abs() / self.theta_age) * matern52_1d(d_year.abs() / self.theta_year)
    }
}

/// One-dimensional Matérn-5/2 correlation at scaled distance `r = d/θ`.
#[inline]
pub fn matern52_1d(r: f64) -> f64 {
    let s = SQRT5 * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Derivative of [`matern52_1d`] with respect to `ln θ`.
#[inline]
pub(crate) fn matern52_1d_dlog_theta(r: f64) -> f64 {
    let s = SQRT5 * r;
    (5.0 / 3.0) * r * r * (1.0 + s) * (-s).exp()
}

/// Matérn-5/2 ARD correlation between two (age, year) points.
pub fn matern52(x: (f64, f64), x_prime: (f64, f64), params: &MaternParams) -> Result<f64> {
    params.validate()?;
    Ok(params.correlation(x.0 - x_prime.0, x.1 - x_prime.1))
}

/// Model family together with its latent rank(s).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelFamily {
    Sogp,
    Icm { rank: usize },
    Slfm { rank: usize },
    MultiLevelIcm { ranks: Vec<usize> },
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Sogp => "sogp",
            ModelFamily::Icm { .. } => "icm",
            ModelFamily::Slfm { .. } => "slfm",
            ModelFamily::MultiLevelIcm { .. } => "multi-level-icm",
        }
    }

    /// Checks ranks against the number of populations (single-level) or the
    /// per-dimension level counts (multi-level).
    pub fn validate(&self, n_populations: usize, level_counts: &[usize]) -> Result<()> {
        match self {
            ModelFamily::Sogp if n_populations != 1 => Err(Error::Parameter(format!(
                "SOGP models a single population, dataset has {n_populations}"
            ))),
            ModelFamily::Sogp => Ok(()),
            ModelFamily::Icm { rank } | ModelFamily::Slfm { rank } => {
                if *rank == 0 || *rank > n_populations {
                    Err(Error::Parameter(format!("rank {rank} outside 1..={n_populations}")))
                } else {
                    Ok(())
                }
            }
            ModelFamily::MultiLevelIcm { ranks } => {
                if ranks.len() != level_counts.len() {
                    return Err(Error::Parameter(format!(
                        "{} ranks given for {} factor dimensions",
                        ranks.len(),
                        level_counts.len()
                    )));
                }
                for (q, l) in ranks.iter().zip(level_counts) {
                    if *q == 0 || q > l {
                        return Err(Error::Parameter(format!("rank {q} outside 1..={l}")));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Number of kernel hyperparameters: ICM `QL+2`, SLFM `QL+2Q`, multi-level
/// ICM `ΣQ_pL_p+2`, SOGP 3 (variance and two lengthscales).
pub fn kernel_param_count(family: &ModelFamily, level_counts: &[usize]) -> usize {
    let l: usize = level_counts.iter().product();
    match family {
        ModelFamily::Sogp => 3,
        ModelFamily::Icm { rank } => rank * l + 2,
        ModelFamily::Slfm { rank } => rank * l + 2 * rank,
        ModelFamily::MultiLevelIcm { ranks } => {
            ranks.iter().zip(level_counts).map(|(q, lp)| q * lp).sum::<usize>() + 2
        }
    }
}

/// Kernel hyperparameters of a fitted or candidate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelSpec {
    Sogp {
        matern: MaternParams,
        /// Process standard deviation η.
        eta: f64,
    },
    Icm {
        matern: MaternParams,
        /// L×Q loading matrix A, with B = AAᵀ.
        loadings: DMatrix<f64>,
    },
    Slfm {
        /// L×Q loadings; column q pairs with `latent[q]`.
        loadings: DMatrix<f64>,
        latent: Vec<MaternParams>,
    },
    MultiLevelIcm {
        matern: MaternParams,
        /// One L_p×Q_p loading matrix per factor dimension.
        factor_loadings: Vec<DMatrix<f64>>,
    },
}

/// A rank-structured term `B_q ⊗ C_q` of the covariance.
#[derive(Debug, Clone)]
pub(crate) struct Component {
    pub b: DMatrix<f64>,
    pub matern: MaternParams,
}

impl KernelSpec {
    pub fn family(&self) -> ModelFamily {
        match self {
            KernelSpec::Sogp { .. } => ModelFamily::Sogp,
            KernelSpec::Icm { loadings, .. } => ModelFamily::Icm { rank: loadings.ncols() },
            KernelSpec::Slfm { loadings, .. } => ModelFamily::Slfm { rank: loadings.ncols() },
            KernelSpec::MultiLevelIcm { factor_loadings, .. } => ModelFamily::MultiLevelIcm {
                ranks: factor_loadings.iter().map(|a| a.ncols()).collect(),
            },
        }
    }

    pub fn n_populations(&self) -> usize {
        match self {
            KernelSpec::Sogp { .. } => 1,
            KernelSpec::Icm { loadings, .. } | KernelSpec::Slfm { loadings, .. } => loadings.nrows(),
            KernelSpec::MultiLevelIcm { factor_loadings, .. } => {
                factor_loadings.iter().map(|a| a.nrows()).product()
            }
        }
    }

    /// Level counts seen by the parameter counter.
    pub fn level_counts(&self) -> Vec<usize> {
        match self {
            KernelSpec::MultiLevelIcm { factor_loadings, .. } => {
                factor_loadings.iter().map(|a| a.nrows()).collect()
            }
            _ => vec![self.n_populations()],
        }
    }

    pub fn kernel_param_count(&self) -> usize {
        kernel_param_count(&self.family(), &self.level_counts())
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        match self {
            KernelSpec::Sogp { matern, eta } => {
                matern.validate()?;
                if !eta.is_finite() {
                    return Err(Error::Parameter("non-finite process scale".into()));
                }
            }
            KernelSpec::Icm { matern, loadings } => {
                matern.validate()?;
                if loadings.ncols() == 0 || loadings.ncols() > loadings.nrows() || !finite(loadings) {
                    return Err(Error::Parameter("invalid ICM loadings".into()));
                }
            }
            KernelSpec::Slfm { loadings, latent } => {
                for m in latent {
                    m.validate()?;
                }
                if loadings.ncols() != latent.len()
                    || loadings.ncols() == 0
                    || loadings.ncols() > loadings.nrows()
                    || !finite(loadings)
                {
                    return Err(Error::Parameter("invalid SLFM loadings".into()));
                }
            }
            KernelSpec::MultiLevelIcm { matern, factor_loadings } => {
                matern.validate()?;
                if factor_loadings.is_empty()
                    || factor_loadings
                        .iter()
                        .any(|a| a.ncols() == 0 || a.ncols() > a.nrows() || !finite(a))
                {
                    return Err(Error::Parameter("invalid multi-level loadings".into()));
                }
            }
        }
        Ok(())
    }

    /// Per-dimension matrices B̃_p = Ã_pÃ_pᵀ (multi-level only).
    pub fn factor_coregionalization(&self) -> Option<Vec<DMatrix<f64>>> {
        match self {
            KernelSpec::MultiLevelIcm { factor_loadings, .. } => {
                Some(factor_loadings.iter().map(|a| a * a.transpose()).collect())
            }
            _ => None,
        }
    }

    /// Cross-population covariance B (for SLFM the sum of its rank-one terms).
    pub fn coregionalization(&self) -> DMatrix<f64> {
        match self {
            KernelSpec::Sogp { eta, .. } => DMatrix::from_element(1, 1, eta * eta),
            KernelSpec::Icm { loadings, .. } | KernelSpec::Slfm { loadings, .. } => {
                loadings * loadings.transpose()
            }
            KernelSpec::MultiLevelIcm { .. } => kron_all(&self.factor_coregionalization().unwrap()),
        }
    }

    pub(crate) fn components(&self) -> Vec<Component> {
        match self {
            KernelSpec::Slfm { loadings, latent } => latent
                .iter()
                .enumerate()
                .map(|(q, m)| {
                    let a = loadings.column(q);
                    Component { b: a * a.transpose(), matern: *m }
                })
                .collect(),
            KernelSpec::Sogp { matern, .. }
            | KernelSpec::Icm { matern, .. }
            | KernelSpec::MultiLevelIcm { matern, .. } => {
                vec![Component { b: self.coregionalization(), matern: *matern }]
            }
        }
    }

    /// Largest lengthscale in use, per coordinate.
    pub fn max_lengthscales(&self) -> MaternParams {
        let ms: Vec<MaternParams> = match self {
            KernelSpec::Slfm { latent, .. } => latent.clone(),
            KernelSpec::Sogp { matern, .. }
            | KernelSpec::Icm { matern, .. }
            | KernelSpec::MultiLevelIcm { matern, .. } => vec![*matern],
        };
        MaternParams {
            theta_age: ms.iter().map(|m| m.theta_age).fold(0.0, f64::max),
            theta_year: ms.iter().map(|m| m.theta_year).fold(0.0, f64::max),
        }
    }
}

/// Latent covariance between two sets of design rows:
/// `Σ_q B_q[l_i, l_j]·C_q(x_i, x_j)`.
pub fn cross_covariance(spec: &KernelSpec, rows_a: &[DesignRow], rows_b: &[DesignRow]) -> Result<DMatrix<f64>> {
    let comps = checked_components(spec, rows_a.iter().chain(rows_b))?;
    Ok(DMatrix::from_fn(rows_a.len(), rows_b.len(), |i, j| {
        entry(&comps, &rows_a[i], &rows_b[j])
    }))
}

/// Symmetric latent covariance of a single set of rows.
pub fn assemble_covariance(spec: &KernelSpec, rows: &[DesignRow]) -> Result<DMatrix<f64>> {
    let comps = checked_components(spec, rows.iter())?;
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = entry(&comps, &rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

fn checked_components<'a>(spec: &KernelSpec, mut rows: impl Iterator<Item = &'a DesignRow>) -> Result<Vec<Component>> {
    spec.validate()?;
    let l = spec.n_populations();
    if let Some(r) = rows.find(|r| r.pop >= l) {
        return Err(Error::UnknownPopulation(format!("index {} with {l} populations", r.pop)));
    }
    Ok(spec.components())
}

#[inline]
fn entry(comps: &[Component], a: &DesignRow, b: &DesignRow) -> f64 {
    let da = a.age - b.age;
    let dy = a.year - b.year;
    comps
        .iter()
        .map(|c| c.b[(a.pop, b.pop)] * c.matern.correlation(da, dy))
        .sum()
}

fn correlation_from(b: &DMatrix<f64>, offset: usize) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    for l in 0..n {
        if !(b[(l, l)] > 0.0) {
            return Err(Error::Degenerate(format!("{}", l + offset)));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (b[(i, j)] / (b[(i, i)] * b[(j, j)]).sqrt()).clamp(-1.0, 1.0)
        }
    }))
}

/// Cross-population correlation `r = B_{l1,l2}/√(B_{l1,l1}B_{l2,l2})`. For
/// multi-level models this is the Kronecker product of per-dimension
/// correlations.
pub fn cross_correlation(spec: &KernelSpec) -> Result<DMatrix<f64>> {
    match spec.factor_correlations() {
        Some(rs) => Ok(kron_all(&rs?)),
        None => correlation_from(&spec.coregionalization(), 0),
    }
}

impl KernelSpec {
    /// Per-dimension correlation matrices R_p (multi-level only).
    pub fn factor_correlations(&self) -> Option<Result<Vec<DMatrix<f64>>>> {
        self.factor_coregionalization()
            .map(|bs| bs.iter().map(|b| correlation_from(b, 0)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(age: f64, year: f64, pop: usize) -> DesignRow {
        DesignRow { age, year, pop }
    }

    #[test]
    fn matern_values() {
        let p = MaternParams::new(5.0, 7.0).unwrap();
        assert_eq!(matern52((52.0, 2000.0), (52.0, 2000.0), &p).unwrap(), 1.0);
        let expected = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        let v = matern52((52.0, 2000.0), (57.0, 2000.0), &p).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.52399).abs() < 1e-5);
        assert!(matern52((0.0, 0.0), (1e4, 0.0), &p).unwrap() < 1e-100);
        assert!(matern52((0.0, 0.0), (1.0, 0.0), &MaternParams { theta_age: 0.0, theta_year: 1.0 }).is_err());
    }

    #[test]
    fn matern_log_theta_derivative() {
        for r in [0.0, 0.1, 0.7, 2.0] {
            let h: f64 = 1e-6;
            // r scales as exp(-ln θ)
            let fd = (matern52_1d(r * (-h).exp()) - matern52_1d(r * h.exp())) / (2.0 * h);
            assert!((fd - matern52_1d_dlog_theta(r)).abs() < 1e-8);
        }
    }

    #[test]
    fn sogp_single_cell() {
        let spec = KernelSpec::Sogp { matern: MaternParams::new(10.0, 10.0).unwrap(), eta: 0.3 };
        let k = assemble_covariance(&spec, &[row(52.0, 2000.0, 0)]).unwrap();
        assert!((k[(0, 0)] - 0.09).abs() < 1e-16);
    }

    #[test]
    fn icm_identical_loadings_fully_correlated() {
        let spec = KernelSpec::Icm {
            matern: MaternParams::new(10.0, 10.0).unwrap(),
            loadings: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
        };
        let k = assemble_covariance(&spec, &[row(52.0, 2000.0, 0), row(52.0, 2000.0, 1)]).unwrap();
        assert_eq!(k[(0, 1)], 1.0);
        let r = cross_correlation(&spec).unwrap();
        assert_eq!(r[(0, 1)], 1.0);
    }

    #[test]
    fn orthogonal_loadings_uncorrelated() {
        let spec = KernelSpec::Icm {
            matern: MaternParams::new(10.0, 10.0).unwrap(),
            loadings: DMatrix::identity(2, 2),
        };
        assert_eq!(cross_correlation(&spec).unwrap()[(0, 1)], 0.0);
    }

    #[test]
    fn multilevel_identity_factors() {
        let spec = KernelSpec::MultiLevelIcm {
            matern: MaternParams::new(10.0, 10.0).unwrap(),
            factor_loadings: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        };
        assert_eq!(spec.coregionalization(), DMatrix::identity(4, 4));
        let rows: Vec<DesignRow> = (0..4).map(|l| row(52.0, 2000.0, l)).collect();
        let k = assemble_covariance(&spec, &rows).unwrap();
        assert_eq!(k, DMatrix::identity(4, 4));
    }

    #[test]
    fn out_of_range_population() {
        let spec = KernelSpec::Sogp { matern: MaternParams::new(10.0, 10.0).unwrap(), eta: 1.0 };
        assert!(matches!(
            assemble_covariance(&spec, &[row(0.0, 0.0, 1)]),
            Err(Error::UnknownPopulation(_))
        ));
    }

    #[test]
    fn zero_loading_row_is_degenerate() {
        let spec = KernelSpec::Icm {
            matern: MaternParams::new(10.0, 10.0).unwrap(),
            loadings: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        };
        match cross_correlation(&spec) {
            Err(Error::Degenerate(p)) => assert_eq!(p, "1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(kernel_param_count(&ModelFamily::Icm { rank: 2 }, &[5]), 12);
        assert_eq!(kernel_param_count(&ModelFamily::Icm { rank: 4 }, &[15]), 62);
        assert_eq!(kernel_param_count(&ModelFamily::Slfm { rank: 2 }, &[5]), 14);
        assert_eq!(kernel_param_count(&ModelFamily::MultiLevelIcm { ranks: vec![3, 5, 2] }, &[3, 5, 2]), 40);
        assert_eq!(kernel_param_count(&ModelFamily::Sogp, &[1]), 3);
    }

    #[test]
    fn rank_validation() {
        assert!(ModelFamily::Icm { rank: 3 }.validate(2, &[2]).is_err());
        assert!(ModelFamily::Icm { rank: 2 }.validate(2, &[2]).is_ok());
        assert!(ModelFamily::MultiLevelIcm { ranks: vec![1, 3] }.validate(4, &[2, 2]).is_err());
        assert!(ModelFamily::Sogp.validate(2, &[2]).is_err());
    }
}
