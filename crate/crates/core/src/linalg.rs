//! Dense helpers around Cholesky factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter tried first, as a multiple of the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower Cholesky factor of `K + jitter·I`.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub l: DMatrix<f64>,
    /// Relative jitter factor that succeeded.
    pub relative_jitter: f64,
    /// Absolute amount added to the diagonal.
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Explicit inverse of the factored matrix, `L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let x = lower_triangular_inverse(&self.l);
        let xt = x.transpose();
        &xt * &x
    }
}

/// Factors `k` after adding a jitter of `JITTER_START·mean(diag)`, escalating
/// tenfold up to `JITTER_MAX·mean(diag)`.
pub fn cholesky_with_jitter(k: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let n = k.nrows();
    if n == 0 {
        return Err(Error::Conditioning("empty covariance".into()));
    }
    let mean_diag = k.diagonal().mean();
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return Err(Error::Conditioning(format!("mean diagonal {mean_diag} is not positive")));
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(ch) = a.cholesky() {
            return Ok(JitteredCholesky { l: ch.unpack(), relative_jitter: rel, jitter });
        }
        rel *= 10.0;
    }
    Err(Error::Conditioning(format!(
        "covariance of size {n} not positive definite with jitter up to {JITTER_MAX}·mean(diag)"
    )))
}

/// Inverse of a lower-triangular matrix by recursive 2×2 blocking.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 48 {
        let mut x = DMatrix::zeros(n, n);
        for j in 0..n {
            x[(j, j)] = 1.0 / l[(j, j)];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s += l[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = -s / l[(i, i)];
            }
        }
        return x;
    }
    let h = n / 2;
    let x11 = lower_triangular_inverse(&l.view((0, 0), (h, h)).into_owned());
    let x22 = lower_triangular_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let x21 = -(&x22 * l.view((h, 0), (n - h, h)) * &x11);
    let mut x = DMatrix::zeros(n, n);
    x.view_mut((0, 0), (h, h)).copy_from(&x11);
    x.view_mut((h, h), (n - h, n - h)).copy_from(&x22);
    x.view_mut((h, 0), (n - h, h)).copy_from(&x21);
    x
}

/// Kronecker product of a sequence of matrices, first factor outermost.
pub fn kron_all(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(1, 1, 1.0);
    for m in mats {
        out = out.kronecker(m);
    }
    out
}
