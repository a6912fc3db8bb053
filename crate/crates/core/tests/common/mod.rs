//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mortality_gp::datastore::{DesignRow, FactorSchema, MortalityCell, PopulationKey, StackedDataset};
use mortality_gp::kernels::{KernelSpec, MaternParams};
use mortality_gp::gp_core::{ModelParams, NoiseParams};

pub fn matern(r: f64) -> f64 {
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

pub fn corr(m: &MaternParams, a: &DesignRow, b: &DesignRow) -> f64 {
    matern((a.age - b.age).abs() / m.theta_age) * matern((a.year - b.year).abs() / m.theta_year)
}

fn outer(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| (0..a.ncols()).map(|q| a[(i, q)] * a[(j, q)]).sum())
}

/// Coregionalization terms (B_q, lengthscales) written out from the raw
/// kernel fields.
pub fn terms(spec: &KernelSpec) -> Vec<(DMatrix<f64>, MaternParams)> {
    match spec {
        KernelSpec::Sogp { matern, eta } => vec![(DMatrix::from_element(1, 1, eta * eta), *matern)],
        KernelSpec::Icm { matern, loadings } => vec![(outer(loadings), *matern)],
        KernelSpec::Slfm { loadings, latent } => latent
            .iter()
            .enumerate()
            .map(|(q, m)| (outer(&loadings.columns(q, 1).into_owned()), *m))
            .collect(),
        KernelSpec::MultiLevelIcm { matern, factor_loadings } => {
            let bs: Vec<DMatrix<f64>> = factor_loadings.iter().map(outer).collect();
            let sizes: Vec<usize> = bs.iter().map(|b| b.nrows()).collect();
            let n: usize = sizes.iter().product();
            let digits = |mut l: usize| {
                let mut d = vec![0; sizes.len()];
                for p in (0..sizes.len()).rev() {
                    d[p] = l % sizes[p];
                    l /= sizes[p];
                }
                d
            };
            let b = DMatrix::from_fn(n, n, |i, j| {
                let (di, dj) = (digits(i), digits(j));
                (0..sizes.len()).map(|p| bs[p][(di[p], dj[p])]).product()
            });
            vec![(b, *matern)]
        }
    }
}

pub fn dense_cov(spec: &KernelSpec, a: &[DesignRow], b: &[DesignRow]) -> DMatrix<f64> {
    let ts = terms(spec);
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        ts.iter().map(|(bq, m)| bq[(a[i].pop, b[j].pop)] * corr(m, &a[i], &b[j])).sum()
    })
}

/// Universal kriging written with explicit inverses.
pub struct DenseOracle {
    pub beta: DVector<f64>,
    pub log_likelihood: f64,
    params: ModelParams,
    rows: Vec<DesignRow>,
    bordered: Bordered,
    alpha: DVector<f64>,
    gamma: DVector<f64>,
    basis: DMatrix<f64>,
    n_pop: usize,
    shared: bool,
}

/// Dot product with error-free transformations (twice working precision).
pub fn dot2(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let ep = x.mul_add(*y, -p);
        let t = s + p;
        let z = t - s;
        let es = (s - (t - z)) + (p - z);
        s = t;
        c += ep + es;
    }
    s + c
}

/// The kriging system [[K, H], [Hᵀ, 0]] solved by LU with iterative
/// refinement on compensated residuals.
struct Bordered {
    a: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Bordered {
    fn new(k: &DMatrix<f64>, h: &DMatrix<f64>) -> Self {
        let (n, p) = (k.nrows(), h.ncols());
        let mut a = DMatrix::zeros(n + p, n + p);
        a.view_mut((0, 0), (n, n)).copy_from(k);
        a.view_mut((0, n), (n, p)).copy_from(h);
        a.view_mut((n, 0), (p, n)).copy_from(&h.transpose());
        let lu = a.clone().lu();
        Self { a, lu }
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let rows: Vec<Vec<f64>> = (0..self.a.nrows()).map(|i| self.a.row(i).iter().copied().collect()).collect();
        let mut z = self.lu.solve(b).expect("nonsingular kriging system");
        for _ in 0..4 {
            let r = DVector::from_fn(b.len(), |i, _| {
                let mut v = rows[i].clone();
                v.push(-1.0);
                let mut w: Vec<f64> = z.iter().copied().collect();
                w.push(b[i]);
                -dot2(&v, &w)
            });
            z += self.lu.solve(&r).expect("nonsingular kriging system");
        }
        z
    }
}

pub fn trend_row(r: &DesignRow, n_pop: usize, shared: bool) -> Vec<f64> {
    let p = if shared { 3 * n_pop + 1 } else { 4 * n_pop };
    let mut h = vec![0.0; p];
    if shared {
        h[0] = 1.0;
        h[1 + 3 * r.pop] = r.age;
        h[2 + 3 * r.pop] = r.age * r.age;
        h[3 + 3 * r.pop] = r.year;
    } else {
        h[4 * r.pop] = 1.0;
        h[4 * r.pop + 1] = r.age;
        h[4 * r.pop + 2] = r.age * r.age;
        h[4 * r.pop + 3] = r.year;
    }
    h
}

const AGE0: f64 = 60.0;
const YEAR0: f64 = 2005.0;

/// Raw coefficients from centred ones: β = T·β_c.
fn centring(n_pop: usize, shared: bool) -> DMatrix<f64> {
    let p = if shared { 3 * n_pop + 1 } else { 4 * n_pop };
    let mut t = DMatrix::identity(p, p);
    if shared {
        return t;
    }
    for l in 0..n_pop {
        let o = 4 * l;
        // c0 + c1(a−a0) + c2(a−a0)² + c3(t−t0)
        t[(o, o + 1)] = -AGE0;
        t[(o, o + 2)] = AGE0 * AGE0;
        t[(o, o + 3)] = -YEAR0;
        t[(o + 1, o + 2)] = -2.0 * AGE0;
    }
    t
}

fn trend_matrix(rows: &[DesignRow], n_pop: usize, shared: bool) -> DMatrix<f64> {
    let p = trend_row(&rows[0], n_pop, shared).len();
    DMatrix::from_fn(rows.len(), p, |i, j| trend_row(&rows[i], n_pop, shared)[j])
}

impl DenseOracle {
    /// `relative_jitter` is the fraction of the mean diagonal added to K.
    pub fn new(params: &ModelParams, rows: &[DesignRow], y: &DVector<f64>, shared: bool, relative_jitter: f64) -> Self {
        let n_pop = params.noise.sigma.len();
        let n = rows.len();
        let mut k = dense_cov(&params.kernel, rows, rows);
        for (i, r) in rows.iter().enumerate() {
            k[(i, i)] += params.noise.sigma[r.pop].powi(2);
        }
        let jitter = relative_jitter * k.trace() / n as f64;
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        let h = trend_matrix(rows, n_pop, shared);
        // Centred age and year (exact for per-population intercepts) and
        // power-of-two column scales; β = basis·z.
        let t = centring(n_pop, shared);
        let hc = &h * &t;
        let s = DVector::from_fn(hc.ncols(), |j, _| 2f64.powi(-(hc.column(j).amax().log2().ceil() as i32)));
        let basis = &t * DMatrix::from_diagonal(&s);
        let bordered = Bordered::new(&k, &(&h * &basis));
        let mut rhs = DVector::zeros(n + h.ncols());
        rhs.rows_mut(0, n).copy_from(y);
        let z = bordered.solve(&rhs);
        let alpha = z.rows(0, n).into_owned();
        let gamma = z.rows(n, h.ncols()).into_owned();
        let beta = &basis * &gamma;
        let quad = dot2(y.as_slice(), alpha.as_slice());
        let log_det = k.lu().determinant().ln();
        let log_likelihood = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Self { beta, log_likelihood, params: params.clone(), rows: rows.to_vec(), bordered, alpha, gamma, basis, n_pop, shared }
    }

    /// Latent predictive mean and covariance at `test`.
    pub fn predict(&self, test: &[DesignRow]) -> (DVector<f64>, DMatrix<f64>) {
        let c = dense_cov(&self.params.kernel, &self.rows, test);
        let prior = dense_cov(&self.params.kernel, test, test);
        let ht = trend_matrix(test, self.n_pop, self.shared);
        let hb = &ht * &self.basis;
        let g: Vec<Vec<f64>> = (0..test.len())
            .map(|j| {
                let mut v: Vec<f64> = c.column(j).iter().copied().collect();
                v.extend(hb.row(j).iter());
                v
            })
            .collect();
        let mut w: Vec<f64> = self.alpha.iter().copied().collect();
        w.extend(self.gamma.iter());
        let mean = DVector::from_fn(test.len(), |j, _| dot2(&g[j], &w));
        let sol: Vec<DVector<f64>> = g.iter().map(|v| self.bordered.solve(&DVector::from_column_slice(v))).collect();
        let cov = DMatrix::from_fn(test.len(), test.len(), |i, j| prior[(i, j)] - dot2(&g[i], sol[j].as_slice()));
        (mean, cov)
    }
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

/// Family shapes used for random problems.
#[derive(Debug, Clone, Copy)]
pub enum Shape {
    Sogp,
    Icm,
    Slfm,
    MultiLevel,
}

pub const SHAPES: [Shape; 4] = [Shape::Sogp, Shape::Icm, Shape::Slfm, Shape::MultiLevel];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn loadings(rng: &mut ChaCha8Rng, l: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(l, q, |i, j| if i % q == j { 0.5 + 0.3 * normal(rng) } else { 0.3 * normal(rng) })
}

fn random_matern(rng: &mut ChaCha8Rng) -> MaternParams {
    MaternParams::new(rng.random_range(3.0..20.0), rng.random_range(3.0..20.0)).unwrap()
}

/// Random parameters and a random small dataset (N ≤ 48, L ≤ 4).
pub fn random_problem(rng: &mut ChaCha8Rng, shape: Shape) -> (ModelParams, StackedDataset) {
    let (schema, l) = match shape {
        Shape::Sogp => (FactorSchema::single("pop", &["a"]).unwrap(), 1),
        Shape::MultiLevel => (
            FactorSchema::new(vec!["country".into(), "sex".into()], vec![
                vec!["x".into(), "y".into()],
                vec!["f".into(), "m".into()],
            ])
            .unwrap(),
            4,
        ),
        _ => {
            let l = rng.random_range(2..=4);
            let names = ["a", "b", "c", "d"];
            (FactorSchema::single("pop", &names[..l]).unwrap(), l)
        }
    };
    let kernel = match shape {
        Shape::Sogp => KernelSpec::Sogp { matern: random_matern(rng), eta: rng.random_range(0.2..1.0) },
        Shape::Icm => {
            let q = rng.random_range(1..=l);
            KernelSpec::Icm { matern: random_matern(rng), loadings: loadings(rng, l, q) }
        }
        Shape::Slfm => {
            let q = rng.random_range(1..=l);
            KernelSpec::Slfm { loadings: loadings(rng, l, q), latent: (0..q).map(|_| random_matern(rng)).collect() }
        }
        Shape::MultiLevel => KernelSpec::MultiLevelIcm {
            matern: random_matern(rng),
            factor_loadings: {
                let (q1, q2) = (rng.random_range(1..=2), rng.random_range(1..=2));
                vec![loadings(rng, 2, q1), loadings(rng, 2, q2)]
            },
        },
    };
    let sigma = (0..l).map(|_| rng.random_range(0.05..0.3)).collect();
    let all_keys = schema.all_keys();
    let mut cells = Vec::new();
    for key in all_keys.iter().take(l) {
        let ages = [52.0, 57.0, 62.0, 67.0, 72.0];
        let n_age = rng.random_range(3..=4);
        let y0 = rng.random_range(1998..2010);
        let n_year = rng.random_range(2..=3);
        for t in 0..n_year {
            for &a in &ages[..n_age] {
                let y = -7.0 + 0.08 * (a - 60.0) - 0.01 * t as f64 + 0.3 * normal(rng);
                cells.push(MortalityCell {
                    age: a,
                    year: (y0 + 2 * t) as f64,
                    population: key.clone(),
                    deaths: y.exp() * 1e5,
                    exposure: 1e5,
                    log_rate: y,
                });
            }
        }
    }
    let ds = StackedDataset::new(schema, cells).unwrap();
    (ModelParams { kernel, noise: NoiseParams { sigma } }, ds)
}

/// Training rows and responses in dataset order with population indices
/// from the sorted population list.
pub fn rows_of(ds: &StackedDataset) -> (Vec<DesignRow>, DVector<f64>) {
    let pops: Vec<PopulationKey> = ds.populations();
    let rows = ds
        .cells()
        .iter()
        .map(|c| DesignRow { age: c.age, year: c.year, pop: pops.iter().position(|p| *p == c.population).unwrap() })
        .collect();
    (rows, DVector::from_iterator(ds.len(), ds.cells().iter().map(|c| c.log_rate)))
}

/// Random test cells, some beyond the training years.
pub fn random_test_rows(rng: &mut ChaCha8Rng, n_pop: usize, n: usize) -> Vec<DesignRow> {
    (0..n)
        .map(|_| DesignRow {
            age: rng.random_range(50.0..75.0),
            year: rng.random_range(1998.0..2020.0),
            pop: rng.random_range(0..n_pop),
        })
        .collect()
}

/// Composite Simpson rule on [a, b] with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}
