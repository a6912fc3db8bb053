//! Simulation of stacked mortality data from a known model, used for
//! fixtures and recovery experiments.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datastore::{DesignRow, FactorSchema, MortalityCell, PopulationKey, StackedDataset};
use crate::error::Result;
use crate::kernels::{assemble_covariance, KernelSpec, MaternParams};
use crate::gp_core::{ModelParams, NoiseParams};
use crate::linalg::cholesky_with_jitter;

/// Trend written around a centre point:
/// `level + age_slope·(a−a₀) + age_curvature·(a−a₀)² + year_slope·(t−t₀)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentredTrend {
    pub level: f64,
    pub age_slope: f64,
    pub age_curvature: f64,
    pub year_slope: f64,
    pub age_centre: f64,
    pub year_centre: f64,
}

impl CentredTrend {
    pub fn eval(&self, age: f64, year: f64) -> f64 {
        let a = age - self.age_centre;
        self.level + self.age_slope * a + self.age_curvature * a * a + self.year_slope * (year - self.year_centre)
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub schema: FactorSchema,
    pub ages: Vec<f64>,
    /// Inclusive year range per population, in flat-index order of `populations`.
    pub years: Vec<(i32, i32)>,
    pub populations: Vec<PopulationKey>,
    pub params: ModelParams,
    pub trends: Vec<CentredTrend>,
    pub exposure: f64,
}

impl Simulation {
    /// Draws one dataset: trend + latent GP + Gaussian noise on the log scale.
    pub fn simulate(&self, seed: u64) -> Result<StackedDataset> {
        let mut rows = Vec::new();
        for (l, &(y0, y1)) in self.years.iter().enumerate() {
            for year in y0..=y1 {
                for &age in &self.ages {
                    rows.push(DesignRow { age, year: year as f64, pop: l });
                }
            }
        }
        let latent = draw_latent(&self.params.kernel, &rows, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f40_15e0);
        let cells = rows
            .iter()
            .zip(latent.iter())
            .map(|(r, f)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                let y = self.trends[r.pop].eval(r.age, r.year) + f + self.params.noise.sigma[r.pop] * e;
                let deaths = y.exp() * self.exposure;
                MortalityCell {
                    age: r.age,
                    year: r.year,
                    population: self.populations[r.pop].clone(),
                    deaths,
                    exposure: self.exposure,
                    log_rate: (deaths / self.exposure).ln(),
                }
            })
            .collect();
        StackedDataset::new(self.schema.clone(), cells)
    }
}

/// Zero-mean draw of the latent surface at `rows`.
pub fn draw_latent(kernel: &KernelSpec, rows: &[DesignRow], seed: u64) -> Result<DVector<f64>> {
    let c = assemble_covariance(kernel, rows)?;
    let l = cholesky_with_jitter(&c)?.l;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_iterator(rows.len(), (0..rows.len()).map(|_| StandardNormal.sample(&mut rng)));
    Ok(l * z)
}

/// Five-year age-group midpoints 52, 57, ..., 82.
pub fn default_ages() -> Vec<f64> {
    (0..7).map(|i| 52.0 + 5.0 * i as f64).collect()
}

/// Cancer-like trends: rates rising steeply with age and slowly improving.
pub fn default_trend(l: usize) -> CentredTrend {
    CentredTrend {
        level: -7.0 + 0.4 * (l % 3) as f64 - 0.3 * (l / 3) as f64,
        age_slope: 0.08 + 0.005 * (l % 2) as f64,
        age_curvature: -0.0004,
        year_slope: -0.012 - 0.004 * (l % 4) as f64,
        age_centre: 67.0,
        year_centre: 2007.0,
    }
}

/// Loadings of the five-population rank-2 reference ICM.
#[allow(clippy::approx_constant)]
pub fn reference_icm_loadings() -> DMatrix<f64> {
    DMatrix::from_row_slice(5, 2, &[
        0.625, 0.000, //
        0.495, 0.070, //
        0.528, 0.153, //
        0.410, 0.183, //
        0.510, 0.318,
    ])
}

/// Five populations, ICM with Q = 2, θ = (10, 12), σ_l in [0.02, 0.08],
/// ages 52..82 by 5 and years 1998..=2016.
pub fn reference_icm(noise_scale_last: f64) -> Result<Simulation> {
    let names = ["C1", "C2", "C3", "C4", "C5"];
    let schema = FactorSchema::single("cause", &names)?;
    let mut sigma = vec![0.02, 0.035, 0.05, 0.065, 0.08];
    sigma[4] *= noise_scale_last;
    Ok(Simulation {
        populations: (0..5).map(|l| PopulationKey(vec![l])).collect(),
        schema,
        ages: default_ages(),
        years: vec![(1998, 2016); 5],
        params: ModelParams {
            kernel: KernelSpec::Icm { matern: MaternParams::new(10.0, 12.0)?, loadings: reference_icm_loadings() },
            noise: NoiseParams { sigma },
        },
        trends: (0..5).map(default_trend).collect(),
        exposure: 1e6,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_fixture_shape() {
        let sim = reference_icm(1.0).unwrap();
        let ds = sim.simulate(1).unwrap();
        assert_eq!(ds.len(), 5 * 7 * 19);
        assert_eq!(ds.populations().len(), 5);
        for c in ds.cells() {
            assert!(((c.log_rate.exp() * c.exposure) - c.deaths).abs() <= 1e-12 * c.deaths);
        }
        assert_eq!(sim.simulate(1).unwrap(), ds);
    }
}
