mod common;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_problem, random_test_rows, rows_of, Shape, SHAPES};
use mortality_gp::analytics::{adjust_trend, crps_gaussian, PopulationSelector};
use mortality_gp::datastore::{read_csv, write_csv, SchemaConfig, StackedDataset};
use mortality_gp::gp_core::{FittedModel, PredictionMode};
use mortality_gp::kernels::{assemble_covariance, KernelSpec, MaternParams};

fn shape(i: usize) -> Shape {
    SHAPES[i % SHAPES.len()]
}

fn schema_config(ds: &StackedDataset) -> SchemaConfig {
    let dims: Vec<&str> = ds.schema().dimensions().iter().map(String::as_str).collect();
    SchemaConfig::new(&dims)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn covariance_is_symmetric_psd(seed in any::<u64>(), s in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, ds) = random_problem(&mut rng, shape(s));
        let (rows, _) = rows_of(&ds);
        let k = assemble_covariance(&params.kernel, &rows).unwrap();
        prop_assert_eq!(&k, &k.transpose());
        let n = k.nrows() as f64;
        let min = SymmetricEigen::new(k.clone()).eigenvalues.min();
        prop_assert!(min >= -1e-8 * k.trace() / n, "min eigenvalue {}", min);
    }

    #[test]
    fn canonical_order_ignores_input_order(seed in any::<u64>(), s in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, ds) = random_problem(&mut rng, shape(s));
        let mut cells = ds.cells().to_vec();
        cells.shuffle(&mut rng);
        let shuffled = StackedDataset::new(ds.schema().clone(), cells).unwrap();
        prop_assert_eq!(shuffled, ds);
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>(), s in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, ds) = random_problem(&mut rng, shape(s));
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let (back, warnings) = read_csv(buf.as_slice(), &schema_config(&ds)).unwrap();
        prop_assert!(warnings.is_empty());
        prop_assert_eq!(back.len(), ds.len());
        for (a, b) in back.cells().iter().zip(ds.cells()) {
            prop_assert_eq!(a.population.clone(), b.population.clone());
            prop_assert_eq!((a.age, a.year, a.deaths, a.exposure), (b.age, b.year, b.deaths, b.exposure));
            prop_assert!((a.log_rate.exp() * a.exposure / a.deaths - 1.0).abs() < 1e-12);
        }
        let mut again = Vec::new();
        write_csv(&back, &mut again).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn crps_is_nonnegative(m in -20.0f64..20.0, v in 1e-6f64..25.0, y in -30.0f64..30.0) {
        prop_assert!(crps_gaussian(m, v, y).unwrap() >= 0.0);
    }

    #[test]
    fn posterior_variance_nonnegative_and_monotone(seed in any::<u64>(), s in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, ds) = random_problem(&mut rng, shape(s));
        let n_pop = ds.populations().len();
        let test = random_test_rows(&mut rng, n_pop, 5);
        let full = FittedModel::new(&ds, params.clone(), false).unwrap();
        // drop one training cell; every population keeps at least five
        let mut cells = ds.cells().to_vec();
        cells.remove(rng.random_range(0..cells.len()));
        let nested = StackedDataset::new(ds.schema().clone(), cells).unwrap();
        let reduced = FittedModel::new(&nested, params, false).unwrap();
        let big = full.predict(&test, PredictionMode::Latent).unwrap();
        let small = reduced.predict(&test, PredictionMode::Latent).unwrap();
        // the two designs get slightly different diagonal jitter; allow that much
        let (rows, _) = rows_of(&ds);
        let mut k = assemble_covariance(&full.params().kernel, &rows).unwrap();
        for (i, r) in rows.iter().enumerate() {
            k[(i, i)] += full.noise_variance(r.pop);
        }
        let jitter = full.relative_jitter().max(reduced.relative_jitter()) * k.trace() / k.nrows() as f64;
        for i in 0..test.len() {
            let (vb, vs) = (big.latent_variance(i), small.latent_variance(i));
            prop_assert!(vb >= 0.0);
            prop_assert!(vb <= vs + 10.0 * jitter, "cell {}: {} > {}", i, vb, vs);
        }
    }

    #[test]
    fn reciprocal_trend_adjustment_restores_predictions(seed in any::<u64>(), s in 0usize..4, scale in 0.2f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, ds) = random_problem(&mut rng, shape(s));
        let model = FittedModel::new(&ds, params, false).unwrap();
        let test = random_test_rows(&mut rng, model.populations().len(), 6);
        let label = model.population_label(rng.random_range(0..model.populations().len()));
        let there = adjust_trend(&model, &PopulationSelector::One(label.clone()), scale).unwrap();
        let back = adjust_trend(&there, &PopulationSelector::One(label), 1.0 / scale).unwrap();
        let a = model.predict(&test, PredictionMode::Observational).unwrap();
        let b = back.predict(&test, PredictionMode::Observational).unwrap();
        for i in 0..test.len() {
            prop_assert!((a.mean[i] - b.mean[i]).abs() <= 1e-10 * a.mean[i].abs().max(1.0));
            prop_assert!((a.variance(i) - b.variance(i)).abs() <= 1e-10 * a.variance(i));
        }
    }

    #[test]
    fn multilevel_rank_is_product_of_factor_ranks(seed in any::<u64>(), q1 in 1usize..=3, q2 in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let spec = KernelSpec::MultiLevelIcm {
            matern: MaternParams::new(10.0, 10.0).unwrap(),
            factor_loadings: vec![draw(3, q1), draw(2, q2)],
        };
        let b = spec.coregionalization();
        let eig = SymmetricEigen::new(b).eigenvalues;
        let tol = 1e-10 * eig.amax();
        prop_assert_eq!(eig.iter().filter(|&&e| e > tol).count(), q1 * q2);
    }
}

#[test]
fn unit_scale_adjustment_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (params, ds) = random_problem(&mut rng, Shape::Icm);
    let model = FittedModel::new(&ds, params, false).unwrap();
    let test = random_test_rows(&mut rng, model.populations().len(), 6);
    let adjusted = adjust_trend(&model, &PopulationSelector::All, 1.0).unwrap();
    let a = model.predict(&test, PredictionMode::Latent).unwrap();
    let b = adjusted.predict(&test, PredictionMode::Latent).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.cov, b.cov);
}
