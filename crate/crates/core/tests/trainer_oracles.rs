use nalgebra::{DMatrix, SymmetricEigen};
use neuroscale::{
    pairwise_dissimilarity, project, propagate_uncertainty, stress, train, BasisKind, Deviation,
    DissimilarityMeasure, GaussianPoint, ModelInit, PointSet, RbfModel, StressConfig,
    StressObjective, TrainedProjection, WeightInit,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn random_model(rng: &mut ChaCha8Rng, k: usize, n: usize, m: usize) -> RbfModel {
    let widths = (0..k).map(|_| rng.random_range(0.8..2.0)).collect();
    RbfModel::new(gaussian_matrix(rng, k, n), widths, gaussian_matrix(rng, m, k), BasisKind::Gaussian).unwrap()
}

fn assert_monotone(run: &TrainedProjection) {
    for w in run.stress_history.windows(2) {
        assert!(w[1] <= w[0], "stress increased: {} -> {}", w[0], w[1]);
    }
}

fn check_gradient(objective: &StressObjective, weights: &DMatrix<f64>) {
    let (_, grad) = objective.value_and_gradient(weights);
    let scale = grad.amax();
    assert!(scale > 0.0);
    for idx in 0..weights.len() {
        let h = 1e-6 * (1.0 + weights[idx].abs());
        let mut up = weights.clone();
        up[idx] += h;
        let mut down = weights.clone();
        down[idx] -= h;
        let fd = (objective.value(&up) - objective.value(&down)) / (2.0 * h);
        assert!(
            (fd - grad[idx]).abs() <= 1e-5 * scale,
            "entry {idx}: analytic {} vs fd {fd}",
            grad[idx]
        );
    }
}

#[test]
fn weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..6 {
        let p = rng.random_range(3..=10);
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=4);
        let m = 1 + trial % 3;
        let model = random_model(&mut rng, k, n, m);
        let inputs = PointSet::Vectors(rows(&gaussian_matrix(&mut rng, p, n)));
        for deviation in [Deviation::SquaredError, Deviation::BregmanXLogX] {
            for measure in [DissimilarityMeasure::euclidean(), DissimilarityMeasure::squared_euclidean()] {
                let cfg = StressConfig {
                    input_measure: measure,
                    latent_measure: measure,
                    deviation,
                    ..StressConfig::default()
                };
                let objective = StressObjective::new(&inputs, &cfg, &model).unwrap();
                check_gradient(&objective, model.weights());
            }
        }
    }
}

#[test]
fn gaussian_kl_gradient_includes_variance_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..6 {
        let p = rng.random_range(3..=10);
        // A single center makes latent KL invariant to the weight scale, so the gradient vanishes.
        let k = rng.random_range(2..=5);
        let n = rng.random_range(1..=3);
        let m = 1 + trial % 3;
        let model = random_model(&mut rng, k, n, m);
        let inputs = PointSet::Gaussians(
            (0..p)
                .map(|_| {
                    let mean = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    GaussianPoint::new(mean, rng.random_range(0.2..1.5)).unwrap()
                })
                .collect(),
        );
        for deviation in [Deviation::SquaredError, Deviation::BregmanXLogX] {
            let cfg = StressConfig {
                input_measure: DissimilarityMeasure::gaussian_kl(),
                latent_measure: DissimilarityMeasure::gaussian_kl(),
                deviation,
                ..StressConfig::default()
            };
            let objective = StressObjective::new(&inputs, &cfg, &model).unwrap();
            check_gradient(&objective, model.weights());
        }
    }
}

/// Classical MDS: top eigenvectors of the double-centered squared distances.
fn classical_mds(points: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let p = points.nrows();
    let mut d2 = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            d2[(i, j)] = (points.row(i) - points.row(j)).norm_squared();
        }
    }
    let j = DMatrix::identity(p, p) - DMatrix::from_element(p, p, 1.0 / p as f64);
    let b = -0.5 * &j * d2 * &j;
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(p, m, |r, c| eig.eigenvectors[(r, order[c])] * eig.eigenvalues[order[c]].max(0.0).sqrt())
}

fn distances(points: &DMatrix<f64>) -> DMatrix<f64> {
    pairwise_dissimilarity(&PointSet::Vectors(rows(points)), &DissimilarityMeasure::euclidean()).unwrap()
}

#[test]
fn beats_classical_mds_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = gaussian_matrix(&mut rng, 50, 10);
    let target = distances(&x);
    let mds_stress = stress(&target, &distances(&classical_mds(&x, 2)), Deviation::SquaredError).unwrap();

    let model = RbfModel::initialize(&x, 2, &ModelInit::default()).unwrap();
    let run = train(&PointSet::Vectors(rows(&x)), &StressConfig::default(), model).unwrap();
    assert_monotone(&run);
    assert!(
        run.final_stress() <= mds_stress,
        "trained {} vs classical MDS {mds_stress}",
        run.final_stress()
    );
}

#[test]
fn recovers_exact_planar_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let plane = gaussian_matrix(&mut rng, 40, 2);
    let lift = gaussian_matrix(&mut rng, 2, 6);
    let offset = gaussian_matrix(&mut rng, 1, 6);
    let x = DMatrix::from_fn(40, 6, |r, c| (plane.row(r) * &lift)[c] + offset[c]);

    // The MDS oracle confirms a zero-strain 2-D configuration exists.
    let target = distances(&x);
    let oracle = stress(&target, &distances(&classical_mds(&x, 2)), Deviation::SquaredError).unwrap();
    assert!(oracle < 1e-18 * target.norm_squared().max(1.0), "{oracle}");

    let init = ModelInit {
        weights: WeightInit::Random { scale: 0.1 },
        seed: 3,
        ..ModelInit::default()
    };
    let model = RbfModel::initialize(&x, 2, &init).unwrap();
    let cfg = StressConfig {
        max_iters: 50_000,
        tolerance: 1e-12,
        ..StressConfig::default()
    };
    let run = train(&PointSet::Vectors(rows(&x)), &cfg, model).unwrap();
    assert_monotone(&run);
    assert!(
        run.final_stress() <= 1e-3 * run.initial_stress(),
        "final {} initial {}",
        run.final_stress(),
        run.initial_stress()
    );
}

#[test]
fn stationary_start_leaves_weights_unchanged() {
    let inputs = PointSet::Vectors(vec![vec![1.0, 2.0]; 4]);
    let model = RbfModel::with_shared_width(
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]),
        1.0,
        DMatrix::zeros(2, 2),
        BasisKind::Gaussian,
    )
    .unwrap();
    let run = train(&inputs, &StressConfig::default(), model.clone()).unwrap();
    assert_eq!(run.model.weights(), model.weights());
    assert_eq!(run.stress_history, vec![0.0]);
}

#[test]
fn trained_points_are_forward_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = gaussian_matrix(&mut rng, 30, 4);
    let inputs = PointSet::Vectors(rows(&x));
    let model = RbfModel::initialize(&x, 3, &ModelInit::default()).unwrap();
    let cfg = StressConfig {
        deviation: Deviation::BregmanXLogX,
        max_iters: 100,
        ..StressConfig::default()
    };
    let run = train(&inputs, &cfg, model).unwrap();
    assert_monotone(&run);
    for p in 0..30 {
        let y = run.model.forward(&rows(&x)[p]).unwrap();
        for l in 0..3 {
            assert!((y[l] - run.latent_points[(p, l)]).abs() <= 1e-10);
        }
    }
    let again = project(&run.model, &inputs).unwrap();
    assert_eq!(again.points, run.latent_points);
    assert_eq!(project(&run.model, &inputs).unwrap(), again);
}

#[test]
fn uncertain_inputs_train_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = gaussian_matrix(&mut rng, 25, 5);
    let inputs = PointSet::Gaussians(
        rows(&x)
            .into_iter()
            .map(|r| GaussianPoint::new(r, rng.random_range(0.1..1.0)).unwrap())
            .collect(),
    );
    let model = RbfModel::initialize(&x, 2, &ModelInit::default()).unwrap();
    let cfg = StressConfig {
        input_measure: DissimilarityMeasure::gaussian_kl(),
        latent_measure: DissimilarityMeasure::gaussian_kl(),
        max_iters: 100,
        ..StressConfig::default()
    };
    let run = train(&inputs, &cfg, model).unwrap();
    assert_monotone(&run);
    assert!(run.final_stress() < run.initial_stress());
    let variances = run.latent_variances.as_ref().unwrap();
    assert_eq!(variances.len(), 25);
    assert!(variances.iter().all(|v| *v > 0.0));
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (k, n, m) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..4));
        let model = random_model(&mut rng, k, n, m);
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let jac = model.jacobian(&x).unwrap();
        let h = 1e-5;
        for j in 0..n {
            let mut up = x.clone();
            up[j] += h;
            let mut down = x.clone();
            down[j] -= h;
            let fu = model.forward(&up).unwrap();
            let fd = model.forward(&down).unwrap();
            for l in 0..m {
                let est = (fu[l] - fd[l]) / (2.0 * h);
                assert!(
                    (est - jac[(l, j)]).abs() <= 1e-6 * jac.amax().max(1e-3),
                    "({l},{j}) analytic {} fd {est}",
                    jac[(l, j)]
                );
            }
        }
        let g = GaussianPoint::new(x.clone(), 0.7).unwrap();
        let g2 = GaussianPoint::new(x, 1.4).unwrap();
        let v = propagate_uncertainty(&model, &g).unwrap();
        assert!((v - jac.norm_squared() * 0.7 / m as f64).abs() <= 1e-12 * v.max(1.0));
        assert_eq!(propagate_uncertainty(&model, &g2).unwrap(), 2.0 * v);
    }
}

#[test]
fn euclidean_stress_ignores_rigid_motions() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = gaussian_matrix(&mut rng, 12, 3);
    let y = gaussian_matrix(&mut rng, 12, 2);
    let target = distances(&x);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let rot = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
    let moved = DMatrix::from_fn(12, 2, |r, c| (y.row(r) * &rot)[c] + [3.0, -7.5][c]);
    let a = stress(&target, &distances(&y), Deviation::SquaredError).unwrap();
    let b = stress(&target, &distances(&moved), Deviation::SquaredError).unwrap();
    assert!((a - b).abs() <= 1e-10 * a.max(1.0));
}
