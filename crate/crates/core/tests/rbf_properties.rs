use nalgebra::DMatrix;
use neuroscale::{BasisKind, RbfModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_model(rng: &mut ChaCha8Rng, basis: BasisKind) -> RbfModel {
    let k = rng.random_range(1..8);
    let n = rng.random_range(1..5);
    let m = rng.random_range(1..4);
    let centers = DMatrix::from_fn(k, n, |_, _| StandardNormal.sample(rng));
    let weights = DMatrix::from_fn(m, k, |_, _| StandardNormal.sample(rng));
    let widths = (0..k).map(|_| rng.random_range(0.3..3.0)).collect();
    RbfModel::new(centers, widths, weights, basis).unwrap()
}

fn point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); 2.0 * z }).collect()
}

/// Direct double loop over latent outputs and centers.
fn forward_oracle(model: &RbfModel, x: &[f64]) -> Vec<f64> {
    let c = model.centers();
    (0..model.latent_dim())
        .map(|l| {
            let mut y = 0.0;
            for k in 0..model.n_centers() {
                let mut r2 = 0.0;
                for i in 0..model.input_dim() {
                    r2 += (x[i] - c[(k, i)]).powi(2);
                }
                let w = model.widths()[k];
                let phi = match model.basis() {
                    BasisKind::Gaussian => (-r2 / (2.0 * w * w)).exp(),
                    BasisKind::ThinPlateSpline => {
                        if r2 == 0.0 {
                            0.0
                        } else {
                            let s = r2 / (w * w);
                            0.5 * s * s.ln()
                        }
                    }
                };
                y += model.weights()[(l, k)] * phi;
            }
            y
        })
        .collect()
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for basis in [BasisKind::Gaussian, BasisKind::ThinPlateSpline] {
        for _ in 0..200 {
            let model = random_model(&mut rng, basis);
            let x = point(&mut rng, model.input_dim());
            let got = model.forward(&x).unwrap();
            for (a, b) in got.iter().zip(forward_oracle(&model, &x)) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn latent_distance_identity_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for i in 0..1000 {
        let basis = if i % 2 == 0 { BasisKind::Gaussian } else { BasisKind::ThinPlateSpline };
        let model = random_model(&mut rng, basis);
        let xp = point(&mut rng, model.input_dim());
        let xq = point(&mut rng, model.input_dim());
        let yp = model.forward(&xp).unwrap();
        let yq = model.forward(&xq).unwrap();
        let direct: f64 = yp.iter().zip(&yq).map(|(a, b)| (a - b) * (a - b)).sum();
        let expanded = model.latent_sq_distance(&xp, &xq).unwrap();
        assert!((expanded - direct).abs() <= 1e-10 * direct.max(1e-300) + 1e-14, "{expanded} vs {direct}");
        assert_eq!(model.latent_sq_distance(&xp, &xp).unwrap(), 0.0);
    }
}

#[test]
fn activations_rows_match_pointwise_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = random_model(&mut rng, BasisKind::Gaussian);
    let n = model.input_dim();
    let x = DMatrix::from_fn(17, n, |_, _| StandardNormal.sample(&mut rng));
    let phi = model.activations(&x).unwrap();
    let y = model.forward_batch(&x).unwrap();
    for p in 0..17 {
        let row: Vec<f64> = x.row(p).iter().copied().collect();
        assert_eq!(phi.row(p).iter().copied().collect::<Vec<_>>(), model.basis_row(&row).unwrap());
        let f = model.forward(&row).unwrap();
        for l in 0..model.latent_dim() {
            assert!((y[(p, l)] - f[l]).abs() <= 1e-12 * (1.0 + f[l].abs()));
        }
    }
}

#[test]
fn serialization_round_trip_preserves_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for basis in [BasisKind::Gaussian, BasisKind::ThinPlateSpline] {
        let model = random_model(&mut rng, basis);
        let back = RbfModel::from_json(&model.to_json().unwrap()).unwrap();
        for _ in 0..20 {
            let x = point(&mut rng, model.input_dim());
            let a = model.forward(&x).unwrap();
            let b = back.forward(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }
}

proptest! {
    #[test]
    fn forward_is_linear_in_weights(seed in any::<u64>(), alpha in -8.0..8.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, BasisKind::Gaussian);
        let x = point(&mut rng, model.input_dim());
        let scaled = model.with_weights(model.weights() * alpha).unwrap();
        let base = model.forward(&x).unwrap();
        let got = scaled.forward(&x).unwrap();
        for (g, b) in got.iter().zip(&base) {
            prop_assert!((g - alpha * b).abs() <= 1e-12 * (1.0 + (alpha * b).abs()));
        }
    }

    #[test]
    fn permuting_centers_with_weights_keeps_forward(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, BasisKind::Gaussian);
        let k = model.n_centers();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let centers = model.centers().select_rows(&perm);
        let weights = model.weights().select_columns(&perm);
        let widths = perm.iter().map(|&i| model.widths()[i]).collect();
        let permuted = RbfModel::new(centers, widths, weights, model.basis()).unwrap();
        let x = point(&mut rng, model.input_dim());
        let a = model.forward(&x).unwrap();
        let b = permuted.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }
}
