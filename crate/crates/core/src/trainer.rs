//! STRESS minimization over the RBF weight matrix.
//!
//! Pairs are always taken from the strictly lower triangle: for `q < p` the
//! input dissimilarity is `d_n(x_p, x_q)` and the latent one `d_m(y_p, y_q)`,
//! both evaluated under their measure's configured direction. Asymmetric
//! measures therefore contribute `d(row, col)` with the higher index as `row`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{
    gaussian_kl_parts, Direction, DissimilarityMeasure, GaussianPoint, MeasureKind, PointSet,
    LOG_FLOOR,
};
use crate::error::{Error, Result};
use crate::rbf::RbfModel;

/// Latent variances are floored here.
pub const VARIANCE_FLOOR: f64 = 1e-15;

const MAX_HALVINGS: usize = 30;
const PATIENCE: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Deviation {
    /// `(d_n - d_m)^2`
    #[default]
    SquaredError,
    /// `d_n ln(d_n / d_m) - d_n + d_m`, the Bregman divergence of `x ln x`
    /// taken as `d_F(d_n || d_m)`.
    BregmanXLogX,
}

impl Deviation {
    pub fn pair(self, dn: f64, dm: f64) -> f64 {
        match self {
            Deviation::SquaredError => (dn - dm) * (dn - dm),
            Deviation::BregmanXLogX => {
                let a = dn.max(LOG_FLOOR);
                let b = dm.max(LOG_FLOOR);
                (a * (a / b).ln() - a + b).max(0.0)
            }
        }
    }

    /// Derivative of [`Deviation::pair`] with respect to `dm`.
    pub fn slope(self, dn: f64, dm: f64) -> f64 {
        match self {
            Deviation::SquaredError => -2.0 * (dn - dm),
            Deviation::BregmanXLogX => {
                if dm <= LOG_FLOOR {
                    0.0
                } else {
                    1.0 - dn.max(LOG_FLOOR) / dm
                }
            }
        }
    }
}

/// Caps the number of STRESS pairs for large training sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSampling {
    /// When `P` exceeds this, `limit (limit - 1) / 2` pairs are drawn
    /// uniformly at random instead of using all of them. `None` disables.
    pub full_pairs_up_to: Option<usize>,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            full_pairs_up_to: Some(1024),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressConfig {
    pub input_measure: DissimilarityMeasure,
    pub latent_measure: DissimilarityMeasure,
    pub deviation: Deviation,
    pub max_iters: usize,
    /// Multiplier on the first trial step `E / ||grad E||^2`.
    pub step_size: f64,
    /// Relative STRESS change regarded as stalled.
    pub tolerance: f64,
    pub seed: u64,
    pub pair_sampling: PairSampling,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            input_measure: DissimilarityMeasure::euclidean(),
            latent_measure: DissimilarityMeasure::euclidean(),
            deviation: Deviation::SquaredError,
            max_iters: 500,
            step_size: 1.0,
            tolerance: 1e-6,
            seed: 0,
            pair_sampling: PairSampling::default(),
        }
    }
}

impl StressConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step_size must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("tolerance must be positive"));
        }
        LatentKind::from_measure(&self.latent_measure)?;
        Ok(())
    }
}

/// STRESS between two dissimilarity matrices over the strictly lower triangle.
pub fn stress(target: &DMatrix<f64>, latent: &DMatrix<f64>, deviation: Deviation) -> Result<f64> {
    if !target.is_square() {
        return Err(Error::DimensionMismatch {
            expected: target.nrows(),
            found: target.ncols(),
        });
    }
    if target.shape() != latent.shape() {
        return Err(Error::DimensionMismatch {
            expected: target.nrows(),
            found: latent.nrows(),
        });
    }
    let mut total = 0.0;
    for p in 0..target.nrows() {
        for q in 0..p {
            let (dn, dm) = (target[(p, q)], latent[(p, q)]);
            if dn.is_nan() || dm.is_nan() {
                return Err(Error::invalid(p, format!("NaN dissimilarity at ({p}, {q})")));
            }
            total += deviation.pair(dn, dm);
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum LatentKind {
    Euclidean,
    SquaredEuclidean,
    GaussianKl(Direction),
}

impl LatentKind {
    fn from_measure(m: &DissimilarityMeasure) -> Result<Self> {
        match m.kind {
            MeasureKind::Euclidean => Ok(LatentKind::Euclidean),
            MeasureKind::SquaredEuclidean => Ok(LatentKind::SquaredEuclidean),
            MeasureKind::GaussianKlOneSided => Ok(LatentKind::GaussianKl(m.direction)),
            MeasureKind::Bregman(_) => Err(Error::config(
                "latent measure must be euclidean, squared euclidean or gaussian KL",
            )),
        }
    }
}

/// Everything needed to evaluate the Jacobian-propagated latent variances.
struct Uncertainty {
    locations: DMatrix<f64>,
    centers: DMatrix<f64>,
    slopes: DMatrix<f64>,
    input_variances: Vec<f64>,
}

impl Uncertainty {
    /// Per-point Jacobian rows `J_l` (`P x n`, one per latent dimension).
    fn jacobians(&self, weights: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        (0..weights.nrows())
            .map(|l| {
                let mut scaled = self.slopes.clone();
                for (k, mut col) in scaled.column_iter_mut().enumerate() {
                    col *= weights[(l, k)];
                }
                let a = scaled.column_sum();
                let mut jl = -(&scaled * &self.centers);
                for (p, mut row) in jl.row_iter_mut().enumerate() {
                    row += self.locations.row(p) * a[p];
                }
                jl
            })
            .collect()
    }

    /// Propagated variances and whether each one sits on the floor.
    fn variances(&self, jac: &[DMatrix<f64>]) -> (Vec<f64>, Vec<bool>) {
        let m = jac.len() as f64;
        let p = self.locations.nrows();
        let mut out = Vec::with_capacity(p);
        let mut floored = Vec::with_capacity(p);
        for i in 0..p {
            let fro: f64 = jac.iter().map(|j| j.row(i).norm_squared()).sum();
            let v = self.input_variances[i] * fro / m;
            floored.push(!(v > VARIANCE_FLOOR));
            out.push(v.max(VARIANCE_FLOOR));
        }
        (out, floored)
    }

    /// Adds `sum_p gs[p] * d s_p / d W` into `grad`.
    fn accumulate(&self, jac: &[DMatrix<f64>], gs: &[f64], grad: &mut DMatrix<f64>) {
        let m = jac.len() as f64;
        let p = self.locations.nrows();
        let omega: Vec<f64> = (0..p)
            .map(|i| gs[i] * 2.0 * self.input_variances[i] / m)
            .collect();
        let mut weighted = self.slopes.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= omega[i];
        }
        for (l, jl) in jac.iter().enumerate() {
            let v = jl * self.centers.transpose();
            let u = nalgebra::DVector::from_fn(p, |i, _| jl.row(i).dot(&self.locations.row(i)));
            let direct = weighted.transpose() * u;
            for k in 0..grad.ncols() {
                grad[(l, k)] += direct[k] - weighted.column(k).dot(&v.column(k));
            }
        }
    }
}

/// STRESS of an RBF model as a function of its weight matrix, with fixed
/// centers and widths.
pub struct StressObjective {
    phi: DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
    targets: Vec<f64>,
    deviation: Deviation,
    latent: LatentKind,
    uncertainty: Option<Uncertainty>,
}

struct Evaluation {
    stress: f64,
    y: DMatrix<f64>,
    variances: Option<(Vec<f64>, Vec<bool>)>,
    jacobians: Vec<DMatrix<f64>>,
}

impl StressObjective {
    pub fn new(inputs: &PointSet, cfg: &StressConfig, model: &RbfModel) -> Result<Self> {
        cfg.validate()?;
        let p = inputs.len();
        if p < 3 {
            return Err(Error::invalid(0, format!("training needs at least 3 points, got {p}")));
        }
        let n = inputs.dimension()?;
        if n != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                found: n,
            });
        }
        let latent = LatentKind::from_measure(&cfg.latent_measure)?;
        let pairs = select_pairs(p, &cfg.pair_sampling, cfg.seed);
        let targets = pairs
            .iter()
            .map(|&(a, b)| inputs.dissimilarity(a, b, &cfg.input_measure))
            .collect::<Result<Vec<_>>>()?;
        let locations = inputs.location_matrix()?;
        let phi = model.activations(&locations)?;
        let uncertainty = match latent {
            LatentKind::GaussianKl(_) => {
                let input_variances = inputs.variances().ok_or_else(|| {
                    Error::config("gaussian KL latent measure needs Gaussian inputs")
                })?;
                Some(Uncertainty {
                    slopes: model.slopes(&locations),
                    centers: model.centers().clone(),
                    locations,
                    input_variances,
                })
            }
            _ => None,
        };
        Ok(Self {
            phi,
            pairs,
            targets,
            deviation: cfg.deviation,
            latent,
            uncertainty,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Input-space dissimilarity of each STRESS pair, in pair order.
    pub fn pairs(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.pairs.iter().copied().zip(self.targets.iter().copied())
    }

    fn evaluate(&self, weights: &DMatrix<f64>) -> Evaluation {
        let y = &self.phi * weights.transpose();
        let (variances, jacobians) = match &self.uncertainty {
            Some(u) => {
                let jac = u.jacobians(weights);
                (Some(u.variances(&jac)), jac)
            }
            None => (None, Vec::new()),
        };
        let s = variances.as_ref().map(|(v, _)| v.as_slice());
        let stress = self
            .pairs
            .iter()
            .zip(&self.targets)
            .map(|(&(a, b), &dn)| self.deviation.pair(dn, self.latent_value(&y, s, a, b)))
            .sum();
        Evaluation {
            stress,
            y,
            variances,
            jacobians,
        }
    }

    fn latent_value(&self, y: &DMatrix<f64>, s: Option<&[f64]>, a: usize, b: usize) -> f64 {
        let sq = (y.row(a) - y.row(b)).norm_squared();
        match self.latent {
            LatentKind::Euclidean => sq.sqrt(),
            LatentKind::SquaredEuclidean => sq,
            LatentKind::GaussianKl(dir) => {
                let s = s.expect("variances present for KL latent");
                let m = y.ncols() as f64;
                let ab = || gaussian_kl_parts(m, sq, s[a], s[b]);
                let ba = || gaussian_kl_parts(m, sq, s[b], s[a]);
                match dir {
                    Direction::PtoQ => ab(),
                    Direction::QtoP => ba(),
                    Direction::Symmetric => 0.5 * (ab() + ba()),
                }
            }
        }
    }

    /// STRESS at `weights`.
    pub fn value(&self, weights: &DMatrix<f64>) -> f64 {
        self.evaluate(weights).stress
    }

    /// STRESS and its analytic gradient with respect to the weights.
    pub fn value_and_gradient(&self, weights: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let ev = self.evaluate(weights);
        let (p, m) = (ev.y.nrows(), ev.y.ncols());
        let mut gy = DMatrix::<f64>::zeros(p, m);
        let mut gs = vec![0.0; p];
        let s = ev.variances.as_ref().map(|(v, _)| v.as_slice());
        let mf = m as f64;
        for (&(a, b), &dn) in self.pairs.iter().zip(&self.targets) {
            let dm = self.latent_value(&ev.y, s, a, b);
            let slope = self.deviation.slope(dn, dm);
            if slope == 0.0 {
                continue;
            }
            let diff = ev.y.row(a) - ev.y.row(b);
            match self.latent {
                LatentKind::Euclidean => {
                    if dm > 0.0 {
                        let g = diff * (slope / dm);
                        { let mut r = gy.row_mut(a); r += &g; }
                        { let mut r = gy.row_mut(b); r -= &g; }
                    }
                }
                LatentKind::SquaredEuclidean => {
                    let g = diff * (2.0 * slope);
                    { let mut r = gy.row_mut(a); r += &g; }
                    { let mut r = gy.row_mut(b); r -= &g; }
                }
                LatentKind::GaussianKl(dir) => {
                    let s = s.unwrap();
                    let sq = diff.norm_squared();
                    // (first, second, weight) terms of KL(first || second).
                    let terms: &[(usize, usize, f64)] = match dir {
                        Direction::PtoQ => &[(a, b, 1.0)],
                        Direction::QtoP => &[(b, a, 1.0)],
                        Direction::Symmetric => &[(a, b, 0.5), (b, a, 0.5)],
                    };
                    for &(f, g, w) in terms {
                        let c = slope * w;
                        let (sf, sg) = (s[f], s[g]);
                        let dy = (ev.y.row(f) - ev.y.row(g)) * (c / sg);
                        { let mut r = gy.row_mut(f); r += &dy; }
                        { let mut r = gy.row_mut(g); r -= &dy; }
                        gs[f] += c * 0.5 * (mf / sg - mf / sf);
                        gs[g] += c * 0.5 * (-mf * sf / (sg * sg) - sq / (sg * sg) + mf / sg);
                    }
                }
            }
        }
        let mut grad = gy.transpose() * &self.phi;
        if let (Some(u), Some((_, floored))) = (&self.uncertainty, &ev.variances) {
            for (g, &f) in gs.iter_mut().zip(floored) {
                if f {
                    *g = 0.0;
                }
            }
            u.accumulate(&ev.jacobians, &gs, &mut grad);
        }
        (ev.stress, grad)
    }
}

fn select_pairs(p: usize, sampling: &PairSampling, seed: u64) -> Vec<(usize, usize)> {
    match sampling.full_pairs_up_to {
        Some(limit) if p > limit && limit >= 2 => {
            let count = limit * (limit - 1) / 2;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a12);
            (0..count)
                .map(|_| {
                    let a = rng.random_range(0..p);
                    let mut b = rng.random_range(0..p - 1);
                    if b >= a {
                        b += 1;
                    }
                    (a.max(b), a.min(b))
                })
                .collect()
        }
        _ => (1..p).flat_map(|a| (0..a).map(move |b| (a, b))).collect(),
    }
}

/// A fitted mapping together with the training set's latent image.
#[derive(Clone, Debug)]
pub struct TrainedProjection {
    pub model: RbfModel,
    /// `P x m`
    pub latent_points: DMatrix<f64>,
    pub latent_variances: Option<Vec<f64>>,
    /// STRESS before training followed by one entry per accepted step.
    pub stress_history: Vec<f64>,
}

impl TrainedProjection {
    pub fn initial_stress(&self) -> f64 {
        self.stress_history[0]
    }

    pub fn final_stress(&self) -> f64 {
        *self.stress_history.last().unwrap()
    }

    /// Two-column `iteration,stress` CSV.
    pub fn stress_history_csv(&self) -> String {
        let mut out = String::from("iteration,stress\n");
        for (i, s) in self.stress_history.iter().enumerate() {
            out.push_str(&format!("{i},{s:?}\n"));
        }
        out
    }
}

/// Gradient descent with backtracking on the weight matrix.
///
/// The first trial step is `step_size * E / ||g||^2`; after each accepted
/// step the next trial doubles the accepted one. A trial is halved at most
/// 30 times. Stops at `max_iters`, at a zero gradient, when no descent step
/// exists, or after 5 consecutive relative decreases below `tolerance`.
pub fn train(inputs: &PointSet, cfg: &StressConfig, model_init: RbfModel) -> Result<TrainedProjection> {
    let objective = StressObjective::new(inputs, cfg, &model_init)?;
    let mut weights = model_init.weights().clone();
    let (mut current, mut grad) = objective.value_and_gradient(&weights);
    if !current.is_finite() {
        return Err(Error::Numerical(format!("initial stress is {current}")));
    }
    let mut history = vec![current];
    let mut step = f64::NAN;
    let mut stalled = 0;

    for iter in 0..cfg.max_iters {
        let g2 = grad.norm_squared();
        if current == 0.0 || g2 == 0.0 || !g2.is_finite() {
            break;
        }
        if iter == 0 {
            step = cfg.step_size * current / g2;
        }
        let mut trial = step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &weights - &grad * trial;
            let value = objective.value(&candidate);
            if value.is_finite() && value < current {
                accepted = Some((candidate, value));
                break;
            }
            trial *= 0.5;
        }
        let Some((candidate, value)) = accepted else {
            if iter == 0 {
                return Err(Error::NonConvergence { stress: current });
            }
            break;
        };
        let relative = (current - value) / current;
        weights = candidate;
        current = value;
        history.push(current);
        step = trial * 2.0;
        if relative < cfg.tolerance {
            stalled += 1;
            if stalled >= PATIENCE {
                break;
            }
        } else {
            stalled = 0;
        }
        grad = objective.value_and_gradient(&weights).1;
    }

    let model = model_init.with_weights(weights)?;
    let projection = project(&model, inputs)?;
    Ok(TrainedProjection {
        model,
        latent_points: projection.points,
        latent_variances: projection.variances,
        stress_history: history,
    })
}

/// First-order latent variance: `variance * ||J||_F^2 / m` with `J` the
/// Jacobian of the mapping at the mean.
pub fn propagate_uncertainty(model: &RbfModel, g: &GaussianPoint) -> Result<f64> {
    let jac = model.jacobian(g.mean())?;
    let fro = jac.norm_squared();
    if !fro.is_finite() {
        return Err(Error::Numerical("non-finite Jacobian; basis width underflow".into()));
    }
    Ok((g.variance() * fro / model.latent_dim() as f64).max(VARIANCE_FLOOR))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `P x m`
    pub points: DMatrix<f64>,
    pub variances: Option<Vec<f64>>,
}

/// Maps new observations through a trained model without modifying it.
pub fn project(model: &RbfModel, inputs: &PointSet) -> Result<Projection> {
    let n = inputs.dimension()?;
    if n != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: n,
        });
    }
    let points = model.forward_batch(&inputs.location_matrix()?)?;
    let variances = match inputs {
        PointSet::Vectors(_) => None,
        PointSet::Gaussians(g) => Some(
            g.iter()
                .map(|gp| propagate_uncertainty(model, gp))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(Projection { points, variances })
}
