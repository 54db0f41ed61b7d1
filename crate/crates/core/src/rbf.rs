//! Radial basis function network mapping observation space to a 1-3 D latent space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LATENT_DIM: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    /// `exp(-r^2 / (2 w^2))`
    #[default]
    Gaussian,
    /// `(r/w)^2 ln(r/w)`, zero at the center.
    ThinPlateSpline,
}

impl BasisKind {
    /// Basis value from the squared radius.
    #[inline]
    pub fn value(self, r2: f64, width: f64) -> f64 {
        let w2 = width * width;
        match self {
            BasisKind::Gaussian => (-r2 / (2.0 * w2)).exp(),
            BasisKind::ThinPlateSpline => {
                if r2 == 0.0 {
                    0.0
                } else {
                    let s = r2 / w2;
                    0.5 * s * s.ln()
                }
            }
        }
    }

    /// `g` such that `d phi / d x = g * (x - center)`.
    #[inline]
    pub fn slope(self, r2: f64, width: f64) -> f64 {
        let w2 = width * width;
        match self {
            BasisKind::Gaussian => -(-r2 / (2.0 * w2)).exp() / w2,
            BasisKind::ThinPlateSpline => {
                if r2 == 0.0 {
                    0.0
                } else {
                    ((r2 / w2).ln() + 1.0) / w2
                }
            }
        }
    }
}

/// Centers `K x n`, one width per center, weights `m x K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct RbfModel {
    centers: DMatrix<f64>,
    widths: Vec<f64>,
    weights: DMatrix<f64>,
    basis: BasisKind,
}

impl RbfModel {
    pub fn new(
        centers: DMatrix<f64>,
        widths: Vec<f64>,
        weights: DMatrix<f64>,
        basis: BasisKind,
    ) -> Result<Self> {
        let k = centers.nrows();
        if k == 0 || centers.ncols() == 0 {
            return Err(Error::config("model needs at least one center and one input dimension"));
        }
        if widths.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: widths.len(),
            });
        }
        if let Some(i) = widths.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::invalid(i, format!("width must be positive, got {}", widths[i])));
        }
        if weights.ncols() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: weights.ncols(),
            });
        }
        if !(1..=MAX_LATENT_DIM).contains(&weights.nrows()) {
            return Err(Error::config(format!(
                "latent dimension must be 1, 2 or 3, got {}",
                weights.nrows()
            )));
        }
        if centers.iter().chain(weights.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(Self {
            centers,
            widths,
            weights,
            basis,
        })
    }

    /// Same width for every center.
    pub fn with_shared_width(
        centers: DMatrix<f64>,
        width: f64,
        weights: DMatrix<f64>,
        basis: BasisKind,
    ) -> Result<Self> {
        let k = centers.nrows();
        Self::new(centers, vec![width; k], weights, basis)
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn basis(&self) -> BasisKind {
        self.basis
    }

    pub fn n_centers(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Copy of the model with a new weight matrix of the same shape.
    pub fn with_weights(&self, weights: DMatrix<f64>) -> Result<Self> {
        if weights.shape() != self.weights.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                found: weights.len(),
            });
        }
        Self::new(self.centers.clone(), self.widths.clone(), weights, self.basis)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn sq_radius(&self, x: &[f64], k: usize) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let d = v - self.centers[(k, i)];
                d * d
            })
            .sum()
    }

    /// `phi_k(||x - mu_k||)` for every center.
    pub fn basis_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok((0..self.n_centers())
            .map(|k| self.basis.value(self.sq_radius(x, k), self.widths[k]))
            .collect())
    }

    /// `y_l = sum_k w_lk phi_k(||x - mu_k||)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let phi = self.basis_row(x)?;
        Ok((0..self.latent_dim())
            .map(|l| phi.iter().enumerate().map(|(k, f)| self.weights[(l, k)] * f).sum())
            .collect())
    }

    /// Squared latent distance via the expansion over basis differences.
    pub fn latent_sq_distance(&self, x_p: &[f64], x_q: &[f64]) -> Result<f64> {
        let phi_p = self.basis_row(x_p)?;
        let phi_q = self.basis_row(x_q)?;
        Ok((0..self.latent_dim())
            .map(|l| {
                let s: f64 = (0..self.n_centers())
                    .map(|k| self.weights[(l, k)] * (phi_q[k] - phi_p[k]))
                    .sum();
                s * s
            })
            .sum())
    }

    /// Design matrix `Phi[p][k]` for a `P x n` batch.
    pub fn activations(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let n = self.input_dim();
        let kc = self.n_centers();
        let mut out = DMatrix::zeros(x.nrows(), kc);
        let mut row = vec![0.0; n];
        for p in 0..x.nrows() {
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = x[(p, i)];
            }
            for k in 0..kc {
                out[(p, k)] = self.basis.value(self.sq_radius(&row, k), self.widths[k]);
            }
        }
        Ok(out)
    }

    /// Latent points `Phi W^T` for a batch.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.activations(x)? * self.weights.transpose())
    }

    /// Analytic `m x n` Jacobian of `forward` at `x`.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut jac = DMatrix::zeros(self.latent_dim(), self.input_dim());
        for k in 0..self.n_centers() {
            let g = self.basis.slope(self.sq_radius(x, k), self.widths[k]);
            if g == 0.0 {
                continue;
            }
            for l in 0..self.latent_dim() {
                let c = self.weights[(l, k)] * g;
                for i in 0..self.input_dim() {
                    jac[(l, i)] += c * (x[i] - self.centers[(k, i)]);
                }
            }
        }
        Ok(jac)
    }

    /// Basis slopes `g[p][k]` for a batch; see [`BasisKind::slope`].
    pub(crate) fn slopes(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.input_dim();
        let mut out = DMatrix::zeros(x.nrows(), self.n_centers());
        let mut row = vec![0.0; n];
        for p in 0..x.nrows() {
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = x[(p, i)];
            }
            for k in 0..self.n_centers() {
                out[(p, k)] = self.basis.slope(self.sq_radius(&row, k), self.widths[k]);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// On-disk layout of a model; matrices are stored row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub basis_kind: BasisKind,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub n_centers: usize,
    pub widths: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("{what} must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

impl From<RbfModel> for ModelDocument {
    fn from(m: RbfModel) -> Self {
        ModelDocument {
            basis_kind: m.basis,
            input_dim: m.input_dim(),
            latent_dim: m.latent_dim(),
            n_centers: m.n_centers(),
            widths: m.widths.clone(),
            centers: rows_of(&m.centers),
            weights: rows_of(&m.weights),
        }
    }
}

impl TryFrom<ModelDocument> for RbfModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let centers = matrix_from_rows(&doc.centers, doc.n_centers, doc.input_dim, "centers")?;
        let weights = matrix_from_rows(&doc.weights, doc.latent_dim, doc.n_centers, "weights")?;
        RbfModel::new(centers, doc.widths, weights, doc.basis_kind)
    }
}

/// How the initial weight matrix is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInit {
    /// Ridge regression of the activations onto the leading principal
    /// component scores of the inputs.
    Pca { ridge: f64 },
    /// Independent uniform draws in `[-scale, scale]`.
    Random { scale: f64 },
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInit {
    /// Defaults to `min(P, 10 m ceil(log2 P))`.
    pub n_centers: Option<usize>,
    pub basis: BasisKind,
    /// Defaults to the median pairwise distance between centers.
    pub width: Option<f64>,
    pub weights: WeightInit,
    pub seed: u64,
}

impl Default for ModelInit {
    fn default() -> Self {
        Self {
            n_centers: None,
            basis: BasisKind::Gaussian,
            width: None,
            weights: WeightInit::Pca { ridge: 1e-8 },
            seed: 0,
        }
    }
}

pub fn default_center_count(n_points: usize, latent_dim: usize) -> usize {
    let log2 = (n_points.max(2) as f64).log2().ceil() as usize;
    n_points.min(10 * latent_dim * log2).max(1)
}

impl RbfModel {
    /// Builds an untrained model from training locations (`P x n`).
    pub fn initialize(points: &DMatrix<f64>, latent_dim: usize, init: &ModelInit) -> Result<Self> {
        let p = points.nrows();
        if p == 0 {
            return Err(Error::invalid(0, "no training points"));
        }
        if !(1..=MAX_LATENT_DIM).contains(&latent_dim) {
            return Err(Error::config(format!("latent dimension must be 1, 2 or 3, got {latent_dim}")));
        }
        let k = init
            .n_centers
            .unwrap_or_else(|| default_center_count(p, latent_dim))
            .clamp(1, p);
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let chosen = kmeanspp_indices(points, k, &mut rng);
        let centers = points.select_rows(&chosen);
        let width = match init.width {
            Some(w) => w,
            None => median_pairwise_distance(&centers).unwrap_or(1.0),
        };
        let zeros = DMatrix::zeros(latent_dim, k);
        let model = RbfModel::with_shared_width(centers, width, zeros, init.basis)?;
        let weights = match init.weights {
            WeightInit::Zeros => return Ok(model),
            WeightInit::Random { scale } => {
                DMatrix::from_fn(latent_dim, k, |_, _| rng.random_range(-scale..=scale))
            }
            WeightInit::Pca { ridge } => {
                let target = principal_scores(points, latent_dim)?;
                let phi = model.activations(points)?;
                ridge_weights(&phi, &target, ridge)?
            }
        };
        model.with_weights(weights)
    }
}

/// k-means++ seeding: first index uniform, then proportional to the squared
/// distance to the nearest chosen center.
fn kmeanspp_indices(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let p = points.nrows();
    let sq = |a: usize, b: usize| -> f64 {
        (0..points.ncols())
            .map(|i| {
                let d = points[(a, i)] - points[(b, i)];
                d * d
            })
            .sum()
    };
    let mut chosen = vec![rng.random_range(0..p)];
    let mut nearest: Vec<f64> = (0..p).map(|i| sq(i, chosen[0])).collect();
    let mut taken = vec![false; p];
    taken[chosen[0]] = true;
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if u < d {
                    break;
                }
                u -= d;
            }
            pick.unwrap()
        } else {
            let free: Vec<usize> = (0..p).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[next] = true;
        chosen.push(next);
        for (i, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min(sq(i, next));
        }
    }
    chosen
}

fn median_pairwise_distance(centers: &DMatrix<f64>) -> Option<f64> {
    let k = centers.nrows();
    let mut d = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
    for a in 0..k {
        for b in (a + 1)..k {
            d.push((centers.row(a) - centers.row(b)).norm());
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    (med > 0.0).then_some(med)
}

/// Leading principal component scores of the centered rows.
/// Eigenvector signs are fixed so the largest-magnitude entry is positive.
pub fn principal_scores(points: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    let p = points.nrows();
    let mean = points.row_mean();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (p.max(1) as f64);
    let basis = leading_eigenvectors(cov, m)?;
    Ok(centered * basis)
}

/// Columns are the `m` leading eigenvectors of a symmetric matrix, in
/// descending eigenvalue order, sign-normalized.
pub(crate) fn leading_eigenvectors(sym: DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_eigen(sym)?;
    let m = m.min(values.len());
    Ok(vectors.columns(0, m).into_owned())
}

/// Eigen-decomposition sorted by descending eigenvalue with sign-normalized vectors.
pub(crate) fn sorted_eigen(sym: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix in eigendecomposition".into()));
    }
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col = -col;
        }
        vectors.set_column(dst, &col);
    }
    Ok((values, vectors))
}

/// Solves `min ||Phi W^T - Y||^2 + lambda ||W||^2` with `lambda` relative to
/// the mean diagonal of `Phi^T Phi`.
fn ridge_weights(phi: &DMatrix<f64>, target: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let k = phi.ncols();
    let mut gram = phi.transpose() * phi;
    let scale = (gram.trace() / k as f64).max(f64::MIN_POSITIVE);
    for i in 0..k {
        gram[(i, i)] += ridge.max(1e-14) * scale;
    }
    let rhs = phi.transpose() * target;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge system is not positive definite".into()))?;
    Ok(chol.solve(&rhs).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> RbfModel {
        RbfModel::with_shared_width(
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]),
            0.8,
            DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0]),
            BasisKind::Gaussian,
        )
        .unwrap()
    }

    #[test]
    fn unit_at_center() {
        let m = RbfModel::with_shared_width(
            DMatrix::zeros(1, 1),
            1.0,
            DMatrix::from_element(1, 1, 1.0),
            BasisKind::Gaussian,
        )
        .unwrap();
        assert_eq!(m.forward(&[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_weights_give_zero() {
        let m = toy_model().with_weights(DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(m.forward(&[0.3, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_latent_distance() {
        // phi = 1 at the center and 0.5 at r^2 = 2 ln 2 with w = 1.
        let m = RbfModel::with_shared_width(
            DMatrix::zeros(1, 1),
            1.0,
            DMatrix::from_element(1, 1, 1.0),
            BasisKind::Gaussian,
        )
        .unwrap();
        let x = (2.0 * 2f64.ln()).sqrt();
        let d = m.latent_sq_distance(&[0.0], &[x]).unwrap();
        assert!((d - 0.25).abs() < 1e-15);
        assert_eq!(m.latent_sq_distance(&[x], &[x]).unwrap(), 0.0);
    }

    #[test]
    fn thin_plate_is_zero_at_center() {
        let m = RbfModel::with_shared_width(
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            1.0,
            DMatrix::from_element(1, 1, 1.0),
            BasisKind::ThinPlateSpline,
        )
        .unwrap();
        let phi = m.activations(&DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).unwrap();
        assert_eq!(phi[(0, 0)], 0.0);
    }

    #[test]
    fn activation_is_one_at_gaussian_center() {
        let m = toy_model();
        let phi = m.activations(&DMatrix::from_row_slice(1, 2, &[1.0, -1.0])).unwrap();
        assert_eq!(phi[(0, 1)], 1.0);
    }

    #[test]
    fn validation() {
        let c = DMatrix::zeros(2, 3);
        assert!(RbfModel::with_shared_width(c.clone(), 0.0, DMatrix::zeros(1, 2), BasisKind::Gaussian).is_err());
        assert!(RbfModel::with_shared_width(c.clone(), 1.0, DMatrix::zeros(4, 2), BasisKind::Gaussian).is_err());
        assert!(RbfModel::with_shared_width(c.clone(), 1.0, DMatrix::zeros(2, 3), BasisKind::Gaussian).is_err());
        let m = RbfModel::with_shared_width(c, 1.0, DMatrix::zeros(2, 2), BasisKind::Gaussian).unwrap();
        assert!(m.forward(&[1.0]).is_err());
        assert!(m.activations(&DMatrix::zeros(4, 2)).is_err());
        assert!(m.latent_sq_distance(&[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = RbfModel::with_shared_width(
            DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.7e-9, 5.5]),
            std::f64::consts::PI,
            DMatrix::from_row_slice(1, 2, &[1.0 / 7.0, -0.3]),
            BasisKind::ThinPlateSpline,
        )
        .unwrap();
        let back = RbfModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn malformed_document_rejected() {
        let text = r#"{"basis_kind":"gaussian","input_dim":2,"latent_dim":1,"n_centers":1,
            "widths":[1.0],"centers":[[0.0]],"weights":[[1.0]]}"#;
        assert!(RbfModel::from_json(text).is_err());
    }

    #[test]
    fn initialize_defaults() {
        let pts = DMatrix::from_fn(40, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.1 + r as f64 * 0.01);
        let m = RbfModel::initialize(&pts, 2, &ModelInit::default()).unwrap();
        assert_eq!(m.n_centers(), default_center_count(40, 2));
        assert_eq!(m.latent_dim(), 2);
        let again = RbfModel::initialize(&pts, 2, &ModelInit::default()).unwrap();
        assert_eq!(m, again);
        assert_eq!(default_center_count(50, 2), 50);
        assert_eq!(default_center_count(4096, 3), 360);
    }
}
