//! Pairwise dissimilarities: euclidean distances, Bregman divergences under
//! a small family of convex generators, and the closed-form KL divergence
//! between spherical Gaussians.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries below this are floored before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-15;

/// Divergences in `[NEGATIVE_FLOOR, 0)` are rounding noise and clamp to zero.
pub const NEGATIVE_FLOOR: f64 = -1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// Convex function `F` defining a Bregman divergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvexGenerator {
    /// `F(x) = <x, x>`; yields the squared euclidean distance.
    SquaredNorm,
    /// `F(x) = sum x_i log2 x_i` on the probability simplex; yields KL in bits.
    ShannonEntropyBits,
    /// `F(x) = sum x_i ln x_i` on positive entries; yields the generalized
    /// I-divergence.
    XLogX,
}

impl ConvexGenerator {
    /// Checks that `x` lies in the generator's domain.
    pub fn validate(&self, x: &[f64]) -> Result<()> {
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(i, "non-finite entry"));
        }
        match self {
            ConvexGenerator::SquaredNorm => Ok(()),
            ConvexGenerator::ShannonEntropyBits => {
                if let Some(i) = x.iter().position(|&v| v < 0.0) {
                    return Err(Error::invalid(
                        i,
                        format!("negative probability {}", x[i]),
                    ));
                }
                let total: f64 = x.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::invalid(
                        x.len().saturating_sub(1),
                        format!("entries sum to {total}, not 1"),
                    ));
                }
                Ok(())
            }
            ConvexGenerator::XLogX => match x.iter().position(|&v| v <= 0.0) {
                Some(i) => Err(Error::invalid(i, format!("non-positive entry {}", x[i]))),
                None => Ok(()),
            },
        }
    }

    fn scalar_value(&self, v: f64) -> f64 {
        match self {
            ConvexGenerator::SquaredNorm => v * v,
            ConvexGenerator::ShannonEntropyBits => {
                if v == 0.0 {
                    0.0
                } else {
                    v * v.max(LOG_FLOOR).log2()
                }
            }
            ConvexGenerator::XLogX => v * v.max(LOG_FLOOR).ln(),
        }
    }

    fn scalar_gradient(&self, v: f64) -> f64 {
        match self {
            ConvexGenerator::SquaredNorm => 2.0 * v,
            ConvexGenerator::ShannonEntropyBits => {
                v.max(LOG_FLOOR).log2() + std::f64::consts::LOG2_E
            }
            ConvexGenerator::XLogX => v.max(LOG_FLOOR).ln() + 1.0,
        }
    }

    /// `F(x)`. Does not validate the domain.
    pub fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|&v| self.scalar_value(v)).sum()
    }

    /// `grad F(x)`. Does not validate the domain.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.scalar_gradient(v)).collect()
    }
}

/// Bregman divergence before clamping. All generators are separable, so the
/// three terms are accumulated coordinate by coordinate.
pub fn bregman_unclamped(p: &[f64], q: &[f64], gen: ConvexGenerator) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    gen.validate(p)?;
    gen.validate(q)?;
    Ok(p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            gen.scalar_value(a) - gen.scalar_value(b) - (a - b) * gen.scalar_gradient(b)
        })
        .sum())
}

/// `F(p) - F(q) - <p - q, grad F(q)>`, clamped to zero within the numerical floor.
pub fn bregman(p: &[f64], q: &[f64], gen: ConvexGenerator) -> Result<f64> {
    clamp_non_negative(bregman_unclamped(p, q, gen)?)
}

pub(crate) fn clamp_non_negative(value: f64) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= NEGATIVE_FLOOR {
        Ok(0.0)
    } else {
        Err(Error::NegativeDivergence { value })
    }
}

/// An observation carrying spherical Gaussian uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPoint {
    mean: Vec<f64>,
    variance: f64,
}

impl GaussianPoint {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid(0, "empty mean vector"));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::invalid(0, format!("variance must be positive, got {variance}")));
        }
        Ok(Self { mean, variance })
    }

    /// Builds a point whose variance is the spread of its own components,
    /// floored at `floor`.
    pub fn with_component_variance(mean: Vec<f64>, floor: f64) -> Result<Self> {
        let variance = component_variance(&mean).max(floor);
        Self::new(mean, variance)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }
}

/// Population variance of the entries of `x`.
pub fn component_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Closed-form `KL(p || q)` for spherical Gaussians, in nats.
pub fn gaussian_kl(p: &GaussianPoint, q: &GaussianPoint) -> Result<f64> {
    if p.dimension() != q.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            found: q.dimension(),
        });
    }
    let k = p.dimension() as f64;
    let sq: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(gaussian_kl_parts(k, sq, p.variance, q.variance).max(0.0))
}

/// KL between spherical Gaussians from the squared mean gap and the variances.
pub(crate) fn gaussian_kl_parts(k: f64, sq_gap: f64, var_p: f64, var_q: f64) -> f64 {
    0.5 * (k * var_p / var_q + sq_gap / var_q - k + k * (var_q / var_p).ln())
}

/// Which argument order an asymmetric measure uses for the pair `(row, col)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// `d(row, col)`.
    #[default]
    PtoQ,
    /// `d(col, row)`.
    QtoP,
    /// `(d(row, col) + d(col, row)) / 2`.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    Euclidean,
    SquaredEuclidean,
    Bregman(ConvexGenerator),
    GaussianKlOneSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DissimilarityMeasure {
    pub kind: MeasureKind,
    pub direction: Direction,
}

impl DissimilarityMeasure {
    pub fn new(kind: MeasureKind, direction: Direction) -> Self {
        Self { kind, direction }
    }

    pub fn euclidean() -> Self {
        Self::new(MeasureKind::Euclidean, Direction::PtoQ)
    }

    pub fn squared_euclidean() -> Self {
        Self::new(MeasureKind::SquaredEuclidean, Direction::PtoQ)
    }

    pub fn bregman(gen: ConvexGenerator) -> Self {
        Self::new(MeasureKind::Bregman(gen), Direction::PtoQ)
    }

    pub fn gaussian_kl() -> Self {
        Self::new(MeasureKind::GaussianKlOneSided, Direction::PtoQ)
    }

    pub fn with_direction(self, direction: Direction) -> Self {
        Self { direction, ..self }
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self.kind, MeasureKind::Euclidean | MeasureKind::SquaredEuclidean)
            || self.direction == Direction::Symmetric
    }

    /// Dissimilarity between two plain vectors.
    pub fn between_vectors(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self.kind {
            MeasureKind::Euclidean => Ok(squared_distance(a, b)?.sqrt()),
            MeasureKind::SquaredEuclidean => squared_distance(a, b),
            MeasureKind::Bregman(gen) => {
                self.oriented(a, b, |x, y| bregman(x, y, gen))
            }
            MeasureKind::GaussianKlOneSided => Err(Error::config(
                "gaussian KL needs Gaussian inputs, not plain vectors",
            )),
        }
    }

    /// Dissimilarity between two Gaussian points. Point measures act on the means.
    pub fn between_gaussians(&self, a: &GaussianPoint, b: &GaussianPoint) -> Result<f64> {
        match self.kind {
            MeasureKind::GaussianKlOneSided => self.oriented(a, b, gaussian_kl),
            _ => self.between_vectors(a.mean(), b.mean()),
        }
    }

    fn oriented<T: ?Sized>(
        &self,
        a: &T,
        b: &T,
        f: impl Fn(&T, &T) -> Result<f64>,
    ) -> Result<f64> {
        match self.direction {
            Direction::PtoQ => f(a, b),
            Direction::QtoP => f(b, a),
            Direction::Symmetric => Ok(0.5 * (f(a, b)? + f(b, a)?)),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// A set of observations, either plain vectors or Gaussian points.
#[derive(Clone, Debug, PartialEq)]
pub enum PointSet {
    Vectors(Vec<Vec<f64>>),
    Gaussians(Vec<GaussianPoint>),
}

impl PointSet {
    pub fn len(&self) -> usize {
        match self {
            PointSet::Vectors(v) => v.len(),
            PointSet::Gaussians(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Observation-space location of point `i`.
    pub fn location(&self, i: usize) -> &[f64] {
        match self {
            PointSet::Vectors(v) => &v[i],
            PointSet::Gaussians(g) => g[i].mean(),
        }
    }

    /// Common dimension of all points.
    pub fn dimension(&self) -> Result<usize> {
        let n = if self.is_empty() { 0 } else { self.location(0).len() };
        for i in 0..self.len() {
            let found = self.location(i).len();
            if found != n {
                return Err(Error::PairInput {
                    p: i,
                    q: 0,
                    source: Box::new(Error::DimensionMismatch { expected: n, found }),
                });
            }
        }
        Ok(n)
    }

    /// Locations as a `P x n` matrix.
    pub fn location_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.dimension()?;
        Ok(DMatrix::from_fn(self.len(), n, |r, c| self.location(r)[c]))
    }

    /// Variances when the points are Gaussian.
    pub fn variances(&self) -> Option<Vec<f64>> {
        match self {
            PointSet::Vectors(_) => None,
            PointSet::Gaussians(g) => Some(g.iter().map(GaussianPoint::variance).collect()),
        }
    }

    /// `d(point_p, point_q)` under `measure`.
    pub fn dissimilarity(&self, p: usize, q: usize, measure: &DissimilarityMeasure) -> Result<f64> {
        let value = match self {
            PointSet::Vectors(v) => measure.between_vectors(&v[p], &v[q]),
            PointSet::Gaussians(g) => measure.between_gaussians(&g[p], &g[q]),
        };
        value.map_err(|e| Error::PairInput {
            p,
            q,
            source: Box::new(e),
        })
    }
}

/// Full `P x P` dissimilarity matrix with an exactly-zero diagonal.
/// Rows are evaluated in parallel; every element is computed independently.
pub fn pairwise_dissimilarity(
    points: &PointSet,
    measure: &DissimilarityMeasure,
) -> Result<DMatrix<f64>> {
    use rayon::prelude::*;

    let n = points.len();
    if n < 2 {
        return Err(Error::invalid(0, format!("need at least 2 points, got {n}")));
    }
    points.dimension()?;
    let symmetric = measure.is_symmetric();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut row = vec![0.0; n];
            for (q, slot) in row.iter_mut().enumerate() {
                if p == q || (symmetric && q > p) {
                    continue;
                }
                *slot = points.dissimilarity(p, q, measure)?;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::from_fn(n, n, |r, c| rows[r][c]);
    if symmetric {
        for p in 0..n {
            for q in (p + 1)..n {
                out[(p, q)] = out[(q, p)];
            }
        }
    }
    Ok(out)
}
