use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

const EIGEN_MAX_ITER: usize = 10_000;

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fits a Gaussian to row vectors. Needs at least two rows.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!(
            "covariance needs at least 2 feature vectors, got {n}"
        )));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: format!("feature dimension {d}"),
            actual: bad.len().to_string(),
        });
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok(GaussianStats { mean, cov, count: n })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, f64::EPSILON, EIGEN_MAX_ITER).ok_or(Error::EigenNoConvergence)
}

/// Sum of clamped negative eigenvalues, warning when it is not negligible.
fn clamp_negative(values: &mut DVector<f64>, what: &str) {
    let trace: f64 = values.iter().map(|v| v.abs()).sum();
    let negative: f64 = values.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    if negative > 1e-6 * trace.max(f64::MIN_POSITIVE) {
        log::warn!("{what}: clamped negative eigenvalue mass {negative:.3e} of {trace:.3e}");
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Fréchet distance between two Gaussians,
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
///
/// Uses only symmetric eigendecompositions; tiny negative eigenvalues from
/// rounding are clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("feature dimension {}", a.dim()),
            actual: b.dim().to_string(),
        });
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ea = eigen(symmetrize(&a.cov))?;
    let mut la = ea.eigenvalues.clone();
    clamp_negative(&mut la, "covariance square root");
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&la.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = symmetrize(&(&sqrt_a * &b.cov * &sqrt_a));
    let mut li = eigen(inner)?.eigenvalues;
    clamp_negative(&mut li, "covariance product");
    let tr_cross: f64 = li.iter().map(|v| v.sqrt()).sum();
    let fd = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_cross;
    if !fd.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(fd.max(0.0))
}
