use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const NEG_EIGEN_TOL: f64 = 1e-8;
const NEG_TRACE_TOL: f64 = 1e-6;

/// Sample mean and unbiased covariance of row vectors.
pub fn fit_embedding_gaussian(embeddings: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::arg(format!("need at least 2 embeddings, got {n}")));
    }
    let mean = embeddings.row_mean().transpose();
    let mut centered = embeddings.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Builds an `n x d` matrix from a flat row-major f32 buffer.
pub fn embeddings_from_rows(n: usize, d: usize, data: &[f32]) -> Result<DMatrix<f64>> {
    if data.len() != n * d {
        return Err(Error::arg(format!(
            "embedding buffer has {} values, expected {n}x{d}",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_iterator(
        n,
        d,
        data.iter().map(|&v| v as f64),
    ))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric PSD square root; small negative eigenvalues are clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -NEG_EIGEN_TOL {
            return Err(Error::Numeric(format!(
                "{what} has eigenvalue {v:e}, not positive semi-definite"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn psd_sqrt_trace(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    eig.eigenvalues.iter().try_fold(0.0, |acc, &v| {
        if v < -NEG_EIGEN_TOL {
            return Err(Error::Numeric(format!(
                "{what} has eigenvalue {v:e}, not positive semi-definite"
            )));
        }
        Ok(acc + v.max(0.0).sqrt())
    })
}

/// Squared Wasserstein-2 distance between two Gaussians.
///
/// `Tr((S1 S2)^{1/2})` is evaluated as `Tr((S1^{1/2} S2 S1^{1/2})^{1/2})`, which
/// only needs symmetric eigendecompositions.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    sigma2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.shape() != (d, d) || sigma2.shape() != (d, d) {
        return Err(Error::arg("mean and covariance dimensions disagree"));
    }
    let s1 = symmetrize(sigma1);
    let s2 = symmetrize(sigma2);
    let root1 = psd_sqrt(&s1, "sigma1")?;
    // validates sigma2 as PSD even though only the product is needed
    psd_sqrt_trace(&s2, "sigma2")?;
    let inner = &root1 * &s2 * &root1;
    let tr_cross = psd_sqrt_trace(&inner, "sigma1^1/2 sigma2 sigma1^1/2")?;
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_cross;
    if value < 0.0 {
        if value < -NEG_TRACE_TOL {
            return Err(Error::Numeric(format!("negative distance {value:e}")));
        }
        return Ok(0.0);
    }
    Ok(value)
}

/// Mean of consecutive pairwise scores for an ordered view sequence.
pub fn met3r_sequence(pair_scores: &[f64]) -> Result<f64> {
    if pair_scores.is_empty() {
        return Err(Error::arg("need at least one pairwise score"));
    }
    if let Some(s) = pair_scores.iter().find(|s| !(0.0..=2.0).contains(*s)) {
        return Err(Error::arg(format!("pairwise score {s} outside [0, 2]")));
    }
    Ok(pair_scores.iter().sum::<f64>() / pair_scores.len() as f64)
}

/// Parses one score per line; blank lines and `#` comments are skipped.
pub fn parse_pair_scores(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap().trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|e| Error::format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}
