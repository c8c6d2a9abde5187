//! Batch reference implementations used to validate the streaming engine.
//!
//! These are deliberately independent of the recursive code paths: whitening
//! goes through an eigendecomposition of the sample covariance, and unmixing
//! uses minibatch natural-gradient Infomax over the full recording. They exist
//! to certify synthetic data and to bound what the online algorithms should
//! achieve; they are not part of the streaming pipeline.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CorssError, Result};

/// Batch whitening matrix from the eigendecomposition of the sample
/// covariance, keeping the `n_keep` largest-variance directions.
/// Input is `n_ch x n_samples`; output maps a channel vector to `n_keep` dims.
pub fn batch_whitening_matrix(data: &DMatrix<f64>, n_keep: usize) -> Result<DMatrix<f64>> {
    let n_ch = data.nrows();
    let n = data.ncols();
    if n_keep == 0 || n_keep > n_ch {
        return Err(CorssError::InvalidSpec(format!(
            "n_keep = {n_keep} out of range for {n_ch} channels"
        )));
    }
    if n < 2 {
        return Err(CorssError::EmptyInput("need at least 2 samples".into()));
    }
    let mean = data.column_mean();
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / n as f64;
    let eig = cov.symmetric_eigen();
    // Sort eigenpairs by descending eigenvalue.
    let mut order: Vec<usize> = (0..n_ch).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut m = DMatrix::zeros(n_keep, n_ch);
    for (row, &idx) in order.iter().take(n_keep).enumerate() {
        let ev = eig.eigenvalues[idx];
        if ev <= 1e-12 {
            return Err(CorssError::DegenerateMatrix(format!(
                "covariance eigenvalue {ev} too small for whitening"
            )));
        }
        let u = eig.eigenvectors.column(idx);
        m.set_row(row, &(u.transpose() / ev.sqrt()));
    }
    Ok(m)
}

/// Batch natural-gradient Infomax for super-Gaussian sources on whitened data
/// (`d x n_samples`). Returns the unmixing matrix `W` (`d x d`).
///
/// Minibatch extended-Infomax update for the super-Gaussian branch:
/// `W <- W + eta * (I - tanh(Y) Y^T / B - Y Y^T / B) W` with a decaying step.
pub fn batch_infomax(whitened: &DMatrix<f64>, epochs: usize, seed: u64) -> Result<DMatrix<f64>> {
    let d = whitened.nrows();
    let n = whitened.ncols();
    if n < d {
        return Err(CorssError::EmptyInput(
            "fewer samples than dimensions".into(),
        ));
    }
    let batch = 256.min(n);
    let mut w = DMatrix::<f64>::identity(d, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..epochs {
        let eta = 0.04 / (1.0 + epoch as f64 * 0.15);
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(batch) {
            let b = chunk.len();
            let mut vb = DMatrix::zeros(d, b);
            for (j, &idx) in chunk.iter().enumerate() {
                vb.set_column(j, &whitened.column(idx));
            }
            let y = &w * &vb;
            let ty = y.map(f64::tanh);
            let grad = DMatrix::identity(d, d)
                - (&ty * y.transpose()) / b as f64
                - (&y * y.transpose()) / b as f64;
            w += eta * grad * &w;
            if w.iter().any(|e| !e.is_finite()) {
                return Err(CorssError::Divergence {
                    limit: f64::INFINITY,
                    sample: 0,
                });
            }
        }
    }
    Ok(w)
}

/// Convenience: batch-separate a raw recording into `n_keep` components.
/// Returns `(sources, w, m)` with `sources = w * m * centered(data)`.
pub fn batch_separate(
    data: &DMatrix<f64>,
    n_keep: usize,
    epochs: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let m = batch_whitening_matrix(data, n_keep)?;
    let mean = data.column_mean();
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let v = &m * &centered;
    let w = batch_infomax(&v, epochs, seed)?;
    let sources = &w * &v;
    Ok((sources, w, m))
}

/// Unit-scale helper used by tests: normalizes each row of a source matrix to
/// unit RMS so amplitudes are comparable across methods.
pub fn normalize_rows_rms(sources: &mut DMatrix<f64>) {
    let n = sources.ncols() as f64;
    for mut row in sources.row_iter_mut() {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if rms > 0.0 {
            row /= rms;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::amari_index;
    use rand_distr::{Distribution, StandardNormal};

    fn laplacian(rng: &mut ChaCha8Rng) -> f64 {
        // inverse-CDF sampling of a unit-scale Laplacian
        let u: f64 = rand::Rng::random_range(rng, -0.5..0.5);
        -u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    #[test]
    fn batch_whitening_whitens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(4, 4, |_, _| StandardNormal.sample(&mut rng));
        let s = DMatrix::from_fn(4, 8000, |_, _| StandardNormal.sample(&mut rng));
        let x = &a * &s;
        let m = batch_whitening_matrix(&x, 4).unwrap();
        let v = &m * &x;
        let cov = &v * v.transpose() / 8000.0;
        let dist = (cov - DMatrix::identity(4, 4)).norm();
        assert!(dist < 0.1, "residual {dist}");
    }

    #[test]
    fn batch_infomax_separates_laplacian_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = DMatrix::from_fn(3, 20_000, |_, _| laplacian(&mut rng));
        let a = DMatrix::from_fn(3, 3, |_, _| StandardNormal.sample(&mut rng));
        let x = &a * &s;
        let m = batch_whitening_matrix(&x, 3).unwrap();
        let v = &m * &x;
        let w = batch_infomax(&v, 40, 0).unwrap();
        let g = &w * &m * &a;
        let idx = amari_index(&g).unwrap();
        assert!(idx < 0.1, "amari index {idx}");
    }
}
