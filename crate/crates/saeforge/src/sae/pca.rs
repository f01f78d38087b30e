//! Closed-form PCA baseline.
//!
//! PCA is the dense linear point of comparison: encode is an affine map onto
//! the top principal axes, decode maps back. With `width == d_model` the map
//! is orthogonal and reconstruction is exact, which makes the full-rank PCA
//! model a convenient "perfect reconstruction" anchor for downstream metrics.

use super::{ArchSpec, SaeParams};
use crate::error::{Result, SaeForgeError};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Fit a PCA model on `data` (rows = samples) keeping the top `width`
/// components by eigenvalue. Returns the parameters and the kept eigenvalues
/// in descending order.
///
/// Layout: `W_E` rows are principal axes (descending eigenvalue), `W_D =
/// W_Eᵀ`, `b_D = μ`, `b_E = −W_E μ`, so `decode(encode(x)) = P(x − μ) + μ`
/// with `P` the projector onto the kept subspace.
///
/// Determinism: ties and eigensolver sign freedom are resolved by sorting
/// eigenpairs on (eigenvalue desc, original column index asc) and flipping
/// each axis so its largest-magnitude entry (lowest index on ties) is
/// positive.
pub fn pca_fit(data: &ArrayView2<'_, f64>, width: usize) -> Result<(SaeParams, Array1<f64>)> {
    let n = data.nrows();
    let d = data.ncols();
    if n == 0 || d == 0 {
        return Err(SaeForgeError::InvalidDataset(
            "PCA needs a non-empty sample matrix".into(),
        ));
    }
    if width == 0 || width > d {
        return Err(SaeForgeError::Config {
            key_path: "pca.width".into(),
            message: format!("width must be in 1..={d}, got {width}"),
        });
    }

    let mean = data.mean_axis(Axis(0)).expect("n > 0");
    // Population covariance C = (X − μ)ᵀ(X − μ) / n, accumulated in f64.
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in data.axis_iter(Axis(0)) {
        let c = &row - &mean;
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    let nf = n as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[[i, j]] / nf;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }

    let cov_na = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = cov_na.symmetric_eigen();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("covariance eigenvalues are finite")
            .then(a.cmp(&b))
    });

    let mut params = SaeParams::zeros(d, width, ArchSpec::Pca);
    let mut eigenvalues = Array1::<f64>::zeros(width);
    for (row, &col) in order.iter().take(width).enumerate() {
        eigenvalues[row] = eig.eigenvalues[col];
        let v = eig.eigenvectors.column(col);
        // Sign convention: largest-|entry| component made positive.
        let mut pivot = 0;
        for i in 1..d {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            params.w_e[[row, i]] = sign * v[i];
            params.w_d[[i, row]] = sign * v[i];
        }
    }
    params.b_d.assign(&mean);
    let b_e = -params.w_e.dot(&mean);
    params.b_e.assign(&b_e);
    Ok((params, eigenvalues))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::EncodeMode;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_rank_pca_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((40, 5), |_| rng.gen_range(-2.0..2.0));
        let (params, eigenvalues) = pca_fit(&x.view(), 5).unwrap();
        let xhat = params.reconstruct(&x.view()).unwrap();
        for (a, b) in xhat.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        for w in eigenvalues.windows(2) {
            assert!(w[0] >= w[1], "eigenvalues must be descending");
        }
    }

    #[test]
    fn first_component_captures_dominant_axis() {
        // Data along (3, 4)/5 with tiny noise off-axis.
        let mut rows = Vec::new();
        for i in 0..50 {
            let t = (i as f64 - 25.0) / 5.0;
            rows.push([3.0 / 5.0 * t, 4.0 / 5.0 * t + 1e-3 * (i % 3) as f64]);
        }
        let x = Array2::from_shape_vec(
            (50, 2),
            rows.iter().flatten().copied().collect(),
        )
        .unwrap();
        let (params, _) = pca_fit(&x.view(), 1).unwrap();
        let axis = [params.w_e[[0, 0]], params.w_e[[0, 1]]];
        assert_abs_diff_eq!(axis[0], 0.6, epsilon = 1e-3);
        assert_abs_diff_eq!(axis[1], 0.8, epsilon = 1e-3);
    }

    #[test]
    fn truncated_pca_projects_onto_leading_subspace() {
        // Exact rank-1 data: even 1 component reconstructs exactly.
        let x = arr2(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [-1.0, -2.0]]);
        let (params, eigenvalues) = pca_fit(&x.view(), 1).unwrap();
        let xhat = params.reconstruct(&x.view()).unwrap();
        for (a, b) in xhat.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        assert!(eigenvalues[0] > 0.0);
    }

    #[test]
    fn encode_centers_the_data() {
        // b_E = −W_E μ ⇒ codes of the mean point are all zero.
        let x = arr2(&[[1.0, 5.0], [3.0, 7.0], [2.0, 6.0]]);
        let (params, _) = pca_fit(&x.view(), 2).unwrap();
        let mu = arr2(&[[2.0, 6.0]]);
        let codes = params.encode(&mu.view(), EncodeMode::Infer).unwrap();
        assert_abs_diff_eq!(codes[[0, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(codes[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((30, 4), |_| rng.gen_range(-1.0..1.0));
        let (a, _) = pca_fit(&x.view(), 4).unwrap();
        let (b, _) = pca_fit(&x.view(), 4).unwrap();
        assert_eq!(a.w_e, b.w_e);
        assert_eq!(a.b_e, b.b_e);
    }

    #[test]
    fn rejects_zero_width_and_overwide() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        assert!(pca_fit(&x.view(), 0).is_err());
        assert!(pca_fit(&x.view(), 3).is_err());
    }
}
