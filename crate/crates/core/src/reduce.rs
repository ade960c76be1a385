//! PCA reduction of trained embeddings.

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, sym_eig, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `k × D`, orthonormal rows in descending eigenvalue order.
    components: Matrix,
    eigenvalues: Vec<f64>,
}

impl PcaModel {
    /// Rebuilds a model from stored parts, checking shapes and
    /// orthonormality.
    pub fn from_parts(mean: Vec<f64>, components: Matrix, eigenvalues: Vec<f64>) -> Result<Self> {
        let (k, d) = components.shape();
        if k == 0 || d != mean.len() || eigenvalues.len() != k {
            return Err(Error::invalid(format!(
                "inconsistent PCA parts: mean {}, components {k}x{d}, eigenvalues {}",
                mean.len(),
                eigenvalues.len()
            )));
        }
        let gram = components.matmul_transposed(&components)?;
        if gram.max_abs_diff(&Matrix::identity(k)) > 1e-9 {
            return Err(Error::invalid("PCA components are not orthonormal"));
        }
        if eigenvalues.iter().any(|&v| v < 0.0 || !v.is_finite()) || eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("PCA eigenvalues must be non-negative and descending"));
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// Maps reduced coordinates back into the input space.
    pub fn inverse_transform(&self, y: &Matrix) -> Result<Matrix> {
        if y.cols() != self.output_dim() {
            return Err(Error::invalid(format!(
                "expected {} reduced columns, got {}",
                self.output_dim(),
                y.cols()
            )));
        }
        let mut x = y.matmul(&self.components)?;
        for i in 0..x.rows() {
            x.row_mut(i).iter_mut().zip(&self.mean).for_each(|(v, m)| *v += m);
        }
        Ok(x)
    }
}

/// Fits the top-`k` principal components of the rows of `x`, using the
/// `1/(n−1)` sample covariance.
pub fn pca_fit(x: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::invalid(format!(
            "k = {k} is out of range 1..={} for {n} samples of dimension {d}",
            (n - 1).min(d)
        )));
    }

    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut centered = x.clone();
    for i in 0..n {
        centered.row_mut(i).iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let ct = centered.transpose();
    let mut cov = ct.matmul_transposed(&ct)?;
    let scale = 1.0 / (n - 1) as f64;
    cov.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    // exact symmetry for the solver
    for i in 0..d {
        for j in (i + 1)..d {
            cov[(j, i)] = cov[(i, j)];
        }
    }

    let eig = sym_eig(&cov)?;
    let mut components = Matrix::zeros(k, d);
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|r| eig.vectors[(r, c)]).collect();
        let pivot = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.row_mut(c).copy_from_slice(&v);
    }
    let eigenvalues = eig.values[..k].iter().map(|&v| v.max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
    })
}

/// Projects rows onto the fitted components, optionally L2-normalizing the
/// result.
pub fn pca_transform(model: &PcaModel, x: &Matrix, renormalize: bool) -> Result<Matrix> {
    if x.cols() != model.input_dim() {
        return Err(Error::invalid(format!(
            "PCA model expects dimension {}, got {}",
            model.input_dim(),
            x.cols()
        )));
    }
    let k = model.output_dim();
    let mut y = Matrix::zeros(x.rows(), k);
    let mut centered = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        centered.iter_mut().zip(x.row(i)).zip(&model.mean).for_each(|((c, v), m)| *c = v - m);
        for j in 0..k {
            y[(i, j)] = dot(&centered, model.components.row(j));
        }
    }
    if renormalize {
        y = l2_normalize_rows(&y)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::pairwise_sq_dist;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn line_data_has_one_direction() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let x = Matrix::from_rows(&[[-2.0 * s, -2.0 * s], [-s, -s], [0.0, 0.0], [s, s], [3.0 * s, 3.0 * s]]).unwrap();
        let m = pca_fit(&x, 2).unwrap();
        assert!((m.components()[(0, 0)] - s).abs() < 1e-12);
        assert!((m.components()[(0, 1)] - s).abs() < 1e-12);
        assert!(m.eigenvalues()[1].abs() < 1e-12);
    }

    #[test]
    fn diagonal_covariance() {
        // four samples with 1/(n-1) variances 4·1.5/3 = 2 and 4·0.75/3 = 1
        let (a, b) = (1.5f64.sqrt(), 0.75f64.sqrt());
        let x = Matrix::from_rows(&[[a, b], [-a, b], [a, -b], [-a, -b]]).unwrap();
        let m = pca_fit(&x, 2).unwrap();
        assert!((m.eigenvalues()[0] - 2.0).abs() < 1e-12);
        assert!((m.eigenvalues()[1] - 1.0).abs() < 1e-12);
        assert!((m.components()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((m.components()[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_range_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 4, 6);
        assert!(pca_fit(&x, 0).is_err());
        assert!(pca_fit(&x, 4).is_err());
        assert!(pca_fit(&x, 3).is_ok());
        let m = pca_fit(&x, 3).unwrap();
        assert!(pca_transform(&m, &random(&mut rng, 2, 5), false).is_err());
    }

    #[test]
    fn mean_maps_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 10, 4);
        let m = pca_fit(&x, 2).unwrap();
        let mean = Matrix::from_rows(&[m.mean().to_vec()]).unwrap();
        let y = pca_transform(&m, &mean, false).unwrap();
        assert!(y.as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(pca_transform(&m, &mean, true), Err(Error::DegenerateInput { row: 0, .. })));
    }

    #[test]
    fn full_rank_basis_is_orthonormal_and_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 20, 6);
        let m = pca_fit(&x, 6).unwrap();
        let c = m.components();
        assert!(c.transpose().matmul(c).unwrap().max_abs_diff(&Matrix::identity(6)) < 1e-9);
        let y = pca_transform(&m, &x, false).unwrap();
        let dx = pairwise_sq_dist(&x).unwrap();
        let dy = pairwise_sq_dist(&y).unwrap();
        assert!(dx.max_abs_diff(&dy) < 1e-9);
    }

    #[test]
    fn sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = pca_fit(&random(&mut rng, 15, 5), 5).unwrap();
        for row in m.components().iter_rows() {
            let max = row.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
            assert!(max > 0.0);
        }
    }

    #[test]
    fn projected_variances_match_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = random(&mut rng, 40, 5);
        for i in 0..40 {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v *= (j + 1) as f64;
            }
        }
        let m = pca_fit(&x, 5).unwrap();
        let y = pca_transform(&m, &x, false).unwrap();
        let mut prev = f64::INFINITY;
        for j in 0..5 {
            let col: Vec<f64> = (0..40).map(|i| y[(i, j)]).collect();
            let mu = col.iter().sum::<f64>() / 40.0;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 39.0;
            assert!(var <= prev + 1e-9);
            assert!((var - m.eigenvalues()[j]).abs() <= 1e-6 * m.eigenvalues()[j]);
            prev = var;
        }
    }

    proptest! {
        #[test]
        fn subspace_roundtrip(seed in any::<u64>(), n in 6usize..20, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // data lying exactly in a k-dimensional affine subspace of R^6
            let basis = random(&mut rng, k, 6);
            let coeffs = random(&mut rng, n, k);
            let offset: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut x = coeffs.matmul(&basis).unwrap();
            for i in 0..n {
                x.row_mut(i).iter_mut().zip(&offset).for_each(|(v, o)| *v += o);
            }
            let m = pca_fit(&x, k).unwrap();
            let back = m.inverse_transform(&pca_transform(&m, &x, false).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&x) < 1e-8);
        }
    }
}
