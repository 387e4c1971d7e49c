//! Linear expression model over (expression - neutral) displacements.
//!
//! `g_exp = g_neutral + mu_diff + V_exp * alpha_exp`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::morphable::{build_basis, sample_coefficients, LinearModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionModel {
    model: LinearModel,
}

impl ExpressionModel {
    pub fn from_linear(model: LinearModel) -> Self {
        Self { model }
    }

    pub fn mean_diff(&self) -> &DVector<f64> {
        self.model.mean()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        self.model.basis()
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        self.model.singular_values()
    }

    pub fn k(&self) -> usize {
        self.model.k()
    }

    pub fn as_linear(&self) -> &LinearModel {
        &self.model
    }

    /// Coefficients of a displacement `g_expr - g_neutral`.
    pub fn project_difference(&self, diff: &DVector<f64>) -> Result<DVector<f64>> {
        self.model.project(diff)
    }

    /// Draw coefficients from the PCA prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        sample_coefficients(&self.model, rng)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.model.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        LinearModel::load(path).map(Self::from_linear)
    }
}

/// PCA of the differences of `(g_expr, g_neutral)` pairs.
pub fn build_expression_basis(pairs: &[(DVector<f64>, DVector<f64>)], k_e: usize) -> Result<ExpressionModel> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let dim = pairs[0].0.len();
    for (i, (e, n)) in pairs.iter().enumerate() {
        if e.len() != dim || n.len() != dim {
            return Err(Error::Dimension(format!("pair {i} does not have length {dim}")));
        }
    }
    let diffs = DMatrix::from_columns(&pairs.iter().map(|(e, n)| e - n).collect::<Vec<_>>());
    Ok(ExpressionModel::from_linear(build_basis(&diffs, k_e)?))
}

pub fn apply_expression(
    g_neutral: &DVector<f64>,
    alpha_exp: &DVector<f64>,
    model: &ExpressionModel,
) -> Result<DVector<f64>> {
    if g_neutral.len() != model.mean_diff().len() {
        return Err(Error::Dimension(format!(
            "geometry has length {}, model expects {}",
            g_neutral.len(),
            model.mean_diff().len()
        )));
    }
    Ok(g_neutral + model.model.reconstruct(alpha_exp)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_pairs_have_no_variance() {
        let g = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let pairs = vec![(g.clone(), g.clone()), (g.clone(), g.clone())];
        assert!(matches!(
            build_expression_basis(&pairs, 1),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn opposite_differences() {
        let n = DVector::from_vec(vec![0.5, 0.5, 0.5, 1.0, 1.0, 1.0]);
        let d = DVector::from_vec(vec![0.0, 0.3, -0.4, 0.0, 0.0, 0.0]);
        let pairs = vec![(&n + &d, n.clone()), (&n - &d, n.clone())];
        let m = build_expression_basis(&pairs, 1).unwrap();
        assert!(m.mean_diff().amax() < 1e-15);
        let dir = d.normalize();
        assert!((m.basis().column(0).dot(&dir).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_diff_is_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<_> = (0..5).map(|_| (rand_vec(9, &mut rng), rand_vec(9, &mut rng))).collect();
        let m = build_expression_basis(&pairs, 3).unwrap();
        let mut mean = DVector::zeros(9);
        for (e, n) in &pairs {
            mean += e - n;
        }
        mean /= 5.0;
        assert_eq!(m.mean_diff(), &mean);
    }

    #[test]
    fn apply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<_> = (0..6)
            .map(|_| (rand_vec(12, &mut rng), rand_vec(12, &mut rng)))
            .collect();
        let m = build_expression_basis(&pairs, 5).unwrap();
        let g = rand_vec(12, &mut rng);
        let zero = apply_expression(&g, &DVector::zeros(5), &m).unwrap();
        assert!((&zero - (&g + m.mean_diff())).amax() < 1e-15);

        let a = rand_vec(5, &mut rng);
        let b = rand_vec(5, &mut rng);
        let delta = apply_expression(&g, &a, &m).unwrap() - &zero;
        assert!((&delta - m.basis() * &a).amax() < 1e-12);
        let sum = apply_expression(&g, &(&a + &b), &m).unwrap();
        let sep = apply_expression(&g, &a, &m).unwrap() + apply_expression(&g, &b, &m).unwrap() - &zero;
        assert!((sum - sep).amax() < 1e-10);

        // the displacement does not depend on the neutral face
        let h = rand_vec(12, &mut rng);
        let dh = apply_expression(&h, &a, &m).unwrap() - &h;
        assert!((dh - (apply_expression(&g, &a, &m).unwrap() - &g)).amax() < 1e-12);

        // full rank reproduces a training expression
        let (e0, n0) = &pairs[0];
        let alpha = m.project_difference(&(e0 - n0)).unwrap();
        assert!((apply_expression(n0, &alpha, &m).unwrap() - e0).amax() < 1e-6);

        assert!(apply_expression(&DVector::zeros(3), &a, &m).is_err());
        assert!(apply_expression(&g, &DVector::zeros(4), &m).is_err());
    }
}
