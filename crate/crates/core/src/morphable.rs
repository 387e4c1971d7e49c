//! Linear (PCA) models of texture and geometry.
//!
//! Samples are columns of a `3m x n` matrix. The basis holds the leading
//! left singular vectors of the mean-centered data; singular values `delta_i`
//! give the coefficient prior `alpha_i ~ N(0, delta_i^2 / n)`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Mean, orthonormal basis (columns) and singular values of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    singular_values: DVector<f64>,
    n_train: usize,
}

impl LinearModel {
    pub fn from_parts(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        singular_values: DVector<f64>,
        n_train: usize,
    ) -> Result<Self> {
        if basis.nrows() != mean.len() || basis.ncols() != singular_values.len() {
            return Err(Error::Dimension(format!(
                "basis {}x{} does not match mean {} / {} singular values",
                basis.nrows(),
                basis.ncols(),
                mean.len(),
                singular_values.len()
            )));
        }
        Ok(Self {
            mean,
            basis,
            singular_values,
            n_train,
        })
    }

    /// Sample dimension (3m).
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of basis vectors.
    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// Prior variances `delta_i^2 / n_train`.
    pub fn variances(&self) -> DVector<f64> {
        self.singular_values.map(|d| d * d / self.n_train as f64)
    }

    /// `alpha = basis^T (sample - mean)`.
    pub fn project(&self, sample: &DVector<f64>) -> Result<DVector<f64>> {
        if sample.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "sample has length {}, model expects {}",
                sample.len(),
                self.dim()
            )));
        }
        Ok(self.basis.tr_mul(&(sample - &self.mean)))
    }

    /// `mean + basis * alpha`.
    pub fn reconstruct(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        if alpha.len() != self.k() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a model with k = {}",
                alpha.len(),
                self.k()
            )));
        }
        Ok(&self.mean + &self.basis * alpha)
    }

    /// Project every column of a `3m x n` matrix.
    pub fn project_columns(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.nrows() != self.dim() {
            return Err(Error::Dimension(format!(
                "data has {} rows, model expects {}",
                data.nrows(),
                self.dim()
            )));
        }
        let mut centered = data.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        Ok(self.basis.tr_mul(&centered))
    }

    /// The model restricted to its first `k` components.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k > self.k() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate k = {} to {k}",
                self.k()
            )));
        }
        Ok(Self {
            mean: self.mean.clone(),
            basis: self.basis.columns(0, k).into_owned(),
            singular_values: self.singular_values.rows(0, k).into_owned(),
            n_train: self.n_train,
        })
    }

    // -- FGM1 file format ------------------------------------------------
    //
    // "FGM1", u32 dim, u32 k, u32 n_train (little-endian), then f64 mean[dim],
    // f64 singular_values[k], f64 basis[dim * k] column-major.

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.dim() + self.k() + self.dim() * self.k()));
        out.extend_from_slice(b"FGM1");
        for v in [self.dim(), self.k(), self.n_train] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for x in self
            .mean
            .iter()
            .chain(self.singular_values.iter())
            .chain(self.basis.as_slice().iter())
        {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != b"FGM1" {
            return Err(Error::Format("missing FGM1 header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (dim, k, n_train) = (word(0), word(1), word(2));
        let expected = 16 + 8 * (dim + k + dim * k);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "FGM1 payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let floats: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mean = DVector::from_column_slice(&floats[..dim]);
        let sv = DVector::from_column_slice(&floats[dim..dim + k]);
        let basis = DMatrix::from_column_slice(dim, k, &floats[dim + k..]);
        Self::from_parts(mean, basis, sv, n_train)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Subtract the row mean from every column.
pub fn center_columns(data: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.ncols();
    let mut mean = DVector::zeros(data.nrows());
    for col in data.column_iter() {
        mean += col;
    }
    mean /= n as f64;
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    (mean, centered)
}

/// Leading left singular vectors and singular values of `x`, computed on
/// the smaller Gram side. Returns every direction above the numerical rank
/// threshold, sorted by descending singular value.
fn left_singular_pairs(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (rows, cols) = x.shape();
    let gram_on_columns = cols <= rows;
    let gram = if gram_on_columns {
        x.tr_mul(x)
    } else {
        x * x.transpose()
    };
    let size = gram.nrows();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let lmax = eig.eigenvalues[order[0]].max(0.0);
    // eigenvalues of the Gram matrix are accurate to ~size * eps * lmax
    let floor = lmax * (size as f64) * f64::EPSILON * 64.0;
    let kept: Vec<usize> = order
        .into_iter()
        .take_while(|&i| lmax > 0.0 && eig.eigenvalues[i] > floor)
        .collect();

    let r = kept.len();
    let mut u = DMatrix::zeros(rows, r);
    for (c, &i) in kept.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        if gram_on_columns {
            let col = x * v;
            let norm = col.norm();
            u.set_column(c, &(col / norm));
        } else {
            u.set_column(c, &v);
        }
    }

    if r > 0 && gram_on_columns {
        // restore orthonormality lost to rounding in the small directions
        let qr = u.clone().qr();
        let (q, rr) = qr.unpack();
        for c in 0..r {
            let s = if rr[(c, c)] < 0.0 { -1.0 } else { 1.0 };
            u.set_column(c, &(q.column(c) * s));
        }
    }

    // singular values from the projection, more accurate than sqrt(lambda)
    let proj = u.tr_mul(x);
    let delta = DVector::from_iterator(r, proj.row_iter().map(|row| row.norm()));
    (u, delta)
}

/// Flip each column so its largest-magnitude entry is positive.
fn fix_signs(basis: &mut DMatrix<f64>) {
    for mut col in basis.column_iter_mut() {
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Build a `k`-component model from the columns of `data` (`3m x n`).
pub fn build_basis(data: &DMatrix<f64>, k: usize) -> Result<LinearModel> {
    let (dim, n) = data.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    if k == 0 || k > dim.min(n) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={} for {dim}-dimensional data with {n} samples",
            dim.min(n)
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("data contains non-finite values".into()));
    }
    let (mean, centered) = center_columns(data);
    let (u, delta) = left_singular_pairs(&centered);
    if delta.len() < k {
        return Err(Error::RankDeficient {
            requested: k,
            rank: delta.len(),
        });
    }
    let mut basis = u.columns(0, k).into_owned();
    fix_signs(&mut basis);
    let sv = delta.rows(0, k).into_owned();
    LinearModel::from_parts(mean, basis, sv, n)
}

/// Draw `alpha_i ~ N(0, delta_i^2 / n_train)` independently.
pub fn sample_coefficients<R: Rng + ?Sized>(model: &LinearModel, rng: &mut R) -> Result<DVector<f64>> {
    if model.n_train < 2 {
        return Err(Error::InvalidArgument(
            "prior needs a model trained on at least 2 samples".into(),
        ));
    }
    if let Some(i) = model.singular_values.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::InvalidArgument(format!("component {i} has zero variance")));
    }
    let sigma = model.variances().map(f64::sqrt);
    Ok(DVector::from_iterator(
        model.k(),
        sigma.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)),
    ))
}

/// Shared basis of stacked geometry and texture samples.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub mean_g: DVector<f64>,
    pub mean_t: DVector<f64>,
    pub u_g: DMatrix<f64>,
    pub u_t: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub n_train: usize,
}

impl JointModel {
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    /// The stacked `[U_g; U_t]` model.
    pub fn to_linear(&self) -> LinearModel {
        let dg = self.mean_g.len();
        let dim = dg + self.mean_t.len();
        let mean = DVector::from_fn(dim, |i, _| if i < dg { self.mean_g[i] } else { self.mean_t[i - dg] });
        let basis = DMatrix::from_fn(dim, self.k(), |i, j| {
            if i < dg {
                self.u_g[(i, j)]
            } else {
                self.u_t[(i - dg, j)]
            }
        });
        LinearModel {
            mean,
            basis,
            singular_values: self.singular_values.clone(),
            n_train: self.n_train,
        }
    }

    /// Split a stacked model whose upper `geometry_dim` rows are geometry.
    pub fn from_linear(model: &LinearModel, geometry_dim: usize) -> Result<Self> {
        if geometry_dim > model.dim() {
            return Err(Error::Dimension("geometry block larger than model".into()));
        }
        let dt = model.dim() - geometry_dim;
        Ok(Self {
            mean_g: model.mean.rows(0, geometry_dim).into_owned(),
            mean_t: model.mean.rows(geometry_dim, dt).into_owned(),
            u_g: model.basis.rows(0, geometry_dim).into_owned(),
            u_t: model.basis.rows(geometry_dim, dt).into_owned(),
            singular_values: model.singular_values.clone(),
            n_train: model.n_train,
        })
    }
}

/// Stack `G` over `T` (matching column order) and decompose jointly.
pub fn build_joint_basis(g: &DMatrix<f64>, t: &DMatrix<f64>, k: usize) -> Result<JointModel> {
    if g.ncols() != t.ncols() {
        return Err(Error::Dimension(format!(
            "{} geometry samples vs {} texture samples",
            g.ncols(),
            t.ncols()
        )));
    }
    let stacked = stack_rows(g, t);
    let model = build_basis(&stacked, k)?;
    JointModel::from_linear(&model, g.nrows())
}

pub(crate) fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let r = top.nrows();
    DMatrix::from_fn(r + bottom.nrows(), top.ncols(), |i, j| {
        if i < r {
            top[(i, j)]
        } else {
            bottom[(i - r, j)]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_data(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn two_sample_basis_by_hand() {
        let x1 = DVector::from_vec(vec![1.0, 2.0, 3.0, 0.0, -1.0, 2.0]);
        let x2 = DVector::from_vec(vec![0.0, 4.0, 1.0, 1.0, -1.0, 0.0]);
        let data = DMatrix::from_columns(&[x1.clone(), x2.clone()]);
        let model = build_basis(&data, 1).unwrap();
        let d = &x1 - &x2;
        assert!((model.singular_values()[0] - d.norm() / 2f64.sqrt()).abs() < 1e-12);
        let dir = d.normalize();
        let b = model.basis().column(0);
        assert!((b.dot(&dir).abs() - 1.0).abs() < 1e-12);
        assert_eq!(model.mean(), &((&x1 + &x2) / 2.0));
    }

    #[test]
    fn identical_samples_have_no_rank() {
        let col = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let data = DMatrix::from_columns(&[col.clone(), col.clone(), col]);
        assert!(matches!(
            build_basis(&data, 1),
            Err(Error::RankDeficient { requested: 1, rank: 0 })
        ));
    }

    #[test]
    fn too_large_k_rejected() {
        let data = random_data(6, 4, 1);
        assert!(matches!(build_basis(&data, 5), Err(Error::InvalidArgument(_))));
        // centered data of 4 samples has rank 3
        assert!(matches!(
            build_basis(&data, 4),
            Err(Error::RankDeficient { rank: 3, .. })
        ));
    }

    #[test]
    fn full_rank_reconstruction_is_exact() {
        let data = random_data(30, 10, 2);
        let model = build_basis(&data, 9).unwrap();
        for c in 0..10 {
            let x = data.column(c).into_owned();
            let back = model.reconstruct(&model.project(&x).unwrap()).unwrap();
            assert!((&back - &x).norm() / x.norm() < 1e-10);
        }
    }

    #[test]
    fn wide_data_uses_row_gram() {
        // more samples than dimensions
        let data = random_data(5, 40, 3);
        let model = build_basis(&data, 5).unwrap();
        let gram = model.basis().tr_mul(model.basis());
        assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn orthonormal_and_sorted() {
        let data = random_data(60, 25, 4);
        let model = build_basis(&data, 24).unwrap();
        let gram = model.basis().tr_mul(model.basis());
        assert!((gram - DMatrix::identity(24, 24)).amax() < 1e-8);
        let sv = model.singular_values();
        assert!(sv.as_slice().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn singular_values_account_for_total_energy() {
        let data = random_data(40, 12, 5);
        let model = build_basis(&data, 11).unwrap();
        let (_, centered) = center_columns(&data);
        let energy: f64 = model.singular_values().iter().map(|d| d * d).sum();
        assert!((energy - centered.norm_squared()).abs() < 1e-9 * energy);
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let data = random_data(20, 8, 6);
        let model = build_basis(&data, 5).unwrap();
        for col in model.basis().column_iter() {
            let big = col
                .iter()
                .copied()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
        assert_eq!(model, build_basis(&data, 5).unwrap());
    }

    #[test]
    fn projection_examples() {
        let data = random_data(12, 6, 7);
        let model = build_basis(&data, 4).unwrap();
        let zero = model.project(model.mean()).unwrap();
        assert!(zero.amax() < 1e-15);
        let x = model.mean() + model.basis().column(0) * 2.5;
        let a = model.project(&x).unwrap();
        assert!((a[0] - 2.5).abs() < 1e-12 && a.rows(1, 3).amax() < 1e-12);
        let alpha = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1]);
        let round = model.project(&model.reconstruct(&alpha).unwrap()).unwrap();
        assert!((round - alpha).amax() < 1e-10);
        assert!(model.project(&DVector::zeros(5)).is_err());
        assert!(model.reconstruct(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn fgm_roundtrip_is_bit_exact() {
        let data = random_data(9, 5, 8);
        let model = build_basis(&data, 3).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..4], b"FGM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 9);
        assert_eq!(LinearModel::from_bytes(&bytes).unwrap(), model);
        assert!(LinearModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_has_prior_variance() {
        let data = random_data(15, 8, 9);
        let model = build_basis(&data, 3).unwrap();
        let a = sample_coefficients(&model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_coefficients(&model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut sq = DVector::zeros(3);
        for _ in 0..draws {
            let s = sample_coefficients(&model, &mut rng).unwrap();
            sq += s.component_mul(&s);
        }
        let var = sq / draws as f64;
        for i in 0..3 {
            let target = model.singular_values()[i].powi(2) / 8.0;
            assert!((var[i] / target - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn sampling_rejects_single_sample_models() {
        let m = LinearModel::from_parts(
            DVector::zeros(3),
            DMatrix::identity(3, 1),
            DVector::from_vec(vec![1.0]),
            1,
        )
        .unwrap();
        assert!(sample_coefficients(&m, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn duplicated_joint_data_splits_evenly() {
        let g = random_data(10, 6, 10);
        let joint = build_joint_basis(&g, &g, 5).unwrap();
        for c in 0..5 {
            let (ug, ut) = (joint.u_g.column(c), joint.u_t.column(c));
            assert!((ug - ut).amax() < 1e-10);
            assert!((ug.norm() - 0.5f64.sqrt()).abs() < 1e-10);
        }
        let stacked = joint.to_linear();
        let gram = stacked.basis().tr_mul(stacked.basis());
        assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-8);
    }

    #[test]
    fn joint_full_rank_reconstructs_pairs() {
        let g = random_data(10, 7, 11);
        let t = random_data(8, 7, 12);
        let joint = build_joint_basis(&g, &t, 6).unwrap();
        let lin = joint.to_linear();
        let stacked = stack_rows(&g, &t);
        for c in 0..7 {
            let x = stacked.column(c).into_owned();
            let beta = lin.project(&x).unwrap();
            let gb = &joint.mean_g + &joint.u_g * &beta;
            let tb = &joint.mean_t + &joint.u_t * &beta;
            assert!((gb - g.column(c)).norm() < 1e-6 * g.column(c).norm());
            assert!((tb - t.column(c)).norm() < 1e-6 * t.column(c).norm());
        }
    }
}
