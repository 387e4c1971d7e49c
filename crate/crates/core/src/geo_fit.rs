//! Texture-to-geometry estimators: random prior draw, nearest neighbor in
//! texture-coefficient space, MAP on a joint basis, and least-squares
//! coefficient regression.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::morphable::{build_joint_basis, sample_coefficients, stack_rows, JointModel, LinearModel};

/// Geometry drawn from the model prior.
pub fn fit_random<R: Rng + ?Sized>(geom_model: &LinearModel, rng: &mut R) -> Result<DVector<f64>> {
    geom_model.reconstruct(&sample_coefficients(geom_model, rng)?)
}

/// Index of the column of `train` closest to `query` (ties go to the lowest index).
pub fn nearest_column(query: &DVector<f64>, train: &DMatrix<f64>) -> Result<usize> {
    if train.ncols() == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if train.nrows() != query.len() {
        return Err(Error::Dimension(format!(
            "query has {} coefficients, training set {}",
            query.len(),
            train.nrows()
        )));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (j, col) in train.column_iter().enumerate() {
        let d = (col - query).norm_squared();
        if d < best.0 {
            best = (d, j);
        }
    }
    Ok(best.1)
}

/// Geometry of the training sample whose texture coefficients are nearest.
pub fn fit_nearest(
    texture: &DVector<f64>,
    train_tex_coeffs: &DMatrix<f64>,
    train_geom_coeffs: &DMatrix<f64>,
    texture_model: &LinearModel,
    geometry_model: &LinearModel,
) -> Result<DVector<f64>> {
    if train_tex_coeffs.ncols() != train_geom_coeffs.ncols() {
        return Err(Error::Dimension(
            "texture and geometry coefficient sets differ in size".into(),
        ));
    }
    let alpha_t = texture_model.project(texture)?;
    let j = nearest_column(&alpha_t, train_tex_coeffs)?;
    geometry_model.reconstruct(&train_geom_coeffs.column(j).into_owned())
}

/// Parameters of the joint-basis MAP estimator.
#[derive(Debug, Clone)]
pub struct MlParams {
    pub joint: JointModel,
    pub sigma_beta: DMatrix<f64>,
    pub sigma_noise_diag: DVector<f64>,
}

/// Relative floor applied to the texture noise variances.
pub const NOISE_FLOOR: f64 = 1e-12;

/// Fit the joint basis and its Gaussian prior / noise model.
pub fn estimate_ml_params(g: &DMatrix<f64>, t: &DMatrix<f64>, k: usize) -> Result<MlParams> {
    let joint = build_joint_basis(g, t, k)?;
    let n = g.ncols();
    let stacked = stack_rows(g, t);
    let beta = joint.to_linear().project_columns(&stacked)?;
    let denom = (n - 1) as f64;

    let mut sigma_beta = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = beta.row(i).dot(&beta.row(j)) / denom;
            sigma_beta[(i, j)] = v;
            sigma_beta[(j, i)] = v;
        }
    }

    let dt = t.nrows();
    let mut noise = DVector::zeros(dt);
    let fitted = &joint.u_t * &beta;
    for c in 0..n {
        for r in 0..dt {
            let e = t[(r, c)] - fitted[(r, c)] - joint.mean_t[r];
            noise[r] += e * e;
        }
    }
    noise /= denom;

    let max = noise.max();
    let floor = if max > 0.0 {
        NOISE_FLOOR * max
    } else {
        // exactly representable data: scale the floor by the texture variance
        let centered_energy: f64 = (0..n)
            .map(|c| (t.column(c) - &joint.mean_t).norm_squared())
            .sum::<f64>()
            / (denom * dt as f64);
        NOISE_FLOOR * if centered_energy > 0.0 { centered_energy } else { 1.0 }
    };
    noise.apply(|x| *x = x.max(floor));

    Ok(MlParams {
        joint,
        sigma_beta,
        sigma_noise_diag: noise,
    })
}

/// `beta* = (U^T D^-1 U + S^-1)^-1 U^T D^-1 r` for a diagonal noise model
/// `D` and prior covariance `S`. `prior = None` drops the prior term.
pub fn map_coefficients(
    u: &DMatrix<f64>,
    noise_diag: &DVector<f64>,
    prior: Option<&DMatrix<f64>>,
    residual: &DVector<f64>,
) -> Result<DVector<f64>> {
    if u.nrows() != noise_diag.len() || u.nrows() != residual.len() {
        return Err(Error::Dimension("basis, noise and residual lengths differ".into()));
    }
    if noise_diag.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::InvalidArgument("noise variances must be positive".into()));
    }
    let k = u.ncols();
    let mut weighted = u.clone();
    for (r, mut row) in weighted.row_iter_mut().enumerate() {
        row /= noise_diag[r];
    }
    let mut system = weighted.tr_mul(u);
    let rhs = weighted.tr_mul(residual);
    if let Some(s) = prior {
        if s.shape() != (k, k) {
            return Err(Error::Dimension(format!("prior must be {k}x{k}")));
        }
        let inv = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Solver("prior covariance is not positive definite".into()))?
            .inverse();
        system += inv;
    }
    system = (&system + system.transpose()) * 0.5;
    let chol = system
        .cholesky()
        .ok_or_else(|| Error::Solver("regularized normal matrix is singular".into()))?;
    Ok(chol.solve(&rhs))
}

/// Shared coefficients `beta*` for a texture.
pub fn ml_beta(texture: &DVector<f64>, params: &MlParams) -> Result<DVector<f64>> {
    let j = &params.joint;
    if texture.len() != j.mean_t.len() {
        return Err(Error::Dimension(format!(
            "texture has length {}, model expects {}",
            texture.len(),
            j.mean_t.len()
        )));
    }
    map_coefficients(
        &j.u_t,
        &params.sigma_noise_diag,
        Some(&params.sigma_beta),
        &(texture - &j.mean_t),
    )
}

/// `g = U_g beta* + mu_g`.
pub fn fit_ml(texture: &DVector<f64>, params: &MlParams) -> Result<DVector<f64>> {
    let beta = ml_beta(texture, params)?;
    Ok(&params.joint.u_g * beta + &params.joint.mean_g)
}

/// Least-squares regression from texture to geometry coefficients.
#[derive(Debug, Clone)]
pub struct LsParams {
    /// `k_t x k_g`, with `alpha_g = W^T alpha_t`.
    pub w: DMatrix<f64>,
    pub texture_model: LinearModel,
    pub geometry_model: LinearModel,
}

impl LsParams {
    pub fn new(w: DMatrix<f64>, texture_model: LinearModel, geometry_model: LinearModel) -> Result<Self> {
        if w.nrows() != texture_model.k() || w.ncols() != geometry_model.k() {
            return Err(Error::Dimension(format!(
                "W is {}x{}, models have k_t = {}, k_g = {}",
                w.nrows(),
                w.ncols(),
                texture_model.k(),
                geometry_model.k()
            )));
        }
        Ok(Self {
            w,
            texture_model,
            geometry_model,
        })
    }

    pub fn k_t(&self) -> usize {
        self.w.nrows()
    }

    pub fn k_g(&self) -> usize {
        self.w.ncols()
    }
}

/// `W* = argmin ||W^T A_t - A_g||_F = (A_t^T)^+ A_g^T`, via SVD.
pub fn train_ls(a_t: &DMatrix<f64>, a_g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a_t.ncols() != a_g.ncols() {
        return Err(Error::Dimension(format!(
            "{} texture vs {} geometry samples",
            a_t.ncols(),
            a_g.ncols()
        )));
    }
    let at_t = a_t.transpose();
    let svd = at_t.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = smax * (at_t.nrows().max(at_t.ncols()) as f64) * f64::EPSILON;
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::Solver(format!("pseudo-inverse failed: {e}")))?;
    Ok(pinv * a_g.transpose())
}

pub fn fit_ls(texture: &DVector<f64>, params: &LsParams) -> Result<DVector<f64>> {
    let alpha_t = params.texture_model.project(texture)?;
    let alpha_g = params.w.tr_mul(&alpha_t);
    params.geometry_model.reconstruct(&alpha_g)
}

/// Training-set coefficients for the nearest-neighbor estimator.
#[derive(Debug, Clone)]
pub struct NnParams {
    pub texture_model: LinearModel,
    pub geometry_model: LinearModel,
    pub tex_coeffs: DMatrix<f64>,
    pub geom_coeffs: DMatrix<f64>,
}

/// One of the four estimators, ready to apply to textures.
#[derive(Debug, Clone)]
pub enum Estimator {
    /// Prior draws; sample `i` uses seed `seed + i`.
    Random {
        model: LinearModel,
        seed: u64,
    },
    Nearest(NnParams),
    Ml(MlParams),
    Ls(LsParams),
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Random { .. } => "random",
            Estimator::Nearest(_) => "nn",
            Estimator::Ml(_) => "ml",
            Estimator::Ls(_) => "ls",
        }
    }

    /// Estimate the geometry for test sample `index` with the given texture.
    pub fn estimate(&self, texture: &DVector<f64>, index: usize) -> Result<DVector<f64>> {
        match self {
            Estimator::Random { model, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
                fit_random(model, &mut rng)
            }
            Estimator::Nearest(p) => fit_nearest(
                texture,
                &p.tex_coeffs,
                &p.geom_coeffs,
                &p.texture_model,
                &p.geometry_model,
            ),
            Estimator::Ml(p) => fit_ml(texture, p),
            Estimator::Ls(p) => fit_ls(texture, p),
        }
    }
}

/// Fit all four estimators on paired training data (`3m x n` each).
pub struct TrainedEstimators {
    pub random: Estimator,
    pub nearest: Estimator,
    pub ml: Estimator,
    pub ls: Estimator,
}

impl TrainedEstimators {
    pub fn all(&self) -> [&Estimator; 4] {
        [&self.random, &self.nearest, &self.ml, &self.ls]
    }
}

pub fn train_estimators(
    g: &DMatrix<f64>,
    t: &DMatrix<f64>,
    k_t: usize,
    k_g: usize,
    k_joint: usize,
    seed: u64,
) -> Result<TrainedEstimators> {
    let texture_model = crate::morphable::build_basis(t, k_t)?;
    let geometry_model = crate::morphable::build_basis(g, k_g)?;
    let a_t = texture_model.project_columns(t)?;
    let a_g = geometry_model.project_columns(g)?;
    let w = train_ls(&a_t, &a_g)?;
    let ls = LsParams::new(w, texture_model.clone(), geometry_model.clone())?;
    let ml = estimate_ml_params(g, t, k_joint)?;
    Ok(TrainedEstimators {
        random: Estimator::Random {
            model: geometry_model.clone(),
            seed,
        },
        nearest: Estimator::Nearest(NnParams {
            texture_model,
            geometry_model,
            tex_coeffs: a_t,
            geom_coeffs: a_g,
        }),
        ml: Estimator::Ml(ml),
        ls: Estimator::Ls(ls),
    })
}

/// Mean over vertices of the Euclidean distance between two `3m` geometries.
pub fn mean_vertex_distance(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() || !a.len().is_multiple_of(3) || a.is_empty() {
        return Err(Error::Dimension(format!(
            "geometry lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let m = a.len() / 3;
    let total: f64 = (0..m)
        .map(|v| {
            let d = [
                a[3 * v] - b[3 * v],
                a[3 * v + 1] - b[3 * v + 1],
                a[3 * v + 2] - b[3 * v + 2],
            ];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    Ok(total / m as f64)
}

/// Per-sample and mean vertex errors of an estimator on held-out pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub method: String,
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

impl FitReport {
    /// `sample,error` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,method,error\n");
        for (i, e) in self.per_sample.iter().enumerate() {
            writeln!(s, "{i},{},{e}", self.method).expect("write to string");
        }
        s
    }
}

/// Evaluate on columns of `test_textures` / `test_geometries`.
pub fn evaluate_fit(
    method: &Estimator,
    test_textures: &DMatrix<f64>,
    test_geometries: &DMatrix<f64>,
) -> Result<FitReport> {
    let n = test_textures.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if test_geometries.ncols() != n {
        return Err(Error::Dimension("test textures and geometries differ in count".into()));
    }
    let per_sample = (0..n)
        .into_par_iter()
        .map(|i| {
            let est = method.estimate(&test_textures.column(i).into_owned(), i)?;
            mean_vertex_distance(&est, &test_geometries.column(i).into_owned())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    Ok(FitReport {
        method: method.name().to_string(),
        per_sample,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::build_basis;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn ls_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(5, 50, &mut rng);
        let w = train_ls(&a, &a).unwrap();
        assert!((w - DMatrix::identity(5, 5)).amax() < 1e-10);
        let w2 = train_ls(&a, &(&a * 2.0)).unwrap();
        assert!((w2 - DMatrix::identity(5, 5) * 2.0).amax() < 1e-10);
    }

    #[test]
    fn ls_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a_t = random_matrix(5, 50, &mut rng);
        let a_g = random_matrix(4, 50, &mut rng);
        let w = train_ls(&a_t, &a_g).unwrap();
        let oracle = (&a_t * a_t.transpose()).lu().solve(&(&a_t * a_g.transpose())).unwrap();
        assert!((w - oracle).amax() < 1e-8);
    }

    #[test]
    fn ls_rank_deficient_uses_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // fewer samples than texture coefficients
        let a_t = random_matrix(6, 4, &mut rng);
        let a_g = random_matrix(3, 4, &mut rng);
        let w = train_ls(&a_t, &a_g).unwrap();
        assert!((w.tr_mul(&a_t) - &a_g).amax() < 1e-10);
    }

    #[test]
    fn nearest_ties_go_to_lowest_index() {
        let train = DMatrix::from_column_slice(1, 3, &[1.0, -1.0, 5.0]);
        assert_eq!(nearest_column(&DVector::from_vec(vec![0.0]), &train).unwrap(), 0);
        assert_eq!(nearest_column(&DVector::from_vec(vec![100.0]), &train).unwrap(), 2);
        assert!(nearest_column(&DVector::from_vec(vec![0.0]), &DMatrix::zeros(1, 0)).is_err());
    }

    #[test]
    fn nearest_returns_training_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_matrix(12, 8, &mut rng);
        let g = random_matrix(9, 8, &mut rng);
        let tm = build_basis(&t, 7).unwrap();
        let gm = build_basis(&g, 7).unwrap();
        let (at, ag) = (tm.project_columns(&t).unwrap(), gm.project_columns(&g).unwrap());
        let est = fit_nearest(&t.column(3).into_owned(), &at, &ag, &tm, &gm).unwrap();
        assert!((est - g.column(3)).amax() < 1e-10);
    }

    #[test]
    fn map_matches_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_matrix(30, 4, &mut rng);
        let d = DVector::from_fn(30, |_, _| rng.random_range(0.5..2.0));
        let l = random_matrix(4, 4, &mut rng);
        let s = &l * l.transpose() + DMatrix::identity(4, 4);
        let r = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let beta = map_coefficients(&u, &d, Some(&s), &r).unwrap();

        let dinv = d.map(|x| 1.0 / x);
        let sinv = s.clone().try_inverse().unwrap();
        let grad = |b: &DVector<f64>| {
            let e = &u * b - &r;
            u.tr_mul(&e.component_mul(&dinv)) * 2.0 + &sinv * b * 2.0
        };
        let mut b = DVector::zeros(4);
        for _ in 0..20_000 {
            b -= grad(&b) * 0.01;
        }
        assert!((&b - &beta).norm() / beta.norm() < 1e-6);
    }

    #[test]
    fn ml_mean_texture_gives_mean_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_matrix(9, 20, &mut rng);
        let t = random_matrix(12, 20, &mut rng);
        let p = estimate_ml_params(&g, &t, 5).unwrap();
        assert_eq!(p.sigma_beta, p.sigma_beta.transpose());
        let est = fit_ml(&p.joint.mean_t.clone(), &p).unwrap();
        assert!((est - &p.joint.mean_g).amax() < 1e-14);
    }

    #[test]
    fn ml_huge_noise_returns_prior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_matrix(9, 20, &mut rng);
        let t = random_matrix(12, 20, &mut rng);
        let mut p = estimate_ml_params(&g, &t, 5).unwrap();
        p.sigma_noise_diag.fill(1e12);
        let beta = ml_beta(&t.column(0).into_owned(), &p).unwrap();
        assert!(beta.amax() < 1e-9);
    }

    #[test]
    fn ml_noise_free_hits_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_matrix(9, 6, &mut rng);
        let t = random_matrix(12, 6, &mut rng);
        let p = estimate_ml_params(&g, &t, 5).unwrap();
        let max = p.sigma_noise_diag.max();
        assert!(max < 1e-20, "noise diag max {max}");
        assert!(p.sigma_noise_diag.min() > 0.0);
    }

    #[test]
    fn ml_without_prior_is_generalized_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_matrix(20, 3, &mut rng);
        let d = DVector::from_fn(20, |_, _| rng.random_range(0.5..2.0));
        let r = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let gls = map_coefficients(&u, &d, None, &r).unwrap();
        let wide = map_coefficients(&u, &d, Some(&(DMatrix::identity(3, 3) * 1e12)), &r).unwrap();
        assert!((gls - wide).amax() < 1e-9);
    }

    #[test]
    fn ls_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_matrix(12, 30, &mut rng);
        let g = random_matrix(9, 30, &mut rng);
        let tm = build_basis(&t, 6).unwrap();
        let gm = build_basis(&g, 5).unwrap();
        let w = train_ls(&tm.project_columns(&t).unwrap(), &gm.project_columns(&g).unwrap()).unwrap();
        let p = LsParams::new(w, tm.clone(), gm.clone()).unwrap();
        assert!((fit_ls(tm.mean(), &p).unwrap() - gm.mean()).amax() < 1e-14);
        let a = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let f = |x: DVector<f64>| fit_ls(&(tm.mean() + x), &p).unwrap() - gm.mean();
        assert!((f(&a + &b) - f(a) - f(b)).amax() < 1e-8);
    }

    #[test]
    fn ls_recovers_exactly_linear_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (kt, kg, n) = (4, 3, 40);
        let vt = build_basis(&random_matrix(15, 10, &mut rng), kt).unwrap();
        let vg = build_basis(&random_matrix(12, 10, &mut rng), kg).unwrap();
        let w_true = random_matrix(kt, kg, &mut rng);
        let a_t = random_matrix(kt, n, &mut rng);
        let a_g = w_true.tr_mul(&a_t);
        let w = train_ls(&a_t, &a_g).unwrap();
        let p = LsParams::new(w, vt.clone(), vg.clone()).unwrap();
        for i in 0..n {
            let t = vt.reconstruct(&a_t.column(i).into_owned()).unwrap();
            let g = vg.reconstruct(&a_g.column(i).into_owned()).unwrap();
            assert!((fit_ls(&t, &p).unwrap() - g).amax() < 1e-6);
        }
    }

    #[test]
    fn vertex_distance_examples() {
        let a = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(mean_vertex_distance(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x) + DVector::from_vec(vec![3.0, 4.0, 0.0, 3.0, 4.0, 0.0]);
        assert!((mean_vertex_distance(&a, &b).unwrap() - 5.0).abs() < 1e-15);
        assert!(mean_vertex_distance(&a, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn random_fit_is_reproducible_and_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = build_basis(&random_matrix(6, 10, &mut rng), 3).unwrap();
        let a = fit_random(&model, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = fit_random(&model, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let draws = 10_000;
        let mut sum = DVector::zeros(6);
        let mut sq = DVector::zeros(6);
        for _ in 0..draws {
            let x = fit_random(&model, &mut rng).unwrap() - model.mean();
            sq += x.component_mul(&x);
            sum += x;
        }
        for i in 0..6 {
            let mean = sum[i] / draws as f64;
            let se = (sq[i] / draws as f64).sqrt() / (draws as f64).sqrt();
            assert!(mean.abs() < 2.5 * se + 1e-15);
        }
    }

    #[test]
    fn evaluate_rejects_empty_test_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = build_basis(&random_matrix(6, 10, &mut rng), 3).unwrap();
        let est = Estimator::Random { model, seed: 0 };
        assert!(evaluate_fit(&est, &DMatrix::zeros(6, 0), &DMatrix::zeros(6, 0)).is_err());
    }
}
