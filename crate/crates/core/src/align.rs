//! Template-to-scan registration: similarity alignment from landmarks,
//! then non-rigid deformation of the template by gradient descent on
//! landmark, point-to-surface and smoothness energies.

use log::debug;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::spatial::TriangleBvh;

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    /// The mesh with transformed positions.
    pub fn apply_mesh(&self, mesh: &Mesh) -> Result<Mesh> {
        mesh.with_positions(self.apply_all(mesh.vertices()))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
            scale: self.scale * other.scale,
        }
    }

    /// 4x4 row-major homogeneous matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let m = self.rotation * self.scale;
        let mut out = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = m[(r, c)];
            }
            out[r][3] = self.translation[r];
        }
        out[3][3] = 1.0;
        out
    }
}

/// Result of [`rigid_align`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidFit {
    pub transform: SimilarityTransform,
    /// `sum_i ||T(p_i) - q_i||^2`.
    pub residual_sum_sq: f64,
    /// RMS residual divided by the RMS spread of the target points.
    pub residual_relative: f64,
}

/// Least-squares similarity transform taking `src` onto `dst` (Umeyama).
pub fn rigid_align(src: &[Vec3], dst: &[Vec3]) -> Result<RigidFit> {
    if src.len() != dst.len() {
        return Err(Error::Dimension(format!(
            "{} source vs {} target landmarks",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 landmarks, got {n}")));
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vec3>() / nf;
    let mu_d = dst.iter().sum::<Vec3>() / nf;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (p, q) in src.iter().zip(dst) {
        let (a, b) = (p - mu_s, q - mu_d);
        cov += b * a.transpose();
        src_cov += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= nf;
    var_s /= nf;

    let spread = src_cov.symmetric_eigenvalues();
    let (lo, hi) = sorted_pair(spread.as_slice());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::Degenerate("source landmarks are collinear or coincident".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    // nalgebra does not sort singular values; a reflection is undone on the
    // smallest one
    let mut d = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        let sv = &svd.singular_values;
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).expect("3 values");
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    let transform = SimilarityTransform {
        rotation,
        translation,
        scale,
    };

    let residual_sum_sq: f64 = src
        .iter()
        .zip(dst)
        .map(|(p, q)| (transform.apply(p) - q).norm_squared())
        .sum();
    let dst_spread = dst.iter().map(|q| (q - mu_d).norm_squared()).sum::<f64>();
    let residual_relative = if dst_spread > 0.0 {
        (residual_sum_sq / dst_spread).sqrt()
    } else {
        0.0
    };
    Ok(RigidFit {
        transform,
        residual_sum_sq,
        residual_relative,
    })
}

fn sorted_pair(eigs: &[f64]) -> (f64, f64) {
    let mut v = eigs.to_vec();
    v.sort_by(f64::total_cmp);
    // second-largest vs largest: collinear sets have two vanishing directions
    (v[1], v[2])
}

/// Weights and step control of the non-rigid fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub landmark_weight: f64,
    pub surface_weight: f64,
    pub smooth_weight: f64,
    /// Step along the Jacobi-preconditioned descent direction.
    pub step_size: f64,
    pub max_iters: usize,
    /// `(iteration, smooth_weight)` changes, iterations strictly increasing.
    /// `None` uses the default halving every `max_iters / 4` iterations.
    pub schedule: Option<Vec<(usize, f64)>>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            landmark_weight: 1.0,
            surface_weight: 1.0,
            smooth_weight: 1.0,
            step_size: 0.5,
            max_iters: 200,
            schedule: None,
        }
    }
}

/// Largest number of step halvings per iteration.
pub const MAX_HALVINGS: usize = 20;

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.landmark_weight, self.surface_weight, self.smooth_weight];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument(
                "energy weights must be finite and non-negative".into(),
            ));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidArgument(
                "at least one energy weight must be positive".into(),
            ));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        if let Some(s) = &self.schedule {
            if s.windows(2).any(|p| p[0].0 >= p[1].0) {
                return Err(Error::InvalidArgument(
                    "schedule iterations must be strictly increasing".into(),
                ));
            }
            if s.iter().any(|(_, x)| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidArgument("scheduled weights must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// The effective schedule.
    pub fn resolved_schedule(&self) -> Vec<(usize, f64)> {
        match &self.schedule {
            Some(s) => s.clone(),
            None => {
                let quarter = self.max_iters / 4;
                if quarter == 0 {
                    return Vec::new();
                }
                (1..4)
                    .map(|k| (k * quarter, self.smooth_weight * 0.5f64.powi(k as i32)))
                    .collect()
            }
        }
    }

    fn smooth_weight_at(&self, schedule: &[(usize, f64)], iteration: usize) -> f64 {
        schedule
            .iter()
            .rev()
            .find(|(it, _)| *it <= iteration)
            .map(|(_, w)| *w)
            .unwrap_or(self.smooth_weight)
    }
}

/// The three energy terms, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EnergyTerms {
    pub landmark: f64,
    pub surface: f64,
    pub smooth: f64,
}

impl EnergyTerms {
    pub fn total(&self, w: &Weights) -> f64 {
        w.landmark * self.landmark + w.surface * self.surface + w.smooth * self.smooth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub landmark: f64,
    pub surface: f64,
    pub smooth: f64,
}

/// Fixed data of a registration: the rest (rigidly aligned) template, the
/// scan and its BVH, and landmark correspondences.
pub struct AlignProblem<'a> {
    template: &'a Mesh,
    scan: &'a Mesh,
    bvh: TriangleBvh,
    /// `(template vertex, target point)`.
    landmarks: Vec<(usize, Vec3)>,
}

impl<'a> AlignProblem<'a> {
    /// `pairs` are `(template vertex, scan vertex)` indices.
    pub fn new(template: &'a Mesh, scan: &'a Mesh, pairs: &[(usize, usize)]) -> Result<Self> {
        if scan.n_triangles() == 0 {
            return Err(Error::InvalidMesh("scan has no triangles".into()));
        }
        let mut landmarks = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if a >= template.n_vertices() || b >= scan.n_vertices() {
                return Err(Error::InvalidArgument(format!("landmark pair ({a}, {b}) out of range")));
            }
            landmarks.push((a, scan.vertices()[b]));
        }
        Ok(Self {
            template,
            scan,
            bvh: TriangleBvh::new(scan),
            landmarks,
        })
    }

    pub fn scan(&self) -> &Mesh {
        self.scan
    }

    fn rest(&self) -> &[Vec3] {
        self.template.vertices()
    }

    /// Closest scan points for every position, in vertex order.
    fn closest(&self, x: &[Vec3]) -> Vec<Vec3> {
        x.par_iter()
            .map(|p| self.bvh.closest_point(p).expect("non-empty scan").point)
            .collect()
    }

    pub fn energy(&self, x: &[Vec3]) -> EnergyTerms {
        let cp = self.closest(x);
        self.energy_with(x, &cp)
    }

    fn energy_with(&self, x: &[Vec3], cp: &[Vec3]) -> EnergyTerms {
        let landmark = self.landmarks.iter().map(|(a, q)| (x[*a] - q).norm_squared()).sum();
        let surface = x.iter().zip(cp).map(|(p, q)| (p - q).norm_squared()).sum();
        let rest = self.rest();
        let smooth = self
            .template
            .edges()
            .iter()
            .map(|&[i, j]| ((x[i] - rest[i]) - (x[j] - rest[j])).norm_squared())
            .sum();
        EnergyTerms {
            landmark,
            surface,
            smooth,
        }
    }

    /// Gradient of the weighted total energy.
    pub fn gradient(&self, x: &[Vec3], w: &Weights) -> Vec<Vec3> {
        let cp = self.closest(x);
        self.gradient_with(x, &cp, w)
    }

    fn gradient_with(&self, x: &[Vec3], cp: &[Vec3], w: &Weights) -> Vec<Vec3> {
        let rest = self.rest();
        let mut g: Vec<Vec3> = (0..x.len())
            .into_par_iter()
            .map(|v| {
                let d = x[v] - rest[v];
                let mut lap = Vec3::zeros();
                for &u in self.template.one_ring(v) {
                    lap += d - (x[u] - rest[u]);
                }
                (x[v] - cp[v]) * (2.0 * w.surface) + lap * (2.0 * w.smooth)
            })
            .collect();
        for (a, q) in &self.landmarks {
            g[*a] += (x[*a] - q) * (2.0 * w.landmark);
        }
        g
    }

    /// Diagonal of the Gauss-Newton Hessian, used as a preconditioner.
    fn diagonal(&self, w: &Weights) -> Vec<f64> {
        let mut d: Vec<f64> = (0..self.template.n_vertices())
            .map(|v| 2.0 * w.surface + 2.0 * w.smooth * self.template.one_ring(v).len() as f64)
            .collect();
        for (a, _) in &self.landmarks {
            d[*a] += 2.0 * w.landmark;
        }
        for x in &mut d {
            if *x <= 0.0 {
                *x = 1.0;
            }
        }
        d
    }
}

/// Energy terms of `current` against `scan`, with displacements measured
/// from `rest` (the rigidly aligned template).
pub fn fit_energy(rest: &Mesh, current: &[Vec3], scan: &Mesh, pairs: &[(usize, usize)]) -> Result<EnergyTerms> {
    if current.len() != rest.n_vertices() {
        return Err(Error::Dimension("current positions do not match the template".into()));
    }
    Ok(AlignProblem::new(rest, scan, pairs)?.energy(current))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    /// Ran all iterations.
    MaxIters,
    /// No step along the descent direction reduced the energy.
    Stalled,
    /// Zero gradient.
    Converged,
}

#[derive(Debug, Clone)]
pub struct NonrigidResult {
    pub mesh: Mesh,
    /// Weighted total energy at entry and after every iteration.
    pub energies: Vec<f64>,
    pub initial_terms: EnergyTerms,
    pub final_terms: EnergyTerms,
    pub iterations: usize,
    pub status: FitStatus,
}

/// Deform `template` (already rigidly aligned) towards `scan`.
pub fn nonrigid_fit(
    template: &Mesh,
    scan: &Mesh,
    pairs: &[(usize, usize)],
    config: &AlignConfig,
) -> Result<NonrigidResult> {
    config.validate()?;
    let problem = AlignProblem::new(template, scan, pairs)?;
    let schedule = config.resolved_schedule();
    let mut x: Vec<Vec3> = template.vertices().to_vec();
    let mut weights = Weights {
        landmark: config.landmark_weight,
        surface: config.surface_weight,
        smooth: config.smooth_weight_at(&schedule, 0),
    };

    let mut cp = problem.closest(&x);
    let initial_terms = problem.energy_with(&x, &cp);
    let mut terms = initial_terms;
    let mut energy = terms.total(&weights);
    if !energy.is_finite() {
        return Err(Error::NonFiniteEnergy {
            iteration: 0,
            last_stable: x.iter().map(|p| [p.x, p.y, p.z]).collect(),
        });
    }
    let mut energies = vec![energy];
    let mut status = FitStatus::MaxIters;
    let mut iterations = 0;

    for it in 0..config.max_iters {
        let w_smooth = config.smooth_weight_at(&schedule, it);
        if w_smooth != weights.smooth {
            weights.smooth = w_smooth;
            energy = terms.total(&weights);
        }
        let grad = problem.gradient_with(&x, &cp, &weights);
        if grad.iter().all(|g| *g == Vec3::zeros()) {
            status = FitStatus::Converged;
            break;
        }
        let diag = problem.diagonal(&weights);
        let dir: Vec<Vec3> = grad.iter().zip(&diag).map(|(g, d)| -g / *d).collect();

        let mut step = config.step_size;
        let mut accepted = None;
        let mut saw_finite = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<Vec3> = x.iter().zip(&dir).map(|(p, d)| p + d * step).collect();
            let trial_cp = problem.closest(&trial);
            let trial_terms = problem.energy_with(&trial, &trial_cp);
            let e = trial_terms.total(&weights);
            if e.is_finite() {
                saw_finite = true;
                if e < energy {
                    accepted = Some((trial, trial_cp, trial_terms, e));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((nx, ncp, nterms, e)) => {
                x = nx;
                cp = ncp;
                terms = nterms;
                energy = e;
                iterations = it + 1;
                energies.push(energy);
                debug!(
                    "iter {} energy {:.6e} landmark {:.3e} surface {:.3e} smooth {:.3e} step {:.3e}",
                    it, energy, terms.landmark, terms.surface, terms.smooth, step
                );
            }
            None if !saw_finite => {
                return Err(Error::NonFiniteEnergy {
                    iteration: it,
                    last_stable: x.iter().map(|p| [p.x, p.y, p.z]).collect(),
                });
            }
            None => {
                status = FitStatus::Stalled;
                break;
            }
        }
    }

    Ok(NonrigidResult {
        mesh: template.with_positions(x)?,
        energies,
        initial_terms,
        final_terms: terms,
        iterations,
        status,
    })
}

/// Full registration of a landmarked scan: the scan is moved into the
/// template frame by a similarity transform, then the template deforms
/// onto it.
#[derive(Debug, Clone)]
pub struct Registration {
    /// Scan-to-template-frame transform.
    pub rigid: RigidFit,
    pub fit: NonrigidResult,
}

pub fn register(template: &Mesh, scan: &Mesh, config: &AlignConfig) -> Result<Registration> {
    let tl = template
        .landmarks()
        .ok_or_else(|| Error::InvalidArgument("template has no landmarks".into()))?;
    let sl = scan
        .landmarks()
        .ok_or_else(|| Error::InvalidArgument("scan has no landmarks".into()))?;
    if tl.len() != sl.len() {
        return Err(Error::Dimension(format!(
            "template has {} landmarks, scan {}",
            tl.len(),
            sl.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = tl.iter().copied().zip(sl.iter().copied()).collect();
    register_pairs(template, scan, &pairs, config)
}

/// [`register`] with explicit `(template vertex, scan vertex)` correspondences.
pub fn register_pairs(
    template: &Mesh,
    scan: &Mesh,
    pairs: &[(usize, usize)],
    config: &AlignConfig,
) -> Result<Registration> {
    let (n_t, n_s) = (template.n_vertices(), scan.n_vertices());
    if let Some(&(t, s)) = pairs.iter().find(|&&(t, s)| t >= n_t || s >= n_s) {
        return Err(Error::InvalidArgument(format!("landmark pair ({t}, {s}) out of range")));
    }
    let src: Vec<Vec3> = pairs.iter().map(|&(_, s)| scan.vertices()[s]).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|&(t, _)| template.vertices()[t]).collect();
    let rigid = rigid_align(&src, &dst)?;
    let moved = rigid.transform.apply_mesh(scan)?;
    let fit = nonrigid_fit(template, &moved, pairs, config)?;
    Ok(Registration { rigid, fit })
}
