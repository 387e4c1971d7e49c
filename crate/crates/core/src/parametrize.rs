//! Planar parametrization of disk-topology meshes onto the unit square.
//!
//! The boundary loop is laid out on the square's perimeter by normalized
//! arc length, starting at the bottom-center anchor. Interior vertices are
//! then placed by solving the weighted barycentric system
//! `u_i = sum_j lambda_ij u_j`, `lambda_ij = w_ij / sum_k w_ik`, which for a
//! convex boundary and positive weights has a unique flip-free solution.
//! The system is solved in its symmetric form (weighted graph Laplacian
//! restricted to interior vertices) with Jacobi-preconditioned conjugate
//! gradients; a dense Cholesky factorization is the fallback for small
//! meshes when CG stalls.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};

pub type Uv = [f64; 2];

/// Identity of the mesh a map was computed for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshRef {
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub topology_hash: String,
}

impl MeshRef {
    pub fn of(mesh: &Mesh) -> Self {
        Self {
            n_vertices: mesh.n_vertices(),
            n_triangles: mesh.n_triangles(),
            topology_hash: mesh.topology_hash(),
        }
    }
}

/// Per-vertex coordinates in the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    uv: Vec<Uv>,
    mesh_ref: MeshRef,
}

impl ParamMap {
    pub fn new(mesh: &Mesh, uv: Vec<Uv>) -> Result<Self> {
        if uv.len() != mesh.n_vertices() {
            return Err(Error::Dimension(format!(
                "{} uv coordinates for {} vertices",
                uv.len(),
                mesh.n_vertices()
            )));
        }
        if let Some(i) = uv
            .iter()
            .position(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            return Err(Error::InvalidArgument(format!(
                "uv of vertex {i} = {:?} lies outside the unit square",
                uv[i]
            )));
        }
        Ok(Self {
            uv,
            mesh_ref: MeshRef::of(mesh),
        })
    }

    pub fn uv(&self) -> &[Uv] {
        &self.uv
    }

    pub fn mesh_ref(&self) -> &MeshRef {
        &self.mesh_ref
    }

    pub fn ensure_matches(&self, mesh: &Mesh) -> Result<()> {
        if self.mesh_ref != MeshRef::of(mesh) {
            return Err(Error::Dimension(
                "parametrization was computed for a different mesh".into(),
            ));
        }
        Ok(())
    }

    /// Signed planar area of every triangle (positive = counter-clockwise).
    pub fn signed_areas(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.triangles()
            .iter()
            .map(|t| signed_area(&self.uv[t[0]], &self.uv[t[1]], &self.uv[t[2]]))
            .collect()
    }

    /// Triangles with non-positive signed area.
    pub fn flipped_count(&self, mesh: &Mesh) -> usize {
        self.signed_areas(mesh).iter().filter(|&&a| a <= 0.0).count()
    }

    pub fn total_area(&self, mesh: &Mesh) -> f64 {
        self.signed_areas(mesh).iter().sum()
    }

    /// Write the coordinates as a JSON array of `[x, y]` pairs.
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(&self.uv)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>, mesh: &Mesh) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let uv: Vec<Uv> = serde_json::from_str(&text)?;
        Self::new(mesh, uv)
    }
}

pub fn signed_area(a: &Uv, b: &Uv, c: &Uv) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Positive weight per mesh edge, aligned with [`Mesh::edges`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    weights: Vec<f64>,
}

impl EdgeWeights {
    pub fn new(mesh: &Mesh, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != mesh.edges().len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} edges",
                weights.len(),
                mesh.edges().len()
            )));
        }
        if let Some(e) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "edge weight {e} = {} is not positive",
                weights[e]
            )));
        }
        Ok(Self { weights })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weight of edge `{i, j}`; the same for both orientations.
    pub fn get(&self, mesh: &Mesh, i: usize, j: usize) -> Option<f64> {
        mesh.edge_index(i, j).map(|e| self.weights[e])
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Boundary

/// Point on the unit-square perimeter, traversed counter-clockwise from the
/// bottom-center `(0.5, 0)` at `t = 0` back to it at `t = 1`.
pub fn unit_square_perimeter(t: f64) -> Uv {
    let s = 4.0 * t.rem_euclid(1.0);
    if s <= 0.5 {
        [0.5 + s, 0.0]
    } else if s <= 1.5 {
        [1.0, s - 0.5]
    } else if s <= 2.5 {
        [1.0 - (s - 1.5), 1.0]
    } else if s <= 3.5 {
        [0.0, 1.0 - (s - 2.5)]
    } else {
        [s - 3.5, 0.0]
    }
}

/// Normalized cumulative arc length `t_i = sum_{j<=i} L_j / sum_j L_j` for
/// `i = 1..=K`. The last entry is exactly 1.
pub fn arc_length_parameters(lengths: &[f64]) -> Result<Vec<f64>> {
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("empty boundary".into()));
    }
    if let Some(j) = lengths.iter().position(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Degenerate(format!("boundary edge {j} has zero length")));
    }
    let total: f64 = lengths.iter().sum();
    let mut acc = 0.0;
    let mut t: Vec<f64> = lengths
        .iter()
        .map(|l| {
            acc += l;
            acc / total
        })
        .collect();
    *t.last_mut().expect("non-empty") = 1.0;
    Ok(t)
}

/// Boundary vertex placements `(vertex, uv)`.
pub type BoundaryUv = Vec<(usize, Uv)>;

/// Arc-length layout of a boundary loop on the unit-square perimeter.
///
/// `boundary[0]` is the anchor and lands on the bottom center; `boundary[i]`
/// receives `C(t_i)` where `L_i` is the 3D length of the edge entering it.
pub fn boundary_embedding(boundary: &[usize], positions: &[Vec3]) -> Result<BoundaryUv> {
    if boundary.len() < 3 {
        return Err(Error::InvalidArgument("boundary loop needs at least 3 vertices".into()));
    }
    let k = boundary.len();
    let lengths: Vec<f64> = (0..k)
        .map(|i| (positions[boundary[(i + 1) % k]] - positions[boundary[i]]).norm())
        .collect();
    let t = arc_length_parameters(&lengths)?;
    // lengths[i] enters boundary[i + 1]; t[k - 1] = 1 closes on the anchor
    Ok((0..k)
        .map(|i| {
            let ti = if i == 0 { 0.0 } else { t[i - 1] };
            (boundary[i], unit_square_perimeter(ti))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Weights

pub fn uniform_weights(mesh: &Mesh) -> EdgeWeights {
    EdgeWeights {
        weights: vec![1.0; mesh.edges().len()],
    }
}

/// How designed vertex weights are normalized against the uniform map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightNormalization {
    /// Divide by the mean squared edge length of the uniform map. Unit
    /// vertex weights reproduce the uniform embedding exactly.
    #[default]
    GlobalUniformLength,
    /// Divide each edge by its own squared uniform-map length. Compensates
    /// vertex density per edge, but unit vertex weights no longer reproduce
    /// the uniform embedding.
    PerEdgeUniformLength,
}

/// Edge weights from per-vertex design weights: the average of the two
/// endpoint weights, normalized against the uniform parametrization.
pub fn design_weights(
    mesh: &Mesh,
    vertex_weights: &[f64],
    uniform_map: &ParamMap,
    normalization: WeightNormalization,
) -> Result<EdgeWeights> {
    if vertex_weights.len() != mesh.n_vertices() {
        return Err(Error::Dimension(format!(
            "{} vertex weights for {} vertices",
            vertex_weights.len(),
            mesh.n_vertices()
        )));
    }
    if let Some(i) = vertex_weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "vertex weight {i} = {} is not positive",
            vertex_weights[i]
        )));
    }
    uniform_map.ensure_matches(mesh)?;

    let uv = uniform_map.uv();
    let len2: Vec<f64> = mesh
        .edges()
        .iter()
        .map(|&[i, j]| (uv[i][0] - uv[j][0]).powi(2) + (uv[i][1] - uv[j][1]).powi(2))
        .collect();
    if let Some(e) = len2.iter().position(|&l| l <= 0.0) {
        let [i, j] = mesh.edges()[e];
        return Err(Error::Degenerate(format!(
            "edge ({i}, {j}) has zero length in the uniform map"
        )));
    }

    let weights = match normalization {
        WeightNormalization::GlobalUniformLength => {
            let mean = len2.iter().sum::<f64>() / len2.len() as f64;
            mesh.edges()
                .iter()
                .map(|&[i, j]| 0.5 * (vertex_weights[i] + vertex_weights[j]) / mean)
                .collect()
        }
        WeightNormalization::PerEdgeUniformLength => mesh
            .edges()
            .iter()
            .zip(&len2)
            .map(|(&[i, j], l2)| 0.5 * (vertex_weights[i] + vertex_weights[j]) / l2)
            .collect(),
    };
    EdgeWeights::new(mesh, weights)
}

/// A region of the template that should receive more parametric area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRegion {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Vertex design weights that enlarge the given regions in the plane.
///
/// Heavier edges are shortened by the weighted functional, so features get
/// weights below one: `1 / (1 + gain * falloff)` with a smooth compact
/// falloff inside each region.
pub fn feature_vertex_weights(positions: &[Vec3], regions: &[FeatureRegion], gain: f64) -> Vec<f64> {
    positions
        .iter()
        .map(|p| {
            let f = regions
                .iter()
                .map(|r| {
                    let d = (p - Vec3::from(r.center)).norm() / r.radius;
                    if d < 1.0 {
                        (1.0 - d * d).powi(2)
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max);
            1.0 / (1.0 + gain * f)
        })
        .collect()
}

/// Row-normalized barycentric coordinates `lambda_ij` for every vertex.
pub fn barycentric_coordinates(mesh: &Mesh, weights: &EdgeWeights) -> Vec<Vec<(usize, f64)>> {
    (0..mesh.n_vertices())
        .map(|i| {
            let ring = mesh.one_ring(i);
            let w: Vec<f64> = ring
                .iter()
                .map(|&j| weights.get(mesh, i, j).expect("ring edge"))
                .collect();
            let total: f64 = w.iter().sum();
            ring.iter().zip(w).map(|(&j, wij)| (j, wij / total)).collect()
        })
        .collect()
}

/// Infinity norm of `u_i - sum_j lambda_ij u_j` over interior vertices.
pub fn embedding_residual(mesh: &Mesh, weights: &EdgeWeights, uv: &[Uv]) -> f64 {
    let lambda = barycentric_coordinates(mesh, weights);
    let mut worst: f64 = 0.0;
    for (i, row) in lambda.iter().enumerate() {
        if mesh.is_boundary_vertex(i) {
            continue;
        }
        let mut r = uv[i];
        for &(j, l) in row {
            r[0] -= l * uv[j][0];
            r[1] -= l * uv[j][1];
        }
        worst = worst.max(r[0].abs()).max(r[1].abs());
    }
    worst
}

/// `sum over edges of w_ij |u_i - u_j|^2`.
pub fn weighted_dirichlet_energy(mesh: &Mesh, weights: &EdgeWeights, uv: &[Uv]) -> f64 {
    mesh.edges()
        .iter()
        .zip(weights.as_slice())
        .map(|(&[i, j], w)| w * ((uv[i][0] - uv[j][0]).powi(2) + (uv[i][1] - uv[j][1]).powi(2)))
        .sum()
}

// ---------------------------------------------------------------------------
// Solve

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop when the barycentric residual infinity norm drops below this.
    pub tolerance: f64,
    /// Iteration budget as a multiple of the unknown count.
    pub max_iter_factor: usize,
    /// Largest interior vertex count for the dense fallback.
    pub dense_fallback_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iter_factor: 10,
            dense_fallback_limit: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual_inf: f64,
    pub used_fallback: bool,
}

/// Symmetric sparse matrix in compressed-row form.
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl Csr {
    fn n(&self) -> usize {
        self.diag.len()
    }

    fn mul(&self, x: &[f64], y: &mut [f64]) {
        let f = |(i, yi): (usize, &mut f64)| {
            let mut s = self.diag[i] * x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        };
        if self.n() > 20_000 {
            y.par_iter_mut().enumerate().for_each(f);
        } else {
            y.iter_mut().enumerate().for_each(f);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG. Convergence is judged on `max |r_i / d_i|`,
/// which equals the barycentric residual of the original system.
fn pcg(a: &Csr, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> (bool, usize) {
    let n = a.n();
    let mut r = vec![0.0; n];
    a.mul(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let scaled_inf = |r: &[f64]| r.iter().zip(&a.diag).map(|(ri, d)| (ri / d).abs()).fold(0.0, f64::max);
    if scaled_inf(&r) < tol {
        return (true, 0);
    }
    let mut z: Vec<f64> = r.iter().zip(&a.diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        a.mul(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return (false, it);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if scaled_inf(&r) < tol {
            return (true, it);
        }
        for i in 0..n {
            z[i] = r[i] / a.diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (false, max_iter)
}

/// Place interior vertices by the weighted barycentric system.
pub fn weighted_embed(mesh: &Mesh, weights: &EdgeWeights, boundary_uv: &[(usize, Uv)]) -> Result<ParamMap> {
    weighted_embed_with(mesh, weights, boundary_uv, &SolverOptions::default()).map(|(m, _)| m)
}

pub fn weighted_embed_with(
    mesh: &Mesh,
    weights: &EdgeWeights,
    boundary_uv: &[(usize, Uv)],
    opts: &SolverOptions,
) -> Result<(ParamMap, SolveStats)> {
    if weights.len() != mesh.edges().len() {
        return Err(Error::Dimension("edge weights do not match mesh".into()));
    }
    let n = mesh.n_vertices();
    let mut fixed: Vec<Option<Uv>> = vec![None; n];
    for &(v, uv) in boundary_uv {
        if v >= n {
            return Err(Error::InvalidArgument(format!("boundary vertex {v} out of range")));
        }
        fixed[v] = Some(uv);
    }
    for v in 0..n {
        if mesh.is_boundary_vertex(v) && fixed[v].is_none() {
            return Err(Error::InvalidArgument(format!("boundary vertex {v} has no placement")));
        }
    }

    // interior numbering
    let mut slot = vec![usize::MAX; n];
    let interior: Vec<usize> = (0..n).filter(|&v| fixed[v].is_none()).collect();
    for (k, &v) in interior.iter().enumerate() {
        slot[v] = k;
        let deg = mesh.one_ring(v).len();
        if deg < 3 {
            return Err(Error::InvalidMesh(format!("interior vertex {v} has degree {deg} < 3")));
        }
    }

    let m = interior.len();
    let mut row_ptr = Vec::with_capacity(m + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut diag = vec![0.0; m];
    let mut bx = vec![0.0; m];
    let mut by = vec![0.0; m];
    row_ptr.push(0);
    for (k, &v) in interior.iter().enumerate() {
        for &j in mesh.one_ring(v) {
            let w = weights.get(mesh, v, j).expect("ring edge");
            diag[k] += w;
            match fixed[j] {
                Some(uv) => {
                    bx[k] += w * uv[0];
                    by[k] += w * uv[1];
                }
                None => {
                    cols.push(slot[j]);
                    vals.push(-w);
                }
            }
        }
        row_ptr.push(cols.len());
    }
    let a = Csr {
        row_ptr,
        cols,
        vals,
        diag,
    };

    // a component of interior vertices with no boundary neighbor makes the
    // system singular
    check_interior_connected(mesh, &fixed, &interior, &slot)?;

    let max_iter = opts.max_iter_factor * m.max(1);
    let mut x = vec![0.5; m];
    let mut y = vec![0.5; m];
    let (okx, itx) = pcg(&a, &bx, &mut x, opts.tolerance, max_iter);
    let (oky, ity) = pcg(&a, &by, &mut y, opts.tolerance, max_iter);
    let mut used_fallback = false;
    if !(okx && oky) {
        if m > opts.dense_fallback_limit {
            return Err(Error::Solver(format!(
                "conjugate gradient did not converge in {max_iter} iterations"
            )));
        }
        log::warn!("CG stalled on {m} unknowns; falling back to dense Cholesky");
        let dense = dense_from_csr(&a);
        let chol = dense
            .cholesky()
            .ok_or_else(|| Error::Solver("interior Laplacian is not positive definite".into()))?;
        x = chol.solve(&DVector::from_vec(bx)).data.into();
        y = chol.solve(&DVector::from_vec(by)).data.into();
        used_fallback = true;
    }

    let mut uv = vec![[0.0; 2]; n];
    for v in 0..n {
        uv[v] = match fixed[v] {
            Some(p) => p,
            None => [x[slot[v]].clamp(0.0, 1.0), y[slot[v]].clamp(0.0, 1.0)],
        };
    }
    let residual_inf = embedding_residual(mesh, weights, &uv);
    let map = ParamMap::new(mesh, uv)?;
    Ok((
        map,
        SolveStats {
            iterations: itx.max(ity),
            residual_inf,
            used_fallback,
        },
    ))
}

fn check_interior_connected(mesh: &Mesh, fixed: &[Option<Uv>], interior: &[usize], slot: &[usize]) -> Result<()> {
    // flood fill from vertices adjacent to fixed ones
    let mut reached = vec![false; interior.len()];
    let mut stack: Vec<usize> = interior
        .iter()
        .filter(|&&v| mesh.one_ring(v).iter().any(|&j| fixed[j].is_some()))
        .copied()
        .collect();
    for &v in &stack {
        reached[slot[v]] = true;
    }
    while let Some(v) = stack.pop() {
        for &j in mesh.one_ring(v) {
            if fixed[j].is_none() && !reached[slot[j]] {
                reached[slot[j]] = true;
                stack.push(j);
            }
        }
    }
    match reached.iter().position(|r| !r) {
        Some(k) => Err(Error::Solver(format!(
            "singular system: interior vertex {} is not connected to the boundary",
            interior[k]
        ))),
        None => Ok(()),
    }
}

fn dense_from_csr(a: &Csr) -> DMatrix<f64> {
    let n = a.n();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = a.diag[i];
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            m[(i, a.cols[k])] += a.vals[k];
        }
    }
    m
}

/// Uniform-weight embedding of a disk mesh with the boundary anchored at `anchor`.
pub fn uniform_embedding(mesh: &Mesh, anchor: usize) -> Result<ParamMap> {
    let ring = mesh.boundary_loop(Some(anchor))?;
    let boundary = boundary_embedding(&ring, mesh.vertices())?;
    weighted_embed(mesh, &uniform_weights(mesh), &boundary)
}

// ---------------------------------------------------------------------------
// Symmetry

/// Enforce mirror symmetry about `x = 0.5` by averaging each vertex with the
/// reflection of its partner. Midline vertices pair with themselves.
pub fn symmetrize(mesh: &Mesh, map: &ParamMap, pairs: &[(usize, usize)]) -> Result<ParamMap> {
    map.ensure_matches(mesh)?;
    let partner = symmetry_partner(mesh, pairs)?;
    let uv = map.uv();
    let out: Vec<Uv> = (0..mesh.n_vertices())
        .map(|i| {
            let j = partner[i];
            if i == j {
                [0.5, uv[i][1]]
            } else {
                [0.5 * (uv[i][0] + (1.0 - uv[j][0])), 0.5 * (uv[i][1] + uv[j][1])]
            }
        })
        .collect();
    // make the pair relation exact: right side is the mirror of the left
    let mut out = out;
    for i in 0..mesh.n_vertices() {
        let j = partner[i];
        if i < j {
            out[j] = [1.0 - out[i][0], out[i][1]];
        }
    }
    ParamMap::new(mesh, out)
}

/// Validate a symmetry pairing and expand it to a per-vertex partner table.
pub fn symmetry_partner(mesh: &Mesh, pairs: &[(usize, usize)]) -> Result<Vec<usize>> {
    let n = mesh.n_vertices();
    let mut partner = vec![usize::MAX; n];
    for &(a, b) in pairs {
        if a >= n || b >= n {
            return Err(Error::InvalidArgument(format!("pair ({a}, {b}) out of range")));
        }
        for (x, y) in [(a, b), (b, a)] {
            if partner[x] != usize::MAX && partner[x] != y {
                return Err(Error::InvalidArgument(format!("vertex {x} paired twice")));
            }
            partner[x] = y;
        }
    }
    if let Some(v) = partner.iter().position(|&p| p == usize::MAX) {
        return Err(Error::InvalidArgument(format!("vertex {v} has no symmetry partner")));
    }
    for &[i, j] in mesh.edges() {
        if mesh.edge_index(partner[i], partner[j]).is_none() {
            return Err(Error::InvalidArgument(format!(
                "pairing is inconsistent with connectivity: edge ({i}, {j}) has no mirror edge"
            )));
        }
    }
    Ok(partner)
}
