//! Synthetic data and independent oracles.
//!
//! The synthetic population stands in for a corpus of aligned face scans:
//! every face shares one grid template, identity is a set of smooth bump
//! amplitudes, and texture is a linear function of identity plus noise, so
//! the texture/geometry relationship is known exactly.
//!
//! Oracles here deliberately avoid the numerical kernels of the code they
//! check (dense LU instead of sparse CG, and so on).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::parametrize::{EdgeWeights, Uv};

/// How grid quads are split into triangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagonal {
    /// Every quad split along the same diagonal.
    Uniform,
    /// Mirror-image diagonals across both midlines, so every corner quad is
    /// split through the grid corner. Exactly symmetric under `x -> 1 - x`
    /// when `nx` is odd.
    MirrorSymmetric,
    /// Random diagonal per quad. The four corner quads are split through
    /// the grid corner so that no triangle has three boundary vertices.
    Random { seed: u64 },
}

/// Regular `nx` x `ny` vertex grid on `[0, 1]^2` (z = 0), vertex
/// `(i, j)` at index `j * nx + i`, triangles counter-clockwise seen from +z.
pub fn grid_mesh(nx: usize, ny: usize, diagonal: Diagonal) -> Mesh {
    assert!(nx >= 2 && ny >= 2, "grid needs at least 2x2 vertices");
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            vertices.push(Vec3::new(i as f64 / (nx - 1) as f64, j as f64 / (ny - 1) as f64, 0.0));
        }
    }
    let mut rng = match diagonal {
        Diagonal::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut triangles = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let v00 = j * nx + i;
            let v10 = v00 + 1;
            let v01 = v00 + nx;
            let v11 = v01 + 1;
            // `main` = diagonal v00-v11
            let main = match diagonal {
                Diagonal::Uniform => true,
                Diagonal::MirrorSymmetric => (2 * i + 1 < nx - 1) == (2 * j + 1 < ny - 1),
                Diagonal::Random { .. } => {
                    let left = i == 0;
                    let right = i == nx - 2;
                    let bottom = j == 0;
                    let top = j == ny - 2;
                    let coin = rng.as_mut().expect("rng").random_bool(0.5);
                    if (left && bottom) || (right && top) {
                        true
                    } else if (right && bottom) || (left && top) {
                        false
                    } else {
                        coin
                    }
                }
            };
            if main {
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            } else {
                triangles.push([v00, v10, v01]);
                triangles.push([v10, v11, v01]);
            }
        }
    }
    Mesh::new(vertices, triangles).expect("grid is a valid mesh")
}

/// Mirror pairs `(i, j) <-> (nx - 1 - i, j)` for a grid, each pair listed once.
pub fn grid_symmetry_pairs(nx: usize, ny: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for j in 0..ny {
        for i in 0..nx.div_ceil(2) {
            pairs.push((j * nx + i, j * nx + (nx - 1 - i)));
        }
    }
    pairs
}

/// Bottom-center boundary vertex of a grid.
pub fn grid_anchor(nx: usize) -> usize {
    nx / 2
}

/// Displace interior vertices in 3D by up to `amplitude` per axis (x, y
/// scaled to the grid spacing so the planar layout stays valid).
pub fn perturb_interior(mesh: &Mesh, amplitude: f64, seed: u64) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verts = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) * amplitude;
            if mesh.is_boundary_vertex(i) {
                v + Vec3::new(0.0, 0.0, d.z)
            } else {
                v + d
            }
        })
        .collect();
    mesh.with_positions(verts).expect("same vertex count")
}

/// Dense direct solve of the barycentric system: boundary rows pin the given
/// coordinates, interior rows read `u_i - sum_j lambda_ij u_j = 0`.
pub fn oracle_map_solution(mesh: &Mesh, weights: &EdgeWeights, boundary_uv: &[(usize, Uv)]) -> Result<Vec<Uv>> {
    const LIMIT: usize = 2500;
    let n = mesh.n_vertices();
    if n > LIMIT {
        return Err(Error::InvalidArgument(format!(
            "dense oracle limited to {LIMIT} vertices, mesh has {n}"
        )));
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, 2);
    let mut pinned = vec![false; n];
    for &(v, uv) in boundary_uv {
        a[(v, v)] = 1.0;
        rhs[(v, 0)] = uv[0];
        rhs[(v, 1)] = uv[1];
        pinned[v] = true;
    }
    for i in (0..n).filter(|&i| !pinned[i]) {
        let ring = mesh.one_ring(i);
        let total: f64 = ring.iter().map(|&j| weights.get(mesh, i, j).expect("edge")).sum();
        a[(i, i)] = 1.0;
        for &j in ring {
            a[(i, j)] -= weights.get(mesh, i, j).expect("edge") / total;
        }
    }
    let lu = a.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("dense barycentric system is singular".into()))?;
    Ok((0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect())
}

// ---------------------------------------------------------------------------
// Synthetic population

/// Parameters of the synthetic face population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceSpec {
    /// Template grid resolution per side.
    pub grid: usize,
    /// Identity modes shared by geometry and texture.
    pub identity_modes: usize,
    /// Peak height of an identity bump (model units).
    pub bump_height: f64,
    /// Bump radius range.
    pub bump_radius: (f64, f64),
    /// Texture latent = coupling * identity; `identity_modes` square, full rank.
    pub coupling: Vec<Vec<f64>>,
    /// Geometry noise: each identity amplitude gets an independent
    /// `noise * U[-1, 1]` perturbation that texture does not see.
    pub noise: f64,
    /// Amplitude of independent per-vertex color noise (at most 0.1).
    pub texture_noise: f64,
    /// Expression displacement modes.
    pub expression_modes: usize,
    pub expression_amplitude: f64,
    /// Seed for the fixed structure (bump centers, color patterns).
    pub structure_seed: u64,
}

impl SyntheticFaceSpec {
    /// Desk-scale defaults: 40 x 40 grid and 20 identity modes, so the
    /// noise-free population has geometry and texture rank 20.
    pub fn desk_scale(noise: f64) -> Self {
        let modes = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0u64);
        // diagonally dominant random coupling, well conditioned by construction
        let coupling = (0..modes)
            .map(|r| {
                (0..modes)
                    .map(|c| {
                        let x: f64 = rng.random_range(-0.3..0.3);
                        if r == c {
                            1.0 + x.abs()
                        } else {
                            x / (modes as f64).sqrt()
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            grid: 40,
            identity_modes: modes,
            bump_height: 0.08,
            bump_radius: (0.15, 0.35),
            coupling,
            noise,
            texture_noise: 0.0,
            expression_modes: 3,
            expression_amplitude: 0.05,
            structure_seed: 17,
        }
    }

    fn coupling_matrix(&self) -> Result<DMatrix<f64>> {
        let l = self.identity_modes;
        if self.coupling.len() != l || self.coupling.iter().any(|r| r.len() != l) {
            return Err(Error::Dimension(format!("coupling must be {l} x {l}")));
        }
        let m = DMatrix::from_fn(l, l, |r, c| self.coupling[r][c]);
        let sv = m.clone().singular_values();
        if sv.min() <= 1e-9 * sv.max() {
            return Err(Error::Degenerate("coupling matrix is not full rank".into()));
        }
        Ok(m)
    }
}

/// One synthetic subject.
#[derive(Debug, Clone)]
pub struct SyntheticFace {
    /// Scan with an expression applied, colored.
    pub scan: Mesh,
    /// The same subject with neutral expression, colored.
    pub neutral: Mesh,
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
}

struct Bump {
    center: [f64; 2],
    radius: f64,
}

impl Bump {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let d2 = ((x - self.center[0]).powi(2) + (y - self.center[1]).powi(2)) / (self.radius * self.radius);
        (-0.5 * d2 * 4.0).exp()
    }
}

/// The template every synthetic face deforms: a shallow dome over
/// `[-1, 1]^2` with 43 landmark vertices spread over the grid.
pub fn synthetic_template(grid: usize) -> Mesh {
    let base = grid_mesh(grid, grid, Diagonal::MirrorSymmetric);
    let verts = base
        .vertices()
        .iter()
        .map(|v| {
            let (x, y) = (2.0 * v.x - 1.0, 2.0 * v.y - 1.0);
            Vec3::new(x, y, 0.3 * (1.0 - 0.5 * (x * x + y * y)))
        })
        .collect();
    let mesh = base.with_positions(verts).expect("same count");
    let landmarks = template_landmarks(grid);
    mesh.with_landmarks(landmarks).expect("in range")
}

/// 43 landmark vertices: a 7 x 6 lattice plus the bottom-center vertex.
fn template_landmarks(grid: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(43);
    for a in 0..6 {
        for b in 0..7 {
            let i = 1 + (b * (grid - 3)) / 6;
            let j = 1 + (a * (grid - 3)) / 5;
            out.push(j * grid + i);
        }
    }
    out.push(grid_anchor(grid));
    out
}

/// Generate `n` subjects. Identity amplitudes and expression weights are
/// uniform in `[-1, 1]` and `[0, 1]`; colors stay inside `[0, 1]` by
/// construction.
pub fn make_synthetic_population(
    spec: &SyntheticFaceSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SyntheticFace>> {
    let coupling = spec.coupling_matrix()?;
    let template = synthetic_template(spec.grid);
    let m = template.n_vertices();
    let planar: Vec<[f64; 2]> = template.vertices().iter().map(|v| [v.x, v.y]).collect();

    let mut srng = ChaCha8Rng::seed_from_u64(spec.structure_seed);
    let random_bump = |r: &mut ChaCha8Rng| Bump {
        center: [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8)],
        radius: r.random_range(spec.bump_radius.0..spec.bump_radius.1),
    };
    let identity_bumps: Vec<Bump> = (0..spec.identity_modes).map(|_| random_bump(&mut srng)).collect();
    let color_bumps: Vec<Bump> = (0..spec.identity_modes).map(|_| random_bump(&mut srng)).collect();
    let color_dirs: Vec<[f64; 3]> = (0..spec.identity_modes)
        .map(|_| {
            let c: [f64; 3] = [
                srng.random_range(-1.0..1.0),
                srng.random_range(-1.0..1.0),
                srng.random_range(-1.0..1.0),
            ];
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            [c[0] / norm, c[1] / norm, c[2] / norm]
        })
        .collect();
    // expression fields: smooth displacements in x, y and z
    let expression_fields: Vec<(Bump, [f64; 3])> = (0..spec.expression_modes)
        .map(|k| {
            let mut dir = [0.0; 3];
            dir[k % 3] = 1.0;
            (random_bump(&mut srng), dir)
        })
        .collect();

    let identity_field: Vec<Vec<f64>> = identity_bumps
        .iter()
        .map(|b| planar.iter().map(|p| b.eval(p[0], p[1])).collect())
        .collect();
    let color_field: Vec<Vec<f64>> = color_bumps
        .iter()
        .map(|b| planar.iter().map(|p| b.eval(p[0], p[1])).collect())
        .collect();

    // largest possible |texture latent| contribution per vertex, used to keep
    // colors in range without clamping
    let row_l1: Vec<f64> = (0..spec.identity_modes)
        .map(|r| coupling.row(r).iter().map(|c| c.abs()).sum())
        .collect();
    let worst = (0..m)
        .map(|v| {
            (0..spec.identity_modes)
                .map(|l| row_l1[l] * color_field[l][v])
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let noise_amp = spec.texture_noise.clamp(0.0, 0.1);
    let color_gain = (0.45 - noise_amp) / worst;

    let mut faces = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..spec.identity_modes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta: Vec<f64> = (0..spec.identity_modes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zg: Vec<f64> = z.iter().zip(&eta).map(|(a, e)| a + spec.noise * e).collect();
        let expr: Vec<f64> = (0..spec.expression_modes).map(|_| rng.random_range(0.0..1.0)).collect();
        let latent = &coupling * DVector::from_column_slice(&z);

        let mut neutral = Vec::with_capacity(m);
        let mut colors = Vec::with_capacity(m);
        for v in 0..m {
            let base = template.vertices()[v];
            let mut h = 0.0;
            for l in 0..spec.identity_modes {
                h += zg[l] * identity_field[l][v];
            }
            neutral.push(base + Vec3::new(0.0, 0.0, spec.bump_height * h));

            let mut c = [0.5; 3];
            for l in 0..spec.identity_modes {
                let s = color_gain * latent[l] * color_field[l][v];
                for ch in 0..3 {
                    c[ch] += s * color_dirs[l][ch];
                }
            }
            if noise_amp > 0.0 {
                for ch in c.iter_mut() {
                    *ch += noise_amp * rng.random_range(-1.0..1.0);
                }
            }
            colors.push(c);
        }

        let scan: Vec<Vec3> = (0..m)
            .map(|v| {
                let p = planar[v];
                let mut d = Vec3::zeros();
                for (k, (b, dir)) in expression_fields.iter().enumerate() {
                    d += Vec3::from(*dir) * (spec.expression_amplitude * expr[k] * b.eval(p[0], p[1]));
                }
                neutral[v] + d
            })
            .collect();

        let neutral_mesh = template.with_positions(neutral)?.with_colors(colors.clone())?;
        let scan_mesh = template.with_positions(scan)?.with_colors(colors)?;
        faces.push(SyntheticFace {
            scan: scan_mesh,
            neutral: neutral_mesh,
            identity: z,
            expression: expr,
        });
    }
    Ok(faces)
}

/// Column-stacked geometry and texture matrices (`3m x n`) of the neutral meshes.
pub fn population_matrices(faces: &[SyntheticFace]) -> (DMatrix<f64>, DMatrix<f64>) {
    let m3 = faces.first().map(|f| 3 * f.neutral.n_vertices()).unwrap_or(0);
    let g = DMatrix::from_fn(m3, faces.len(), |r, c| {
        let v = faces[c].neutral.vertices()[r / 3];
        v[r % 3]
    });
    let t = DMatrix::from_fn(m3, faces.len(), |r, c| {
        faces[c].neutral.colors().expect("colored")[r / 3][r % 3]
    });
    (g, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_population() {
        let spec = SyntheticFaceSpec::desk_scale(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(make_synthetic_population(&spec, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn noise_free_texture_is_linear_in_identity() {
        let mut spec = SyntheticFaceSpec::desk_scale(0.0);
        spec.grid = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let faces = make_synthetic_population(&spec, 40, &mut rng).unwrap();
        let (g, t) = population_matrices(&faces);
        // stacking centered G and T keeps the rank of the identity space
        let stack = |m: &DMatrix<f64>| {
            let mean = m.column_mean();
            let mut c = m.clone();
            for mut col in c.column_iter_mut() {
                col -= &mean;
            }
            c
        };
        let rank = |m: &DMatrix<f64>| {
            let sv = m.clone().singular_values();
            sv.iter().filter(|&&s| s > 1e-9 * sv.max()).count()
        };
        let (gc, tc) = (stack(&g), stack(&t));
        let joint = DMatrix::from_fn(gc.nrows() * 2, gc.ncols(), |r, c| {
            if r < gc.nrows() {
                gc[(r, c)]
            } else {
                tc[(r - gc.nrows(), c)]
            }
        });
        assert_eq!(rank(&gc), 20);
        assert_eq!(rank(&tc), 20);
        assert_eq!(rank(&joint), 20);
    }

    #[test]
    fn colors_stay_in_unit_range() {
        let spec = SyntheticFaceSpec::desk_scale(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let faces = make_synthetic_population(&spec, 20, &mut rng).unwrap();
        for f in &faces {
            assert!(f
                .neutral
                .colors()
                .unwrap()
                .iter()
                .flatten()
                .all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn population_is_reproducible() {
        let spec = SyntheticFaceSpec::desk_scale(0.05);
        let a = make_synthetic_population(&spec, 5, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = make_synthetic_population(&spec, 5, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.scan, y.scan);
            assert_eq!(x.neutral, y.neutral);
        }
    }

    #[test]
    fn template_has_43_boundary_anchored_landmarks() {
        let t = synthetic_template(40);
        let lm = t.landmarks().unwrap();
        assert_eq!(lm.len(), 43);
        let mut sorted = lm.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 43);
        assert!(t.is_boundary_vertex(*lm.last().unwrap()));
    }

    #[test]
    fn oracle_single_interior_vertex() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
        ];
        let m = Mesh::new(v, vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]]).unwrap();
        let w = crate::parametrize::uniform_weights(&m);
        let b = vec![(1, [1.0, 0.5]), (2, [0.5, 1.0]), (3, [0.0, 0.5]), (4, [0.5, 0.0])];
        let uv = oracle_map_solution(&m, &w, &b).unwrap();
        assert!((uv[0][0] - 0.5).abs() < 1e-15 && (uv[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_residual_is_tiny() {
        let grid = grid_mesh(15, 12, Diagonal::Random { seed: 5 });
        let w = EdgeWeights::new(&grid, (0..grid.edges().len()).map(|e| 1.0 + (e % 4) as f64).collect()).unwrap();
        let ring = grid.boundary_loop(Some(7)).unwrap();
        let b = crate::parametrize::boundary_embedding(&ring, grid.vertices()).unwrap();
        let uv = oracle_map_solution(&grid, &w, &b).unwrap();
        assert!(crate::parametrize::embedding_residual(&grid, &w, &uv) < 1e-12);
    }
}
