//! Triangle meshes with adjacency queries and OBJ / landmark-sidecar I/O.
//!
//! A [`Mesh`] is immutable once built. Construction validates indices,
//! rejects degenerate triangles, and checks that the surface is
//! edge-manifold with consistently oriented triangles. Topology (edge list
//! and one-rings) is computed once and shared between meshes that only
//! differ in vertex positions, so deformed copies of a template are cheap.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Connectivity shared by every mesh with the same triangle list.
#[derive(Debug)]
struct Topology {
    /// Sorted neighbor lists.
    neighbors: Vec<Vec<usize>>,
    /// Undirected edges `[i, j]` with `i < j`, sorted lexicographically.
    edges: Vec<[usize; 2]>,
    /// Number of triangles bordering each entry of `edges`.
    valence: Vec<u8>,
    /// For every directed boundary half-edge `a -> b`, `next[a] = b`.
    boundary_next: HashMap<usize, usize>,
}

impl Topology {
    fn build(n_vertices: usize, triangles: &[[usize; 3]]) -> Result<Self> {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::with_capacity(triangles.len() * 3);
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                if directed.insert((a, b), t).is_some() {
                    return Err(Error::InvalidMesh(format!(
                        "half-edge ({a}, {b}) used twice; triangles are inconsistently oriented or non-manifold"
                    )));
                }
            }
        }

        let mut counts: HashMap<(usize, usize), u8> = HashMap::with_capacity(directed.len());
        for &(a, b) in directed.keys() {
            let key = if a < b { (a, b) } else { (b, a) };
            let c = counts.entry(key).or_insert(0);
            *c += 1;
            if *c > 2 {
                return Err(Error::NonManifoldEdge(key.0, key.1));
            }
        }

        let mut edge_list: Vec<([usize; 2], u8)> = counts.into_iter().map(|((a, b), c)| ([a, b], c)).collect();
        edge_list.sort_unstable();
        let edges: Vec<[usize; 2]> = edge_list.iter().map(|e| e.0).collect();
        let valence: Vec<u8> = edge_list.iter().map(|e| e.1).collect();

        let mut neighbors = vec![Vec::new(); n_vertices];
        for &[a, b] in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }

        let mut boundary_next = HashMap::new();
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) && boundary_next.insert(a, b).is_some() {
                return Err(Error::InvalidMesh(format!(
                    "vertex {a} has two outgoing boundary edges (pinched boundary)"
                )));
            }
        }

        Ok(Self {
            neighbors,
            edges,
            valence,
            boundary_next,
        })
    }
}

/// A triangulated surface with optional per-vertex colors and landmarks.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    colors: Option<Vec<[f64; 3]>>,
    landmarks: Option<Vec<usize>>,
    topology: Arc<Topology>,
}

impl PartialEq for Mesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices
            && self.triangles == other.triangles
            && self.colors == other.colors
            && self.landmarks == other.landmarks
    }
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references vertex {bad} but mesh has {n} vertices"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!("triangle {t} is degenerate: {tri:?}")));
            }
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} has non-finite coordinates")));
        }
        let topology = Arc::new(Topology::build(n, &triangles)?);
        Ok(Self {
            vertices,
            triangles,
            colors: None,
            landmarks: None,
            topology,
        })
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() != self.vertices.len() {
            return Err(Error::Dimension(format!(
                "{} colors for {} vertices",
                colors.len(),
                self.vertices.len()
            )));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_landmarks(mut self, landmarks: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = landmarks.iter().find(|&&i| i >= self.vertices.len()) {
            return Err(Error::InvalidMesh(format!("landmark index {bad} out of range")));
        }
        self.landmarks = Some(landmarks);
        Ok(self)
    }

    /// Same connectivity, colors and landmarks with new vertex positions.
    pub fn with_positions(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Dimension(format!(
                "{} positions for a mesh with {} vertices",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            triangles: self.triangles.clone(),
            colors: self.colors.clone(),
            landmarks: self.landmarks.clone(),
            topology: Arc::clone(&self.topology),
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    pub fn landmarks(&self) -> Option<&[usize]> {
        self.landmarks.as_deref()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Undirected edges `[i, j]`, `i < j`, in sorted order.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.topology.edges
    }

    /// Position of edge `{i, j}` in [`Mesh::edges`].
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = if i < j { [i, j] } else { [j, i] };
        self.topology.edges.binary_search(&key).ok()
    }

    /// Number of triangles bordering each edge, aligned with [`Mesh::edges`].
    pub fn edge_valence(&self) -> &[u8] {
        &self.topology.valence
    }

    /// Sorted indices of the vertices sharing an edge with `vertex`.
    pub fn one_ring(&self, vertex: usize) -> &[usize] {
        &self.topology.neighbors[vertex]
    }

    pub fn is_boundary_vertex(&self, vertex: usize) -> bool {
        self.topology.boundary_next.contains_key(&vertex)
    }

    pub fn boundary_edge_count(&self) -> usize {
        self.topology.boundary_next.len()
    }

    /// The single boundary loop, oriented consistently with the triangle
    /// winding (counter-clockwise seen from the outward normal side) and
    /// starting at `anchor`. Without an anchor the loop starts at the
    /// lowest-index boundary vertex.
    pub fn boundary_loop(&self, anchor: Option<usize>) -> Result<Vec<usize>> {
        let next = &self.topology.boundary_next;
        if next.is_empty() {
            return Err(Error::NoBoundary);
        }
        let start = match anchor {
            Some(a) => {
                if !next.contains_key(&a) {
                    return Err(Error::InvalidArgument(format!(
                        "anchor vertex {a} is not on the boundary"
                    )));
                }
                a
            }
            None => *next.keys().min().expect("non-empty"),
        };

        let mut ring = vec![start];
        let mut cur = next[&start];
        while cur != start {
            ring.push(cur);
            cur = match next.get(&cur) {
                Some(&n) => n,
                None => return Err(Error::InvalidMesh(format!("boundary breaks at vertex {cur}"))),
            };
            if ring.len() > next.len() {
                return Err(Error::InvalidMesh("boundary traversal does not close".into()));
            }
        }

        if ring.len() != next.len() {
            return Err(Error::MultipleBoundaryLoops(self.count_boundary_loops()));
        }
        Ok(ring)
    }

    fn count_boundary_loops(&self) -> usize {
        let next = &self.topology.boundary_next;
        let mut seen = std::collections::HashSet::new();
        let mut starts: Vec<usize> = next.keys().copied().collect();
        starts.sort_unstable();
        let mut loops = 0;
        for s in starts {
            if !seen.insert(s) {
                continue;
            }
            loops += 1;
            let mut cur = next[&s];
            while cur != s && seen.insert(cur) {
                cur = next[&cur];
            }
        }
        loops
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Vertex positions flattened as `x0, y0, z0, x1, ...`.
    pub fn positions_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    /// Vertex colors flattened as `r0, g0, b0, r1, ...`.
    pub fn colors_flat(&self) -> Option<Vec<f64>> {
        self.colors.as_ref().map(|c| c.iter().flatten().copied().collect())
    }

    /// Digest of the connectivity (vertex count and triangle list).
    pub fn topology_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for tri in &self.triangles {
            for &i in tri {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Split a flat `x0, y0, z0, ...` vector into points.
pub fn points_from_flat(flat: &[f64]) -> Result<Vec<Vec3>> {
    if !flat.len().is_multiple_of(3) {
        return Err(Error::Dimension(format!(
            "flat vector length {} is not a multiple of 3",
            flat.len()
        )));
    }
    Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

// ---------------------------------------------------------------------------
// OBJ

/// Parse an ASCII OBJ document. `v` lines may carry a trailing RGB triple,
/// which becomes the per-vertex color. Only triangular faces are accepted.
pub fn parse_obj(src: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut triangles = Vec::new();

    for (lineno, raw) in src.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let rest: Vec<&str> = tokens.collect();
        match tag {
            "v" => {
                let nums = parse_floats(&rest, line)?;
                match nums.len() {
                    3 | 4 => {}
                    6 => colors.push([nums[3], nums[4], nums[5]]),
                    n => {
                        return Err(Error::Parse {
                            line,
                            message: format!("vertex record has {n} components"),
                        })
                    }
                }
                vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
            }
            "vt" => {
                let nums = parse_floats(&rest, line)?;
                if nums.len() < 2 {
                    return Err(Error::Parse {
                        line,
                        message: "texture coordinate needs at least 2 components".into(),
                    });
                }
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(Error::NonTriangleFace {
                        line,
                        count: rest.len(),
                    });
                }
                let mut tri = [0usize; 3];
                for (k, tok) in rest.iter().enumerate() {
                    let idx_str = tok.split('/').next().unwrap_or("");
                    let idx: i64 = idx_str.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("bad face index '{tok}'"),
                    })?;
                    if idx <= 0 {
                        return Err(Error::Parse {
                            line,
                            message: format!("face index {idx} must be positive"),
                        });
                    }
                    tri[k] = (idx - 1) as usize;
                }
                triangles.push(tri);
            }
            _ => {}
        }
    }

    let n = vertices.len();
    let mut mesh = Mesh::new(vertices, triangles)?;
    if !colors.is_empty() {
        if colors.len() != n {
            return Err(Error::Parse {
                line: 0,
                message: format!("{} of {} vertices carry colors", colors.len(), n),
            });
        }
        mesh = mesh.with_colors(colors)?;
    }
    Ok(mesh)
}

fn parse_floats(tokens: &[&str], line: usize) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad number '{t}'"),
            })
        })
        .collect()
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&src)
}

/// Extra records to emit alongside the mesh.
#[derive(Debug, Default, Clone, Copy)]
pub struct ObjExtras<'a> {
    /// Per-vertex texture coordinates written as `vt` and referenced by faces.
    pub uv: Option<&'a [[f64; 2]]>,
    /// Material library to reference (`mtllib` + `usemtl face`).
    pub mtllib: Option<&'a str>,
}

/// Serialize to OBJ. Floats use the shortest round-trip representation, so
/// loading the output reproduces the vertex list exactly.
pub fn write_obj(mesh: &Mesh, extras: ObjExtras<'_>) -> Result<String> {
    let mut out = String::with_capacity(mesh.n_vertices() * 48);
    if let Some(lib) = extras.mtllib {
        let _ = writeln!(out, "mtllib {lib}");
    }
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let c = c[i];
                let _ = writeln!(out, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2]);
            }
            None => {
                let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
            }
        }
    }
    if let Some(uv) = extras.uv {
        if uv.len() != mesh.n_vertices() {
            return Err(Error::Dimension(format!(
                "{} uv coordinates for {} vertices",
                uv.len(),
                mesh.n_vertices()
            )));
        }
        for p in uv {
            let _ = writeln!(out, "vt {} {}", p[0], p[1]);
        }
    }
    if extras.mtllib.is_some() {
        out.push_str("usemtl face\n");
    }
    for t in &mesh.triangles {
        let [a, b, c] = [t[0] + 1, t[1] + 1, t[2] + 1];
        if extras.uv.is_some() {
            let _ = writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}");
        } else {
            let _ = writeln!(out, "f {a} {b} {c}");
        }
    }
    Ok(out)
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    save_obj_with(mesh, path, ObjExtras::default())
}

pub fn save_obj_with(mesh: &Mesh, path: impl AsRef<Path>, extras: ObjExtras<'_>) -> Result<()> {
    let path = path.as_ref();
    let text = write_obj(mesh, extras)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Landmark sidecar

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkFile {
    pub indices: Vec<usize>,
}

/// `face.obj` -> `face.landmarks.json`.
pub fn landmarks_sidecar_path(mesh_path: impl AsRef<Path>) -> PathBuf {
    mesh_path.as_ref().with_extension("landmarks.json")
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: LandmarkFile = serde_json::from_str(&text)?;
    Ok(file.indices)
}

pub fn save_landmarks(indices: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&LandmarkFile {
        indices: indices.to_vec(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load an OBJ and, when present, its landmark sidecar.
pub fn load_obj_with_landmarks(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let mesh = load_obj(path)?;
    let sidecar = landmarks_sidecar_path(path);
    if sidecar.exists() {
        let lm = load_landmarks(&sidecar)?;
        mesh.with_landmarks(lm)
    } else {
        Ok(mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::grid_mesh;
    use crate::testkit::Diagonal;

    fn triangle() -> Mesh {
        Mesh::new(
            vec![Vec3::new(0., 0., 0.), Vec3::new(1., 0., 0.), Vec3::new(0., 1., 0.)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn smallest_valid_obj() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.n_triangles(), 1);
        assert_eq!(m.triangles()[0], [0, 1, 2]);
    }

    #[test]
    fn quad_face_rejected() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap_err();
        assert!(matches!(err, Error::NonTriangleFace { line: 5, count: 4 }));
        assert!(err.to_string().contains("non-triangle face"));
    }

    #[test]
    fn parse_error_reports_line() {
        let err = parse_obj("v 0 0 0\nv 1 zero 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn negative_indices_rejected() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }));
    }

    #[test]
    fn slash_face_syntax_and_colors() {
        let src = "v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n";
        let m = parse_obj(src).unwrap();
        assert_eq!(m.colors().unwrap()[1], [0., 1., 0.]);
    }

    #[test]
    fn non_manifold_edge_rejected() {
        let v = (0..5).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.)).collect();
        // three triangles share edge (0, 1)
        let err = Mesh::new(v, vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]]).unwrap_err();
        assert!(matches!(err, Error::InvalidMesh(_) | Error::NonManifoldEdge(..)));
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(Mesh::new(v, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn grid_obj_has_expected_boundary() {
        let grid = grid_mesh(50, 50, Diagonal::Uniform);
        let text = write_obj(&grid, ObjExtras::default()).unwrap();
        let m = parse_obj(&text).unwrap();
        // 49 x 49 quads, two triangles each
        assert_eq!(m.n_triangles(), 2 * 49 * 49);
        assert_eq!(m.boundary_loop(None).unwrap().len(), 4 * 49);
    }

    #[test]
    fn triangle_boundary_follows_winding() {
        assert_eq!(triangle().boundary_loop(Some(0)).unwrap(), vec![0, 1, 2]);
        assert_eq!(triangle().boundary_loop(Some(2)).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn closed_mesh_has_no_boundary() {
        // tetrahedron
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        let m = Mesh::new(v, vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]).unwrap();
        assert!(matches!(m.boundary_loop(None), Err(Error::NoBoundary)));
    }

    #[test]
    fn annulus_has_two_loops() {
        // outer square 0..4, inner square 4..8
        let v = vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(3., 0., 0.),
            Vec3::new(3., 3., 0.),
            Vec3::new(0., 3., 0.),
            Vec3::new(1., 1., 0.),
            Vec3::new(2., 1., 0.),
            Vec3::new(2., 2., 0.),
            Vec3::new(1., 2., 0.),
        ];
        let mut tris = Vec::new();
        for k in 0..4 {
            let (o0, o1) = (k, (k + 1) % 4);
            let (i0, i1) = (4 + k, 4 + (k + 1) % 4);
            tris.push([o0, o1, i1]);
            tris.push([o0, i1, i0]);
        }
        let m = Mesh::new(v, tris).unwrap();
        assert!(matches!(m.boundary_loop(None), Err(Error::MultipleBoundaryLoops(2))));
    }

    #[test]
    fn boundary_loop_is_counter_clockwise_in_plane() {
        let grid = grid_mesh(6, 5, Diagonal::Uniform);
        let ring = grid.boundary_loop(None).unwrap();
        let signed: f64 = ring
            .iter()
            .zip(ring.iter().cycle().skip(1))
            .map(|(&a, &b)| {
                let (p, q) = (grid.vertices()[a], grid.vertices()[b]);
                p.x * q.y - q.x * p.y
            })
            .sum();
        assert!(signed > 0.0);
    }

    #[test]
    fn one_ring_examples() {
        assert_eq!(triangle().one_ring(0), &[1, 2]);
        let grid = grid_mesh(5, 5, Diagonal::Uniform);
        // interior vertex (2, 2)
        assert_eq!(grid.one_ring(2 * 5 + 2).len(), 6);
        let corners = [0, 4, 20, 24];
        let degrees: Vec<usize> = corners.iter().map(|&c| grid.one_ring(c).len()).collect();
        assert!(degrees.iter().all(|&d| d == 2 || d == 3));
        assert_eq!(degrees.iter().filter(|&&d| d == 2).count(), 2);
    }

    #[test]
    fn landmark_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("face.obj");
        assert_eq!(landmarks_sidecar_path(&obj), dir.path().join("face.landmarks.json"));
        save_obj(&triangle(), &obj).unwrap();
        save_landmarks(&[2, 0], landmarks_sidecar_path(&obj)).unwrap();
        let text = fs::read_to_string(landmarks_sidecar_path(&obj)).unwrap();
        assert_eq!(text, r#"{"indices":[2,0]}"#);
        let m = load_obj_with_landmarks(&obj).unwrap();
        assert_eq!(m.landmarks(), Some(&[2usize, 0][..]));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_obj("/nonexistent/x.obj"), Err(Error::Io { .. })));
    }
}
