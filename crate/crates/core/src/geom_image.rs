//! Per-vertex attributes (RGB or XYZ) rasterized into square images
//! through a planar parametrization, sampled back, and mirror-augmented.
//!
//! Pixel `(r, c)` samples `uv = ((c + 0.5) / W, (r + 0.5) / H)`; row 0 is
//! the bottom of the unit square. Image data is planar (channel-major).

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::parametrize::{ParamMap, Uv};

/// Planar float image, `data[ch * H * W + r * W + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PlanarImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, ch: usize, r: usize, c: usize) -> usize {
        (ch * self.height + r) * self.width + c
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.data[self.index(ch, r, c)]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, r: usize, c: usize, v: f32) {
        let i = self.index(ch, r, c);
        self.data[i] = v;
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Mirror columns: `c -> W - 1 - c`.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for ch in 0..self.channels {
            for r in 0..self.height {
                for c in 0..self.width {
                    out.set(ch, r, c, self.get(ch, r, self.width - 1 - c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Texture,
    Geometry,
}

/// Per-channel affine normalization `s = (x - lo) / (hi - lo)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm(pub [[f64; 2]; 3]);

impl Default for ChannelNorm {
    fn default() -> Self {
        Self::unit()
    }
}

impl ChannelNorm {
    /// The identity normalization used by textures.
    pub fn unit() -> Self {
        Self([[0.0, 1.0]; 3])
    }

    /// Min/max over a set of points. Flat channels get a unit range.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a [f64; 3]>) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for k in 0..3 {
                if !p[k].is_finite() {
                    return Err(Error::InvalidArgument("non-finite attribute value".into()));
                }
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !any {
            return Err(Error::InvalidArgument("no points to normalize".into()));
        }
        let mut out = [[0.0; 2]; 3];
        for k in 0..3 {
            out[k] = if hi[k] > lo[k] {
                [lo[k], hi[k]]
            } else {
                [lo[k], lo[k] + 1.0]
            };
        }
        Ok(Self(out))
    }

    /// Widen the X range so that `x -> c - x` maps it onto itself
    /// (`lo + hi = c`); the mirror is then `s -> 1 - s` in normalized units.
    pub fn with_mirror_x(mut self, c: f64) -> Self {
        let [lo, hi] = self.0[0];
        let new_lo = lo.min(c - hi);
        self.0[0] = [new_lo, c - new_lo];
        self
    }

    /// `lo + hi` of the X channel: the mirror constant this norm supports.
    pub fn mirror_constant(&self) -> f64 {
        self.0[0][0] + self.0[0][1]
    }

    pub fn normalize(&self, ch: usize, x: f64) -> f64 {
        let [lo, hi] = self.0[ch];
        (x - lo) / (hi - lo)
    }

    pub fn denormalize(&self, ch: usize, s: f64) -> f64 {
        let [lo, hi] = self.0[ch];
        lo + s * (hi - lo)
    }
}

/// Geometry values are stored on a grid of `2^-24` so `s -> 1 - s` is exact in f32.
pub const GEOMETRY_QUANTUM: f64 = 1.0 / 16_777_216.0;

fn quantize(s: f64) -> f32 {
    ((s.clamp(0.0, 1.0) / GEOMETRY_QUANTUM).round() * GEOMETRY_QUANTUM) as f32
}

/// A 3-channel image of a parametrized surface attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryImage {
    pub pixels: PlanarImage,
    pub kind: ImageKind,
    pub norm: ChannelNorm,
    /// Row-major, `true` where a triangle covers the pixel center.
    pub coverage: Vec<bool>,
}

impl GeometryImage {
    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    /// Value at a pixel in attribute units.
    pub fn value(&self, r: usize, c: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = self.norm.denormalize(ch, self.pixels.get(ch, r, c) as f64);
        }
        out
    }

    fn flip_horizontal(&self) -> Self {
        let w = self.width();
        let mut coverage = self.coverage.clone();
        for r in 0..self.height() {
            for c in 0..w {
                coverage[r * w + c] = self.coverage[r * w + (w - 1 - c)];
            }
        }
        Self {
            pixels: self.pixels.flip_horizontal(),
            kind: self.kind,
            norm: self.norm,
            coverage,
        }
    }
}

const NO_OWNER: u32 = u32::MAX;

/// Pixel-to-triangle assignment for one parametrization and width.
#[derive(Debug, Clone)]
pub struct RasterPlan {
    pub width: usize,
    pub height: usize,
    owner: Vec<u32>,
    bary: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
}

fn pixel_center(r: usize, c: usize, w: usize, h: usize) -> Uv {
    [(c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64]
}

/// Edge function of the undirected edge `{i, j}` evaluated with the lower
/// index as origin, so both triangles sharing the edge see the exact
/// same magnitude.
#[inline]
fn canonical_edge(uv: &[Uv], i: usize, j: usize, p: &Uv) -> f64 {
    let (a, b) = if i < j { (uv[i], uv[j]) } else { (uv[j], uv[i]) };
    let e = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    if i < j {
        e
    } else {
        -e
    }
}

/// Top-left rule for a counter-clockwise triangle, y up: edges pointing
/// down (left edges) and horizontal edges pointing left (top edges) own
/// the pixel centers lying exactly on them.
#[inline]
fn owns_edge(a: &Uv, b: &Uv) -> bool {
    let dy = b[1] - a[1];
    dy < 0.0 || (dy == 0.0 && b[0] < a[0])
}

impl RasterPlan {
    pub fn new(mesh: &Mesh, map: &ParamMap, width: usize) -> Result<Self> {
        Self::with_height(mesh, map, width, width)
    }

    pub fn with_height(mesh: &Mesh, map: &ParamMap, width: usize, height: usize) -> Result<Self> {
        map.ensure_matches(mesh)?;
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        let flipped = map.flipped_count(mesh);
        if flipped > 0 {
            return Err(Error::FlippedTriangles(flipped));
        }
        let uv = map.uv();
        let mut owner = vec![NO_OWNER; width * height];
        let mut bary = vec![[0.0; 3]; width * height];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let [i, j, k] = *tri;
            let (a, b, c) = (uv[i], uv[j], uv[k]);
            let lo_u = a[0].min(b[0]).min(c[0]);
            let hi_u = a[0].max(b[0]).max(c[0]);
            let lo_v = a[1].min(b[1]).min(c[1]);
            let hi_v = a[1].max(b[1]).max(c[1]);
            if hi_u == lo_u || hi_v == lo_v {
                continue;
            }
            // candidate pixel centers inside the bounding box
            let c0 = ((lo_u * width as f64 - 0.5).floor().max(0.0)) as usize;
            let c1 = ((hi_u * width as f64 - 0.5).ceil().max(0.0) as usize).min(width - 1);
            let r0 = ((lo_v * height as f64 - 0.5).floor().max(0.0)) as usize;
            let r1 = ((hi_v * height as f64 - 0.5).ceil().max(0.0) as usize).min(height - 1);
            let own = [owns_edge(&b, &c), owns_edge(&c, &a), owns_edge(&a, &b)];
            for r in r0..=r1 {
                for col in c0..=c1 {
                    let p = pixel_center(r, col, width, height);
                    // e_a is opposite vertex a (edge b->c), and so on
                    let e = [
                        canonical_edge(uv, j, k, &p),
                        canonical_edge(uv, k, i, &p),
                        canonical_edge(uv, i, j, &p),
                    ];
                    let inside = (0..3).all(|q| e[q] > 0.0 || (e[q] == 0.0 && own[q]));
                    if !inside {
                        continue;
                    }
                    let sum = e[0] + e[1] + e[2];
                    if !(sum > 0.0) {
                        continue;
                    }
                    let px = r * width + col;
                    if owner[px] != NO_OWNER {
                        return Err(Error::Overlap { x: col, y: r });
                    }
                    owner[px] = t as u32;
                    bary[px] = [e[0] / sum, e[1] / sum, e[2] / sum];
                }
            }
        }
        Ok(Self {
            width,
            height,
            owner,
            bary,
            triangles: mesh.triangles().to_vec(),
        })
    }

    pub fn coverage(&self) -> Vec<bool> {
        self.owner.iter().map(|&o| o != NO_OWNER).collect()
    }

    /// Owning triangle of a pixel.
    pub fn owner(&self, r: usize, c: usize) -> Option<usize> {
        let o = self.owner[r * self.width + c];
        (o != NO_OWNER).then_some(o as usize)
    }

    /// Barycentric interpolation of per-vertex values at every covered pixel.
    pub fn interpolate(&self, attribute: &[[f64; 3]]) -> Vec<Option<[f64; 3]>> {
        (0..self.width * self.height)
            .into_par_iter()
            .map(|px| {
                let o = self.owner[px];
                if o == NO_OWNER {
                    return None;
                }
                let tri = self.triangles[o as usize];
                let w = self.bary[px];
                let mut v = [0.0; 3];
                for (q, &vi) in tri.iter().enumerate() {
                    for k in 0..3 {
                        v[k] += w[q] * attribute[vi][k];
                    }
                }
                Some(v)
            })
            .collect()
    }

    /// Rasterize a per-vertex attribute. Geometry uses `norm` (or the
    /// attribute's own min/max); texture values must lie in `[0, 1]`.
    pub fn rasterize(
        &self,
        attribute: &[[f64; 3]],
        kind: ImageKind,
        norm: Option<ChannelNorm>,
    ) -> Result<GeometryImage> {
        let n_vertices = self.triangles.iter().flatten().copied().max().map_or(0, |m| m + 1);
        if attribute.len() < n_vertices {
            return Err(Error::Dimension(format!(
                "{} attribute values for a mesh with {n_vertices} referenced vertices",
                attribute.len()
            )));
        }
        let norm = match kind {
            ImageKind::Texture => {
                if attribute.iter().flatten().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(Error::InvalidArgument("texture values must lie in [0, 1]".into()));
                }
                ChannelNorm::unit()
            }
            ImageKind::Geometry => match norm {
                Some(n) => {
                    for p in attribute {
                        for k in 0..3 {
                            let s = n.normalize(k, p[k]);
                            if !(-1e-9..=1.0 + 1e-9).contains(&s) {
                                return Err(Error::InvalidArgument(format!(
                                    "coordinate {} outside the normalization range [{}, {}]",
                                    p[k], n.0[k][0], n.0[k][1]
                                )));
                            }
                        }
                    }
                    n
                }
                None => ChannelNorm::from_points(attribute.iter())?,
            },
        };
        let values = self.interpolate(attribute);
        let (w, h) = (self.width, self.height);
        let mut pixels = PlanarImage::zeros(w, h, 3);
        let plane = w * h;
        for (px, v) in values.iter().enumerate() {
            if let Some(v) = v {
                for k in 0..3 {
                    pixels.data[k * plane + px] = match kind {
                        ImageKind::Texture => v[k] as f32,
                        ImageKind::Geometry => quantize(norm.normalize(k, v[k])),
                    };
                }
            }
        }
        Ok(GeometryImage {
            pixels,
            kind,
            norm,
            coverage: self.coverage(),
        })
    }
}

/// One-shot rasterization.
pub fn rasterize(
    mesh: &Mesh,
    map: &ParamMap,
    attribute: &[[f64; 3]],
    width: usize,
    kind: ImageKind,
    norm: Option<ChannelNorm>,
) -> Result<GeometryImage> {
    if attribute.len() != mesh.n_vertices() {
        return Err(Error::Dimension(format!(
            "{} attribute values for {} vertices",
            attribute.len(),
            mesh.n_vertices()
        )));
    }
    RasterPlan::new(mesh, map, width)?.rasterize(attribute, kind, norm)
}

/// Bilinear sample at every vertex's uv, in attribute units. Weights of
/// uncovered neighbor pixels are dropped and the rest renormalized.
pub fn sample_back(image: &GeometryImage, map: &ParamMap) -> Result<Vec<[f64; 3]>> {
    sample_uvs(image, map.uv())
}

pub fn sample_uvs(image: &GeometryImage, uvs: &[Uv]) -> Result<Vec<[f64; 3]>> {
    let (w, h) = (image.width(), image.height());
    uvs.iter()
        .enumerate()
        .map(|(vi, uv)| {
            let x = uv[0] * w as f64 - 0.5;
            let y = uv[1] * h as f64 - 0.5;
            let cx = x.floor();
            let cy = y.floor();
            let (fx, fy) = (x - cx, y - cy);
            let mut acc = [0.0; 3];
            let mut total = 0.0;
            for (dr, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                for (dc, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let wgt = wx * wy;
                    if wgt == 0.0 {
                        continue;
                    }
                    let r = (cy as i64 + dr).clamp(0, h as i64 - 1) as usize;
                    let c = (cx as i64 + dc).clamp(0, w as i64 - 1) as usize;
                    if !image.coverage[r * w + c] {
                        continue;
                    }
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wgt * image.pixels.get(ch, r, c) as f64;
                    }
                    total += wgt;
                }
            }
            if total <= 0.0 {
                return Err(Error::OutsideCoverage(vi));
            }
            let mut out = [0.0; 3];
            for ch in 0..3 {
                out[ch] = image.norm.denormalize(ch, acc[ch] / total);
            }
            Ok(out)
        })
        .collect()
}

/// `[original, horizontally flipped]`.
pub fn augment_texture(image: &GeometryImage) -> Vec<GeometryImage> {
    vec![image.clone(), image.flip_horizontal()]
}

/// Mirror the given channels (`s -> 1 - s` on covered pixels).
fn mirror_channels(image: &GeometryImage, channels: [bool; 3]) -> GeometryImage {
    let mut out = image.clone();
    let plane = image.width() * image.height();
    for (ch, &m) in channels.iter().enumerate() {
        if !m {
            continue;
        }
        for px in 0..plane {
            if image.coverage[px] {
                out.pixels.data[ch * plane + px] = 1.0 - image.pixels.data[ch * plane + px];
            }
        }
    }
    out
}

/// The 8 combinations of mirroring X, Y and Z. Variant `b` mirrors X when
/// bit 0 is set, Y for bit 1 and Z for bit 2; variant 0 is the input.
/// The X mirror is `x -> c - x` and comes with a horizontal image flip.
/// Y and Z are reflected about the midpoint of their normalization range.
pub fn augment_geometry(image: &GeometryImage, c: f64) -> Result<Vec<GeometryImage>> {
    if image.kind != ImageKind::Geometry {
        return Err(Error::InvalidArgument(
            "geometry augmentation needs a geometry image".into(),
        ));
    }
    let [lo, hi] = image.norm.0[0];
    if ((lo + hi) - c).abs() > 1e-9 * (hi - lo).abs().max(c.abs()).max(1e-300) {
        return Err(Error::InvalidArgument(format!(
            "X normalization [{lo}, {hi}] is not closed under x -> {c} - x; build it with ChannelNorm::with_mirror_x"
        )));
    }
    Ok((0..8u8)
        .map(|b| {
            let mx = b & 1 != 0;
            let my = b & 2 != 0;
            let mz = b & 4 != 0;
            let mirrored = mirror_channels(image, [mx, my, mz]);
            if mx {
                mirrored.flip_horizontal()
            } else {
                mirrored
            }
        })
        .collect())
}

/// Fill uncovered pixels by pull-push averaging (coverage is unchanged).
pub fn pull_push_fill(image: &GeometryImage) -> GeometryImage {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    if image.covered_count() == 0 {
        return out;
    }
    for ch in 0..3 {
        // pull: weighted averages on a pyramid
        let mut levels: Vec<(usize, usize, Vec<f64>, Vec<f64>)> = Vec::new();
        let vals: Vec<f64> = image.pixels.plane(ch).iter().map(|&v| v as f64).collect();
        let wts: Vec<f64> = image.coverage.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        levels.push((w, h, vals, wts));
        while {
            let (lw, lh, _, _) = levels.last().expect("non-empty");
            *lw > 1 || *lh > 1
        } {
            let (lw, lh, v, wt) = levels.last().expect("non-empty");
            let (nw, nh) = (lw.div_ceil(2), lh.div_ceil(2));
            let mut nv = vec![0.0; nw * nh];
            let mut nwt = vec![0.0; nw * nh];
            for r in 0..*lh {
                for c in 0..*lw {
                    let i = (r / 2) * nw + c / 2;
                    nv[i] += v[r * lw + c] * wt[r * lw + c];
                    nwt[i] += wt[r * lw + c];
                }
            }
            for i in 0..nw * nh {
                if nwt[i] > 0.0 {
                    nv[i] /= nwt[i];
                    nwt[i] = nwt[i].min(1.0);
                }
            }
            levels.push((nw, nh, nv, nwt));
        }
        // push: fill holes from the coarser level
        for l in (0..levels.len() - 1).rev() {
            let (cw, _, coarse_v, _) = levels[l + 1].clone();
            let (lw, lh, v, wt) = &mut levels[l];
            for r in 0..*lh {
                for c in 0..*lw {
                    let i = r * *lw + c;
                    if wt[i] == 0.0 {
                        v[i] = coarse_v[(r / 2) * cw + c / 2];
                        wt[i] = 1.0;
                    }
                }
            }
        }
        let filled = &levels[0].2;
        let plane = out.pixels.plane_mut(ch);
        for (px, p) in plane.iter_mut().enumerate() {
            if !image.coverage[px] {
                *p = match image.kind {
                    ImageKind::Geometry => quantize(filled[px]),
                    ImageKind::Texture => filled[px] as f32,
                };
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Files

#[derive(Debug, Serialize, Deserialize)]
struct GimSidecar {
    width: usize,
    height: usize,
    channels: usize,
    kind: ImageKind,
    norm: [[f64; 2]; 3],
    /// `[start, length]` runs of covered pixels, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coverage_runs: Option<Vec<[usize; 2]>>,
}

/// `foo.gim` -> `foo.gim.json`.
pub fn gim_sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn coverage_runs(coverage: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < coverage.len() {
        if coverage[i] {
            let start = i;
            while i < coverage.len() && coverage[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

/// Raw planar little-endian f32 payload.
pub fn gim_bytes(image: &GeometryImage) -> Vec<u8> {
    image.pixels.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn gim_sidecar_json(image: &GeometryImage) -> Result<String> {
    let side = GimSidecar {
        width: image.width(),
        height: image.height(),
        channels: 3,
        kind: image.kind,
        norm: image.norm.0,
        coverage_runs: Some(coverage_runs(&image.coverage)),
    };
    Ok(serde_json::to_string(&side)?)
}

pub fn save_gim(image: &GeometryImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, gim_bytes(image)).map_err(|e| Error::io(path, e))?;
    let side = gim_sidecar_path(path);
    fs::write(&side, gim_sidecar_json(image)?).map_err(|e| Error::io(&side, e))
}

pub fn load_gim(path: impl AsRef<Path>) -> Result<GeometryImage> {
    let path = path.as_ref();
    let side_path = gim_sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: GimSidecar = serde_json::from_str(&side_text)?;
    if side.channels != 3 {
        return Err(Error::Format(format!(
            "expected 3 channels, sidecar says {}",
            side.channels
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = side.width * side.height * 3;
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "{} bytes of pixel data, sidecar implies {}",
            bytes.len(),
            4 * n
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let plane = side.width * side.height;
    let coverage = match side.coverage_runs {
        Some(runs) => {
            let mut cov = vec![false; plane];
            for [start, len] in runs {
                if start + len > plane {
                    return Err(Error::Format("coverage run past the end of the image".into()));
                }
                cov[start..start + len].iter_mut().for_each(|c| *c = true);
            }
            cov
        }
        None => vec![true; plane],
    };
    Ok(GeometryImage {
        pixels: PlanarImage::from_data(side.width, side.height, 3, data)?,
        kind: side.kind,
        norm: ChannelNorm(side.norm),
        coverage,
    })
}

/// Write a texture as an 8- or 16-bit RGB PNG (top row = high v).
pub fn save_texture_png(image: &GeometryImage, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (image.width(), image.height());
    let px = |ch: usize, x: u32, y: u32| image.pixels.get(ch, h - 1 - y as usize, x as usize).clamp(0.0, 1.0) as f64;
    match bit_depth {
        8 => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb([0, 1, 2].map(|ch| (px(ch, x, y) * 255.0).round() as u8))
            });
            buf.save(path)?;
        }
        16 => {
            let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb([0, 1, 2].map(|ch| (px(ch, x, y) * 65535.0).round() as u16))
            });
            buf.save(path)?;
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "bit depth {other} not supported (8 or 16)"
            )))
        }
    }
    Ok(())
}

/// Read an RGB(A) PNG as a fully covered texture image.
pub fn load_texture_png(path: impl AsRef<Path>) -> Result<GeometryImage> {
    let path = path.as_ref();
    let img = image::open(path)?.into_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = PlanarImage::zeros(w, h, 3);
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            pixels.set(ch, h - 1 - y as usize, x as usize, (p.0[ch] as f64 / 65535.0) as f32);
        }
    }
    Ok(GeometryImage {
        pixels,
        kind: ImageKind::Texture,
        norm: ChannelNorm::unit(),
        coverage: vec![true; w * h],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Vec3;
    use crate::parametrize::uniform_embedding;
    use crate::testkit::{grid_mesh, grid_symmetry_pairs, Diagonal};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square_mesh() -> (Mesh, ParamMap) {
        let m = Mesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let map = ParamMap::new(&m, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        (m, map)
    }

    #[test]
    fn square_is_fully_covered_once() {
        let (m, map) = square_mesh();
        let plan = RasterPlan::new(&m, &map, 16).unwrap();
        assert!(plan.coverage().iter().all(|&c| c));
    }

    #[test]
    fn constant_attribute() {
        let (m, map) = square_mesh();
        let img = rasterize(&m, &map, &[[0.5; 3]; 4], 8, ImageKind::Texture, None).unwrap();
        assert!(img.pixels.data.iter().all(|&v| v == 0.5));
        let back = sample_back(&img, &map).unwrap();
        assert!(back.iter().all(|v| *v == [0.5; 3]));
    }

    #[test]
    fn uv_attribute_reproduces_pixel_centers() {
        let (m, map) = square_mesh();
        let attr: Vec<[f64; 3]> = map.uv().iter().map(|u| [u[0], u[1], 0.0]).collect();
        let w = 32;
        let img = rasterize(&m, &map, &attr, w, ImageKind::Texture, None).unwrap();
        for r in 0..w {
            for c in 0..w {
                let p = pixel_center(r, c, w, w);
                assert!((img.pixels.get(0, r, c) as f64 - p[0]).abs() < 1e-6);
                assert!((img.pixels.get(1, r, c) as f64 - p[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn partition_on_random_grid_with_pixel_centers_on_edges() {
        // a 5x5 grid at W = 8 puts many pixel centers exactly on edges
        for seed in 0..5 {
            let g = grid_mesh(5, 5, Diagonal::Random { seed });
            let map = ParamMap::new(&g, g.vertices().iter().map(|v| [v.x, v.y]).collect()).unwrap();
            let plan = RasterPlan::new(&g, &map, 8).unwrap();
            assert!(plan.coverage().iter().all(|&c| c));
            let plan = RasterPlan::new(&g, &map, 64).unwrap();
            assert!(plan.coverage().iter().all(|&c| c));
        }
    }

    #[test]
    fn overlap_is_reported() {
        let m = Mesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        // vertex 3 folded over the diagonal into triangle 0's half
        let map = ParamMap::new(&m, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.9, 0.2]]).unwrap();
        assert!(matches!(
            RasterPlan::new(&m, &map, 16),
            Err(Error::FlippedTriangles(_)) | Err(Error::Overlap { .. })
        ));
    }

    #[test]
    fn rasterization_is_linear() {
        let g = grid_mesh(10, 10, Diagonal::Random { seed: 3 });
        let map = uniform_embedding(&g, 5).unwrap();
        let plan = RasterPlan::new(&g, &map, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<[f64; 3]> = (0..100).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let b: Vec<[f64; 3]> = (0..100).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let ab: Vec<[f64; 3]> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2] + y[2]])
            .collect();
        let (ia, ib, iab) = (plan.interpolate(&a), plan.interpolate(&b), plan.interpolate(&ab));
        for px in 0..ia.len() {
            match (ia[px], ib[px], iab[px]) {
                (Some(x), Some(y), Some(z)) => {
                    for k in 0..3 {
                        assert!((x[k] + y[k] - z[k]).abs() < 1e-6);
                    }
                }
                (None, None, None) => {}
                _ => panic!("coverage differs between attributes"),
            }
        }
    }

    #[test]
    fn linear_field_round_trip() {
        let g = grid_mesh(12, 12, Diagonal::Uniform);
        let map = uniform_embedding(&g, 6).unwrap();
        let attr: Vec<[f64; 3]> = map
            .uv()
            .iter()
            .map(|u| [0.2 + 0.5 * u[0], 0.1 + 0.3 * u[1], 0.4])
            .collect();
        let img = rasterize(&g, &map, &attr, 256, ImageKind::Texture, None).unwrap();
        let back = sample_back(&img, &map).unwrap();
        for (v, (a, b)) in attr.iter().zip(&back).enumerate() {
            if g.is_boundary_vertex(v) {
                continue;
            }
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6, "vertex {v}: {a:?} vs {b:?}");
            }
        }
    }

    fn geometry_image(seed: u64) -> (Mesh, ParamMap, GeometryImage) {
        let g = grid_mesh(9, 9, Diagonal::MirrorSymmetric);
        let map = uniform_embedding(&g, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attr: Vec<[f64; 3]> = g
            .vertices()
            .iter()
            .map(|v| [v.x + rng.random_range(-0.01..0.01), v.y, rng.random_range(0.0..0.3)])
            .collect();
        let norm = ChannelNorm::from_points(attr.iter()).unwrap().with_mirror_x(1.0);
        let img = rasterize(&g, &map, &attr, 32, ImageKind::Geometry, Some(norm)).unwrap();
        (g, map, img)
    }

    #[test]
    fn geometry_augmentations() {
        let (_, _, img) = geometry_image(7);
        let out = augment_geometry(&img, img.norm.mirror_constant()).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out[0], img);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(out[i].pixels, out[j].pixels, "variants {i} and {j} coincide");
            }
        }
        // double X mirror and double flip are exact
        let c = img.norm.mirror_constant();
        let twice = augment_geometry(&out[1], c).unwrap()[1].clone();
        assert_eq!(twice, img);
        let t = augment_texture(&img);
        assert_eq!(augment_texture(&t[1])[1], img);

        // Y mirror leaves X and Z alone
        let y = &out[2];
        assert_eq!(y.pixels.plane(0), img.pixels.plane(0));
        assert_eq!(y.pixels.plane(2), img.pixels.plane(2));
        for (a, b) in y
            .pixels
            .plane(1)
            .iter()
            .zip(img.pixels.plane(1))
            .zip(&img.coverage)
            .filter(|(_, c)| **c)
            .map(|(p, _)| p)
        {
            assert_eq!(*a, 1.0 - *b);
        }
    }

    #[test]
    fn geometry_augmentation_requires_closed_norm() {
        let (_, _, img) = geometry_image(1);
        assert!(augment_geometry(&img, img.norm.mirror_constant() + 0.5).is_err());
        let mut tex = img.clone();
        tex.kind = ImageKind::Texture;
        assert!(augment_geometry(&tex, img.norm.mirror_constant()).is_err());
    }

    #[test]
    fn symmetric_texture_flip_is_invariant() {
        let g = grid_mesh(9, 9, Diagonal::MirrorSymmetric);
        let map = uniform_embedding(&g, 4).unwrap();
        let pairs = grid_symmetry_pairs(9, 9);
        let map = crate::parametrize::symmetrize(&g, &map, &pairs).unwrap();
        let attr: Vec<[f64; 3]> = map.uv().iter().map(|u| [(u[0] - 0.5).abs(), u[1], 0.5]).collect();
        let img = rasterize(&g, &map, &attr, 16, ImageKind::Texture, None).unwrap();
        let out = augment_texture(&img);
        assert_eq!(out.len(), 2);
        for (a, b) in out[0].pixels.data.iter().zip(&out[1].pixels.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gim_round_trip_is_bit_exact() {
        let (_, _, img) = geometry_image(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("face.gim");
        save_gim(&img, &p).unwrap();
        assert!(gim_sidecar_path(&p).exists());
        assert_eq!(load_gim(&p).unwrap(), img);
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let (m, map) = square_mesh();
        let attr = [[0.1, 0.2, 0.3], [0.9, 0.5, 0.0], [1.0, 1.0, 1.0], [0.0, 0.7, 0.4]];
        let img = rasterize(&m, &map, &attr, 16, ImageKind::Texture, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for depth in [8u8, 16] {
            let p = dir.path().join(format!("t{depth}.png"));
            save_texture_png(&img, &p, depth).unwrap();
            let back = load_texture_png(&p).unwrap();
            let tol = if depth == 8 { 0.5 / 255.0 } else { 0.5 / 65535.0 } + 1e-6;
            for (a, b) in img.pixels.data.iter().zip(&back.pixels.data) {
                assert!((a - b).abs() <= tol as f32);
            }
        }
        assert!(save_texture_png(&img, dir.path().join("x.png"), 12).is_err());
    }

    #[test]
    fn uncovered_vertex_is_reported() {
        let (m, map) = square_mesh();
        let mut img = rasterize(&m, &map, &[[0.5; 3]; 4], 4, ImageKind::Texture, None).unwrap();
        img.coverage.iter_mut().for_each(|c| *c = false);
        assert!(matches!(sample_back(&img, &map), Err(Error::OutsideCoverage(0))));
    }

    #[test]
    fn pull_push_fills_holes_only() {
        let g = grid_mesh(6, 6, Diagonal::Uniform);
        let map = uniform_embedding(&g, 3).unwrap();
        let attr = vec![[0.25, 0.5, 0.75]; g.n_vertices()];
        let mut img = rasterize(&g, &map, &attr, 16, ImageKind::Texture, None).unwrap();
        for px in 0..40 {
            img.coverage[px] = false;
            for ch in 0..3 {
                img.pixels.data[ch * 256 + px] = 0.0;
            }
        }
        let filled = pull_push_fill(&img);
        assert_eq!(filled.coverage, img.coverage);
        for ch in 0..3 {
            let expect = [0.25f32, 0.5, 0.75][ch];
            assert!(filled.pixels.plane(ch).iter().all(|&v| (v - expect).abs() < 1e-6));
        }
    }
}
