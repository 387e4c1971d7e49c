//! Distribution distances for generated samples: sliced Wasserstein distance
//! over Laplacian-pyramid patches, canonical correlation analysis and
//! nearest-neighbor identity distances.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom_image::PlanarImage;
use crate::morphable::LinearModel;

pub const PATCH_SIZE: usize = 7;
pub const PATCHES_PER_IMAGE: usize = 128;
pub const N_PROJECTIONS: usize = 512;
/// Ridge added to a rank-deficient CCA covariance, relative to its mean diagonal.
pub const CCA_RIDGE: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Laplacian pyramid

const BINOMIAL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Reflect-101 index (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable binomial blur of one plane, scaled by `gain`.
fn blur(plane: &[f32], w: usize, h: usize, gain: f32) -> Vec<f32> {
    let mut tmp = vec![0.0f32; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in BINOMIAL.iter().enumerate() {
                acc += wt * plane[r * w + reflect(c as isize + k as isize - 2, w)];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in BINOMIAL.iter().enumerate() {
                acc += wt * tmp[reflect(r as isize + k as isize - 2, h) * w + c];
            }
            out[r * w + c] = acc * gain;
        }
    }
    out
}

fn map_planes(img: &PlanarImage, w: usize, h: usize, f: impl Fn(&[f32]) -> Vec<f32>) -> PlanarImage {
    let mut data = Vec::with_capacity(img.channels * w * h);
    for ch in 0..img.channels {
        data.extend(f(img.plane(ch)));
    }
    PlanarImage {
        width: w,
        height: h,
        channels: img.channels,
        data,
    }
}

/// Blur, then keep even rows and columns.
pub fn downsample(img: &PlanarImage) -> PlanarImage {
    let (w, h) = (img.width, img.height);
    let (w2, h2) = (w.div_ceil(2), h.div_ceil(2));
    map_planes(img, w2, h2, |p| {
        let b = blur(p, w, h, 1.0);
        let mut out = Vec::with_capacity(w2 * h2);
        for r in 0..h2 {
            for c in 0..w2 {
                out.push(b[2 * r * w + 2 * c]);
            }
        }
        out
    })
}

/// Zero-insert to `w x h`, then blur with gain 4.
pub fn upsample(img: &PlanarImage, w: usize, h: usize) -> PlanarImage {
    map_planes(img, w, h, |p| {
        let mut z = vec![0.0f32; w * h];
        for r in 0..img.height {
            for c in 0..img.width {
                z[2 * r * w + 2 * c] = p[r * img.width + c];
            }
        }
        blur(&z, w, h, 4.0)
    })
}

fn subtract(a: &PlanarImage, b: &PlanarImage) -> PlanarImage {
    PlanarImage {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
        ..a.clone()
    }
}

/// `levels - 1` Laplacian bands (finest first) followed by the low-pass residual.
pub fn laplacian_pyramid(img: &PlanarImage, levels: usize) -> Vec<PlanarImage> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = img.clone();
    for _ in 1..levels {
        let low = downsample(&cur);
        let up = upsample(&low, cur.width, cur.height);
        out.push(subtract(&cur, &up));
        cur = low;
    }
    out.push(cur);
    out
}

/// Inverse of [`laplacian_pyramid`].
pub fn reconstruct_pyramid(pyramid: &[PlanarImage]) -> PlanarImage {
    let mut cur = pyramid.last().expect("non-empty pyramid").clone();
    for band in pyramid.iter().rev().skip(1) {
        let up = upsample(&cur, band.width, band.height);
        cur = PlanarImage {
            data: up.data.iter().zip(&band.data).map(|(x, y)| x + y).collect(),
            ..band.clone()
        };
    }
    cur
}

/// Flattened patch descriptors from one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// One descriptor per row, channel-major within a patch.
    pub descriptors: DMatrix<f64>,
    /// Level index, 0 = finest band.
    pub level: usize,
    /// Side length of the level in pixels.
    pub resolution: usize,
    pub channels: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    /// Zero mean, unit standard deviation per channel over the whole set.
    /// A constant channel is only centered.
    pub fn normalize(&mut self) {
        let per = self.dim() / self.channels.max(1);
        for ch in 0..self.channels {
            let cols = ch * per..(ch + 1) * per;
            let count = (self.len() * per) as f64;
            let mut mean = 0.0;
            for j in cols.clone() {
                mean += self.descriptors.column(j).sum();
            }
            mean /= count;
            let mut var = 0.0;
            for j in cols.clone() {
                var += self
                    .descriptors
                    .column(j)
                    .iter()
                    .map(|v| (v - mean).powi(2))
                    .sum::<f64>();
            }
            let sd = (var / count).sqrt();
            let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
            for j in cols {
                self.descriptors.column_mut(j).apply(|v| *v = (*v - mean) * scale);
            }
        }
    }
}

/// Random 7 x 7 patches from every level of every image, normalized per
/// channel and level.
pub fn laplacian_pyramid_patches<R: Rng + ?Sized>(
    images: &[PlanarImage],
    levels: usize,
    patches_per_image: usize,
    rng: &mut R,
) -> Result<Vec<PatchSet>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images".into()))?;
    if levels == 0 || patches_per_image == 0 {
        return Err(Error::InvalidArgument(
            "levels and patches_per_image must be positive".into(),
        ));
    }
    let w = first.width;
    if first.height != w || !w.is_power_of_two() || w < (16usize << (levels - 1)) {
        return Err(Error::InvalidArgument(format!(
            "images must be square with power-of-two width >= {} for {levels} levels, got {}x{}",
            16usize << (levels - 1),
            first.width,
            first.height
        )));
    }
    if let Some(i) = images.iter().position(|im| !im.same_shape(first)) {
        return Err(Error::Dimension(format!(
            "image {i} differs in size or channels from image 0"
        )));
    }
    let ch = first.channels;
    let d = ch * PATCH_SIZE * PATCH_SIZE;
    // Patch locations come from the caller's rng in a fixed order; each image
    // then builds its pyramid independently.
    let seeds: Vec<u64> = images.iter().map(|_| rng.random()).collect();
    let per_image: Vec<Vec<Vec<f64>>> = images
        .par_iter()
        .zip(&seeds)
        .map(|(img, &seed)| {
            let mut local = ChaCha8Rng::seed_from_u64(seed);
            laplacian_pyramid(img, levels)
                .iter()
                .map(|lvl| {
                    let n = lvl.width;
                    let mut rows = Vec::with_capacity(patches_per_image * d);
                    for _ in 0..patches_per_image {
                        let r0 = local.random_range(0..=n - PATCH_SIZE);
                        let c0 = local.random_range(0..=n - PATCH_SIZE);
                        for c in 0..ch {
                            for r in r0..r0 + PATCH_SIZE {
                                for cc in c0..c0 + PATCH_SIZE {
                                    rows.push(lvl.get(c, r, cc) as f64);
                                }
                            }
                        }
                    }
                    rows
                })
                .collect()
        })
        .collect();
    let n_rows = images.len() * patches_per_image;
    Ok((0..levels)
        .map(|l| {
            let mut flat = Vec::with_capacity(n_rows * d);
            for img in &per_image {
                flat.extend_from_slice(&img[l]);
            }
            let mut set = PatchSet {
                descriptors: DMatrix::from_row_slice(n_rows, d, &flat),
                level: l,
                resolution: w >> l,
                channels: ch,
            };
            set.normalize();
            set
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Sliced Wasserstein distance

/// Wasserstein-1 distance between two sorted 1-D samples: the integral of
/// the difference of their quantile functions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    // Walk the merged breakpoints i/n and j/m, comparing i*m with j*n exactly.
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let (na, nb) = ((i + 1) * m, (j + 1) * n);
        let next = if na <= nb {
            (i + 1) as f64 / n as f64
        } else {
            (j + 1) as f64 / m as f64
        };
        acc += (next - t) * (a[i] - b[j]).abs();
        t = next;
        if na <= nb {
            i += 1;
        }
        if nb <= na {
            j += 1;
        }
    }
    acc
}

/// Unit directions drawn from an isotropic Gaussian.
pub fn random_directions<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| loop {
            let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            if n > 1e-12 {
                break v / n;
            }
        })
        .collect()
}

fn sorted_projection(m: &DMatrix<f64>, dir: &DVector<f64>) -> Vec<f64> {
    let mut p: Vec<f64> = (m * dir).iter().copied().collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean 1-D Wasserstein-1 distance over `n_projections` random directions.
/// Returned unscaled; tables conventionally multiply by 1e3.
pub fn swd<R: Rng + ?Sized>(a: &PatchSet, b: &PatchSet, n_projections: usize, rng: &mut R) -> Result<f64> {
    swd_matrices(&a.descriptors, &b.descriptors, n_projections, rng)
}

/// [`swd`] on raw row-sample matrices.
pub fn swd_matrices<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "descriptor dims {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if n_projections == 0 {
        return Err(Error::InvalidArgument("n_projections must be positive".into()));
    }
    let dirs = random_directions(a.ncols(), n_projections, rng);
    let per: Vec<f64> = dirs
        .par_iter()
        .map(|d| wasserstein_1d(&sorted_projection(a, d), &sorted_projection(b, d)))
        .collect();
    Ok(per.iter().sum::<f64>() / n_projections as f64)
}

/// SWD per pyramid level between two image sets, plus the level average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwdReport {
    pub levels: Vec<SwdLevel>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwdLevel {
    pub level: usize,
    pub resolution: usize,
    pub swd: f64,
    /// `swd * 1e3`.
    pub swd_x1e3: f64,
}

pub fn swd_report(a: &[PlanarImage], b: &[PlanarImage], levels: usize, seed: u64) -> Result<SwdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pa = laplacian_pyramid_patches(a, levels, PATCHES_PER_IMAGE, &mut rng)?;
    let pb = laplacian_pyramid_patches(b, levels, PATCHES_PER_IMAGE, &mut rng)?;
    if pa[0].dim() != pb[0].dim() {
        return Err(Error::Dimension("image sets have different channel counts".into()));
    }
    let mut out = Vec::with_capacity(levels);
    for (x, y) in pa.iter().zip(&pb) {
        let s = swd(x, y, N_PROJECTIONS, &mut rng)?;
        out.push(SwdLevel {
            level: x.level,
            resolution: x.resolution,
            swd: s,
            swd_x1e3: s * 1e3,
        });
    }
    let average = out.iter().map(|l| l.swd).sum::<f64>() / out.len() as f64;
    Ok(SwdReport { levels: out, average })
}

// ---------------------------------------------------------------------------
// Canonical correlation analysis

#[derive(Debug, Clone)]
pub struct Cca {
    /// Descending, in [0, 1].
    pub correlations: DVector<f64>,
    /// Canonical weights, one column per pair.
    pub x_weights: DMatrix<f64>,
    pub y_weights: DMatrix<f64>,
    /// First canonical variable pair `u = X a1`, `v = Y b1` on centered data.
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    /// True when a ridge had to be added to a rank-deficient covariance.
    pub regularized: bool,
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// Inverse square root of a covariance, with a ridge if it is near singular.
fn inv_sqrt(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let p = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    if !(max > 0.0) {
        return Err(Error::Degenerate("covariance is zero".into()));
    }
    let min = eig.eigenvalues.min();
    let ridged = min <= max * 1e-12;
    let ridge = if ridged {
        CCA_RIDGE * cov.trace() / p as f64
    } else {
        0.0
    };
    let d = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + ridge).sqrt());
    Ok((
        &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose(),
        ridged,
    ))
}

/// CCA via the SVD of the whitened cross-covariance.
pub fn canonical_correlation(x: &DMatrix<f64>, y: &DMatrix<f64>, d: usize) -> Result<Cca> {
    let n = x.nrows();
    let (p, q) = (x.ncols(), y.ncols());
    if y.nrows() != n {
        return Err(Error::Dimension(format!("X has {n} rows, Y has {}", y.nrows())));
    }
    if n <= p.max(q) {
        return Err(Error::InvalidArgument(format!(
            "need more samples ({n}) than variables ({})",
            p.max(q)
        )));
    }
    if d == 0 || d > p.min(q) {
        return Err(Error::InvalidArgument(format!("d = {d} outside 1..={}", p.min(q))));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite data".into()));
    }
    let (xc, yc) = (centered(x), centered(y));
    let s = 1.0 / (n - 1) as f64;
    let cxx = xc.tr_mul(&xc) * s;
    let cyy = yc.tr_mul(&yc) * s;
    let cxy = xc.tr_mul(&yc) * s;
    let (wx, rx) = inv_sqrt(&cxx)?;
    let (wy, ry) = inv_sqrt(&cyy)?;
    let m = &wx * cxy * &wy;
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    order.truncate(d);
    let correlations = DVector::from_iterator(d, order.iter().map(|&i| svd.singular_values[i].clamp(0.0, 1.0)));
    let x_weights = DMatrix::from_columns(&order.iter().map(|&i| &wx * u.column(i)).collect::<Vec<_>>());
    let y_weights = DMatrix::from_columns(&order.iter().map(|&i| &wy * vt.row(i).transpose()).collect::<Vec<_>>());
    let uvar = &xc * x_weights.column(0);
    let vvar = &yc * y_weights.column(0);
    Ok(Cca {
        correlations,
        x_weights,
        y_weights,
        u: uvar,
        v: vvar,
        regularized: rx || ry,
    })
}

// ---------------------------------------------------------------------------
// Nearest-neighbor identity distances

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub id: String,
    pub values: Vec<f64>,
}

fn check_descriptors(query: &[Descriptor], reference: &[Descriptor]) -> Result<usize> {
    let first = reference
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty reference set".into()))?;
    let d = first.values.len();
    for x in query.iter().chain(reference) {
        if x.values.len() != d {
            return Err(Error::Dimension(format!(
                "descriptor {} has length {}, expected {d}",
                x.id,
                x.values.len()
            )));
        }
        if x.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "descriptor {} has non-finite entries",
                x.id
            )));
        }
    }
    Ok(d)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum L2 distance from each query to the reference set, O(NM).
pub fn nn_distances_brute(query: &[Descriptor], reference: &[Descriptor]) -> Result<Vec<f64>> {
    check_descriptors(query, reference)?;
    Ok(query
        .par_iter()
        .map(|q| {
            reference
                .iter()
                .map(|r| dist2(&q.values, &r.values))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// Same result as [`nn_distances_brute`], bit for bit. References are
/// scanned in order of norm outward from the query's norm, pruned with the
/// reverse triangle inequality, and partial sums abandon early.
pub fn nn_distances(query: &[Descriptor], reference: &[Descriptor]) -> Result<Vec<f64>> {
    check_descriptors(query, reference)?;
    let norms: Vec<f64> = reference
        .iter()
        .map(|r| r.values.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..reference.len()).collect();
    order.sort_by(|&i, &j| norms[i].total_cmp(&norms[j]));
    let sorted_norms: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    Ok(query
        .par_iter()
        .map(|q| {
            let qn = q.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            let start = sorted_norms.partition_point(|&n| n < qn);
            let mut best = f64::INFINITY;
            let visit = |k: usize, best: &mut f64| -> bool {
                // Slack keeps rounding in the bound from pruning the true minimum.
                let lb = (sorted_norms[k] - qn).abs() * (1.0 - 1e-9);
                if lb * lb > *best {
                    return false;
                }
                let r = &reference[order[k]].values;
                let mut acc = 0.0;
                for (x, y) in q.values.iter().zip(r) {
                    acc += (x - y) * (x - y);
                    if acc > *best {
                        return true;
                    }
                }
                *best = best.min(acc);
                true
            };
            let (mut up, mut down) = (start, start);
            let (mut up_open, mut down_open) = (true, true);
            while up_open || down_open {
                if up_open {
                    if up < order.len() {
                        up_open = visit(up, &mut best);
                        up += 1;
                    } else {
                        up_open = false;
                    }
                }
                if down_open {
                    if down > 0 {
                        down -= 1;
                        down_open = visit(down, &mut best);
                    } else {
                        down_open = false;
                    }
                }
            }
            best.sqrt()
        })
        .collect())
}

/// Equal-width histogram over `[min, max]` of the values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() || bins == 0 {
        return Err(Error::InvalidArgument(
            "histogram needs values and at least one bin".into(),
        ));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Descriptor rows `id,d0,...,dn`; a first row starting with `id` is a header.
pub fn read_descriptor_csv(path: impl AsRef<Path>) -> Result<Vec<Descriptor>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if line == 0 && rec.get(0) == Some("id") {
            continue;
        }
        let id = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: line + 1,
                    message: format!("{f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line + 1,
                message: "non-finite descriptor entry".into(),
            });
        }
        out.push(Descriptor { id, values });
    }
    Ok(out)
}

pub fn write_descriptor_csv(path: impl AsRef<Path>, descriptors: &[Descriptor]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let d = descriptors.first().map_or(0, |x| x.values.len());
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for x in descriptors {
        let mut row = vec![x.id.clone()];
        row.extend(x.values.iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Default identity descriptor: texture and geometry model coefficients,
/// concatenated.
pub fn identity_descriptor(
    texture_model: &LinearModel,
    geometry_model: &LinearModel,
    texture: &DVector<f64>,
    geometry: &DVector<f64>,
) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = texture_model.project(texture)?.iter().copied().collect();
    v.extend(geometry_model.project(geometry)?.iter());
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(w: usize, ch: usize, rng: &mut ChaCha8Rng) -> PlanarImage {
        PlanarImage::from_data(w, w, ch, (0..ch * w * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn reflect_101() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn constant_image_has_zero_bands() {
        let img = PlanarImage::from_data(32, 32, 3, vec![0.3; 3 * 32 * 32]).unwrap();
        let pyr = laplacian_pyramid(&img, 3);
        for band in &pyr[..2] {
            assert!(band.data.iter().all(|v| v.abs() < 1e-6));
        }
        assert!(pyr[2].data.iter().all(|v| (v - 0.3).abs() < 1e-6));
        assert_eq!(pyr[2].width, 8);
    }

    #[test]
    fn pyramid_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(32, 3, &mut rng);
        for levels in [2, 4] {
            let back = reconstruct_pyramid(&laplacian_pyramid(&img, levels));
            for (a, b) in img.data.iter().zip(&back.data) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn patch_counts_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<_> = (0..3).map(|_| random_image(64, 3, &mut rng)).collect();
        let sets = laplacian_pyramid_patches(&imgs, 3, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(sets.len(), 3);
        for s in &sets {
            assert_eq!(s.len(), 60);
            assert_eq!(s.dim(), 147);
            for ch in 0..3 {
                let block = s.descriptors.columns(ch * 49, 49);
                let n = block.len() as f64;
                let mean = block.sum() / n;
                let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
            }
        }
        let again = laplacian_pyramid_patches(&imgs, 3, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(sets, again);
    }

    #[test]
    fn patch_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(32, 3, &mut rng);
        let b = random_image(64, 3, &mut rng);
        assert!(laplacian_pyramid_patches(&[a.clone(), b], 1, 4, &mut rng).is_err());
        assert!(laplacian_pyramid_patches(std::slice::from_ref(&a), 2, 4, &mut rng).is_ok());
        assert!(laplacian_pyramid_patches(&[a], 3, 4, &mut rng).is_err());
        let odd = PlanarImage::zeros(48, 48, 3);
        assert!(laplacian_pyramid_patches(&[odd], 1, 4, &mut rng).is_err());
    }

    #[test]
    fn wasserstein_1d_cases() {
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.7, 1.7]) - 0.7).abs() < 1e-15);
        // Unequal sizes: {0, 1} vs {0, 0.5, 1}.
        // Quantile steps: [0,1/3) 0-0, [1/3,1/2) 0-0.5, [1/2,2/3) 1-0.5, [2/3,1] 1-1.
        let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]);
        assert!((w - (0.5 / 6.0 + 0.5 / 6.0)).abs() < 1e-15);
        assert_eq!(w, wasserstein_1d(&[0.0, 0.5, 1.0], &[0.0, 1.0]));
    }

    #[test]
    fn swd_identity_shift_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(50, 6, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(swd_matrices(&a, &a, 64, &mut rng).unwrap(), 0.0);
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let y = x.add_scalar(-2.5);
        assert!((swd_matrices(&x, &y, 8, &mut rng).unwrap() - 2.5).abs() < 1e-12);
        let b = DMatrix::zeros(3, 5);
        assert!(swd_matrices(&a, &b, 8, &mut rng).is_err());
        assert!(swd_matrices(&DMatrix::zeros(0, 6), &a, 8, &mut rng).is_err());
    }

    #[test]
    fn swd_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_fn(80, 5, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(70, 5, |_, _| rng.random_range(-0.5..1.5));
        let ab = swd_matrices(&a, &b, 128, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let ba = swd_matrices(&b, &a, 128, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn cca_identity_and_invertible_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(200, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = canonical_correlation(&x, &x, 4).unwrap();
        assert!(c.correlations.iter().all(|r| (r - 1.0).abs() < 1e-8));
        assert!(!c.regularized);
        let a = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.3 * (i + 2 * j) as f64 });
        let c = canonical_correlation(&x, &(&x * a), 4).unwrap();
        assert!(c.correlations.iter().all(|r| (r - 1.0).abs() < 1e-8));
        let corr = c.u.dot(&c.v) / (c.u.norm() * c.v.norm());
        assert!((corr - 1.0).abs() < 1e-8);
    }

    #[test]
    fn cca_rank_deficient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = DMatrix::from_fn(100, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let col = x.column(0).clone_owned();
        x.set_column(2, &col);
        let y = DMatrix::from_fn(100, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = canonical_correlation(&x, &y, 2).unwrap();
        assert!(c.regularized);
        assert!(c.correlations.iter().all(|r| r.is_finite() && (0.0..=1.0).contains(r)));
        assert!(canonical_correlation(&x, &y, 3).is_err());
        assert!(canonical_correlation(&x.rows(0, 3).into_owned(), &y.rows(0, 3).into_owned(), 1).is_err());
    }

    fn desc(id: usize, values: Vec<f64>) -> Descriptor {
        Descriptor {
            id: format!("s{id}"),
            values,
        }
    }

    #[test]
    fn nn_examples() {
        let reference = vec![desc(0, vec![0.0, 0.0, 0.0])];
        let q = vec![desc(1, vec![3.0, 4.0, 0.0])];
        assert_eq!(nn_distances(&q, &reference).unwrap(), vec![5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let refs: Vec<_> = (0..30)
            .map(|i| desc(i, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let sub = refs[5..12].to_vec();
        assert!(nn_distances(&sub, &refs).unwrap().iter().all(|&d| d == 0.0));
        assert!(nn_distances(&q, &[]).is_err());
        assert!(nn_distances(&q, &refs).is_err());
    }

    #[test]
    fn nn_fast_matches_brute_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Descriptor> {
            (0..n)
                .map(|i| desc(i, (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
                .collect()
        };
        let q = mk(&mut rng, 100);
        let r = mk(&mut rng, 100);
        let fast = nn_distances(&q, &r).unwrap();
        let slow = nn_distances_brute(&q, &r).unwrap();
        assert_eq!(
            fast.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            slow.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.1, 0.5, 1.0], 2).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(histogram(&[2.0, 2.0], 3).unwrap().counts, vec![2, 0, 0]);
    }

    #[test]
    fn descriptor_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let ds = vec![desc(0, vec![0.1, -2.5e-7, 3.0]), desc(1, vec![1.0 / 3.0, 0.0, -1.0])];
        write_descriptor_csv(&p, &ds).unwrap();
        assert_eq!(read_descriptor_csv(&p).unwrap(), ds);
        std::fs::write(&p, "a,1,2\nb,3,x\n").unwrap();
        assert!(read_descriptor_csv(&p).is_err());
    }
}
