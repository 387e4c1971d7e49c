//! End-to-end flows: dataset preparation, synthetic faces and demo data.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use facegeom_core::align::{register, AlignConfig};
use facegeom_core::expression::{apply_expression, ExpressionModel};
use facegeom_core::geom_image::{
    augment_geometry, augment_texture, load_texture_png, sample_back, save_gim, save_texture_png, ChannelNorm,
    GeometryImage, ImageKind, RasterPlan,
};
use facegeom_core::masked_batch::{save_mask_png, ValidMask};
use facegeom_core::mesh::{
    landmarks_sidecar_path, load_obj, load_obj_with_landmarks, save_landmarks, save_obj, save_obj_with, ObjExtras,
};
use facegeom_core::morphable::sample_coefficients;
use facegeom_core::parametrize::{
    boundary_embedding, design_weights, feature_vertex_weights, symmetrize, uniform_weights, weighted_embed, ParamMap,
    WeightNormalization,
};
use facegeom_core::spatial::TriangleBvh;
use facegeom_core::testkit::{make_synthetic_population, SyntheticFaceSpec};
use facegeom_core::{Mesh, Vec3};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{Method, ModelBundle};
use crate::config::{required, PipelineConfig, WeightPreset};
use crate::manifest::{record, record_input, Failure, Manifest};

// ---------------------------------------------------------------------------
// Shared helpers

/// `*.obj` files of a directory, sorted by name.
pub fn obj_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn positions_vector(mesh: &Mesh) -> DVector<f64> {
    DVector::from_vec(mesh.positions_flat())
}

pub fn colors_vector(mesh: &Mesh) -> Result<DVector<f64>> {
    mesh.colors_flat()
        .map(DVector::from_vec)
        .context("mesh has no vertex colors")
}

pub fn vector_points(v: &DVector<f64>) -> Vec<Vec3> {
    v.as_slice().chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

pub fn vector_triples(v: &DVector<f64>) -> Vec<[f64; 3]> {
    v.as_slice().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn clamp_colors(colors: &[[f64; 3]]) -> Vec<[f64; 3]> {
    colors.iter().map(|c| c.map(|x| x.clamp(0.0, 1.0))).collect()
}

pub fn load_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs: Vec<[usize; 2]> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(pairs.into_iter().map(|[a, b]| (a, b)).collect())
}

/// Parametrize the template as configured: boundary on the unit square from
/// `anchor`, uniform or feature-weighted interior, optional symmetrization.
pub fn parametrize_template(template: &Mesh, cfg: &PipelineConfig) -> Result<ParamMap> {
    let ring = template.boundary_loop(cfg.anchor)?;
    let boundary = boundary_embedding(&ring, template.vertices())?;
    let uniform = weighted_embed(template, &uniform_weights(template), &boundary)?;
    let map = match cfg.weight_preset {
        WeightPreset::Uniform => uniform,
        WeightPreset::Feature => {
            let vw = feature_vertex_weights(template.vertices(), &cfg.feature_regions, cfg.feature_gain);
            let w = design_weights(template, &vw, &uniform, WeightNormalization::default())?;
            weighted_embed(template, &w, &boundary)?
        }
    };
    match &cfg.symmetry {
        Some(p) => Ok(symmetrize(template, &map, &load_pairs(p)?)?),
        None => Ok(map),
    }
}

/// Color of every point taken from the closest point on a colored surface.
pub fn transfer_colors(points: &[Vec3], surface: &Mesh) -> Result<Vec<[f64; 3]>> {
    let colors = surface.colors().context("scan has no vertex colors")?;
    let bvh = TriangleBvh::new(surface);
    points
        .par_iter()
        .map(|p| {
            let hit = bvh.closest_point(p).context("scan has no triangles")?;
            let t = surface.triangles()[hit.triangle];
            let mut c = [0.0; 3];
            for (k, &vi) in t.iter().enumerate() {
                for (ch, x) in c.iter_mut().enumerate() {
                    *x += hit.barycentric[k] * colors[vi][ch];
                }
            }
            Ok(c.map(|x| x.clamp(0.0, 1.0)))
        })
        .collect()
}

fn coverage_mask(image: &GeometryImage) -> ValidMask {
    // PNG row 0 is the top of the image, i.e. the highest v.
    let (w, h) = (image.width(), image.height());
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let r = h - 1 - y;
        data.extend((0..w).map(|c| u8::from(image.coverage[r * w + c])));
    }
    ValidMask {
        width: w,
        height: h,
        data,
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Debug, Clone)]
pub struct PrepareOutcome {
    pub output: PathBuf,
    pub manifest: Manifest,
    pub manifest_sha256: String,
}

struct Aligned {
    name: String,
    positions: Vec<Vec3>,
    colors: Option<Vec<[f64; 3]>>,
    final_energy: f64,
    iterations: usize,
}

fn align_scan(template: &Mesh, path: &Path, align: &AlignConfig) -> std::result::Result<Aligned, Failure> {
    let name = file_stem(path);
    let fail = |stage: &str, e: &dyn std::fmt::Display| Failure {
        item: name.clone(),
        stage: stage.into(),
        error: e.to_string(),
    };
    let scan = load_obj_with_landmarks(path).map_err(|e| fail("load", &e))?;
    let reg = register(template, &scan, align).map_err(|e| fail("align", &e))?;
    let colors = match scan.colors() {
        Some(_) => {
            let moved = reg
                .rigid
                .transform
                .apply_mesh(&scan)
                .map_err(|e| fail("transfer", &e))?;
            Some(transfer_colors(reg.fit.mesh.vertices(), &moved).map_err(|e| fail("transfer", &e))?)
        }
        None => None,
    };
    Ok(Aligned {
        name,
        positions: reg.fit.mesh.vertices().to_vec(),
        colors,
        final_energy: reg.fit.energies.last().copied().unwrap_or(f64::NAN),
        iterations: reg.fit.iterations,
    })
}

fn write_images(
    out: &Path,
    a: &Aligned,
    template: &Mesh,
    plan: &RasterPlan,
    norm: ChannelNorm,
    mirror_c: f64,
    cfg: &PipelineConfig,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let fitted = template.with_positions(a.positions.clone())?;
    let fitted = match &a.colors {
        Some(c) => fitted.with_colors(c.clone())?,
        None => fitted,
    };
    let rel = PathBuf::from("fitted").join(format!("{}.obj", a.name));
    save_obj(&fitted, out.join(&rel))?;
    files.push(rel);

    let attr: Vec<[f64; 3]> = a.positions.iter().map(|p| [p.x, p.y, p.z]).collect();
    let geom = plan.rasterize(&attr, ImageKind::Geometry, Some(norm))?;
    let geoms = if cfg.augment {
        augment_geometry(&geom, mirror_c)?
    } else {
        vec![geom]
    };
    for (i, g) in geoms.iter().enumerate() {
        let rel = PathBuf::from("geometry").join(format!("{}_g{i}.gim", a.name));
        save_gim(g, out.join(&rel))?;
        files.push(rel.clone());
        files.push(PathBuf::from(format!("{}.json", rel.display())));
    }
    if let Some(colors) = &a.colors {
        let tex = plan.rasterize(colors, ImageKind::Texture, None)?;
        let texs = if cfg.augment { augment_texture(&tex) } else { vec![tex] };
        for (i, t) in texs.iter().enumerate() {
            let rel = PathBuf::from("texture").join(format!("{}_t{i}.png", a.name));
            save_texture_png(t, out.join(&rel), cfg.texture_bit_depth)?;
            files.push(rel);
            if cfg.masks {
                let rel = PathBuf::from("masks").join(format!("{}_t{i}.png", a.name));
                save_mask_png(&coverage_mask(t), out.join(&rel))?;
                files.push(rel);
            }
        }
    }
    Ok(files)
}

/// Align every scan to the template, rasterize texture and geometry images,
/// augment, and write a manifest. A scan that fails at any stage is recorded
/// and skipped.
pub fn prepare(cfg: &PipelineConfig) -> Result<PrepareOutcome> {
    cfg.validate()?;
    let template_path = required(&cfg.template, "template")?;
    let scans_dir = required(&cfg.scans, "scans")?;
    let out = required(&cfg.output, "output")?.clone();
    let template = load_obj_with_landmarks(template_path)?;
    if template.landmarks().is_none() {
        bail!("template {} has no landmark sidecar", template_path.display());
    }
    let scans = obj_files(scans_dir)?;
    for d in ["fitted", "geometry", "texture", "masks"] {
        fs::create_dir_all(out.join(d)).with_context(|| format!("creating {}", out.join(d).display()))?;
    }

    let mut manifest = Manifest::new("prepare", cfg.seed, cfg.content_hash());
    manifest.inputs.push(record_input(template_path)?);
    manifest
        .inputs
        .push(record_input(&landmarks_sidecar_path(template_path))?);
    if let Some(p) = &cfg.symmetry {
        manifest.inputs.push(record_input(p)?);
    }
    for s in &scans {
        for p in [s.clone(), landmarks_sidecar_path(s)] {
            if p.exists() {
                let mut r = record_input(&p)?;
                r.path = format!("scans/{}", r.path);
                manifest.inputs.push(r);
            }
        }
    }

    let map = parametrize_template(&template, cfg)?;
    map.save_json(out.join("map.uv.json"))?;
    let plan = RasterPlan::new(&template, &map, cfg.image_width)?;
    let pool = pool(cfg.workers)?;

    log::info!("prepare: aligning {} scans", scans.len());
    let aligned: Vec<std::result::Result<Aligned, Failure>> =
        pool.install(|| scans.par_iter().map(|p| align_scan(&template, p, &cfg.align)).collect());
    let (ok, failed): (Vec<_>, Vec<_>) = aligned.into_iter().partition(|r| r.is_ok());
    let ok: Vec<Aligned> = ok.into_iter().map(|r| r.expect("partitioned")).collect();
    manifest.failures = failed.into_iter().map(|r| r.err().expect("partitioned")).collect();
    for f in &manifest.failures {
        log::warn!("prepare: {} failed at {}: {}", f.item, f.stage, f.error);
    }

    // One normalization for the whole dataset, closed under the X mirror
    // about the template's bounding-box center.
    let (lo, hi) = template.bounding_box();
    let mirror_c = lo.x + hi.x;
    let mut files = vec![PathBuf::from("map.uv.json")];
    if !ok.is_empty() {
        let pts: Vec<[f64; 3]> = ok
            .iter()
            .flat_map(|a| a.positions.iter().map(|p| [p.x, p.y, p.z]))
            .collect();
        let norm = ChannelNorm::from_points(pts.iter())?.with_mirror_x(mirror_c);
        let written: Vec<std::result::Result<Vec<PathBuf>, Failure>> = pool.install(|| {
            ok.par_iter()
                .map(|a| {
                    write_images(&out, a, &template, &plan, norm, mirror_c, cfg).map_err(|e| Failure {
                        item: a.name.clone(),
                        stage: "rasterize".into(),
                        error: format!("{e:#}"),
                    })
                })
                .collect()
        });
        for w in written {
            match w {
                Ok(f) => files.extend(f),
                Err(f) => manifest.failures.push(f),
            }
        }
    }
    for f in &files {
        manifest.artifacts.push(record(&out, f)?);
    }
    let failed_names: Vec<&str> = manifest.failures.iter().map(|f| f.item.as_str()).collect();
    manifest.summary = serde_json::json!({
        "scans": scans.len(),
        "succeeded": ok.iter().filter(|a| !failed_names.contains(&a.name.as_str())).count(),
        "failed": manifest.failures.len(),
        "image_width": cfg.image_width,
        "final_energy": ok.iter().map(|a| (a.name.clone(), a.final_energy)).collect::<std::collections::BTreeMap<_, _>>(),
        "iterations": ok.iter().map(|a| (a.name.clone(), a.iterations)).collect::<std::collections::BTreeMap<_, _>>(),
    });
    let manifest_sha256 = manifest.write(&out)?;
    log::info!(
        "prepare: {} artifacts, {} failures, manifest {manifest_sha256}",
        manifest.artifacts.len(),
        manifest.failures.len()
    );
    Ok(PrepareOutcome {
        output: out,
        manifest,
        manifest_sha256,
    })
}

// ---------------------------------------------------------------------------
// synth-face

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthFaceOptions {
    pub models: PathBuf,
    pub output: PathBuf,
    /// Generated texture (PNG in the template's uv layout, or colored OBJ);
    /// `None` samples the texture model.
    pub texture: Option<PathBuf>,
    pub method: Method,
    pub expression_model: Option<PathBuf>,
    pub expression_coeffs: Option<PathBuf>,
    /// Apply the expression model with all-zero coefficients.
    pub expression_zero: bool,
    pub random_expression: bool,
    pub seed: u64,
    /// Texture PNG width; 0 uses the bundle's width.
    pub width: usize,
}

/// Per-vertex texture from an image in the template's uv layout or a colored mesh.
pub fn texture_from_file(path: &Path, bundle: &ModelBundle) -> Result<DVector<f64>> {
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => {
            let img = load_texture_png(path)?;
            let colors = sample_back(&img, &bundle.map)?;
            Ok(DVector::from_iterator(colors.len() * 3, colors.into_iter().flatten()))
        }
        Some("obj") => {
            let mesh = load_obj(path)?;
            if mesh.n_vertices() != bundle.template.n_vertices() {
                bail!("{} does not share the template's vertex count", path.display());
            }
            colors_vector(&mesh)
        }
        _ => bail!("texture {} must be .png or .obj", path.display()),
    }
}

pub fn load_coeffs(path: &Path) -> Result<DVector<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Vec<f64> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(DVector::from_vec(v))
}

#[derive(Debug, Clone)]
pub struct SynthFaceOutcome {
    pub texture: DVector<f64>,
    pub geometry: DVector<f64>,
    pub manifest: Manifest,
    pub manifest_sha256: String,
}

/// Texture (given or sampled), geometry from the chosen estimator, optional
/// expression; writes `face.obj`, `face.mtl`, `face.png` and a manifest.
pub fn synth_face(opts: &SynthFaceOptions) -> Result<SynthFaceOutcome> {
    let bundle = ModelBundle::load(&opts.models)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let texture = match &opts.texture {
        Some(p) => texture_from_file(p, &bundle)?,
        None => bundle
            .texture
            .reconstruct(&sample_coefficients(&bundle.texture, &mut rng)?)?,
    };
    let estimator = bundle.estimator(opts.method, opts.seed)?;
    let mut geometry = estimator.estimate(&texture, 0)?;
    if let Some(mp) = &opts.expression_model {
        let model = ExpressionModel::load(mp)?;
        let alpha = if let Some(cp) = &opts.expression_coeffs {
            load_coeffs(cp)?
        } else if opts.random_expression {
            model.sample(&mut rng)?
        } else {
            if !opts.expression_zero {
                log::info!("synth-face: no expression coefficients given, using zeros");
            }
            DVector::zeros(model.k())
        };
        geometry = apply_expression(&geometry, &alpha, &model)?;
    }

    fs::create_dir_all(&opts.output).with_context(|| format!("creating {}", opts.output.display()))?;
    let colors = clamp_colors(&vector_triples(&texture));
    let mesh = bundle
        .template
        .with_positions(vector_points(&geometry))?
        .with_colors(colors.clone())?;
    save_obj_with(
        &mesh,
        opts.output.join("face.obj"),
        ObjExtras {
            uv: Some(bundle.map.uv()),
            mtllib: Some("face.mtl"),
        },
    )?;
    fs::write(opts.output.join("face.mtl"), "newmtl face\nKd 1 1 1\nmap_Kd face.png\n")?;
    let width = if opts.width > 0 { opts.width } else { bundle.image_width };
    let plan = RasterPlan::new(&bundle.template, &bundle.map, width)?;
    save_texture_png(
        &plan.rasterize(&colors, ImageKind::Texture, None)?,
        opts.output.join("face.png"),
        8,
    )?;

    // paths are left out; the files they name are hashed as inputs
    let opts_json = serde_json::to_string(&SynthFaceOptions {
        models: PathBuf::new(),
        output: PathBuf::new(),
        texture: opts.texture.as_ref().map(|_| PathBuf::new()),
        expression_model: opts.expression_model.as_ref().map(|_| PathBuf::new()),
        expression_coeffs: opts.expression_coeffs.as_ref().map(|_| PathBuf::new()),
        ..opts.clone()
    })?;
    let mut manifest = Manifest::new(
        "synth-face",
        opts.seed,
        crate::manifest::sha256_hex(opts_json.as_bytes()),
    );
    for name in [
        crate::bundle::TEMPLATE,
        crate::bundle::MAP,
        crate::bundle::TEXTURE_MODEL,
        crate::bundle::GEOMETRY_MODEL,
        crate::bundle::JOINT_MODEL,
        crate::bundle::ESTIMATORS,
    ] {
        let mut r = record(&opts.models, Path::new(name))?;
        r.path = format!("models/{}", r.path);
        manifest.inputs.push(r);
    }
    for p in [&opts.texture, &opts.expression_model, &opts.expression_coeffs]
        .into_iter()
        .flatten()
    {
        manifest.inputs.push(record_input(p)?);
    }
    for name in ["face.obj", "face.mtl", "face.png"] {
        manifest.artifacts.push(record(&opts.output, Path::new(name))?);
    }
    manifest.summary = serde_json::json!({
        "method": opts.method,
        "texture_source": if opts.texture.is_some() { "file" } else { "sampled" },
        "width": width,
    });
    let manifest_sha256 = manifest.write(&opts.output)?;
    Ok(SynthFaceOutcome {
        texture,
        geometry,
        manifest,
        manifest_sha256,
    })
}

// ---------------------------------------------------------------------------
// synth-population

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationOptions {
    pub n: usize,
    pub grid: usize,
    pub noise: f64,
    pub texture_noise: f64,
    pub seed: u64,
}

/// Write `template.obj`, `scans/` (with expressions) and `neutral/` meshes,
/// each with landmark sidecars.
pub fn synth_population(opts: &PopulationOptions, out: &Path) -> Result<Manifest> {
    let mut spec = SyntheticFaceSpec::desk_scale(opts.noise);
    spec.grid = opts.grid;
    spec.texture_noise = opts.texture_noise;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let faces = make_synthetic_population(&spec, opts.n, &mut rng)?;
    let template = facegeom_core::testkit::synthetic_template(opts.grid);
    for d in ["scans", "neutral"] {
        fs::create_dir_all(out.join(d))?;
    }
    let mut files = vec![PathBuf::from("template.obj"), PathBuf::from("template.landmarks.json")];
    save_obj(&template, out.join("template.obj"))?;
    save_landmarks(
        template.landmarks().expect("template landmarks"),
        out.join("template.landmarks.json"),
    )?;
    for (i, f) in faces.iter().enumerate() {
        for (dir, mesh) in [("scans", &f.scan), ("neutral", &f.neutral)] {
            let obj = PathBuf::from(dir).join(format!("face_{i:04}.obj"));
            let lm = PathBuf::from(dir).join(format!("face_{i:04}.landmarks.json"));
            save_obj(mesh, out.join(&obj))?;
            save_landmarks(mesh.landmarks().expect("population landmarks"), out.join(&lm))?;
            files.extend([obj, lm]);
        }
    }
    let mut manifest = Manifest::new(
        "synth-population",
        opts.seed,
        crate::manifest::sha256_hex(serde_json::to_string(opts)?.as_bytes()),
    );
    for f in &files {
        manifest.artifacts.push(record(out, f)?);
    }
    manifest.summary = serde_json::to_value(opts)?;
    manifest.write(out)?;
    Ok(manifest)
}
