//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use facegeom_core::align::{register, register_pairs};
use facegeom_core::eval_metrics::{histogram, nn_distances, read_descriptor_csv, swd_report};
use facegeom_core::expression::{apply_expression, build_expression_basis, ExpressionModel};
use facegeom_core::geo_fit::evaluate_fit;
use facegeom_core::geom_image::{
    augment_geometry, augment_texture, save_gim, save_texture_png, ChannelNorm, ImageKind, PlanarImage, RasterPlan,
};
use facegeom_core::masked_batch::{
    assemble_batch, export_batch, load_mask_png, load_rgb_png, save_mask_png, save_rgb_png, synth_shapes_dataset,
    ShapesConfig,
};
use facegeom_core::mesh::{load_obj, load_obj_with_landmarks, save_landmarks, save_obj};
use facegeom_core::morphable::{build_basis, build_joint_basis};
use facegeom_core::parametrize::{
    boundary_embedding, design_weights, symmetrize, uniform_weights, weighted_embed, WeightNormalization,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bundle::{Method, ModelBundle};
use crate::config::PipelineConfig;
use crate::manifest::{record, Manifest};
use crate::pipeline::{
    self, colors_vector, file_stem, load_coeffs, load_pairs, obj_files, positions_vector, texture_from_file,
    vector_points, PopulationOptions, SynthFaceOptions,
};
use crate::{Cli, Command, EvalMethod, ModelKind, RasterKind, UsageError};

/// Configuration from `--config` (or defaults) with `--seed` applied.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Align(a) => align(&cfg, a),
        Command::Parametrize(a) => parametrize(&cfg, a),
        Command::Rasterize(a) => rasterize(a),
        Command::BuildModel(a) => build_model(&cfg, a),
        Command::FitGeometry(a) => fit_geometry(&cfg, a),
        Command::EvalFit(a) => eval_fit(&cfg, a),
        Command::Expression(a) => expression(a),
        Command::PrepMasked(a) => prep_masked(a),
        Command::SynthShapes(a) => synth_shapes(&cfg, a),
        Command::EvalSwd(a) => eval_swd(&cfg, a),
        Command::EvalNn(a) => eval_nn(a),
        Command::Prepare(a) => {
            let mut cfg = cfg;
            cfg.template = a.template.clone().or(cfg.template);
            cfg.scans = a.scans.clone().or(cfg.scans);
            cfg.output = a.out.clone().or(cfg.output);
            if let Some(w) = a.width {
                cfg.image_width = w;
            }
            if a.no_augment {
                cfg.augment = false;
            }
            let outcome = pipeline::prepare(&cfg)?;
            println!("{}", outcome.manifest_sha256);
            Ok(())
        }
        Command::SynthFace(a) => {
            let outcome = pipeline::synth_face(&SynthFaceOptions {
                models: a.models.clone(),
                output: a.out.clone(),
                texture: a.texture.clone(),
                method: a.method,
                expression_model: a.expression_model.clone(),
                expression_coeffs: a.expression_coeffs.clone(),
                expression_zero: a.expression_zero,
                random_expression: a.random_expression,
                seed: cfg.seed,
                width: a.width,
            })?;
            println!("{}", outcome.manifest_sha256);
            Ok(())
        }
        Command::SynthPopulation(a) => {
            let m = pipeline::synth_population(
                &PopulationOptions {
                    n: a.n,
                    grid: a.grid,
                    noise: a.noise,
                    texture_noise: a.texture_noise,
                    seed: cfg.seed,
                },
                &a.out,
            )?;
            log::info!("synth-population: {} files in {}", m.artifacts.len(), a.out.display());
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn align(cfg: &PipelineConfig, a: &crate::AlignArgs) -> Result<()> {
    cfg.align.validate().map_err(|e| UsageError(e.to_string()))?;
    let template = load_obj_with_landmarks(&a.template)?;
    let scan = load_obj_with_landmarks(&a.scan)?;
    let reg = match &a.landmarks {
        Some(p) => register_pairs(&template, &scan, &load_pairs(p)?, &cfg.align)?,
        None => register(&template, &scan, &cfg.align)?,
    };
    save_obj(&reg.fit.mesh, &a.out)?;
    log::info!(
        "align: {} iterations, energy {:.6e} -> {:.6e} ({:?})",
        reg.fit.iterations,
        reg.fit.energies.first().copied().unwrap_or(f64::NAN),
        reg.fit.energies.last().copied().unwrap_or(f64::NAN),
        reg.fit.status
    );
    if let Some(p) = &a.report {
        write_json(
            p,
            &serde_json::json!({
                "transform": reg.rigid.transform.to_matrix(),
                "rigid_residual_sum_sq": reg.rigid.residual_sum_sq,
                "rigid_residual_relative": reg.rigid.residual_relative,
                "energies": reg.fit.energies,
                "initial_terms": [reg.fit.initial_terms.landmark, reg.fit.initial_terms.surface, reg.fit.initial_terms.smooth],
                "final_terms": [reg.fit.final_terms.landmark, reg.fit.final_terms.surface, reg.fit.final_terms.smooth],
                "iterations": reg.fit.iterations,
                "status": format!("{:?}", reg.fit.status),
            }),
        )?;
    }
    Ok(())
}

fn parametrize(cfg: &PipelineConfig, a: &crate::ParametrizeArgs) -> Result<()> {
    let mesh = load_obj(&a.mesh)?;
    let ring = mesh.boundary_loop(a.anchor.or(cfg.anchor))?;
    let boundary = boundary_embedding(&ring, mesh.vertices())?;
    let uniform = weighted_embed(&mesh, &uniform_weights(&mesh), &boundary)?;
    let mut map = match &a.vertex_weights {
        Some(p) => {
            let vw: Vec<f64> =
                serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?;
            let w = design_weights(&mesh, &vw, &uniform, WeightNormalization::default())?;
            weighted_embed(&mesh, &w, &boundary)?
        }
        None => uniform,
    };
    if let Some(p) = a.symmetry.as_ref().or(cfg.symmetry.as_ref()) {
        map = symmetrize(&mesh, &map, &load_pairs(p)?)?;
    }
    let flipped = map.flipped_count(&mesh);
    if flipped > 0 {
        log::warn!("parametrize: {flipped} flipped triangles");
    }
    map.save_json(&a.out)?;
    log::info!("parametrize: {} vertices -> {}", mesh.n_vertices(), a.out.display());
    Ok(())
}

fn variant_path(out: &Path, i: usize) -> PathBuf {
    let stem = file_stem(out);
    let ext = out
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_{i}.{ext}"))
}

fn rasterize(a: &crate::RasterizeArgs) -> Result<()> {
    let mesh = load_obj(&a.mesh)?;
    let map = facegeom_core::parametrize::ParamMap::load_json(&a.map, &mesh)?;
    let plan = RasterPlan::new(&mesh, &map, a.width)?;
    match a.kind {
        RasterKind::Texture => {
            let colors = mesh.colors().context("mesh has no vertex colors")?;
            let img = plan.rasterize(colors, ImageKind::Texture, None)?;
            save_texture_png(&img, &a.out, a.bit_depth)?;
            if a.augment {
                for (i, v) in augment_texture(&img).iter().enumerate() {
                    save_texture_png(v, variant_path(&a.out, i), a.bit_depth)?;
                }
            }
        }
        RasterKind::Geometry => {
            let attr: Vec<[f64; 3]> = mesh.vertices().iter().map(|p| [p.x, p.y, p.z]).collect();
            let (lo, hi) = mesh.bounding_box();
            let c = a.mirror_c.unwrap_or(lo.x + hi.x);
            let norm = ChannelNorm::from_points(attr.iter())?.with_mirror_x(c);
            let img = plan.rasterize(&attr, ImageKind::Geometry, Some(norm))?;
            save_gim(&img, &a.out)?;
            if a.augment {
                for (i, v) in augment_geometry(&img, c)?.iter().enumerate() {
                    save_gim(v, variant_path(&a.out, i))?;
                }
            }
        }
    }
    log::info!("rasterize: {}x{} -> {}", a.width, a.width, a.out.display());
    Ok(())
}

/// Geometry and texture matrices (`3m x n`) of the colored meshes in a directory.
pub fn load_mesh_matrices(dir: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<String>)> {
    let files = obj_files(dir)?;
    if files.is_empty() {
        bail!("no OBJ files in {}", dir.display());
    }
    let meshes: Vec<_> = files.par_iter().map(load_obj).collect::<Result<Vec<_>, _>>()?;
    let topo = meshes[0].topology_hash();
    if let Some(i) = meshes.iter().position(|m| m.topology_hash() != topo) {
        bail!(
            "{} has a different connectivity than {}",
            files[i].display(),
            files[0].display()
        );
    }
    let g: Vec<DVector<f64>> = meshes.iter().map(positions_vector).collect();
    let t: Vec<DVector<f64>> = meshes.iter().map(colors_vector).collect::<Result<_>>()?;
    Ok((
        DMatrix::from_columns(&g),
        DMatrix::from_columns(&t),
        files.iter().map(|f| file_stem(f)).collect(),
    ))
}

fn build_model(cfg: &PipelineConfig, a: &crate::BuildModelArgs) -> Result<()> {
    match a.kind {
        ModelKind::Texture | ModelKind::Geometry | ModelKind::Joint => {
            let (g, t, _) = load_mesh_matrices(&a.data)?;
            let n = g.ncols();
            let model = match a.kind {
                ModelKind::Texture => {
                    build_basis(&t, crate::bundle::clamp_k(a.k.unwrap_or(cfg.k_texture), n, t.nrows()))?
                }
                ModelKind::Geometry => {
                    build_basis(&g, crate::bundle::clamp_k(a.k.unwrap_or(cfg.k_geometry), n, g.nrows()))?
                }
                _ => build_joint_basis(
                    &g,
                    &t,
                    crate::bundle::clamp_k(a.k.unwrap_or(cfg.k_joint), n, 2 * g.nrows()),
                )?
                .to_linear(),
            };
            model.save(&a.out)?;
            log::info!("build-model: k = {} from {n} samples -> {}", model.k(), a.out.display());
        }
        ModelKind::Expression => {
            let neutral = obj_files(&a.data.join("neutral"))?;
            let mut pairs = Vec::with_capacity(neutral.len());
            for n in &neutral {
                let e = a.data.join("scans").join(n.file_name().expect("file"));
                if !e.exists() {
                    bail!("no expression mesh {} for {}", e.display(), n.display());
                }
                pairs.push((positions_vector(&load_obj(&e)?), positions_vector(&load_obj(n)?)));
            }
            let k = crate::bundle::clamp_k(
                a.k.unwrap_or(cfg.k_expression),
                pairs.len(),
                pairs.first().map_or(0, |p| p.0.len()),
            );
            let model = build_expression_basis(&pairs, k)?;
            model.save(&a.out)?;
            log::info!("build-model: expression k = {} from {} pairs", model.k(), pairs.len());
        }
        ModelKind::Bundle => {
            let tpath = a
                .template
                .as_ref()
                .or(cfg.template.as_ref())
                .ok_or_else(|| UsageError("bundle needs --template".into()))?;
            let template = load_obj_with_landmarks(tpath)?;
            let (g, t, _) = load_mesh_matrices(&a.data)?;
            if g.nrows() != 3 * template.n_vertices() {
                bail!("training meshes do not share the template's vertex count");
            }
            let map = pipeline::parametrize_template(&template, cfg)?;
            let k = |v: usize| a.k.unwrap_or(v);
            let bundle = ModelBundle::train(
                template,
                map,
                &g,
                &t,
                k(cfg.k_texture),
                k(cfg.k_geometry),
                k(cfg.k_joint),
                cfg.seed,
                cfg.image_width,
            )?;
            let names = bundle.save(&a.out)?;
            let mut manifest = Manifest::new("build-model", cfg.seed, cfg.content_hash());
            for n in &names {
                manifest.artifacts.push(record(&a.out, n)?);
            }
            manifest.summary = serde_json::json!({
                "n_train": g.ncols(),
                "k_texture": bundle.texture.k(),
                "k_geometry": bundle.geometry.k(),
                "k_joint": bundle.joint.k(),
            });
            manifest.write(&a.out)?;
            log::info!("build-model: bundle from {} samples -> {}", g.ncols(), a.out.display());
        }
    }
    Ok(())
}

fn fit_geometry(cfg: &PipelineConfig, a: &crate::FitGeometryArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.models)?;
    let texture = texture_from_file(&a.texture, &bundle)?;
    let g = bundle.estimator(a.method, cfg.seed)?.estimate(&texture, 0)?;
    let colors: Vec<[f64; 3]> = texture
        .as_slice()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]].map(|x| x.clamp(0.0, 1.0)))
        .collect();
    let mesh = bundle.template.with_positions(vector_points(&g))?.with_colors(colors)?;
    save_obj(&mesh, &a.out)?;
    log::info!("fit-geometry: {:?} -> {}", a.method, a.out.display());
    Ok(())
}

fn eval_fit(cfg: &PipelineConfig, a: &crate::EvalFitArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.models)?;
    let (g, t, _) = load_mesh_matrices(&a.test)?;
    let methods: Vec<Method> = match a.method {
        EvalMethod::All => Method::ALL.to_vec(),
        EvalMethod::Random => vec![Method::Random],
        EvalMethod::Nn => vec![Method::Nn],
        EvalMethod::Ml => vec![Method::Ml],
        EvalMethod::Ls => vec![Method::Ls],
    };
    let mut csv = String::new();
    for (i, m) in methods.iter().enumerate() {
        let report = evaluate_fit(&bundle.estimator(*m, cfg.seed)?, &t, &g)?;
        log::info!("eval-fit: {} mean {:.6e}", report.method, report.mean);
        let text = report.to_csv();
        csv.push_str(if i == 0 {
            &text
        } else {
            text.split_once('\n').map_or("", |(_, rest)| rest)
        });
    }
    match &a.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn expression(a: &crate::ExpressionArgs) -> Result<()> {
    let neutral = load_obj_with_landmarks(&a.neutral)?;
    let model = ExpressionModel::load(&a.model)?;
    let alpha = match &a.coeffs {
        Some(p) => load_coeffs(p)?,
        None => DVector::zeros(model.k()),
    };
    let g = apply_expression(&positions_vector(&neutral), &alpha, &model)?;
    let out = neutral.with_positions(vector_points(&g))?;
    save_obj(&out, &a.out)?;
    if let Some(lm) = out.landmarks() {
        save_landmarks(lm, facegeom_core::mesh::landmarks_sidecar_path(&a.out))?;
    }
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn prep_masked(a: &crate::PrepMaskedArgs) -> Result<()> {
    if a.batch_size == 0 {
        return Err(UsageError("batch size must be positive".into()).into());
    }
    let images = png_files(&a.images)?;
    if images.is_empty() {
        bail!("no PNG images in {}", a.images.display());
    }
    if a.fake.is_none() {
        log::warn!("prep-masked: no fake images given, the fake tensor repeats the real images");
    }
    fs::create_dir_all(&a.out)?;
    let mut manifest = Manifest::new("prep-masked", 0, String::new());
    for (b, chunk) in images.chunks(a.batch_size).enumerate() {
        let mut real = Vec::with_capacity(chunk.len());
        let mut fake = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for p in chunk {
            let name = p.file_name().expect("file name");
            real.push(load_rgb_png(p)?);
            masks.push(load_mask_png(a.masks.join(name))?);
            fake.push(match &a.fake {
                Some(d) => load_rgb_png(d.join(name))?,
                None => real.last().expect("pushed").clone(),
            });
        }
        let batch = assemble_batch(&real, &fake, &masks)?;
        let name = format!("batch_{b:05}");
        let m = export_batch(&batch, &a.out, &name)?;
        for f in [m.real, m.fake, format!("{name}.json")] {
            manifest.artifacts.push(record(&a.out, Path::new(&f))?);
        }
    }
    manifest.summary = serde_json::json!({ "images": images.len(), "batch_size": a.batch_size });
    manifest.write(&a.out)?;
    log::info!("prep-masked: {} images -> {}", images.len(), a.out.display());
    Ok(())
}

fn synth_shapes(cfg: &PipelineConfig, a: &crate::SynthShapesArgs) -> Result<()> {
    let shapes = if a.full {
        ShapesConfig {
            seed: cfg.seed,
            ..ShapesConfig::default()
        }
    } else {
        ShapesConfig {
            count: a.n,
            size: a.size,
            seed: cfg.seed,
            ..ShapesConfig::default()
        }
    };
    if shapes.size == 0 {
        return Err(UsageError("size must be positive".into()).into());
    }
    for d in ["images", "masks"] {
        fs::create_dir_all(a.out.join(d))?;
    }
    let data = synth_shapes_dataset(&shapes);
    let names: Vec<String> = (0..data.len()).map(|i| format!("{i:05}.png")).collect();
    data.par_iter().zip(&names).try_for_each(|(s, n)| -> Result<()> {
        save_rgb_png(&s.image, a.out.join("images").join(n))?;
        save_mask_png(&s.mask, a.out.join("masks").join(n))?;
        Ok(())
    })?;
    let mut manifest = Manifest::new(
        "synth-shapes",
        cfg.seed,
        crate::manifest::sha256_hex(serde_json::to_string(&shapes)?.as_bytes()),
    );
    for n in &names {
        for d in ["images", "masks"] {
            manifest.artifacts.push(record(&a.out, &Path::new(d).join(n))?);
        }
    }
    manifest.summary = serde_json::json!({
        "config": shapes,
        "red_circles": data.iter().map(|s| s.red_circles).collect::<Vec<_>>(),
    });
    manifest.write(&a.out)?;
    log::info!(
        "synth-shapes: {} images of {} px -> {}",
        data.len(),
        shapes.size,
        a.out.display()
    );
    Ok(())
}

fn load_image_set(dir: &Path) -> Result<Vec<PlanarImage>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        bail!("no PNG images in {}", dir.display());
    }
    files.par_iter().map(|p| Ok(load_rgb_png(p)?)).collect()
}

fn eval_swd(cfg: &PipelineConfig, a: &crate::EvalSwdArgs) -> Result<()> {
    let sa = load_image_set(&a.set_a)?;
    let sb = load_image_set(&a.set_b)?;
    let report = swd_report(&sa, &sb, a.levels, cfg.seed)?;
    for l in &report.levels {
        log::info!(
            "eval-swd: level {} ({} px): {:.3} x1e-3",
            l.level,
            l.resolution,
            l.swd_x1e3
        );
    }
    log::info!("eval-swd: average {:.3} x1e-3", report.average * 1e3);
    match &a.json {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn eval_nn(a: &crate::EvalNnArgs) -> Result<()> {
    let q = read_descriptor_csv(&a.query)?;
    let r = read_descriptor_csv(&a.reference)?;
    let d = nn_distances(&q, &r)?;
    let hist = histogram(&d, a.bins)?;
    let value = serde_json::json!({
        "distances": q.iter().zip(&d).map(|(x, d)| serde_json::json!({"id": x.id, "distance": d})).collect::<Vec<_>>(),
        "histogram": hist,
    });
    match &a.json {
        Some(p) => write_json(p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}
