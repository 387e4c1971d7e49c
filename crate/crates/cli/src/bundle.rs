//! A directory of trained models: template, parametrization, PCA models and
//! the fitted estimator parameters.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use facegeom_core::geo_fit::{train_estimators, Estimator, LsParams, MlParams, NnParams};
use facegeom_core::mesh::{load_obj_with_landmarks, save_landmarks, save_obj};
use facegeom_core::morphable::{JointModel, LinearModel};
use facegeom_core::parametrize::ParamMap;
use facegeom_core::Mesh;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const TEMPLATE: &str = "template.obj";
pub const MAP: &str = "map.uv.json";
pub const TEXTURE_MODEL: &str = "texture.fgm";
pub const GEOMETRY_MODEL: &str = "geometry.fgm";
pub const JOINT_MODEL: &str = "joint.fgm";
pub const ESTIMATORS: &str = "estimators.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Random,
    Nn,
    Ml,
    Ls,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Random, Method::Nn, Method::Ml, Method::Ls];
}

/// Column-major dense matrix for JSON storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }
}

impl MatrixJson {
    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            bail!(
                "matrix data has {} entries for {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            );
        }
        Ok(DMatrix::from_column_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EstimatorFile {
    seed: u64,
    image_width: usize,
    ls_w: MatrixJson,
    nn_texture_coeffs: MatrixJson,
    nn_geometry_coeffs: MatrixJson,
    ml_sigma_beta: MatrixJson,
    ml_noise_diag: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub template: Mesh,
    pub map: ParamMap,
    pub texture: LinearModel,
    pub geometry: LinearModel,
    pub joint: JointModel,
    pub ls_w: DMatrix<f64>,
    pub nn_texture_coeffs: DMatrix<f64>,
    pub nn_geometry_coeffs: DMatrix<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub noise_diag: DVector<f64>,
    pub seed: u64,
    pub image_width: usize,
}

/// Largest usable component count: `k` capped by `n - 1` and the dimension.
pub fn clamp_k(k: usize, n: usize, dim: usize) -> usize {
    let cap = n.saturating_sub(1).min(dim);
    if k > cap {
        log::warn!("k = {k} exceeds the {cap} components {n} samples support; using {cap}");
    }
    k.min(cap)
}

impl ModelBundle {
    /// Train every model on paired `3m x n` geometry and texture matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        template: Mesh,
        map: ParamMap,
        g: &DMatrix<f64>,
        t: &DMatrix<f64>,
        k_texture: usize,
        k_geometry: usize,
        k_joint: usize,
        seed: u64,
        image_width: usize,
    ) -> Result<Self> {
        let n = g.ncols();
        let k_t = clamp_k(k_texture, n, t.nrows());
        let k_g = clamp_k(k_geometry, n, g.nrows());
        let k_j = clamp_k(k_joint, n, g.nrows() + t.nrows());
        let est = train_estimators(g, t, k_t, k_g, k_j, seed)?;
        let (Estimator::Nearest(nn), Estimator::Ml(ml), Estimator::Ls(ls)) = (est.nearest, est.ml, est.ls) else {
            unreachable!("train_estimators returns variants in field order")
        };
        Ok(Self {
            template,
            map,
            texture: ls.texture_model,
            geometry: ls.geometry_model,
            joint: ml.joint,
            ls_w: ls.w,
            nn_texture_coeffs: nn.tex_coeffs,
            nn_geometry_coeffs: nn.geom_coeffs,
            sigma_beta: ml.sigma_beta,
            noise_diag: ml.sigma_noise_diag,
            seed,
            image_width,
        })
    }

    pub fn estimator(&self, method: Method, seed: u64) -> Result<Estimator> {
        Ok(match method {
            Method::Random => Estimator::Random {
                model: self.geometry.clone(),
                seed,
            },
            Method::Nn => Estimator::Nearest(NnParams {
                texture_model: self.texture.clone(),
                geometry_model: self.geometry.clone(),
                tex_coeffs: self.nn_texture_coeffs.clone(),
                geom_coeffs: self.nn_geometry_coeffs.clone(),
            }),
            Method::Ml => Estimator::Ml(MlParams {
                joint: self.joint.clone(),
                sigma_beta: self.sigma_beta.clone(),
                sigma_noise_diag: self.noise_diag.clone(),
            }),
            Method::Ls => Estimator::Ls(LsParams::new(
                self.ls_w.clone(),
                self.texture.clone(),
                self.geometry.clone(),
            )?),
        })
    }

    /// Write the bundle files into `dir`; returns their names.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        save_obj(&self.template, dir.join(TEMPLATE))?;
        let mut names = vec![PathBuf::from(TEMPLATE)];
        if let Some(lm) = self.template.landmarks() {
            save_landmarks(lm, dir.join("template.landmarks.json"))?;
            names.push("template.landmarks.json".into());
        }
        self.map.save_json(dir.join(MAP))?;
        self.texture.save(dir.join(TEXTURE_MODEL))?;
        self.geometry.save(dir.join(GEOMETRY_MODEL))?;
        self.joint.to_linear().save(dir.join(JOINT_MODEL))?;
        let file = EstimatorFile {
            seed: self.seed,
            image_width: self.image_width,
            ls_w: (&self.ls_w).into(),
            nn_texture_coeffs: (&self.nn_texture_coeffs).into(),
            nn_geometry_coeffs: (&self.nn_geometry_coeffs).into(),
            ml_sigma_beta: (&self.sigma_beta).into(),
            ml_noise_diag: self.noise_diag.iter().copied().collect(),
        };
        fs::write(dir.join(ESTIMATORS), serde_json::to_string(&file)?)?;
        names.extend([MAP, TEXTURE_MODEL, GEOMETRY_MODEL, JOINT_MODEL, ESTIMATORS].map(PathBuf::from));
        Ok(names)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        for name in [TEMPLATE, MAP, TEXTURE_MODEL, GEOMETRY_MODEL, JOINT_MODEL, ESTIMATORS] {
            if !dir.join(name).exists() {
                bail!("model directory {} lacks {name}", dir.display());
            }
        }
        let template = load_obj_with_landmarks(dir.join(TEMPLATE))?;
        let map = ParamMap::load_json(dir.join(MAP), &template)?;
        let texture = LinearModel::load(dir.join(TEXTURE_MODEL))?;
        let geometry = LinearModel::load(dir.join(GEOMETRY_MODEL))?;
        let joint = JointModel::from_linear(&LinearModel::load(dir.join(JOINT_MODEL))?, geometry.dim())?;
        let text = fs::read_to_string(dir.join(ESTIMATORS))?;
        let f: EstimatorFile = serde_json::from_str(&text).context("parsing estimators.json")?;
        if geometry.dim() != 3 * template.n_vertices() || texture.dim() != geometry.dim() {
            bail!("model dimensions do not match the template");
        }
        Ok(Self {
            template,
            map,
            texture,
            geometry,
            joint,
            ls_w: f.ls_w.to_matrix()?,
            nn_texture_coeffs: f.nn_texture_coeffs.to_matrix()?,
            nn_geometry_coeffs: f.nn_geometry_coeffs.to_matrix()?,
            sigma_beta: f.ml_sigma_beta.to_matrix()?,
            noise_diag: DVector::from_vec(f.ml_noise_diag),
            seed: f.seed,
            image_width: f.image_width,
        })
    }
}
