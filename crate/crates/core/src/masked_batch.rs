//! Valid masks for corrupted training images: masks zero out the corrupted
//! pixels and ride along as a fourth channel on both real and generated
//! batches, so the mask itself carries no real-vs-fake signal.
//!
//! Images here are [`PlanarImage`]s with row 0 at the top.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom_image::PlanarImage;

/// Binary per-pixel mask, row-major; 0 marks corrupted pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ValidMask {
    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} mask values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn zero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }
}

/// A corrupted region in pixel units; pixel `(r, c)` is tested at its
/// center `(c + 0.5, r + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Region {
    /// `x0 <= x <= x1`, `y0 <= y <= y1`.
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
}

impl Region {
    pub fn circle(cx: f64, cy: f64, r: f64) -> Self {
        Region::Ellipse { cx, cy, rx: r, ry: r }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Region::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Region::Rect { x0, y0, x1, y1 } => [x0, y0, x1, y1].iter().all(|v| v.is_finite()) && x1 >= x0 && y1 >= y0,
            Region::Ellipse { cx, cy, rx, ry } => {
                [cx, cy, rx, ry].iter().all(|v| v.is_finite()) && rx > 0.0 && ry > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid region {self:?}")))
        }
    }
}

/// 0 inside any region, 1 elsewhere.
pub fn mask_from_regions(width: usize, height: usize, regions: &[Region]) -> Result<ValidMask> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("mask dimensions must be positive".into()));
    }
    for r in regions {
        r.validate()?;
    }
    let mut data = vec![1u8; width * height];
    for r in 0..height {
        for c in 0..width {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            if regions.iter().any(|g| g.contains(x, y)) {
                data[r * width + c] = 0;
            }
        }
    }
    Ok(ValidMask { width, height, data })
}

/// Real and fake batches in NCHW layout with 4 channels (RGB * mask, mask).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub real: Vec<f32>,
    pub fake: Vec<f32>,
    pub masks: Vec<ValidMask>,
}

impl MaskedBatch {
    pub fn sample_len(&self) -> usize {
        4 * self.height * self.width
    }

    /// Channel `ch` of sample `i` in the real (or fake) tensor.
    pub fn channel(&self, fake: bool, i: usize, ch: usize) -> &[f32] {
        let plane = self.height * self.width;
        let start = i * self.sample_len() + ch * plane;
        let t = if fake { &self.fake } else { &self.real };
        &t[start..start + plane]
    }
}

fn masked_tensor(images: &[PlanarImage], masks: &[ValidMask]) -> Vec<f32> {
    let mut out = Vec::with_capacity(images.len() * 4 * masks.first().map_or(0, |m| m.data.len()));
    for (img, m) in images.iter().zip(masks) {
        for ch in 0..3 {
            out.extend(
                img.plane(ch)
                    .iter()
                    .zip(&m.data)
                    .map(|(&v, &k)| if k == 1 { v } else { 0.0 }),
            );
        }
        out.extend(m.data.iter().map(|&k| k as f32));
    }
    out
}

/// Multiply every image by its mask and append the mask as channel 3.
/// Fake image `i` gets the mask of real image `i`.
pub fn assemble_batch(
    real_images: &[PlanarImage],
    fake_images: &[PlanarImage],
    masks: &[ValidMask],
) -> Result<MaskedBatch> {
    let b = real_images.len();
    if fake_images.len() != b || masks.len() != b {
        return Err(Error::Dimension(format!(
            "{b} real images, {} fake images, {} masks",
            fake_images.len(),
            masks.len()
        )));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (w, h) = (real_images[0].width, real_images[0].height);
    for (i, ((r, f), m)) in real_images.iter().zip(fake_images).zip(masks).enumerate() {
        for img in [r, f] {
            if img.width != w || img.height != h || img.channels != 3 {
                return Err(Error::Dimension(format!(
                    "sample {i}: image is {}x{}x{}, expected {w}x{h}x3",
                    img.width, img.height, img.channels
                )));
            }
        }
        if m.width != w || m.height != h || m.data.len() != w * h {
            return Err(Error::Dimension(format!(
                "sample {i}: mask is {}x{}, expected {w}x{h}",
                m.width, m.height
            )));
        }
        if m.data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!("sample {i}: mask is not binary")));
        }
    }
    Ok(MaskedBatch {
        batch: b,
        height: h,
        width: w,
        real: masked_tensor(real_images, masks),
        fake: masked_tensor(fake_images, masks),
        masks: masks.to_vec(),
    })
}

/// Manifest written next to an exported batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub layout: String,
    pub byte_order: String,
    pub real: String,
    pub fake: String,
    pub real_sha256: String,
    pub fake_sha256: String,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Write `<name>.real.f32`, `<name>.fake.f32` and `<name>.json` into `dir`.
pub fn export_batch(batch: &MaskedBatch, dir: impl AsRef<Path>, name: &str) -> Result<BatchManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let real_name = format!("{name}.real.f32");
    let fake_name = format!("{name}.fake.f32");
    let real = f32_bytes(&batch.real);
    let fake = f32_bytes(&batch.fake);
    for (file, bytes) in [(&real_name, &real), (&fake_name, &fake)] {
        let p = dir.join(file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = BatchManifest {
        batch: batch.batch,
        channels: 4,
        height: batch.height,
        width: batch.width,
        dtype: "float32".into(),
        layout: "NCHW".into(),
        byte_order: "little".into(),
        real: real_name,
        fake: fake_name,
        real_sha256: hex::encode(Sha256::digest(&real)),
        fake_sha256: hex::encode(Sha256::digest(&fake)),
    };
    let p = dir.join(format!("{name}.json"));
    fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Synthetic colored shapes

pub const RED: [f32; 3] = [1.0, 0.0, 0.0];

/// Non-red fill colors.
pub const PALETTE: [[f32; 3]; 7] = [
    [0.10, 0.70, 0.20],
    [0.15, 0.35, 0.90],
    [0.95, 0.85, 0.10],
    [0.10, 0.80, 0.80],
    [0.55, 0.30, 0.85],
    [0.90, 0.90, 0.90],
    [0.45, 0.45, 0.45],
];

pub const BACKGROUND: [f32; 3] = [0.2, 0.2, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub count: usize,
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Radius (circles, triangles) or half-width (rectangles) range, pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_red_circles: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    /// 10,000 images of 256 x 256.
    fn default() -> Self {
        Self {
            count: 10_000,
            size: 256,
            min_shapes: 3,
            max_shapes: 7,
            min_radius: 10.0,
            max_radius: 40.0,
            max_red_circles: 2,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    /// 1,000 images, otherwise the default configuration.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            count: 1000,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Triangle { p: [[f64; 2]; 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Shape::Triangle { p } => {
                let e = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let (e0, e1, e2) = (e(p[0], p[1]), e(p[1], p[2]), e(p[2], p[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

/// One generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSample {
    pub image: PlanarImage,
    pub mask: ValidMask,
    pub red_circles: usize,
}

fn paint(img: &mut PlanarImage, shape: &Shape, color: [f32; 3]) {
    for r in 0..img.height {
        for c in 0..img.width {
            if shape.contains(c as f64 + 0.5, r as f64 + 0.5) {
                for (ch, &v) in color.iter().enumerate() {
                    img.set(ch, r, c, v);
                }
            }
        }
    }
}

/// Sample `index` of the dataset, seeded with `seed + index`.
pub fn synth_shapes_sample(config: &ShapesConfig, index: usize) -> ShapesSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
    let s = config.size;
    let sf = s as f64;
    let mut img = PlanarImage::zeros(s, s, 3);
    for (ch, &v) in BACKGROUND.iter().enumerate() {
        img.plane_mut(ch).fill(v);
    }
    let n_shapes = rng.random_range(config.min_shapes..=config.max_shapes.max(config.min_shapes));
    let radius = |rng: &mut ChaCha8Rng| rng.random_range(config.min_radius..=config.max_radius);
    for _ in 0..n_shapes {
        let (cx, cy) = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
        let shape = match rng.random_range(0..3) {
            0 => Shape::Circle {
                cx,
                cy,
                r: radius(&mut rng),
            },
            1 => Shape::Rect {
                cx,
                cy,
                hw: radius(&mut rng),
                hh: radius(&mut rng),
            },
            _ => {
                let r = radius(&mut rng);
                let a0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let p = [0.0, 1.0, 2.0].map(|k: f64| {
                    let a = a0 + k * std::f64::consts::TAU / 3.0;
                    [cx + r * a.cos(), cy + r * a.sin()]
                });
                Shape::Triangle { p }
            }
        };
        let color = PALETTE[rng.random_range(0..PALETTE.len())];
        paint(&mut img, &shape, color);
    }
    let n_red = rng.random_range(0..=config.max_red_circles);
    let mut regions = Vec::with_capacity(n_red);
    for _ in 0..n_red {
        let (cx, cy) = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
        let r = radius(&mut rng);
        paint(&mut img, &Shape::Circle { cx, cy, r }, RED);
        regions.push(Region::circle(cx, cy, r));
    }
    let mask = mask_from_regions(s, s, &regions).expect("valid regions");
    ShapesSample {
        image: img,
        mask,
        red_circles: n_red,
    }
}

/// The whole dataset, generated in parallel; deterministic per seed.
pub fn synth_shapes_dataset(config: &ShapesConfig) -> Vec<ShapesSample> {
    (0..config.count)
        .into_par_iter()
        .map(|i| synth_shapes_sample(config, i))
        .collect()
}

// ---------------------------------------------------------------------------
// Files

/// 8-bit RGB PNG.
pub fn save_rgb_png(img: &PlanarImage, path: impl AsRef<Path>) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Dimension("RGB export needs 3 channels".into()));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        Rgb([0, 1, 2].map(|ch| (img.get(ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<PlanarImage> {
    let rgb = image::open(path.as_ref())?.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = PlanarImage::zeros(w, h, 3);
    for (x, y, p) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            img.set(ch, y as usize, x as usize, p.0[ch] as f32 / 255.0);
        }
    }
    Ok(img)
}

/// 1-bit grayscale PNG (white = valid).
pub fn save_mask_png(mask: &ValidMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
    let stride = mask.width.div_ceil(8);
    let mut packed = vec![0u8; stride * mask.height];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) == 1 {
                packed[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    writer
        .write_image_data(&packed)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    writer.finish().map_err(|e| Error::Format(format!("png: {e}")))
}

/// Read a mask PNG of any grayscale depth; non-zero pixels are valid.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<ValidMask> {
    let path = path.as_ref();
    let luma = image::ImageReader::new(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .into_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let data = luma.pixels().map(|p| u8::from(p.0[0] > 0)).collect();
    ValidMask::new(w, h, data)
}
