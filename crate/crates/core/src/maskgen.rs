//! Auxiliary shape masks: random ellipses from a parametric prior, or masks
//! loaded from a third-party directory.

use std::f64::consts::PI;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{list_image_files, resize_nearest};
use crate::{Error, Result};

/// Prior over ellipse shape. Lengths are millimetres; the minor range is
/// the full minor-axis length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsePrior {
    pub minor_axis_mm: (f64, f64),
    pub aspect_ratio: (f64, f64),
    /// Force aspect ratio 1 (circles).
    #[serde(default)]
    pub circle: bool,
}

impl Default for EllipsePrior {
    fn default() -> Self {
        Self {
            minor_axis_mm: (25.0, 105.0),
            aspect_ratio: (1.2, 1.8),
            circle: false,
        }
    }
}

impl EllipsePrior {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.minor_axis_mm;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "minor axis range [{lo}, {hi}] is invalid"
            )));
        }
        let (alo, ahi) = self.aspect_ratio;
        if !(alo >= 1.0 && alo <= ahi && ahi.is_finite()) {
            return Err(Error::Config(format!(
                "aspect ratio range [{alo}, {ahi}] is invalid"
            )));
        }
        Ok(())
    }

    fn max_aspect(&self) -> f64 {
        if self.circle {
            1.0
        } else {
            self.aspect_ratio.1
        }
    }
}

/// Square raster geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Canvas {
    pub size: usize,
    pub pixel_mm: f64,
}

impl Canvas {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !(self.pixel_mm > 0.0 && self.pixel_mm.is_finite()) {
            return Err(Error::Config(format!(
                "canvas needs size > 0 and a positive pixel size, got {}px @ {}mm",
                self.size, self.pixel_mm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    /// Centre in pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub center_x: f64,
    pub center_y: f64,
    pub minor_axis_mm: f64,
    /// Major / minor.
    pub aspect_ratio: f64,
    /// Angle of the major axis from +x, in `[0, 2π)`.
    pub orientation: f64,
}

impl EllipseParams {
    pub fn semi_minor_mm(&self) -> f64 {
        0.5 * self.minor_axis_mm
    }

    /// (semi-major, semi-minor) in pixels.
    pub fn semi_axes_px(&self, pixel_mm: f64) -> (f64, f64) {
        let b = self.semi_minor_mm() / pixel_mm;
        (b * self.aspect_ratio, b)
    }

    /// Half-width and half-height of the axis-aligned bounding box, in pixels.
    pub fn half_extent_px(&self, pixel_mm: f64) -> (f64, f64) {
        let (a, b) = self.semi_axes_px(pixel_mm);
        let (s, c) = self.orientation.sin_cos();
        let ex = (a * a * c * c + b * b * s * s).sqrt();
        let ey = (a * a * s * s + b * b * c * c).sqrt();
        (ex, ey)
    }

    pub fn fits(&self, canvas: &Canvas) -> bool {
        let (ex, ey) = self.half_extent_px(canvas.pixel_mm);
        let n = canvas.size as f64;
        let tol = 1e-9;
        self.center_x - ex >= -tol
            && self.center_x + ex <= n + tol
            && self.center_y - ey >= -tol
            && self.center_y + ey <= n + tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Binary,
    Soft,
}

/// A single-channel mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMask {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    kind: MaskKind,
    pixel_mm: f64,
}

impl ShapeMask {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        kind: MaskKind,
        pixel_mm: f64,
    ) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} given {} pixels",
                pixels.len()
            )));
        }
        let ok = match kind {
            MaskKind::Binary => pixels.iter().all(|&v| v == 0.0 || v == 1.0),
            MaskKind::Soft => pixels.iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        if !ok {
            return Err(Error::Data(format!(
                "pixel values violate the {kind:?} mask range"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            kind,
            pixel_mm,
        })
    }

    pub fn binary(height: usize, width: usize, pixels: Vec<f32>, pixel_mm: f64) -> Result<Self> {
        Self::new(height, width, pixels, MaskKind::Binary, pixel_mm)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn pixel_mm(&self) -> f64 {
        self.pixel_mm
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Binary copy with `v >= threshold` as foreground.
    pub fn binarized(&self, threshold: f32) -> ShapeMask {
        ShapeMask {
            pixels: self
                .pixels
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
            kind: MaskKind::Binary,
            ..self.clone()
        }
    }

    pub fn as_bools(&self) -> Vec<bool> {
        self.pixels.iter().map(|&v| v >= 0.5).collect()
    }

    /// `(1, 1, H, W)` tensor with `{0, 1}` remapped to `[-1, 1]`.
    pub fn to_signed_tensor(&self, dtype: DType) -> Result<Tensor> {
        let v: Vec<f32> = self.pixels.iter().map(|&p| 2.0 * p - 1.0).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// `(1, 1, H, W)` tensor in `[0, 1]`.
    pub fn to_unit_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.pixels.clone(),
            (1, 1, self.height, self.width),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }

    /// Soft mask from a `(1, 1, H, W)` or `(H, W)` tensor in `[-1, 1]`, mapped to `[0, 1]`.
    pub fn from_signed_tensor(t: &Tensor, pixel_mm: f64) -> Result<Self> {
        let (h, w) = spatial_dims(t)?;
        let v: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let v = v
            .into_iter()
            .map(|x| ((x + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        Self::new(h, w, v, MaskKind::Soft, pixel_mm)
    }

    /// Soft mask from a tensor already in `[0, 1]`.
    pub fn from_unit_tensor(t: &Tensor, pixel_mm: f64) -> Result<Self> {
        let (h, w) = spatial_dims(t)?;
        let v: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let v = v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
        Self::new(h, w, v, MaskKind::Soft, pixel_mm)
    }

    /// Writes an 8-bit grayscale PNG; foreground 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("mask buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    /// Reads an image as a binary mask: normalized intensity >= 0.5 is foreground.
    pub fn load_png(path: &Path, pixel_mm: f64) -> Result<Self> {
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let pixels = img
            .into_raw()
            .into_iter()
            .map(|v| if v as f32 / 65535.0 >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        Self::binary(h as usize, w as usize, pixels, pixel_mm)
    }

    /// Nearest-neighbour resize; binarity is preserved.
    pub fn resized(&self, height: usize, width: usize) -> ShapeMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        ShapeMask {
            pixels: resize_nearest(&self.pixels, self.height, self.width, height, width),
            height,
            width,
            ..self.clone()
        }
    }
}

fn spatial_dims(t: &Tensor) -> Result<(usize, usize)> {
    let d = t.dims();
    match d {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((*h, *w)),
        _ => Err(Error::Shape(format!(
            "expected a single-channel mask tensor, got {d:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Generated,
    External,
}

#[derive(Debug, Clone)]
pub struct MaskSet {
    pub masks: Vec<ShapeMask>,
    pub source: MaskSource,
    pub rng_seed: u64,
}

impl MaskSet {
    fn checked(masks: Vec<ShapeMask>, source: MaskSource, rng_seed: u64) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::Data("mask set is empty".into()));
        };
        let dims = (first.height, first.width);
        if masks.iter().any(|m| (m.height, m.width) != dims) {
            return Err(Error::Data(
                "masks in a set must share one resolution".into(),
            ));
        }
        Ok(Self {
            masks,
            source,
            rng_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.masks[0].height, self.masks[0].width)
    }

    /// Writes `mask_00000.png`, ... into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, m) in self.masks.iter().enumerate() {
            m.save_png(&dir.join(format!("mask_{i:05}.png")))?;
        }
        Ok(())
    }
}

/// Draws ellipse parameters; the centre is uniform over positions that keep
/// the whole ellipse on the canvas.
pub fn sample_ellipse_params<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &EllipsePrior,
    canvas: &Canvas,
) -> Result<EllipseParams> {
    prior.validate()?;
    canvas.validate()?;
    let half = canvas.size as f64 / 2.0;
    let smallest = 0.5 * prior.minor_axis_mm.0 / canvas.pixel_mm;
    if smallest > half {
        return Err(Error::Config(format!(
            "canvas of {} px at {} mm/px cannot hold the minimum ellipse",
            canvas.size, canvas.pixel_mm
        )));
    }
    let largest = 0.5 * prior.minor_axis_mm.1 * prior.max_aspect() / canvas.pixel_mm;
    if largest > half {
        return Err(Error::Config(format!(
            "canvas of {} px at {} mm/px cannot hold the largest ellipse (semi-major {largest:.2} px)",
            canvas.size, canvas.pixel_mm
        )));
    }
    let minor_axis_mm = rng.random_range(prior.minor_axis_mm.0..=prior.minor_axis_mm.1);
    let aspect_ratio = if prior.circle {
        1.0
    } else {
        rng.random_range(prior.aspect_ratio.0..=prior.aspect_ratio.1)
    };
    let orientation = rng.random_range(0.0..2.0 * PI);
    let mut p = EllipseParams {
        center_x: 0.0,
        center_y: 0.0,
        minor_axis_mm,
        aspect_ratio,
        orientation,
    };
    let (ex, ey) = p.half_extent_px(canvas.pixel_mm);
    let n = canvas.size as f64;
    p.center_x = rng.random_range(ex..=(n - ex).max(ex));
    p.center_y = rng.random_range(ey..=(n - ey).max(ey));
    Ok(p)
}

/// Foreground iff the pixel centre satisfies the ellipse inequality.
pub fn rasterize_ellipse(params: &EllipseParams, canvas: &Canvas) -> Result<ShapeMask> {
    canvas.validate()?;
    let (a, b) = params.semi_axes_px(canvas.pixel_mm);
    let (s, c) = params.orientation.sin_cos();
    let n = canvas.size;
    let mut pixels = vec![0f32; n * n];
    for r in 0..n {
        let dy = r as f64 + 0.5 - params.center_y;
        for col in 0..n {
            let dx = col as f64 + 0.5 - params.center_x;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / a) * (u / a) + (v / b) * (v / b) <= 1.0 {
                pixels[r * n + col] = 1.0;
            }
        }
    }
    ShapeMask::binary(n, n, pixels, canvas.pixel_mm)
}

/// `n` rasterized ellipses, reproducible from `seed`.
pub fn generate_mask_set(
    n: usize,
    prior: &EllipsePrior,
    canvas: &Canvas,
    seed: u64,
) -> Result<MaskSet> {
    if n == 0 {
        return Err(Error::Argument("mask count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = (0..n)
        .map(|_| {
            let p = sample_ellipse_params(&mut rng, prior, canvas)?;
            rasterize_ellipse(&p, canvas)
        })
        .collect::<Result<Vec<_>>>()?;
    MaskSet::checked(masks, MaskSource::Generated, seed)
}

/// Loads every readable image in `dir` as a binary mask resized (nearest) to
/// `target_resolution`. Unreadable files are skipped with a warning.
pub fn load_auxiliary_masks(
    dir: &Path,
    target_resolution: usize,
    pixel_mm: f64,
) -> Result<MaskSet> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut masks = Vec::new();
    for path in list_image_files(dir)? {
        match ShapeMask::load_png(&path, pixel_mm) {
            Ok(m) => masks.push(m.resized(target_resolution, target_resolution)),
            Err(e) => log::warn!("skipping unreadable mask {}: {e}", path.display()),
        }
    }
    if masks.is_empty() {
        return Err(Error::Data(format!(
            "no readable masks in {}",
            dir.display()
        )));
    }
    MaskSet::checked(masks, MaskSource::External, 0)
}
