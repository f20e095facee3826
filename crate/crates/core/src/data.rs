//! Training corpus: synthetic rendering, image ingestion, preprocessing and
//! splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::maskgen::ShapeMask;
use crate::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff", "pgm"];

/// Smallest side accepted by [`preprocess`].
pub const MIN_IMAGE_SIDE: usize = 32;

/// Sorted list of image files directly inside `dir`.
pub fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Nearest-neighbour resampling with pixel-centre alignment.
pub fn resize_nearest(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        let sr = (((r as f64 + 0.5) * h as f64 / nh as f64).floor() as usize).min(h - 1);
        for c in 0..nw {
            let sc = (((c as f64 + 0.5) * w as f64 / nw as f64).floor() as usize).min(w - 1);
            out.push(src[sr * w + sc]);
        }
    }
    out
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (x - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..nw).map(|c| coord(c, w, nw)).collect();
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        let (r0, r1, fr) = coord(r, h, nh);
        for &(c0, c1, fc) in &cols {
            let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
            let top = lerp(src[r0 * w + c0], src[r0 * w + c1], fc);
            let bot = lerp(src[r1 * w + c0], src[r1 * w + c1], fc);
            out.push(lerp(top, bot, fr));
        }
    }
    out
}

fn crop(src: &[f32], w: usize, top: usize, left: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size);
    for r in top..top + size {
        out.extend_from_slice(&src[r * w + left..r * w + left + size]);
    }
    out
}

/// A grayscale image with arbitrary intensity range, before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image given {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Reads any supported image as single-channel intensities in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let pixels = img
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect();
        Self::new(h as usize, w as usize, pixels)
    }
}

/// A preprocessed single-channel image in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    /// Ground truth; only present for validation and test samples (and for
    /// freshly rendered synthetic data before splitting).
    pub gt_mask: Option<ShapeMask>,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image given {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Data("image intensities must lie in [-1, 1]".into()));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
            gt_mask: None,
        })
    }

    pub fn with_gt(mut self, gt: ShapeMask) -> Result<Self> {
        if (gt.height(), gt.width()) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "ground truth {}x{} does not match image {}x{}",
                gt.height(),
                gt.width(),
                self.height,
                self.width
            )));
        }
        self.gt_mask = Some(gt);
        Ok(self)
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.pixels.clone(),
            (1, 1, self.height, self.width),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }

    /// Writes a 16-bit PNG with `[-1, 1]` mapped to the full range.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let data: Vec<u16> = self
            .pixels
            .iter()
            .map(|&v| (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            data,
        )
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }
}

/// Stacks samples into a `(B, 1, H, W)` tensor.
pub fn batch_tensor(samples: &[&ImageSample], dtype: DType) -> Result<Tensor> {
    let ts = samples
        .iter()
        .map(|s| s.to_tensor(dtype))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Parameters of the synthetic image renderer. Intensities are in the
/// normalized `[-1, 1]` range; lengths are pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub foreground: f32,
    pub background: f32,
    /// Gaussian edge blur; 0 disables it.
    pub blur_sigma: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f64,
    /// Peak amplitude of the smooth additive bias field.
    pub bias_amplitude: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            foreground: 0.4,
            background: -0.4,
            blur_sigma: 1.0,
            noise_std: 0.1,
            bias_amplitude: 0.1,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.blur_sigma >= 0.0
            && self.noise_std >= 0.0
            && self.bias_amplitude >= 0.0
            && (-1.0..=1.0).contains(&self.foreground)
            && (-1.0..=1.0).contains(&self.background);
        if !ok {
            return Err(Error::Config("renderer settings out of range".into()));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    kv * src[y * w + (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize]
                })
                .sum();
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    kv * tmp[(y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize * w + x]
                })
                .sum();
        }
    }
    out
}

/// Renders an image whose foreground is `mask`: flat intensities, edge blur,
/// a smooth sinusoidal bias field and additive noise, clipped to `[-1, 1]`.
/// The mask is attached as ground truth.
pub fn render_synthetic_image<R: Rng + ?Sized>(
    id: impl Into<String>,
    mask: &ShapeMask,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<ImageSample> {
    cfg.validate()?;
    if mask.kind() != crate::maskgen::MaskKind::Binary {
        return Err(Error::Data("renderer needs a binary mask".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let base: Vec<f32> = mask
        .pixels()
        .iter()
        .map(|&m| {
            if m >= 0.5 {
                cfg.foreground
            } else {
                cfg.background
            }
        })
        .collect();
    let mut px = gaussian_blur(&base, h, w, cfg.blur_sigma);
    if cfg.bias_amplitude > 0.0 {
        let kx = rng.random_range(0.3..1.0) / w as f64;
        let ky = rng.random_range(0.3..1.0) / h as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let t = std::f64::consts::TAU * (kx * x as f64 + ky * y as f64) + phase;
                px[y * w + x] += (cfg.bias_amplitude * t.sin()) as f32;
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut px {
            *v += normal.sample(rng) as f32;
        }
    }
    for v in &mut px {
        *v = v.clamp(-1.0, 1.0);
    }
    ImageSample::new(id, h, w, px)?.with_gt(mask.clone())
}

/// Resize then crop geometry, shared by images and their masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resize: usize,
    pub crop: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize: 288,
            crop: 256,
        }
    }
}

impl PreprocessConfig {
    /// Keeps the default resize/crop ratio at another crop size.
    pub fn for_crop(crop: usize) -> Self {
        Self {
            resize: crop * 9 / 8,
            crop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.resize < self.crop {
            return Err(Error::Config(format!(
                "preprocess resize {} must be >= crop {} > 0",
                self.resize, self.crop
            )));
        }
        Ok(())
    }
}

/// Min-max normalization to `[-1, 1]`; a constant image maps to 0.
pub fn normalize_intensity(px: &mut [f32]) {
    let (lo, hi) = px
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        px.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let scale = 2.0 / (hi - lo);
    for v in px.iter_mut() {
        *v = ((*v - lo) * scale - 1.0).clamp(-1.0, 1.0);
    }
}

/// Resize (bilinear), crop (random in training mode, centred otherwise) and
/// normalize. A mask, when given, follows the same geometry with nearest
/// resampling. Images already at crop size skip the geometric steps in
/// evaluation mode.
pub fn preprocess<R: Rng + ?Sized>(
    id: impl Into<String>,
    raw: &RawImage,
    mask: Option<&ShapeMask>,
    cfg: &PreprocessConfig,
    train_mode: bool,
    rng: &mut R,
) -> Result<ImageSample> {
    cfg.validate()?;
    if raw.height < MIN_IMAGE_SIDE || raw.width < MIN_IMAGE_SIDE {
        return Err(Error::Data(format!(
            "image of {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
            raw.height, raw.width
        )));
    }
    if let Some(m) = mask {
        if (m.height(), m.width()) != (raw.height, raw.width) {
            return Err(Error::Shape("mask and image sizes differ".into()));
        }
    }
    let c = cfg.crop;
    let passthrough = !train_mode && raw.height == c && raw.width == c;
    let (mut px, gt) = if passthrough {
        (raw.pixels.clone(), mask.cloned())
    } else {
        let n = cfg.resize;
        let resized = resize_bilinear(&raw.pixels, raw.height, raw.width, n, n);
        let (top, left) = if train_mode {
            (rng.random_range(0..=n - c), rng.random_range(0..=n - c))
        } else {
            ((n - c) / 2, (n - c) / 2)
        };
        let gt = match mask {
            Some(m) => {
                let mr = resize_nearest(m.pixels(), m.height(), m.width(), n, n);
                Some(ShapeMask::binary(
                    c,
                    c,
                    crop(&mr, n, top, left, c),
                    m.pixel_mm(),
                )?)
            }
            None => None,
        };
        (crop(&resized, n, top, left, c), gt)
    };
    normalize_intensity(&mut px);
    let sample = ImageSample::new(id, c, c, px)?;
    match gt {
        Some(g) => sample.with_gt(g),
        None => Ok(sample),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitName::Train),
            "val" => Some(SplitName::Val),
            "test" => Some(SplitName::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub seed: u64,
}

impl DatasetSplit {
    /// `(id, split)` pairs in split order.
    pub fn assignments(&self) -> Vec<(String, SplitName)> {
        let tag = |v: &[ImageSample], s: SplitName| {
            v.iter().map(move |x| (x.id.clone(), s)).collect::<Vec<_>>()
        };
        let mut out = tag(&self.train, SplitName::Train);
        out.extend(tag(&self.val, SplitName::Val));
        out.extend(tag(&self.test, SplitName::Test));
        out
    }
}

/// A split plus the training ground truth that was removed from it. Only
/// evaluation harnesses should look at `withheld`.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub split: DatasetSplit,
    pub withheld: BTreeMap<String, ShapeMask>,
}

/// Split sizes for `n` samples: rounded ratios with at least one sample in
/// every split.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    if n < 3 {
        return Err(Error::Data(format!(
            "need at least 3 samples to split, got {n}"
        )));
    }
    let val = ((b * n as f64).round() as usize).max(1);
    let test = ((c * n as f64).round() as usize).max(1);
    let train = n.saturating_sub(val + test).max(1);
    let test = n - train - val;
    Ok((train, val, test))
}

/// Deterministic shuffle-and-cut. Training samples lose their ground truth.
pub fn split_dataset(
    samples: Vec<ImageSample>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitOutcome> {
    let (n_train, n_val, _) = split_sizes(samples.len(), ratios)?;
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != samples.len() {
        return Err(Error::Data("sample ids must be unique".into()));
    }
    let mut samples = samples;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    let mut withheld = BTreeMap::new();
    let train = samples
        .into_iter()
        .map(|mut s| {
            if let Some(gt) = s.gt_mask.take() {
                withheld.insert(s.id.clone(), gt);
            }
            s
        })
        .collect();
    Ok(SplitOutcome {
        split: DatasetSplit {
            train,
            val,
            test,
            seed,
        },
        withheld,
    })
}

/// Writes `id,split` lines with a header.
pub fn write_split_manifest(path: &Path, assignments: &[(String, SplitName)]) -> Result<()> {
    let mut s = String::from("id,split\n");
    for (id, split) in assignments {
        let _ = writeln!(s, "{id},{}", split.as_str());
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_split_manifest(path: &Path) -> Result<Vec<(String, SplitName)>> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, split) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected id,split", path.display(), i + 1))
        })?;
        let split = SplitName::parse(split.trim()).ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: unknown split {split:?}",
                path.display(),
                i + 1
            ))
        })?;
        out.push((id.trim().to_string(), split));
    }
    Ok(out)
}

/// One entry of an `images/` + `labels/` directory.
#[derive(Debug, Clone)]
pub struct RawEntry {
    pub id: String,
    pub image: RawImage,
    pub label: Option<ShapeMask>,
}

/// Reads `dir/images/*` and, where present, `dir/labels/<stem>.png`.
pub fn load_image_dir(dir: &Path, pixel_mm: f64) -> Result<Vec<RawEntry>> {
    let images = dir.join("images");
    if !images.is_dir() {
        return Err(Error::MissingInput(images));
    }
    let labels = dir.join("labels");
    let mut out = Vec::new();
    for path in list_image_files(&images)? {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("unusable file name {}", path.display())))?
            .to_string();
        let image = RawImage::load(&path)?;
        let lp = labels.join(format!("{id}.png"));
        let label = if lp.is_file() {
            Some(ShapeMask::load_png(&lp, pixel_mm)?)
        } else {
            None
        };
        out.push(RawEntry { id, image, label });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no images in {}", images.display())));
    }
    Ok(out)
}

/// Writes samples as `images/<id>.png` and, when they carry ground truth,
/// `labels/<id>.png`.
pub fn write_image_dir(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for s in samples {
        s.save_png(&dir.join("images").join(format!("{}.png", s.id)))?;
        if let Some(gt) = &s.gt_mask {
            std::fs::create_dir_all(dir.join("labels"))?;
            gt.save_png(&dir.join("labels").join(format!("{}.png", s.id)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(n: usize) -> ShapeMask {
        let px = (0..n * n)
            .map(|i| {
                let (r, c) = (i / n, i % n);
                if (n / 4..3 * n / 4).contains(&r) && (n / 4..3 * n / 4).contains(&c) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        ShapeMask::binary(n, n, px, 1.0).unwrap()
    }

    #[test]
    fn degenerate_renderer_is_remapped_mask() -> Result<()> {
        let m = square_mask(16);
        let cfg = RenderConfig {
            foreground: 0.5,
            background: -0.5,
            blur_sigma: 0.0,
            noise_std: 0.0,
            bias_amplitude: 0.0,
        };
        let img = render_synthetic_image("a", &m, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (p, g) in img.pixels.iter().zip(m.pixels()) {
            assert_eq!(*p, if *g == 1.0 { 0.5 } else { -0.5 });
        }
        Ok(())
    }

    #[test]
    fn render_is_deterministic() -> Result<()> {
        let m = square_mask(32);
        let cfg = RenderConfig::default();
        let a = render_synthetic_image("a", &m, &cfg, &mut ChaCha8Rng::seed_from_u64(3))?;
        let b = render_synthetic_image("a", &m, &cfg, &mut ChaCha8Rng::seed_from_u64(3))?;
        assert_eq!(a, b);
        Ok(())
    }

    #[test]
    fn preprocess_shapes_and_constant_input() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = RawImage::new(540, 800, (0..540 * 800).map(|i| (i % 97) as f32).collect())?;
        let s = preprocess(
            "x",
            &raw,
            None,
            &PreprocessConfig::default(),
            true,
            &mut rng,
        )?;
        assert_eq!((s.height, s.width), (256, 256));
        assert!(s.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));

        let flat = RawImage::new(40, 40, vec![7.0; 1600])?;
        let s = preprocess(
            "f",
            &flat,
            None,
            &PreprocessConfig::for_crop(32),
            false,
            &mut rng,
        )?;
        assert!(s.pixels.iter().all(|&v| v == 0.0));

        let small = RawImage::new(31, 40, vec![0.0; 31 * 40])?;
        assert!(matches!(
            preprocess(
                "s",
                &small,
                None,
                &PreprocessConfig::default(),
                false,
                &mut rng
            ),
            Err(Error::Data(_))
        ));
        Ok(())
    }

    #[test]
    fn center_crop_is_deterministic() -> Result<()> {
        let raw = RawImage::new(
            300,
            310,
            (0..300 * 310).map(|i| ((i * 31) % 101) as f32).collect(),
        )?;
        let cfg = PreprocessConfig::default();
        let a = preprocess(
            "x",
            &raw,
            None,
            &cfg,
            false,
            &mut ChaCha8Rng::seed_from_u64(1),
        )?;
        let b = preprocess(
            "x",
            &raw,
            None,
            &cfg,
            false,
            &mut ChaCha8Rng::seed_from_u64(2),
        )?;
        assert_eq!(a, b);
        Ok(())
    }

    #[test]
    fn split_sizes_and_partition() -> Result<()> {
        let samples: Vec<_> = (0..10)
            .map(|i| ImageSample::new(format!("s{i}"), 1, 1, vec![0.0]).unwrap())
            .collect();
        let a = split_dataset(samples.clone(), (0.7, 0.1, 0.2), 5)?;
        assert_eq!(
            (a.split.train.len(), a.split.val.len(), a.split.test.len()),
            (7, 1, 2)
        );
        let b = split_dataset(samples, (0.7, 0.1, 0.2), 5)?;
        assert_eq!(a.split.assignments(), b.split.assignments());
        let ids: BTreeSet<String> = a
            .split
            .assignments()
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        assert_eq!(ids.len(), 10);
        Ok(())
    }

    #[test]
    fn too_few_samples() {
        let samples: Vec<_> = (0..2)
            .map(|i| ImageSample::new(format!("s{i}"), 1, 1, vec![0.0]).unwrap())
            .collect();
        assert!(matches!(
            split_dataset(samples, (0.7, 0.1, 0.2), 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn resize_identity() {
        let v: Vec<f32> = (0..12).map(|i| i as f32).collect();
        assert_eq!(resize_nearest(&v, 3, 4, 3, 4), v);
        assert_eq!(resize_bilinear(&v, 3, 4, 3, 4), v);
    }
}
