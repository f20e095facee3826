//! Dice coefficient, average symmetric surface distance and dataset reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::maskgen::ShapeMask;
use crate::{Error, Result};

fn check_binary(v: &[f32], what: &str) -> Result<()> {
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Argument(format!("{what} is not a binary mask")));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "dice on {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p == 1.0 && g == 1.0) as usize;
        total += (p == 1.0) as usize + (g == 1.0) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

pub fn dice_masks(pred: &ShapeMask, gt: &ShapeMask) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape("dice on masks of different size".into()));
    }
    dice_score(pred.pixels(), gt.pixels())
}

/// Foreground pixels with at least one 4-neighbour in the background;
/// positions outside the image count as background.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |r: isize, c: isize| {
        r >= 0
            && c >= 0
            && (r as usize) < h
            && (c as usize) < w
            && mask[r as usize * w + c as usize]
    };
    let mut out = vec![false; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            if at(r, c) && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1)) {
                out[r as usize * w + c as usize] = true;
            }
        }
    }
    out
}

/// Lower-envelope squared distance transform of one line with sample
/// spacing `s`. `f` holds squared distances (infinite where unknown).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let pos = |q: usize| q as f64 * s;
    let meet = |a: usize, b: usize| {
        ((f[b] + pos(b) * pos(b)) - (f[a] + pos(a) * pos(a))) / (2.0 * (pos(b) - pos(a)))
    };
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        while let Some(&last) = v.last() {
            let x = meet(last, q);
            if x <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(x);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.clear();
            z.push(f64::NEG_INFINITY);
        }
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(p) {
            k += 1;
        }
        let d = pos(p) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel of
/// `features`. `spacing` is `(row, column)` pixel size.
pub fn distance_transform(features: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    let mut g: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = g[r * w + c];
        }
        edt_1d(&col, spacing.0, &mut res);
        for r in 0..h {
            g[r * w + c] = res[r];
        }
    }
    let mut row = vec![0.0; w];
    for r in 0..h {
        edt_1d(&g[r * w..(r + 1) * w], spacing.1, &mut row);
        g[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    g.into_iter().map(f64::sqrt).collect()
}

/// Average symmetric surface distance: the mean of the two directional
/// mean boundary-to-boundary distances. `None` when either mask is empty.
pub fn assd(
    pred: &[f32],
    gt: &[f32],
    h: usize,
    w: usize,
    spacing: (f64, f64),
) -> Result<Option<f64>> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::Shape(format!(
            "ASSD on {}/{} pixels for {h}x{w}",
            pred.len(),
            gt.len()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::Argument(format!(
            "spacing {spacing:?} must be positive"
        )));
    }
    let p: Vec<bool> = pred.iter().map(|&v| v == 1.0).collect();
    let g: Vec<bool> = gt.iter().map(|&v| v == 1.0).collect();
    if !p.contains(&true) || !g.contains(&true) {
        return Ok(None);
    }
    let bp = boundary(&p, h, w);
    let bg = boundary(&g, h, w);
    let directed = |from: &[bool], to: &[bool]| {
        let dt = distance_transform(to, h, w, spacing);
        let (sum, n) = from
            .iter()
            .zip(&dt)
            .filter(|(b, _)| **b)
            .fold((0.0, 0usize), |(s, n), (_, d)| (s + d, n + 1));
        sum / n as f64
    };
    Ok(Some(0.5 * (directed(&bp, &bg) + directed(&bg, &bp))))
}

pub fn assd_masks(pred: &ShapeMask, gt: &ShapeMask, spacing: (f64, f64)) -> Result<Option<f64>> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape("ASSD on masks of different size".into()));
    }
    assd(
        pred.pixels(),
        gt.pixels(),
        pred.height(),
        pred.width(),
        spacing,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub assd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    /// Population mean and standard deviation; NaN for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub dice: Summary,
    pub assd: Summary,
    /// Samples whose ASSD was undefined.
    pub assd_excluded: usize,
    pub spacing: (f64, f64),
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, spacing: (f64, f64)) -> Self {
        let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
        let assd: Vec<f64> = rows.iter().filter_map(|r| r.assd).collect();
        Self {
            dice: Summary::of(&dice),
            assd: Summary::of(&assd),
            assd_excluded: rows.len() - assd.len(),
            rows,
            spacing,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,dice,assd\n");
        for r in &self.rows {
            let assd = r
                .assd
                .map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{:.6},{assd}", r.id, r.dice);
        }
        s
    }

    /// JSON summary (aggregates only).
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "samples": self.rows.len(),
            "dice_mean": self.dice.mean,
            "dice_std": self.dice.std,
            "assd_mean": self.assd.mean,
            "assd_std": self.assd.std,
            "assd_excluded": self.assd_excluded,
            "spacing": [self.spacing.0, self.spacing.1],
        })
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv())?;
        let text = serde_json::to_string_pretty(&self.summary_json())
            .map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(json, text + "\n")?;
        Ok(())
    }
}

/// Anything that maps an image to a soft foreground mask in `[0, 1]`.
pub trait Segmenter {
    fn predict(&self, image: &ImageSample) -> Result<ShapeMask>;
}

impl<F: Fn(&ImageSample) -> Result<ShapeMask>> Segmenter for F {
    fn predict(&self, image: &ImageSample) -> Result<ShapeMask> {
        self(image)
    }
}

/// Scores one sample, binarizing the prediction at 0.5.
pub fn score_sample(
    pred: &ShapeMask,
    sample: &ImageSample,
    spacing: (f64, f64),
) -> Result<EvalRow> {
    let gt = sample
        .gt_mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sample {} has no ground truth", sample.id)))?;
    let pred = pred.binarized(0.5);
    Ok(EvalRow {
        id: sample.id.clone(),
        dice: dice_masks(&pred, gt)?,
        assd: assd_masks(&pred, gt, spacing)?,
    })
}

/// Predicts and scores every sample in order.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    samples: &[ImageSample],
    spacing: (f64, f64),
) -> Result<EvalReport> {
    let rows = samples
        .iter()
        .map(|s| score_sample(&model.predict(s)?, s, spacing))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, spacing))
}

/// Writes an RGB overlay: the image in gray, the ground-truth contour in
/// green and the predicted contour in red.
pub fn write_overlay(path: &Path, sample: &ImageSample, pred: &ShapeMask) -> Result<()> {
    let (h, w) = (sample.height, sample.width);
    let pred_b = boundary(&pred.as_bools(), h, w);
    let gt_b = sample
        .gt_mask
        .as_ref()
        .map(|g| boundary(&g.as_bools(), h, w))
        .unwrap_or_else(|| vec![false; h * w]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let g = (((sample.pixels[i] + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0) as u8;
        *px = if pred_b[i] {
            image::Rgb([255, 0, 0])
        } else if gt_b[i] {
            image::Rgb([0, 255, 0])
        } else {
            image::Rgb([g, g, g])
        };
    }
    img.save(path)?;
    Ok(())
}
