//! Stage 2: label-quality sample selection and iterative training of a
//! segmentation network on noisy pseudo labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cyclegan::{derive_seed, PseudoLabelRecord};
use crate::data::{batch_tensor, ImageSample};
use crate::losses::{self, scalar};
use crate::maskgen::ShapeMask;
use crate::metrics::{dice_masks, evaluate, Segmenter, Summary};
use crate::nets::{Generator, GeneratorSpec, OutputActivation};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqssConfig {
    pub keep_fraction: f64,
}

impl Default for LqssConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.75,
        }
    }
}

impl LqssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

/// Keeps the `floor(keep_fraction * N)` records with the lowest scores,
/// ordering ties by image id. The result is sorted by `(score, id)`.
pub fn lqss_select(
    records: &[PseudoLabelRecord],
    cfg: &LqssConfig,
) -> Result<Vec<PseudoLabelRecord>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Argument(
            "LQSS needs at least one pseudo label".into(),
        ));
    }
    if let Some(r) = records.iter().find(|r| r.score.is_nan()) {
        return Err(Error::Argument(format!(
            "pseudo label {} has a NaN score",
            r.image_id
        )));
    }
    let keep = (cfg.keep_fraction * records.len() as f64).floor() as usize;
    let mut ranked: Vec<&PseudoLabelRecord> = records.iter().collect();
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    Ok(ranked.into_iter().take(keep).cloned().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    Dice,
    NoiseWeightedDice,
}

/// What the round-level stopping rule looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    /// Dice against the ground truth of the validation split.
    GroundTruth,
    /// Annotation-free proxy: Dice between the model's predictions on the
    /// training images and the labels it was trained on.
    PseudoAgreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterConfig {
    pub max_rounds: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub loss: SegLoss,
    pub patience: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub reinit_each_round: bool,
    /// Debug switch: noise weights fixed at one (the loss then equals plain Dice).
    pub frozen_unit_weights: bool,
    pub validation: Validation,
    pub model: GeneratorSpec,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            max_rounds: 5,
            epochs_per_round: 10,
            batch_size: 4,
            loss: SegLoss::NoiseWeightedDice,
            patience: 1,
            lr: 2e-4,
            adam: AdamConfig {
                beta1: 0.5,
                ..Default::default()
            },
            reinit_each_round: false,
            frozen_unit_weights: false,
            validation: Validation::GroundTruth,
            model: GeneratorSpec {
                output_activation: OutputActivation::Sigmoid,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl IterConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be >= 1".into()));
        }
        if self.epochs_per_round == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "epochs_per_round, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "stage2 lr must be positive, got {}",
                self.lr
            )));
        }
        if self.model.output_activation != OutputActivation::Sigmoid {
            return Err(Error::Config(
                "the segmentation model must use a sigmoid output".into(),
            ));
        }
        Ok(())
    }
}

/// Single-output U-Net with a sigmoid head.
pub struct SegmentationModel {
    pub net: Generator,
    pub store: ParamStore,
    pixel_mm: f64,
}

impl SegmentationModel {
    pub fn new(spec: GeneratorSpec, seed: u64, pixel_mm: f64) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32, seed);
        let net = Generator::new(&mut store, "seg", spec)?;
        Ok(Self {
            net,
            store,
            pixel_mm,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        self.net.spec()
    }

    /// Soft foreground probabilities, `(B, 1, H, W)` in `[0, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.net.forward(images, None)
    }

    /// Binary mask at threshold 0.5.
    pub fn predict_binary(&self, sample: &ImageSample) -> Result<ShapeMask> {
        Ok(self.predict(sample)?.binarized(0.5))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let spec = serde_json::json!({ "model": self.net.spec(), "pixel_mm": self.pixel_mm });
        Checkpoint::capture("segmenter", spec, 0, &self.store, None)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.network != "segmenter" {
            return Err(Error::Checkpoint(format!(
                "{} holds a {}, not a segmenter",
                path.display(),
                ck.network
            )));
        }
        #[derive(Deserialize)]
        struct Saved {
            model: GeneratorSpec,
            pixel_mm: f64,
        }
        let saved: Saved = ck.spec_as()?;
        let model = Self::new(saved.model, 0, saved.pixel_mm)?;
        ck.apply(&model.store, None)?;
        Ok(model)
    }
}

impl Segmenter for SegmentationModel {
    fn predict(&self, sample: &ImageSample) -> Result<ShapeMask> {
        let pixel_mm = sample
            .gt_mask
            .as_ref()
            .map_or(self.pixel_mm, |g| g.pixel_mm());
        ShapeMask::from_unit_tensor(&self.forward(&sample.to_tensor(DType::F32)?)?, pixel_mm)
    }
}

/// Training pairs for one round: image and binary target, aligned by index.
struct Pairs<'a> {
    images: Vec<&'a ImageSample>,
    targets: Vec<&'a ShapeMask>,
}

fn pair_up<'a>(
    records: &'a [PseudoLabelRecord],
    images: &'a BTreeMap<&str, &ImageSample>,
) -> Result<Pairs<'a>> {
    let mut pairs = Pairs {
        images: Vec::with_capacity(records.len()),
        targets: Vec::with_capacity(records.len()),
    };
    for r in records {
        let img = images
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::Data(format!("no training image with id {}", r.image_id)))?;
        if (img.height, img.width) != (r.mask.height(), r.mask.width()) {
            return Err(Error::Shape(format!(
                "pseudo label {} is {}x{} but its image is {}x{}",
                r.image_id,
                r.mask.height(),
                r.mask.width(),
                img.height,
                img.width
            )));
        }
        pairs.images.push(img);
        pairs.targets.push(&r.mask);
    }
    Ok(pairs)
}

fn seg_loss(pred: &Tensor, target: &Tensor, cfg: &IterConfig) -> Result<Tensor> {
    match cfg.loss {
        SegLoss::Dice => losses::dice_loss(pred, target),
        SegLoss::NoiseWeightedDice if cfg.frozen_unit_weights => {
            losses::noise_weighted_dice_with_weights(pred, target, &pred.ones_like()?.detach())
        }
        SegLoss::NoiseWeightedDice => losses::noise_weighted_dice_loss(pred, target),
    }
}

/// Trains for `epochs_per_round` epochs on `records` and returns the mean
/// loss of the last epoch.
pub fn train_round(
    model: &SegmentationModel,
    opt: &mut Adam,
    records: &[PseudoLabelRecord],
    images: &BTreeMap<&str, &ImageSample>,
    cfg: &IterConfig,
    round: usize,
) -> Result<f64> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Argument(
            "a training round needs at least one pseudo label".into(),
        ));
    }
    let pairs = pair_up(records, images)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut last = f64::NAN;
    for epoch in 1..=cfg.epochs_per_round {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("stage2-r{round}-e{epoch}")));
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&ImageSample> = chunk.iter().map(|&i| pairs.images[i]).collect();
            let x = batch_tensor(&imgs, DType::F32)?;
            let targets = chunk
                .iter()
                .map(|&i| pairs.targets[i].to_unit_tensor(DType::F32))
                .collect::<Result<Vec<_>>>()?;
            let y = Tensor::cat(&targets, 0)?;
            let loss = seg_loss(&model.forward(&x)?, &y, cfg)?;
            let v = scalar(&loss)?;
            ensure_finite(v, &format!("stage2 loss in round {round}, epoch {epoch}"))?;
            opt.step(&model.store, &loss.backward()?, cfg.lr)?;
            sum += v;
            n += 1;
        }
        last = sum / n as f64;
        log::debug!("stage2 round {round} epoch {epoch}: loss {last:.5}");
    }
    Ok(last)
}

/// Binary predictions of `model` for every image, tagged with `round`.
pub fn repredict(
    model: &SegmentationModel,
    images: &[ImageSample],
    round: usize,
) -> Result<Vec<PseudoLabelRecord>> {
    images
        .iter()
        .map(|s| {
            Ok(PseudoLabelRecord {
                image_id: s.id.clone(),
                mask: model.predict_binary(s)?,
                score: 0.0,
                round,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_assd: Option<f64>,
    pub n_samples: usize,
}

pub fn rounds_csv(rounds: &[RoundReport]) -> String {
    let mut s = String::from("round,train_loss,val_dice,val_assd,n_samples\n");
    for r in rounds {
        let assd = r
            .val_assd
            .map_or_else(|| "undefined".to_string(), |a| format!("{a:.9e}"));
        let _ = writeln!(
            s,
            "{},{:.9e},{:.9e},{assd},{}",
            r.round, r.train_loss, r.val_dice, r.n_samples
        );
    }
    s
}

pub struct IterOutcome {
    /// Weights of the best validation round.
    pub model: SegmentationModel,
    pub rounds: Vec<RoundReport>,
    pub best_round: usize,
    pub best_val_dice: f64,
}

/// Called after each round's validation with the round index and the live
/// model, before labels are re-predicted.
pub type RoundHook<'a> = dyn FnMut(usize, &mut SegmentationModel) -> Result<()> + 'a;

fn validate_round(
    model: &SegmentationModel,
    cfg: &IterConfig,
    val: &[ImageSample],
    current: &[PseudoLabelRecord],
    images: &BTreeMap<&str, &ImageSample>,
    spacing: (f64, f64),
) -> Result<(f64, Option<f64>)> {
    match cfg.validation {
        Validation::GroundTruth => {
            if val.is_empty() {
                return Err(Error::Data("validation split is empty".into()));
            }
            let report = evaluate(model, val, spacing)?;
            Ok((
                report.dice.mean,
                (report.assd.count > 0).then_some(report.assd.mean),
            ))
        }
        Validation::PseudoAgreement => {
            let mut dice = Vec::with_capacity(current.len());
            for r in current {
                let img = images[r.image_id.as_str()];
                dice.push(dice_masks(&model.predict_binary(img)?, &r.mask)?);
            }
            Ok((Summary::of(&dice).mean, None))
        }
    }
}

/// Round loop: train on the current labels, validate, keep the best weights,
/// then re-label every training image with the model for the next round.
/// `selected` are the records that survived selection; `train_images` is the
/// full training split.
pub fn iterative_train(
    selected: &[PseudoLabelRecord],
    train_images: &[ImageSample],
    val: &[ImageSample],
    cfg: &IterConfig,
    spacing: (f64, f64),
    mut hook: Option<&mut RoundHook<'_>>,
) -> Result<IterOutcome> {
    cfg.validate()?;
    let by_id: BTreeMap<&str, &ImageSample> =
        train_images.iter().map(|s| (s.id.as_str(), s)).collect();
    let pixel_mm = selected.first().map_or(1.0, |r| r.mask.pixel_mm());
    let init_seed = derive_seed(cfg.seed, "stage2-init");
    let mut model = SegmentationModel::new(cfg.model, init_seed, pixel_mm)?;
    let mut opt = Adam::new(cfg.adam);
    let mut current: Vec<PseudoLabelRecord> = selected.to_vec();
    let mut rounds = Vec::new();
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor>)> = None;
    let mut stale = 0;
    for round in 1..=cfg.max_rounds {
        if round > 1 && cfg.reinit_each_round {
            model = SegmentationModel::new(cfg.model, init_seed, pixel_mm)?;
            opt = Adam::new(cfg.adam);
        }
        let train_loss = train_round(&model, &mut opt, &current, &by_id, cfg, round)?;
        let (val_dice, val_assd) = validate_round(&model, cfg, val, &current, &by_id, spacing)?;
        log::info!("stage2 round {round}: loss {train_loss:.5} val dice {val_dice:.4}");
        rounds.push(RoundReport {
            round,
            train_loss,
            val_dice,
            val_assd,
            n_samples: current.len(),
        });
        if best.as_ref().is_none_or(|(_, d, _)| val_dice > *d) {
            best = Some((round, val_dice, model.store.snapshot()?));
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(h) = hook.as_deref_mut() {
            h(round, &mut model)?;
        }
        if stale >= cfg.patience || round == cfg.max_rounds {
            break;
        }
        current = repredict(&model, train_images, round)?;
    }
    let (best_round, best_val_dice, weights) = best.expect("at least one round runs");
    model.store.restore(&weights)?;
    Ok(IterOutcome {
        model,
        rounds,
        best_round,
        best_val_dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::ShapeMask;

    fn rec(id: &str, score: f64) -> PseudoLabelRecord {
        PseudoLabelRecord {
            image_id: id.into(),
            mask: ShapeMask::binary(1, 1, vec![0.0], 1.0).unwrap(),
            score,
            round: 0,
        }
    }

    #[test]
    fn lqss_eight_records() -> Result<()> {
        let recs: Vec<_> = (1..=8)
            .rev()
            .map(|i| rec(&format!("r{i}"), i as f64))
            .collect();
        let kept = lqss_select(&recs, &LqssConfig::default())?;
        let scores: Vec<f64> = kept.iter().map(|r| r.score).collect();
        assert_eq!(scores, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        Ok(())
    }

    #[test]
    fn lqss_ties_and_identity() -> Result<()> {
        let recs: Vec<_> = ["d", "b", "a", "c"].iter().map(|id| rec(id, 0.5)).collect();
        let kept = lqss_select(&recs, &LqssConfig::default())?;
        let ids: Vec<&str> = kept.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        let all = lqss_select(&recs, &LqssConfig { keep_fraction: 1.0 })?;
        assert_eq!(all.len(), 4);
        assert!(matches!(
            lqss_select(&[], &LqssConfig::default()),
            Err(Error::Argument(_))
        ));
        assert!(lqss_select(&recs, &LqssConfig { keep_fraction: 0.0 }).is_err());
        Ok(())
    }

    #[test]
    fn rounds_csv_marks_undefined_assd() {
        let csv = rounds_csv(&[RoundReport {
            round: 1,
            train_loss: 0.5,
            val_dice: 0.9,
            val_assd: None,
            n_samples: 3,
        }]);
        assert!(csv.lines().nth(1).unwrap().contains("undefined"));
    }
}
