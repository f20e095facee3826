//! End-to-end synthetic benchmark: generated shapes, rendered images, both
//! training stages and evaluation against the hidden ground truth.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::cyclegan::{
    derive_seed, pretrain_vae, pseudo_label_dice_against, write_pseudo_labels, write_vae_log,
    PseudoLabelRecord, Stage1Trainer,
};
use crate::data::{
    load_image_dir, preprocess, read_split_manifest, render_synthetic_image, split_dataset,
    write_image_dir, write_split_manifest, DatasetSplit, SplitName, SplitOutcome,
};
use crate::maskgen::{generate_mask_set, MaskSet};
use crate::metrics::{evaluate, EvalReport};
use crate::noisy::{iterative_train, lqss_select, rounds_csv, IterConfig, RoundReport, SegLoss};
use crate::{Error, Result};

/// Renders one synthetic image per generated mask and splits them. Training
/// images lose their ground truth (kept in `withheld`).
pub fn synthetic_dataset(cfg: &PipelineConfig) -> Result<SplitOutcome> {
    let masks = generate_mask_set(
        cfg.data.n_images,
        &cfg.maskgen.prior,
        &cfg.maskgen.canvas,
        derive_seed(cfg.seed, "image-masks"),
    )?;
    render_dataset(&masks, cfg)
}

/// Renders `masks` into images (`img_00000`, ...) and splits them.
pub fn render_dataset(masks: &MaskSet, cfg: &PipelineConfig) -> Result<SplitOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "render"));
    let samples = masks
        .masks
        .iter()
        .enumerate()
        .map(|(i, m)| render_synthetic_image(format!("img_{i:05}"), m, &cfg.render, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    split_dataset(samples, cfg.data.split, derive_seed(cfg.seed, "split"))
}

/// Unpaired masks for the mask domain of stage 1.
pub fn auxiliary_masks(cfg: &PipelineConfig) -> Result<MaskSet> {
    generate_mask_set(
        cfg.data.n_aux_masks,
        &cfg.maskgen.prior,
        &cfg.maskgen.canvas,
        derive_seed(cfg.seed, "aux-masks"),
    )
}

/// Training and held-out masks for VAE pretraining.
pub fn vae_masks(cfg: &PipelineConfig) -> Result<(MaskSet, MaskSet)> {
    let gen = |n, stream| {
        generate_mask_set(
            n,
            &cfg.maskgen.prior,
            &cfg.maskgen.canvas,
            derive_seed(cfg.seed, stream),
        )
    };
    Ok((
        gen(cfg.data.n_vae_masks, "vae-masks")?,
        gen(cfg.data.n_vae_heldout, "vae-heldout")?,
    ))
}

/// Writes a split as `images/`, `labels/` and `split.csv`. Ground truth of
/// training images goes to `labels/` as well, so evaluation tools can score
/// pseudo labels; [`load_dataset`] strips it again.
pub fn write_dataset(dir: &Path, split: &SplitOutcome) -> Result<()> {
    let mut all: Vec<_> = split.split.train.clone();
    for s in &mut all {
        if let Some(gt) = split.withheld.get(&s.id) {
            s.gt_mask = Some(gt.clone());
        }
    }
    all.extend(split.split.val.iter().cloned());
    all.extend(split.split.test.iter().cloned());
    write_image_dir(dir, &all)?;
    write_split_manifest(&dir.join("split.csv"), &split.split.assignments())
}

/// Reads a directory written by [`write_dataset`] (or laid out the same way)
/// and preprocesses every image to the configured crop. Training images lose
/// their labels into `withheld`.
pub fn load_dataset(dir: &Path, cfg: &PipelineConfig) -> Result<SplitOutcome> {
    let assignments: std::collections::BTreeMap<String, SplitName> =
        read_split_manifest(&dir.join("split.csv"))?
            .into_iter()
            .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "preprocess"));
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed: cfg.seed,
    };
    let mut withheld = std::collections::BTreeMap::new();
    for entry in load_image_dir(dir, cfg.maskgen.canvas.pixel_mm)? {
        let Some(&which) = assignments.get(&entry.id) else {
            log::warn!("{} is not listed in split.csv; skipped", entry.id);
            continue;
        };
        let mut sample = preprocess(
            entry.id,
            &entry.image,
            entry.label.as_ref(),
            &cfg.data.preprocess,
            false,
            &mut rng,
        )?;
        match which {
            SplitName::Train => {
                if let Some(gt) = sample.gt_mask.take() {
                    withheld.insert(sample.id.clone(), gt);
                }
                split.train.push(sample);
            }
            SplitName::Val => split.val.push(sample),
            SplitName::Test => split.test.push(sample),
        }
    }
    if split.train.is_empty() {
        return Err(Error::Data(format!(
            "{} has no training images",
            dir.display()
        )));
    }
    Ok(SplitOutcome { split, withheld })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTimes {
    pub vae_s: f64,
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Result {
    pub loss: SegLoss,
    pub rounds: Vec<RoundReport>,
    pub best_round: usize,
    pub test: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub preset: String,
    pub seed: u64,
    pub vae_heldout_dice: f64,
    pub vae_kl_finite: bool,
    /// Mean Dice of stage-1 pseudo labels on the training images.
    pub stage1_pseudo_dice: f64,
    /// Same, restricted to the records kept by selection.
    pub selected_pseudo_dice: f64,
    pub n_selected: usize,
    pub stage2: Stage2Result,
    /// Plain-Dice stage 2 with everything else equal, when requested.
    pub stage2_plain_dice: Option<Stage2Result>,
    pub times: StageTimes,
}

impl BenchReport {
    pub fn final_dice(&self) -> f64 {
        self.stage2.test.dice.mean
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "preset": self.preset,
            "seed": self.seed,
            "vae_heldout_dice": self.vae_heldout_dice,
            "stage1_pseudo_dice": self.stage1_pseudo_dice,
            "selected_pseudo_dice": self.selected_pseudo_dice,
            "n_selected": self.n_selected,
            "final_test_dice": self.final_dice(),
            "final_test_assd": self.stage2.test.assd.mean,
            "best_round": self.stage2.best_round,
            "plain_dice_final_test_dice": self.stage2_plain_dice.as_ref().map(|r| r.test.dice.mean),
            "seconds": self.times.total_s,
        })
    }
}

fn run_stage2(
    selected: &[PseudoLabelRecord],
    split: &SplitOutcome,
    cfg: &IterConfig,
    spacing: (f64, f64),
    out: Option<&Path>,
) -> Result<Stage2Result> {
    let outcome = iterative_train(
        selected,
        &split.split.train,
        &split.split.val,
        cfg,
        spacing,
        None,
    )?;
    let test = evaluate(&outcome.model, &split.split.test, spacing)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rounds.csv"), rounds_csv(&outcome.rounds))?;
        outcome.model.save(&dir.join("model.safetensors"))?;
        test.write(&dir.join("eval.csv"), &dir.join("eval.json"))?;
    }
    Ok(Stage2Result {
        loss: cfg.loss,
        rounds: outcome.rounds,
        best_round: outcome.best_round,
        test,
    })
}

/// Runs the whole pipeline on generated data. With `out`, every stage writes
/// its logs and artifacts below it.
pub fn bench_synthetic(
    cfg: &PipelineConfig,
    compare_plain_dice: bool,
    out: Option<&Path>,
) -> Result<BenchReport> {
    cfg.validate()?;
    let t0 = Instant::now();
    if let Some(dir) = out {
        cfg.write(&dir.join("config.toml"))?;
    }
    let split = synthetic_dataset(cfg)?;
    if let Some(dir) = out {
        write_split_manifest(&dir.join("split.csv"), &split.split.assignments())?;
    }
    let spacing = cfg.spacing();

    let (vae_train, vae_heldout) = vae_masks(cfg)?;
    let vae = pretrain_vae(&vae_train, &cfg.vae)?;
    let vae_heldout_dice = vae.reconstruction_dice(&vae_heldout.masks)?;
    let vae_kl_finite = vae.log.iter().all(|l| l.kl.is_finite());
    log::info!("vae held-out reconstruction dice {vae_heldout_dice:.4}");
    if let Some(dir) = out {
        let d = dir.join("vae");
        std::fs::create_dir_all(&d)?;
        write_vae_log(&d.join("epochs.csv"), &vae.log)?;
        vae.save(&d.join("vae.safetensors"))?;
    }
    let t_vae = t0.elapsed().as_secs_f64();

    let aux = auxiliary_masks(cfg)?;
    let mut trainer = Stage1Trainer::new(cfg.stage1, vae)?;
    let stage1_dir = out.map(|d| d.join("stage1"));
    trainer.fit(
        &split.split.train,
        &aux,
        &split.split.val,
        stage1_dir.as_deref(),
    )?;
    let records = trainer.pseudo_labels(&split.split.train)?;
    let stage1_pseudo_dice = pseudo_label_dice_against(&records, &split.withheld)?;
    log::info!("stage1 pseudo-label dice {stage1_pseudo_dice:.4}");
    if let Some(dir) = &stage1_dir {
        write_pseudo_labels(&dir.join("pseudo_labels"), &records)?;
    }
    let t_stage1 = t0.elapsed().as_secs_f64();

    let selected = lqss_select(&records, &cfg.lqss)?;
    if selected.is_empty() {
        return Err(Error::Data("selection kept no pseudo labels".into()));
    }
    let selected_pseudo_dice = pseudo_label_dice_against(&selected, &split.withheld)?;
    let stage2 = run_stage2(
        &selected,
        &split,
        &cfg.stage2,
        spacing,
        out.map(|d| d.join("stage2")).as_deref(),
    )?;
    log::info!("stage2 test dice {:.4}", stage2.test.dice.mean);
    let stage2_plain_dice = if compare_plain_dice {
        let plain = IterConfig {
            loss: SegLoss::Dice,
            ..cfg.stage2
        };
        let r = run_stage2(
            &selected,
            &split,
            &plain,
            spacing,
            out.map(|d| d.join("stage2_plain_dice")).as_deref(),
        )?;
        log::info!("stage2 (plain dice) test dice {:.4}", r.test.dice.mean);
        Some(r)
    } else {
        None
    };
    let total = t0.elapsed().as_secs_f64();
    let report = BenchReport {
        preset: cfg.preset.as_str().to_string(),
        seed: cfg.seed,
        vae_heldout_dice,
        vae_kl_finite,
        stage1_pseudo_dice,
        selected_pseudo_dice,
        n_selected: selected.len(),
        stage2,
        stage2_plain_dice,
        times: StageTimes {
            vae_s: t_vae,
            stage1_s: t_stage1 - t_vae,
            stage2_s: total - t_stage1,
            total_s: total,
        },
    };
    if let Some(dir) = out {
        let text = serde_json::to_string_pretty(&report.summary_json())
            .map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(dir.join("bench_report.json"), text + "\n")?;
    }
    Ok(report)
}
