//! Stage 1: shape-VAE pretraining, cycle-consistent adversarial training of
//! the image/mask translators, and pseudo-label export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::ImageSample;
use crate::dgcc::{recurrent_generate, Dgcc};
use crate::losses::{self, scalar, LabelConvention, LossWeights};
use crate::maskgen::{MaskKind, MaskSet, ShapeMask};
use crate::metrics::dice_masks;
use crate::nets::{
    Generator, GeneratorSpec, LatentDiscSpec, LatentDiscriminator, PatchDiscSpec,
    PatchDiscriminator, ShapeVae, VaeSpec,
};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::params::{standard_normal, ParamStore};
use crate::{ensure_finite, Error, Result};

/// Seed for one named random stream derived from a parent seed.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name, mixed with splitmix64
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn csv_f(v: f64) -> String {
    format!("{v:.9e}")
}

// ---------------------------------------------------------------------------
// VAE pretraining

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaePretrainConfig {
    pub spec: VaeSpec,
    pub epochs: usize,
    /// Trailing epochs over which the learning rate falls linearly towards 0.
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub kl_weight: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for VaePretrainConfig {
    fn default() -> Self {
        Self {
            spec: VaeSpec::default(),
            epochs: 50,
            decay_epochs: 0,
            batch_size: 16,
            lr: 1e-4,
            adam: AdamConfig::default(),
            kl_weight: 1.0,
            seed: 0,
        }
    }
}

impl VaePretrainConfig {
    /// Learning rate of a 1-based epoch. The last decay epoch still trains
    /// at `lr / (decay_epochs + 1)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let flat = self.epochs - self.decay_epochs;
        if epoch <= flat {
            return self.lr;
        }
        self.lr * (self.epochs + 1 - epoch) as f64 / (self.decay_epochs + 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "vae epochs and batch_size must be positive".into(),
            ));
        }
        if self.decay_epochs > self.epochs {
            return Err(Error::Config(
                "vae decay_epochs cannot exceed epochs".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config(
                "vae lr must be > 0 and kl_weight >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
}

pub struct PretrainedVae {
    pub vae: ShapeVae,
    pub store: ParamStore,
    pub log: Vec<VaeEpochLog>,
}

impl PretrainedVae {
    pub fn save(&self, path: &Path) -> Result<()> {
        let spec = serde_json::to_value(self.vae.spec()).expect("spec serializes");
        let epoch = self.log.last().map_or(0, |l| l.epoch);
        Checkpoint::capture("vae", spec, epoch, &self.store, None)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.network != "vae" {
            return Err(Error::Checkpoint(format!(
                "{} holds a {}, not a vae",
                path.display(),
                ck.network
            )));
        }
        let spec: VaeSpec = ck.spec_as()?;
        let mut store = ParamStore::new(DType::F32, 0);
        let vae = ShapeVae::new(&mut store, "vae", spec)?;
        ck.apply(&store, None)?;
        Ok(Self {
            vae,
            store,
            log: Vec::new(),
        })
    }

    /// Mean Dice between masks and the binarized decoding of their mean code.
    pub fn reconstruction_dice(&self, masks: &[ShapeMask]) -> Result<f64> {
        let mut total = 0.0;
        for m in masks {
            let (mean, _) = self.vae.encode_stats(&m.to_signed_tensor(DType::F32)?)?;
            let recon = ShapeMask::from_signed_tensor(&self.vae.decode(&mean)?, m.pixel_mm())?
                .binarized(0.5);
            total += dice_masks(&recon, m)?;
        }
        Ok(total / masks.len().max(1) as f64)
    }
}

fn stack_masks(masks: &[&ShapeMask]) -> Result<Tensor> {
    let ts = masks
        .iter()
        .map(|m| m.to_signed_tensor(DType::F32))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Trains the shape VAE on auxiliary masks with reconstruction MSE plus
/// weighted KL. The returned weights are meant to stay fixed afterwards.
pub fn pretrain_vae(masks: &MaskSet, cfg: &VaePretrainConfig) -> Result<PretrainedVae> {
    cfg.validate()?;
    if masks.is_empty() {
        return Err(Error::Data(
            "VAE pretraining needs at least one mask".into(),
        ));
    }
    let (h, w) = masks.resolution();
    if h != cfg.spec.resolution || w != cfg.spec.resolution {
        return Err(Error::Config(format!(
            "masks are {h}x{w} but the VAE resolution is {}",
            cfg.spec.resolution
        )));
    }
    let mut store = ParamStore::new(DType::F32, derive_seed(cfg.seed, "vae-init"));
    let vae = ShapeVae::new(&mut store, "vae", cfg.spec)?;
    let mut opt = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "vae-train"));
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_kl, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ShapeMask> = chunk.iter().map(|&i| &masks.masks[i]).collect();
            let x = stack_masks(&batch)?;
            let eps = standard_normal(&mut rng, (batch.len(), cfg.spec.latent_length), DType::F32)?;
            let code = vae.encode(&x, &eps)?;
            let recon = vae.decode_linear(&code.sample)?;
            let kl = scalar(&losses::kl_divergence(&code.mean, &code.logvar)?)?;
            ensure_finite(kl, &format!("VAE KL at epoch {epoch}"))?;
            let loss =
                losses::vae_pretrain_loss(&x, &recon, &code.mean, &code.logvar, cfg.kl_weight)?;
            let lv = scalar(&loss)?;
            ensure_finite(lv, &format!("VAE loss at epoch {epoch}"))?;
            opt.step(&store, &loss.backward()?, cfg.lr_at_epoch(epoch))?;
            sum_loss += lv;
            sum_kl += kl;
            batches += 1;
        }
        let entry = VaeEpochLog {
            epoch,
            loss: sum_loss / batches as f64,
            kl: sum_kl / batches as f64,
        };
        log::info!(
            "vae epoch {epoch}: loss {:.5} kl {:.3}",
            entry.loss,
            entry.kl
        );
        log.push(entry);
    }
    Ok(PretrainedVae { vae, store, log })
}

pub fn write_vae_log(path: &Path, log: &[VaeEpochLog]) -> Result<()> {
    let mut s = String::from("epoch,loss,kl\n");
    for l in log {
        let _ = writeln!(s, "{},{},{}", l.epoch, csv_f(l.loss), csv_f(l.kl));
    }
    std::fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Cycle-consistent adversarial training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub dgcc_turns: usize,
    pub label_convention: LabelConvention,
    /// Pool of past fakes shown to the discriminators; 0 disables it.
    pub image_buffer: usize,
    pub generator: GeneratorSpec,
    pub discriminator: PatchDiscSpec,
    pub latent_discriminator: LatentDiscSpec,
    /// Save checkpoints every this many epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    /// Caps the steps of an epoch; `None` means one pass over the images.
    pub steps_per_epoch: Option<usize>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs_flat: 50,
            epochs_decay: 100,
            lr: 5e-6,
            adam: AdamConfig {
                beta1: 0.5,
                ..Default::default()
            },
            weights: LossWeights::default(),
            dgcc_turns: 2,
            label_convention: LabelConvention::RealZero,
            image_buffer: 50,
            generator: GeneratorSpec::default(),
            discriminator: PatchDiscSpec::default(),
            latent_discriminator: LatentDiscSpec::default(),
            checkpoint_every: 10,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            epochs_flat: self.epochs_flat,
            epochs_decay: self.epochs_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.generator.validate()?;
        if self.epochs_flat + self.epochs_decay == 0 {
            return Err(Error::Config("stage1 needs at least one epoch".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "stage1 lr must be positive, got {}",
                self.lr
            )));
        }
        if self.dgcc_turns == 0 {
            return Err(Error::Config("dgcc_turns must be >= 1".into()));
        }
        if self.generator.output_activation != crate::nets::OutputActivation::Tanh {
            return Err(Error::Config(
                "stage1 generators must use a tanh output".into(),
            ));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config(
                "steps_per_epoch must be positive when set".into(),
            ));
        }
        Ok(())
    }
}

/// Pool of previously generated samples (one per entry, batch size 1).
#[derive(Debug, Clone)]
pub struct SampleBuffer {
    capacity: usize,
    items: Vec<Tensor>,
}

impl SampleBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
        }
    }

    /// Returns either `fresh` or, once the pool is full and with probability
    /// one half, a stored sample that `fresh` then replaces.
    pub fn query<R: Rng + ?Sized>(&mut self, fresh: Tensor, rng: &mut R) -> Tensor {
        if self.capacity == 0 {
            return fresh;
        }
        if self.items.len() < self.capacity {
            self.items.push(fresh.clone());
            return fresh;
        }
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..self.capacity);
            std::mem::replace(&mut self.items[i], fresh)
        } else {
            fresh
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub g_total: f64,
    pub cycle_image: f64,
    pub cycle_mask: f64,
    pub adv_mask: f64,
    pub adv_image: f64,
    pub adv_latent: f64,
    pub d_mask: f64,
    pub d_image: f64,
    pub d_latent: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str =
        "step,epoch,lr,g_total,cycle_image,cycle_mask,adv_mask,adv_image,adv_latent,d_mask,d_image,d_latent";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            csv_f(self.lr),
            csv_f(self.g_total),
            csv_f(self.cycle_image),
            csv_f(self.cycle_mask),
            csv_f(self.adv_mask),
            csv_f(self.adv_image),
            csv_f(self.adv_latent),
            csv_f(self.d_mask),
            csv_f(self.d_image),
            csv_f(self.d_latent)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_g_total: f64,
    /// Mean Dice of the current pseudo labels on the validation images.
    pub val_dice: Option<f64>,
}

/// Generator-side losses of one step, kept as tensors for backprop.
struct GeneratorLosses {
    total: Tensor,
    parts: [f64; 5],
    fake_mask: Tensor,
    fake_image: Tensor,
}

/// All stage-1 networks, each with its own parameter store and optimizer.
pub struct Stage1Trainer {
    cfg: Stage1Config,
    pub g_a: Generator,
    pub dgcc: Dgcc,
    pub g_b: Generator,
    pub d_a: PatchDiscriminator,
    pub d_b: PatchDiscriminator,
    pub d_vae: LatentDiscriminator,
    pub vae: ShapeVae,
    pub g_a_store: ParamStore,
    pub g_b_store: ParamStore,
    pub d_a_store: ParamStore,
    pub d_b_store: ParamStore,
    pub d_vae_store: ParamStore,
    pub vae_store: ParamStore,
    opt_g_a: Adam,
    opt_g_b: Adam,
    opt_d_a: Adam,
    opt_d_b: Adam,
    opt_d_vae: Adam,
    buffer_mask: SampleBuffer,
    buffer_image: SampleBuffer,
    step: u64,
    epochs_done: usize,
}

impl Stage1Trainer {
    /// Builds freshly initialized networks around a pretrained VAE.
    pub fn new(cfg: Stage1Config, vae: PretrainedVae) -> Result<Self> {
        cfg.validate()?;
        if vae.vae.spec().latent_length != cfg.latent_discriminator.latent_length {
            return Err(Error::Config(format!(
                "latent discriminator expects length {}, VAE produces {}",
                cfg.latent_discriminator.latent_length,
                vae.vae.spec().latent_length
            )));
        }
        let s = cfg.seed;
        let mut g_a_store = ParamStore::new(DType::F32, derive_seed(s, "init-g_a"));
        let g_a = Generator::new(&mut g_a_store, "g_a", cfg.generator)?;
        let dgcc = Dgcc::new(
            &mut g_a_store,
            "dgcc",
            cfg.discriminator.embedding_channels(),
            &g_a.decoder_channels(),
        )?;
        let mut g_b_store = ParamStore::new(DType::F32, derive_seed(s, "init-g_b"));
        let g_b = Generator::new(&mut g_b_store, "g_b", cfg.generator)?;
        let mut d_a_store = ParamStore::new(DType::F32, derive_seed(s, "init-d_a"));
        let d_a = PatchDiscriminator::new(&mut d_a_store, "d_a", cfg.discriminator)?;
        let mut d_b_store = ParamStore::new(DType::F32, derive_seed(s, "init-d_b"));
        let d_b = PatchDiscriminator::new(&mut d_b_store, "d_b", cfg.discriminator)?;
        let mut d_vae_store = ParamStore::new(DType::F32, derive_seed(s, "init-d_vae"));
        let d_vae = LatentDiscriminator::new(&mut d_vae_store, "d_vae", cfg.latent_discriminator)?;
        Ok(Self {
            opt_g_a: Adam::new(cfg.adam),
            opt_g_b: Adam::new(cfg.adam),
            opt_d_a: Adam::new(cfg.adam),
            opt_d_b: Adam::new(cfg.adam),
            opt_d_vae: Adam::new(cfg.adam),
            buffer_mask: SampleBuffer::new(cfg.image_buffer),
            buffer_image: SampleBuffer::new(cfg.image_buffer),
            cfg,
            g_a,
            dgcc,
            g_b,
            d_a,
            d_b,
            d_vae,
            vae: vae.vae,
            g_a_store,
            g_b_store,
            d_a_store,
            d_b_store,
            d_vae_store,
            vae_store: vae.store,
            step: 0,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn translate_to_mask(&self, image: &Tensor) -> Result<Tensor> {
        recurrent_generate(image, &self.g_a, &self.d_b, &self.dgcc, self.cfg.dgcc_turns)
    }

    fn generator_losses<R: Rng + ?Sized>(
        &self,
        image: &Tensor,
        mask: &Tensor,
        rng: &mut R,
    ) -> Result<GeneratorLosses> {
        let w = self.cfg.weights;
        let conv = self.cfg.label_convention;
        let fake_mask = self.translate_to_mask(image)?;
        let fake_image = self.g_b.forward(mask, None)?;
        let cycle_image = losses::cycle_loss(image, &self.g_b.forward(&fake_mask, None)?)?;
        let cycle_mask = losses::cycle_loss(mask, &self.translate_to_mask(&fake_image)?)?;
        let mut total = ((&cycle_image + &cycle_mask)? * w.lambda_cycle)?;
        let (mut adv_mask_v, mut adv_image_v, mut adv_latent_v) = (0.0, 0.0, 0.0);
        if w.lambda_adv > 0.0 {
            let adv_mask = losses::lsgan_g_loss(&self.d_b.forward(&fake_mask)?, conv)?;
            let adv_image = losses::lsgan_g_loss(&self.d_a.forward(&fake_image)?, conv)?;
            adv_mask_v = scalar(&adv_mask)?;
            adv_image_v = scalar(&adv_image)?;
            total = (total + ((adv_mask + adv_image)? * w.lambda_adv)?)?;
        }
        if w.lambda_vae > 0.0 {
            let l = self.vae.spec().latent_length;
            let eps = standard_normal(rng, (1, l), DType::F32)?;
            let z_fake = self.vae.encode(&fake_mask, &eps)?.sample;
            let adv_latent = losses::vae_adv_loss_g(&self.d_vae.forward(&z_fake)?, conv)?;
            adv_latent_v = scalar(&adv_latent)?;
            total = (total + (adv_latent * w.lambda_vae)?)?;
        }
        Ok(GeneratorLosses {
            parts: [
                scalar(&cycle_image)?,
                scalar(&cycle_mask)?,
                adv_mask_v,
                adv_image_v,
                adv_latent_v,
            ],
            total,
            fake_mask,
            fake_image,
        })
    }

    /// Generator update: only G_A (with its calibrators) and G_B move.
    /// Returns the total and its parts plus the detached fakes.
    pub fn generator_step<R: Rng + ?Sized>(
        &mut self,
        image: &Tensor,
        mask: &Tensor,
        lr: f64,
        rng: &mut R,
    ) -> Result<(f64, [f64; 5], Tensor, Tensor)> {
        let g = self.generator_losses(image, mask, rng)?;
        let total = scalar(&g.total)?;
        ensure_finite(total, &format!("generator loss at step {}", self.step + 1))?;
        let grads = g.total.backward()?;
        self.opt_g_a.step(&self.g_a_store, &grads, lr)?;
        self.opt_g_b.step(&self.g_b_store, &grads, lr)?;
        Ok((total, g.parts, g.fake_mask.detach(), g.fake_image.detach()))
    }

    /// Discriminator update for D_A, D_B and D_VAE against the given fakes.
    /// Returns `(d_mask, d_image, d_latent)`.
    pub fn discriminator_step<R: Rng + ?Sized>(
        &mut self,
        image: &Tensor,
        mask: &Tensor,
        fake_mask: Tensor,
        fake_image: Tensor,
        lr: f64,
        rng: &mut R,
    ) -> Result<(f64, f64, f64)> {
        let conv = self.cfg.label_convention;
        let w = self.cfg.weights;
        let pooled_mask = self.buffer_mask.query(fake_mask.clone(), rng);
        let pooled_image = self.buffer_image.query(fake_image, rng);
        let d_mask = losses::lsgan_d_loss(
            &self.d_b.forward(mask)?,
            &self.d_b.forward(&pooled_mask)?,
            conv,
        )?;
        let d_image = losses::lsgan_d_loss(
            &self.d_a.forward(image)?,
            &self.d_a.forward(&pooled_image)?,
            conv,
        )?;
        let mut total = (&d_mask + &d_image)?;
        let mut d_latent_v = 0.0;
        if w.lambda_vae > 0.0 {
            let l = self.vae.spec().latent_length;
            let eps_r = standard_normal(rng, (1, l), DType::F32)?;
            let eps_f = standard_normal(rng, (1, l), DType::F32)?;
            let z_real = self.vae.encode(mask, &eps_r)?.sample.detach();
            let z_fake = self.vae.encode(&fake_mask, &eps_f)?.sample.detach();
            let d_latent = losses::vae_adv_loss_d(
                &self.d_vae.forward(&z_fake)?,
                &self.d_vae.forward(&z_real)?,
                conv,
            )?;
            d_latent_v = scalar(&d_latent)?;
            total = (total + d_latent)?;
        }
        let tv = scalar(&total)?;
        ensure_finite(tv, &format!("discriminator loss at step {}", self.step + 1))?;
        let grads = total.backward()?;
        if w.lambda_adv > 0.0 {
            self.opt_d_b.step(&self.d_b_store, &grads, lr)?;
            self.opt_d_a.step(&self.d_a_store, &grads, lr)?;
        }
        if w.lambda_vae > 0.0 {
            self.opt_d_vae.step(&self.d_vae_store, &grads, lr)?;
        }
        Ok((scalar(&d_mask)?, scalar(&d_image)?, d_latent_v))
    }

    /// One alternating step on an (image, mask) pair, each `(1, 1, H, W)` in `[-1, 1]`.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        image: &Tensor,
        mask: &Tensor,
        epoch: usize,
        rng: &mut R,
    ) -> Result<StepLog> {
        let lr = self.cfg.schedule().lr_at_epoch(epoch);
        let (g_total, parts, fake_mask, fake_image) = self.generator_step(image, mask, lr, rng)?;
        let (d_mask, d_image, d_latent) =
            self.discriminator_step(image, mask, fake_mask, fake_image, lr, rng)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch,
            lr,
            g_total,
            cycle_image: parts[0],
            cycle_mask: parts[1],
            adv_mask: parts[2],
            adv_image: parts[3],
            adv_latent: parts[4],
            d_mask,
            d_image,
            d_latent,
        })
    }

    /// Runs one epoch. Images are visited in a shuffled order; each step pairs
    /// the image with an independently drawn auxiliary mask.
    pub fn train_epoch(
        &mut self,
        images: &[Tensor],
        masks: &[Tensor],
        epoch: usize,
    ) -> Result<Vec<StepLog>> {
        if images.is_empty() || masks.is_empty() {
            return Err(Error::Data(
                "stage1 needs images and auxiliary masks".into(),
            ));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("stage1-epoch-{epoch}")));
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let steps = self.cfg.steps_per_epoch.unwrap_or(images.len());
        let mut log = Vec::with_capacity(steps);
        for k in 0..steps {
            let i = order[k % order.len()];
            let m = rng.random_range(0..masks.len());
            log.push(self.train_step(&images[i], &masks[m], epoch, &mut rng)?);
        }
        self.epochs_done = epoch;
        Ok(log)
    }

    /// Soft pseudo label `S'_T` in `[-1, 1]` for one image tensor.
    pub fn predict_mask(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.translate_to_mask(image)?.detach())
    }

    pub fn pseudo_labels(&self, images: &[ImageSample]) -> Result<Vec<PseudoLabelRecord>> {
        generate_pseudo_labels(
            images,
            &self.g_a,
            &self.d_b,
            &self.dgcc,
            self.cfg.dgcc_turns,
            self.cfg.label_convention,
        )
    }

    fn checkpoints(&self, epoch: usize) -> Result<Vec<(&'static str, Checkpoint)>> {
        let gspec = serde_json::json!({
            "generator": self.cfg.generator,
            "dgcc_feedback_channels": self.dgcc.feedback_channels(),
        });
        Ok(vec![
            (
                "g_a",
                Checkpoint::capture("g_a", gspec, epoch, &self.g_a_store, Some(&self.opt_g_a))?,
            ),
            (
                "g_b",
                Checkpoint::capture(
                    "g_b",
                    val(&self.cfg.generator),
                    epoch,
                    &self.g_b_store,
                    Some(&self.opt_g_b),
                )?,
            ),
            (
                "d_a",
                Checkpoint::capture(
                    "d_a",
                    val(&self.cfg.discriminator),
                    epoch,
                    &self.d_a_store,
                    Some(&self.opt_d_a),
                )?,
            ),
            (
                "d_b",
                Checkpoint::capture(
                    "d_b",
                    val(&self.cfg.discriminator),
                    epoch,
                    &self.d_b_store,
                    Some(&self.opt_d_b),
                )?,
            ),
            (
                "d_vae",
                Checkpoint::capture(
                    "d_vae",
                    val(&self.cfg.latent_discriminator),
                    epoch,
                    &self.d_vae_store,
                    Some(&self.opt_d_vae),
                )?,
            ),
            (
                "vae",
                Checkpoint::capture("vae", val(self.vae.spec()), epoch, &self.vae_store, None)?,
            ),
        ])
    }

    /// Writes `<name>.safetensors` for every network into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, ck) in self.checkpoints(self.epochs_done)? {
            ck.save(&dir.join(format!("{name}.safetensors")))?;
        }
        Ok(())
    }

    /// Restores all networks and optimizer states saved by [`save`](Self::save).
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let mut epoch = None;
        let mut step = 0;
        for (name, store, opt) in [
            ("g_a", &self.g_a_store, &mut self.opt_g_a),
            ("g_b", &self.g_b_store, &mut self.opt_g_b),
            ("d_a", &self.d_a_store, &mut self.opt_d_a),
            ("d_b", &self.d_b_store, &mut self.opt_d_b),
            ("d_vae", &self.d_vae_store, &mut self.opt_d_vae),
        ] {
            let ck = Checkpoint::load(&dir.join(format!("{name}.safetensors")))?;
            ck.apply(store, Some(opt))?;
            if *epoch.get_or_insert(ck.epoch) != ck.epoch {
                return Err(Error::Checkpoint(format!(
                    "{name} was saved at a different epoch"
                )));
            }
            if name == "g_a" {
                step = ck.optimizer_step;
            }
        }
        let vae = Checkpoint::load(&dir.join("vae.safetensors"))?;
        vae.apply(&self.vae_store, None)?;
        self.epochs_done = epoch.unwrap_or(0);
        self.step = step;
        Ok(())
    }

    /// Full schedule from `epochs_done + 1`. Writes checkpoints and logs into
    /// `out` when given. `val` (with ground truth) drives the per-epoch
    /// validation snapshot.
    pub fn fit(
        &mut self,
        images: &[ImageSample],
        masks: &MaskSet,
        val: &[ImageSample],
        out: Option<&Path>,
    ) -> Result<Stage1Logs> {
        let image_t = images
            .iter()
            .map(|s| s.to_tensor(DType::F32))
            .collect::<Result<Vec<_>>>()?;
        let mask_t = masks
            .masks
            .iter()
            .map(|m| m.to_signed_tensor(DType::F32))
            .collect::<Result<Vec<_>>>()?;
        let mut logs = Stage1Logs::default();
        let total = self.cfg.schedule().total_epochs();
        for epoch in self.epochs_done + 1..=total {
            let steps = self.train_epoch(&image_t, &mask_t, epoch)?;
            let mean_g = steps.iter().map(|s| s.g_total).sum::<f64>() / steps.len() as f64;
            let val_dice = if val.is_empty() {
                None
            } else {
                Some(pseudo_label_dice(&self.pseudo_labels(val)?, val)?)
            };
            let entry = EpochLog {
                epoch,
                lr: self.cfg.schedule().lr_at_epoch(epoch),
                mean_g_total: mean_g,
                val_dice,
            };
            log::info!(
                "stage1 epoch {epoch}/{total}: g {:.4} val dice {}",
                mean_g,
                val_dice.map_or("-".into(), |d| format!("{d:.4}"))
            );
            logs.steps.extend(steps);
            logs.epochs.push(entry);
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every.max(1);
                if epoch % every == 0 || epoch == total {
                    self.save(&dir.join("checkpoints"))?;
                }
                logs.write(dir)?;
            }
        }
        Ok(logs)
    }
}

fn val<T: Serialize>(spec: &T) -> serde_json::Value {
    serde_json::to_value(spec).expect("spec serializes")
}

#[derive(Debug, Clone, Default)]
pub struct Stage1Logs {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl Stage1Logs {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from(StepLog::CSV_HEADER);
        s.push('\n');
        for l in &self.steps {
            s.push_str(&l.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,lr,mean_g_total,val_dice\n");
        for e in &self.epochs {
            let vd = e.val_dice.map_or_else(String::new, csv_f);
            let _ = writeln!(
                s,
                "{},{},{},{vd}",
                e.epoch,
                csv_f(e.lr),
                csv_f(e.mean_g_total)
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.steps_csv())?;
        std::fs::write(dir.join("epochs.csv"), self.epochs_csv())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pseudo labels

/// A pseudo label with its quality score. Scores are oriented so that lower
/// means "more real" to the mask discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub mask: ShapeMask,
    pub score: f64,
    pub round: usize,
}

/// Mean of the patch score matrix, oriented so that lower is more real.
pub fn quality_score(scores: &Tensor, conv: LabelConvention) -> Result<f64> {
    let mean = scalar(&scores.mean_all()?)?;
    Ok(match conv {
        LabelConvention::RealZero => mean,
        LabelConvention::RealOne => 1.0 - mean,
    })
}

/// One record per image: the binarized `S'_T` and its discriminator score.
pub fn generate_pseudo_labels(
    images: &[ImageSample],
    g_a: &Generator,
    d_b: &PatchDiscriminator,
    dgcc: &Dgcc,
    turns: usize,
    conv: LabelConvention,
) -> Result<Vec<PseudoLabelRecord>> {
    images
        .iter()
        .map(|s| {
            let soft =
                recurrent_generate(&s.to_tensor(DType::F32)?, g_a, d_b, dgcc, turns)?.detach();
            let score = quality_score(&d_b.forward(&soft)?, conv)?;
            let pixel_mm = s.gt_mask.as_ref().map_or(1.0, |g| g.pixel_mm());
            let mask = ShapeMask::from_signed_tensor(&soft, pixel_mm)?.binarized(0.5);
            Ok(PseudoLabelRecord {
                image_id: s.id.clone(),
                mask,
                score,
                round: 0,
            })
        })
        .collect()
}

/// Mean Dice of records against ground truth looked up by id, either on the
/// samples themselves or in `withheld`.
pub fn pseudo_label_dice_against(
    records: &[PseudoLabelRecord],
    truth: &BTreeMap<String, ShapeMask>,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("no pseudo labels to score".into()));
    }
    let mut total = 0.0;
    for r in records {
        let gt = truth
            .get(&r.image_id)
            .ok_or_else(|| Error::Data(format!("no ground truth for {}", r.image_id)))?;
        total += dice_masks(&r.mask, gt)?;
    }
    Ok(total / records.len() as f64)
}

fn pseudo_label_dice(records: &[PseudoLabelRecord], samples: &[ImageSample]) -> Result<f64> {
    let truth: BTreeMap<String, ShapeMask> = samples
        .iter()
        .filter_map(|s| s.gt_mask.clone().map(|g| (s.id.clone(), g)))
        .collect();
    pseudo_label_dice_against(records, &truth)
}

/// Writes `<dir>/<id>.png` per record plus `<dir>/manifest.csv` (`id,mask_path,score`).
pub fn write_pseudo_labels(dir: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("id,mask_path,score\n");
    for r in records {
        let file = format!("{}.png", r.image_id);
        r.mask.save_png(&dir.join(&file))?;
        let _ = writeln!(manifest, "{},{file},{}", r.image_id, csv_f(r.score));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Reads a manifest written by [`write_pseudo_labels`] (or by a third party);
/// mask paths are relative to the manifest's directory.
pub fn read_pseudo_labels(manifest: &Path) -> Result<Vec<PseudoLabelRecord>> {
    if !manifest.is_file() {
        return Err(Error::MissingInput(manifest.to_path_buf()));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "id,mask_path,score" {
        return Err(Error::Data(format!(
            "{}: expected header `id,mask_path,score`",
            manifest.display()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, path, score] = cols[..] else {
            return Err(Error::Data(format!(
                "{}:{}: expected 3 columns",
                manifest.display(),
                i + 2
            )));
        };
        let score: f64 = score.parse().map_err(|_| {
            Error::Data(format!(
                "{}:{}: bad score {score:?}",
                manifest.display(),
                i + 2
            ))
        })?;
        let mask_path = base.join(path);
        if !mask_path.is_file() {
            return Err(Error::MissingInput(mask_path));
        }
        let mask = ShapeMask::load_png(&mask_path, 1.0)?;
        debug_assert_eq!(mask.kind(), MaskKind::Binary);
        out.push(PseudoLabelRecord {
            image_id: id.to_string(),
            mask,
            score,
            round: 0,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no pseudo labels",
            manifest.display()
        )));
    }
    Ok(out)
}
