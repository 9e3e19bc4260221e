//! Adversarial training of the translator/discriminator pair. Real pairs
//! are (original, vicinal sample); fakes are (original, T(original + scaled
//! shuffled difference)). Both networks update once per batch.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackSpec};
use crate::augment::{augment_batch, BudgetConfig};
use crate::data::Dataset;
use crate::error::{Result, VitaError};
use crate::networks::{DifferentiableModel, PatchGan, UNet};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::tensor::optim::backward_and_collect;
use crate::tensor::{ops, Tape, Tensor};
use crate::vicinal::{
    shuffle_differences, transfer_compose, vicinal_difference, DiffSource, TransferConfig,
};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch_size: usize,
    pub transfer: TransferConfig,
    pub budget: BudgetConfig,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            transfer: TransferConfig::default(),
            budget: BudgetConfig::default(),
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(VitaError::Config("gan lr must be positive".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(VitaError::Config(format!(
                "gan batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        self.transfer.validate()?;
        self.budget.validate()
    }
}

/// One harvested translator-training batch.
pub struct GanBatch {
    /// Conditioning originals.
    pub x: Tensor,
    /// Real vicinal samples, aligned with `x`.
    pub x_v: Tensor,
    /// Raw translator input x + lambda * shuffled difference.
    pub raw: Tensor,
    pub source: Vec<DiffSource>,
}

/// Adam epsilon shared by both GAN optimizers.
const ADAM_EPS: f32 = 1e-8;

fn mean_log(map: &Tensor) -> Tensor {
    ops::mean_all(&ops::ln(map))
}

fn mean_log_one_minus(map: &Tensor) -> Tensor {
    ops::mean_all(&ops::ln(&ops::add_scalar(&ops::scale(map, -1.0), 1.0)))
}

/// Discriminator objective: the negation of the value function, averaged
/// over the output map, so that minimizing it pushes D(real) up and D(fake)
/// down. `x_fake` must already be detached from the translator.
pub fn gan_discriminator_loss(
    d: &PatchGan,
    x: &Tensor,
    x_real: &Tensor,
    x_fake: &Tensor,
    tape: Option<&Tape>,
) -> Result<Tensor> {
    let d_real = d.forward(x, x_real, tape)?;
    let d_fake = d.forward(x, x_fake, tape)?;
    Ok(ops::scale(
        &ops::add(&mean_log(&d_real), &mean_log_one_minus(&d_fake)),
        -1.0,
    ))
}

/// Non-saturating generator objective -E[log D(x, x_fake)]. The gradient
/// reaches the translator through `x_fake`; the discriminator itself stays
/// untracked.
pub fn gan_generator_loss(d: &PatchGan, x: &Tensor, x_fake: &Tensor) -> Result<Tensor> {
    let d_fake = d.forward(x, x_fake, None)?;
    Ok(ops::scale(&mean_log(&d_fake), -1.0))
}

/// A provider of (x, x^v, raw, source) batches for the GAN loop. The live
/// pipeline harvests pairs from a dataset; tests can substitute degenerate
/// pairings such as the copy task.
pub trait GanBatchSource {
    fn len(&self) -> usize;
    fn batch(&self, indices: &[usize], cfg: &GanConfig, step_seed: u64) -> Result<GanBatch>;
}

/// Harvests vicinal pairs from a dataset on the fly: half weak augmentations,
/// half adversarial examples against a fixed attack target.
pub struct HarvestSource<'a> {
    pub dataset: &'a Dataset,
    pub attack_model: &'a dyn DifferentiableModel,
}

impl GanBatchSource for HarvestSource<'_> {
    fn len(&self) -> usize {
        self.dataset.len()
    }

    fn batch(&self, indices: &[usize], cfg: &GanConfig, step_seed: u64) -> Result<GanBatch> {
        harvest_gan_batch(self.dataset, indices, self.attack_model, cfg, step_seed)
    }
}

/// Copy-task source: the vicinal sample is the original itself, so every
/// difference is zero and the translator's target is the identity map.
pub struct IdentitySource {
    pub images: Tensor,
}

impl GanBatchSource for IdentitySource {
    fn len(&self) -> usize {
        self.images.shape()[0]
    }

    fn batch(&self, indices: &[usize], _cfg: &GanConfig, _step_seed: u64) -> Result<GanBatch> {
        let shape = self.images.shape();
        let stride: usize = shape[1..].iter().product();
        let data = self.images.data();
        let mut rows = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            rows.extend_from_slice(&data[i * stride..(i + 1) * stride]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let x = Tensor::from_vec(out_shape, rows);
        let source = (0..indices.len())
            .map(|i| if i % 2 == 0 { DiffSource::Augmentation } else { DiffSource::Adversarial })
            .collect();
        Ok(GanBatch { x: x.clone(), x_v: x.clone(), raw: x, source })
    }
}

/// Draw one GAN batch: the first half of the rows get weakly augmented
/// vicinals, the second half adversarial ones from a per-batch attack drawn
/// uniformly off the default menu.
pub fn harvest_gan_batch(
    ds: &Dataset,
    indices: &[usize],
    attack_model: &dyn DifferentiableModel,
    cfg: &GanConfig,
    step_seed: u64,
) -> Result<GanBatch> {
    if indices.len() < 2 || indices.len() % 2 != 0 {
        return Err(VitaError::Data(format!(
            "gan batch needs an even row count >= 2, got {}",
            indices.len()
        )));
    }
    let sub = ds.subset(indices);
    let half = indices.len() / 2;
    let x1 = sub.slice(0, half);
    let x2 = sub.slice(half, half);

    let aug = augment_batch(&x1.images, &cfg.budget, derive_seed(step_seed, "gan/aug"))?;
    let menu = AttackSpec::menu();
    let spec = {
        let mut rng = rng_from_seed(derive_seed(step_seed, "gan/attack-pick"));
        menu[rng.random_range(0..menu.len())]
    };
    let adv = run_attack(
        attack_model,
        &x2.images,
        &x2.labels,
        &spec,
        derive_seed(step_seed, "gan/attack"),
    )?;

    let x_v = Tensor::stack_samples(&[aug, adv]);
    let mut diff = vicinal_difference(&sub.images, &x_v, DiffSource::Augmentation)?;
    for tag in diff.source.iter_mut().skip(half) {
        *tag = DiffSource::Adversarial;
    }
    let shuffled = shuffle_differences(&diff, derive_seed(step_seed, "gan/shuffle"));
    let raw = transfer_compose(&sub.images, &shuffled, &cfg.transfer)?;
    Ok(GanBatch { x: sub.images, x_v, raw, source: shuffled.source })
}

/// Per-epoch trace of the GAN losses and discriminator calibration.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GanTraceRow {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

fn finite_or_abort(value: f64, what: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(VitaError::Numeric(format!(
            "gan training diverged: {what} became {value} at step {step}"
        )))
    }
}

/// One alternating D-step/G-step on a harvested batch. Returns
/// (d_loss, g_loss, mean D(real), mean D(fake)).
pub fn gan_step(
    t: &mut UNet,
    d: &mut PatchGan,
    batch: &GanBatch,
    lr: f32,
    beta1: f32,
    beta2: f32,
) -> Result<(f64, f64, f64, f64)> {
    // Discriminator step: the fake is produced with the translator frozen.
    let fake_detached = t.forward(&batch.raw, None)?;
    let tape = Tape::new();
    let d_loss = gan_discriminator_loss(d, &batch.x, &batch.x_v, &fake_detached, Some(&tape))?;
    let d_loss_val = d_loss.item() as f64;
    backward_and_collect(&tape, &d_loss, &mut d.parameters_mut());
    for p in d.parameters_mut() {
        p.adam_step(lr, beta1, beta2, ADAM_EPS);
        p.zero_grad();
    }

    // Generator step against the freshly updated discriminator.
    let tape = Tape::new();
    let fake = t.forward(&batch.raw, Some(&tape))?;
    let g_loss = gan_generator_loss(d, &batch.x, &fake)?;
    let g_loss_val = g_loss.item() as f64;
    backward_and_collect(&tape, &g_loss, &mut t.parameters_mut());
    for p in t.parameters_mut() {
        p.adam_step(lr, beta1, beta2, ADAM_EPS);
        p.zero_grad();
    }

    // Calibration readout after both updates.
    let fake_now = t.forward(&batch.raw, None)?;
    let d_real = mean_of(&d.forward(&batch.x, &batch.x_v, None)?);
    let d_fake = mean_of(&d.forward(&batch.x, &fake_now, None)?);
    Ok((d_loss_val, g_loss_val, d_real, d_fake))
}

fn mean_of(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom as _;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    idx
}

/// Learning-rate shape over the full run. Temporary tuning hook; the public
/// loop commits to one of these.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the configured rate to zero across all steps.
    LinearToZero,
    /// Constant for the first half, then linear decay to zero.
    ConstantThenLinear,
}

fn lr_at(schedule: LrSchedule, base: f32, step: usize, total: usize) -> f32 {
    let total = total.max(1);
    let frac = step as f32 / total as f32;
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::LinearToZero => base * (1.0 - frac),
        LrSchedule::ConstantThenLinear => {
            if frac < 0.5 {
                base
            } else {
                base * 2.0 * (1.0 - frac)
            }
        }
    }
}

/// Train the translator/discriminator pair on vicinal pair batches. Persists
/// a per-epoch CSV trace and per-epoch checkpoints when `out_dir` is given.
pub fn train_translator(
    t: &mut UNet,
    d: &mut PatchGan,
    source: &dyn GanBatchSource,
    cfg: &GanConfig,
    epochs: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<GanTraceRow>> {
    train_translator_scheduled(t, d, source, cfg, epochs, out_dir, LrSchedule::LinearToZero)
}

#[doc(hidden)]
pub fn train_translator_scheduled(
    t: &mut UNet,
    d: &mut PatchGan,
    source: &dyn GanBatchSource,
    cfg: &GanConfig,
    epochs: usize,
    out_dir: Option<&Path>,
    schedule: LrSchedule,
) -> Result<Vec<GanTraceRow>> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let steps_per_epoch = source.len() / cfg.batch_size;
    let total_steps = epochs * steps_per_epoch;
    let mut traces = Vec::new();
    let mut global_step = 0usize;
    for epoch in 0..epochs {
        let idx =
            shuffled_indices(source.len(), derive_seed_indexed(cfg.seed, "gan/epoch", epoch as u64));
        let mut sums = [0.0f64; 4];
        let mut steps_in_epoch = 0usize;
        for chunk in idx.chunks_exact(cfg.batch_size) {
            let step_seed = derive_seed_indexed(cfg.seed, "gan/step", global_step as u64);
            let batch = source.batch(chunk, cfg, step_seed)?;
            let lr = lr_at(schedule, cfg.lr, global_step, total_steps);
            let (dl, gl, dr, df) = gan_step(t, d, &batch, lr, cfg.beta1, cfg.beta2)?;
            finite_or_abort(dl, "discriminator loss", global_step)?;
            finite_or_abort(gl, "generator loss", global_step)?;
            for (s, v) in sums.iter_mut().zip([dl, gl, dr, df]) {
                *s += v;
            }
            steps_in_epoch += 1;
            global_step += 1;
        }
        let denom = steps_in_epoch.max(1) as f64;
        let row = GanTraceRow {
            epoch,
            d_loss: sums[0] / denom,
            g_loss: sums[1] / denom,
            d_real: sums[2] / denom,
            d_fake: sums[3] / denom,
        };
        traces.push(row);
        if let Some(dir) = out_dir {
            t.save(&dir.join(format!("translator_epoch_{epoch}.ckpt")), "")?;
            d.save(&dir.join(format!("discriminator_epoch_{epoch}.ckpt")), "")?;
        }
    }
    if let Some(dir) = out_dir {
        t.save(&dir.join("translator.ckpt"), "")?;
        d.save(&dir.join("discriminator.ckpt"), "")?;
        write_trace_csv(&dir.join("gan_trace.csv"), &traces)?;
    }
    Ok(traces)
}

pub fn write_trace_csv(path: &Path, traces: &[GanTraceRow]) -> Result<()> {
    let mut out = String::from("epoch,d_loss,g_loss,d_real,d_fake\n");
    for r in traces {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.d_loss, r.g_loss, r.d_real, r.d_fake
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Train the pair on the degenerate copy task (vicinal sample == original,
/// zero differences) for a fixed number of alternating steps and report
/// MAE(T(x), x). Exercises the full GAN loop without attacks or
/// augmentations.
pub fn train_copy_task(
    t: &mut UNet,
    d: &mut PatchGan,
    images: &Tensor,
    steps: usize,
    cfg: &GanConfig,
) -> Result<f64> {
    let source = IdentitySource { images: images.clone() };
    let steps_per_epoch = source.len() / cfg.batch_size;
    if steps_per_epoch == 0 || steps % steps_per_epoch != 0 {
        return Err(VitaError::Config(format!(
            "copy task: {steps} steps not divisible into epochs of {steps_per_epoch} batches"
        )));
    }
    train_translator(t, d, &source, cfg, steps / steps_per_epoch, None)?;
    let out = t.forward(images, None)?;
    let mae = out
        .data()
        .iter()
        .zip(images.data().iter())
        .map(|(&a, &b)| (a - b).abs() as f64)
        .sum::<f64>()
        / images.numel() as f64;
    Ok(mae)
}
