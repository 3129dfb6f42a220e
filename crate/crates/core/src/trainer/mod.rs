//! Training loop: optimizer, learning-rate schedule, the three training
//! modes and the per-step statistics.

mod config;

use std::fmt::Write as _;

pub use config::{ImageMaskConfig, TrainConfig, TrainMode};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{bce_loss, distill_loss, total_loss, LossConfig};
use crate::masking::{apply_image_mask, mask_tokens, sample_image_mask, PixelMask, TextMaskConfig};
use crate::metrics::evaluate;
use crate::model::{backward, backward_into, forward, init_params, ModelState, ParamGrads};
use crate::parallel::par_map;
use crate::rng::RngStream;
use crate::synthdata::{Dataset, SampleRecord};
use crate::text::{TokenSequence, Vocabulary};

/// `lr_base · (1 − step/total_steps)^power`.
pub fn poly_lr(step: u64, total_steps: u64, lr_base: f64, power: f64) -> f64 {
    if total_steps == 0 {
        return lr_base;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    lr_base * (1.0 - frac).powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier for the input encoders.
    pub encoder_lr_mult: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            encoder_lr_mult: cfg.encoder_lr_mult,
        }
    }
}

/// One AdamW step with decoupled weight decay and bias correction.
pub fn adamw_update(state: &mut ModelState, grads: &ParamGrads, opt: &AdamW) -> Result<()> {
    if grads.0.len() != state.num_params() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.0.len(),
            state.num_params()
        )));
    }
    if let Some(i) = grads.0.iter().position(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged {
            step: state.step,
            what: format!("non-finite gradient at parameter {i}"),
        });
    }
    let t = state.step + 1;
    let corr1 = 1.0 - opt.beta1.powi(t as i32);
    let corr2 = 1.0 - opt.beta2.powi(t as i32);
    let mut lrs = vec![opt.lr; state.num_params()];
    if opt.encoder_lr_mult != 1.0 {
        for r in state.layout.encoder_ranges() {
            lrs[r].fill(opt.lr * opt.encoder_lr_mult);
        }
    }
    let ModelState {
        params,
        first_moment,
        second_moment,
        ..
    } = state;
    for i in 0..params.len() {
        let g = grads.0[i];
        let lr = lrs[i];
        params[i] -= lr * opt.weight_decay * params[i];
        first_moment[i] = opt.beta1 * first_moment[i] + (1.0 - opt.beta1) * g;
        second_moment[i] = opt.beta2 * second_moment[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = first_moment[i] / corr1;
        let v_hat = second_moment[i] / corr2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    state.step = t;
    Ok(())
}

/// Masked copy of one sample's inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView {
    pub image: ImageBuffer,
    pub tokens: TokenSequence,
    pub image_mask: PixelMask,
}

/// Draws an image mask and a text corruption for `sample`. Image and text
/// draw from separate substreams of `rng`.
pub fn masked_view(
    sample: &SampleRecord,
    image_mask: &ImageMaskConfig,
    text_mask: &TextMaskConfig,
    vocab: &Vocabulary,
    rng: &RngStream,
) -> Result<MaskedView> {
    let img = &sample.image;
    let mut irng = rng.substream("image", 0);
    let mask = sample_image_mask(
        image_mask.strategy,
        img.height(),
        img.width(),
        image_mask.patch,
        image_mask.ratio,
        &mut irng,
    )?;
    let mut trng = rng.substream("text", 0);
    let (tokens, _) = mask_tokens(&sample.tokens, text_mask, vocab, &mut trng)?;
    Ok(MaskedView {
        image: apply_image_mask(img, &mask)?,
        tokens,
        image_mask: mask,
    })
}

/// Gradients of the dual-path objective for one sample, kept per path.
#[derive(Clone, Debug)]
pub struct DclGradients {
    /// Backward through the clean forward of `lambda · L_ce`.
    pub clean_part: ParamGrads,
    /// Backward through the masked forward of `(1 − lambda) · L_dist`.
    pub masked_part: ParamGrads,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_dist: f64,
    /// Supervised loss of the masked prediction, for monitoring only.
    pub loss_masked: f64,
}

impl DclGradients {
    pub fn total(&self) -> ParamGrads {
        let mut g = self.clean_part.clone();
        g.add_scaled(&self.masked_part, 1.0);
        g
    }
}

/// Clean forward, masked forward, weighted objective and both backward
/// passes. The clean prediction enters the distillation loss as a plain
/// target, so the masked-path gradient never reaches the clean forward.
pub fn dcl_gradients(
    state: &ModelState,
    sample: &SampleRecord,
    view: &MaskedView,
    loss: &LossConfig,
) -> Result<DclGradients> {
    let (clean, clean_cache) = forward(state, &sample.image, &sample.tokens)?;
    let ce = bce_loss(&clean, &sample.gt_mask, loss.full_bce)?;
    let (masked, masked_cache) = forward(state, &view.image, &view.tokens)?;
    let dist = distill_loss(&clean, &masked, loss.full_bce)?;
    let masked_ce = bce_loss(&masked, &sample.gt_mask, loss.full_bce)?;
    let total = total_loss(&ce, &dist, loss)?;
    Ok(DclGradients {
        clean_part: backward(state, &clean_cache, &total.clean_grad)?,
        masked_part: backward(state, &masked_cache, &total.masked_grad)?,
        loss_total: total.value,
        loss_ce: ce.value,
        loss_dist: dist.value,
        loss_masked: masked_ce.value,
    })
}

/// Unweighted per-path gradients `(g_ce, g_dist)` for the same forwards as
/// [`dcl_gradients`].
pub fn path_gradients(
    state: &ModelState,
    sample: &SampleRecord,
    view: &MaskedView,
    full_bce: bool,
) -> Result<(ParamGrads, ParamGrads)> {
    let (clean, clean_cache) = forward(state, &sample.image, &sample.tokens)?;
    let ce = bce_loss(&clean, &sample.gt_mask, full_bce)?;
    let (masked, masked_cache) = forward(state, &view.image, &view.tokens)?;
    let dist = distill_loss(&clean, &masked, full_bce)?;
    Ok((
        backward(state, &clean_cache, &ce.grad)?,
        backward(state, &masked_cache, &dist.grad)?,
    ))
}

/// Supervised-loss gradient on one input pair.
fn supervised(state: &ModelState, image: &ImageBuffer, tokens: &TokenSequence, gt: &PixelMask, full_bce: bool) -> Result<(ParamGrads, f64)> {
    let (pred, cache) = forward(state, image, tokens)?;
    let ce = bce_loss(&pred, gt, full_bce)?;
    let mut g = ParamGrads::zeros(state.num_params());
    backward_into(state, &cache, &ce.grad, &mut g)?;
    Ok((g, ce.value))
}

struct SampleOutcome {
    grads: ParamGrads,
    ce_clean: Option<f64>,
    masked: Option<f64>,
    dist: Option<f64>,
}

/// Random stream for the masking of dataset record `index` in `epoch`.
pub fn sample_stream(seed: u64, epoch: usize, index: usize) -> RngStream {
    RngStream::with_counter(seed, format!("mask/{epoch}"), index as u64)
}

fn sample_outcome(
    state: &ModelState,
    sample: &SampleRecord,
    cfg: &TrainConfig,
    mode: TrainMode,
    vocab: &Vocabulary,
    rng: &RngStream,
) -> Result<SampleOutcome> {
    let full = cfg.loss.full_bce;
    match mode {
        TrainMode::Baseline => {
            let (grads, ce) = supervised(state, &sample.image, &sample.tokens, &sample.gt_mask, full)?;
            Ok(SampleOutcome {
                grads,
                ce_clean: Some(ce),
                masked: None,
                dist: None,
            })
        }
        TrainMode::Augment => {
            if rng.substream("aug", 0).bernoulli(cfg.aug_prob) {
                let view = masked_view(sample, &cfg.image_mask, &cfg.text_mask, vocab, rng)?;
                let (grads, ce) = supervised(state, &view.image, &view.tokens, &sample.gt_mask, full)?;
                Ok(SampleOutcome {
                    grads,
                    ce_clean: None,
                    masked: Some(ce),
                    dist: None,
                })
            } else {
                let (grads, ce) = supervised(state, &sample.image, &sample.tokens, &sample.gt_mask, full)?;
                Ok(SampleOutcome {
                    grads,
                    ce_clean: Some(ce),
                    masked: None,
                    dist: None,
                })
            }
        }
        TrainMode::MaskRis => {
            let view = masked_view(sample, &cfg.image_mask, &cfg.text_mask, vocab, rng)?;
            let d = dcl_gradients(state, sample, &view, &cfg.loss)?;
            Ok(SampleOutcome {
                grads: d.total(),
                ce_clean: Some(d.loss_ce),
                masked: Some(d.loss_masked),
                dist: Some(d.loss_dist),
            })
        }
    }
}

/// One row of the stats file. Step rows carry losses and the learning rate;
/// validation rows carry mIoU and oIoU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatRow {
    pub step: u64,
    pub epoch: usize,
    pub loss_ce_clean: Option<f64>,
    pub loss_masked: Option<f64>,
    pub loss_dist: Option<f64>,
    pub lr: Option<f64>,
    pub val_miou: Option<f64>,
    pub val_oiou: Option<f64>,
}

pub const STATS_HEADER: &str = "step,epoch,loss_ce_clean,loss_masked,loss_dist,lr,val_miou,val_oiou";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub rows: Vec<StatRow>,
}

impl TrainStats {
    pub fn to_csv(&self) -> String {
        let mut out = format!("version,1\n{STATS_HEADER}\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                opt(r.loss_ce_clean),
                opt(r.loss_masked),
                opt(r.loss_dist),
                opt(r.lr),
                opt(r.val_miou),
                opt(r.val_oiou)
            );
        }
        out
    }

    /// The last validation row, if any.
    pub fn last_val(&self) -> Option<&StatRow> {
        self.rows.iter().rev().find(|r| r.val_miou.is_some())
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// One optimizer step on `batch` (dataset indices with their records).
/// Per-sample gradients are summed in batch order and averaged.
pub fn train_step(
    state: &mut ModelState,
    batch: &[(usize, &SampleRecord)],
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    epoch: usize,
    lr: f64,
) -> Result<StatRow> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mode = cfg.mode()?;
    let frozen: &ModelState = state;
    let outcomes = par_map(batch, |&(idx, s)| {
        sample_outcome(frozen, s, cfg, mode, vocab, &sample_stream(cfg.seed, epoch, idx))
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let mut grads = ParamGrads::zeros(state.num_params());
    for o in &outcomes {
        grads.add_scaled(&o.grads, 1.0);
    }
    grads.scale(1.0 / batch.len() as f64);
    let row = StatRow {
        step: state.step,
        epoch,
        loss_ce_clean: mean_of(outcomes.iter().map(|o| o.ce_clean)),
        loss_masked: mean_of(outcomes.iter().map(|o| o.masked)),
        loss_dist: mean_of(outcomes.iter().map(|o| o.dist)),
        lr: Some(lr),
        val_miou: None,
        val_oiou: None,
    };
    let losses = [row.loss_ce_clean, row.loss_masked, row.loss_dist];
    if losses.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDiverged {
            step: state.step,
            what: "non-finite loss".into(),
        });
    }
    adamw_update(state, &grads, &AdamW::from_config(cfg, lr))?;
    Ok(row)
}

/// Random permutation of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = RngStream::with_counter(seed, "shuffle", epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order
}

pub fn total_steps(cfg: &TrainConfig, train_len: usize) -> u64 {
    (cfg.epochs * train_len.div_ceil(cfg.batch_size)) as u64
}

/// Trains from scratch. Equivalent to [`train_with`] with no epoch hook.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(ModelState, TrainStats)> {
    train_with(cfg, data, |_, _, _| Ok(()))
}

/// Trains from scratch and calls `on_epoch(epoch, state, stats)` after each
/// epoch's validation row. The result depends only on `cfg` and `data`.
pub fn train_with<F>(cfg: &TrainConfig, data: &Dataset, mut on_epoch: F) -> Result<(ModelState, TrainStats)>
where
    F: FnMut(usize, &ModelState, &TrainStats) -> Result<()>,
{
    cfg.validate()?;
    let train_idx: Vec<usize> = (0..data.len())
        .filter(|&i| data.splits[i] == crate::synthdata::Split::Train)
        .collect();
    let val = data.val();
    if train_idx.is_empty() || val.is_empty() {
        return Err(Error::invalid("dataset needs both train and val samples"));
    }
    let mut state = init_params(cfg.model_config(data), &mut RngStream::new(cfg.seed, "init"))?;
    let total = total_steps(cfg, train_idx.len());
    let mut stats = TrainStats::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_idx.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &SampleRecord)> = chunk
                .iter()
                .map(|&k| (train_idx[k], &data.records[train_idx[k]]))
                .collect();
            let lr = poly_lr(state.step, total, cfg.lr_base, cfg.poly_power);
            stats.rows.push(train_step(&mut state, &batch, cfg, &data.vocab, epoch, lr)?);
        }
        let r = evaluate(&state, &val)?;
        stats.rows.push(StatRow {
            step: state.step,
            epoch,
            val_miou: Some(r.miou),
            val_oiou: Some(r.oiou),
            ..StatRow::default()
        });
        on_epoch(epoch, &state, &stats)?;
    }
    Ok((state, stats))
}

/// Mean supervised loss on masked copies of `samples`. Masks come from a
/// stream keyed by `seed` and the sample position, so every model sees the
/// same masked inputs.
pub fn masked_eval_loss(
    state: &ModelState,
    samples: &[&SampleRecord],
    image_mask: &ImageMaskConfig,
    text_mask: &TextMaskConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let indexed: Vec<(usize, &SampleRecord)> = samples.iter().copied().enumerate().collect();
    let losses = par_map(&indexed, |&(i, s)| {
        let rng = RngStream::with_counter(seed, "eval-mask", i as u64);
        let view = masked_view(s, image_mask, text_mask, vocab, &rng)?;
        let (pred, _) = forward(state, &view.image, &view.tokens)?;
        Ok(bce_loss(&pred, &s.gt_mask, true)?.value)
    });
    let losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
