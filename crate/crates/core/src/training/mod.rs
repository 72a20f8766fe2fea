//! Optimization loop: mixed BCE + Dice loss, Adam, cosine learning rate,
//! augmentation and IoU/Dice evaluation.

pub mod augment;
pub mod loss;
pub mod metrics;
pub mod optim;

use rand::seq::SliceRandom;

pub use augment::{augment_sample, AugmentConfig, Normalization};
pub use loss::{bce_loss, dice_loss, mixed_loss, mixed_loss_on, LossParts};
pub use optim::{Adam, LrSchedule};

use crate::error::{Error, Result};
use crate::model::{Hooks, VigUnet};
use crate::tensor::{Float, Mode, RngState, Tape, Tensor};

pub const DEFAULT_BATCH: usize = 4;

/// One image (`[C, H, W]`, values in `[0, 1]`) and its `[1, H, W]` mask of
/// zeros and ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub name: String,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Mixed loss of every batch, in order.
    pub batch_losses: Vec<f64>,
}

impl EpochReport {
    pub fn mean_loss(&self) -> f64 {
        self.batch_losses.iter().sum::<f64>() / self.batch_losses.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub mean_dice: f64,
    /// `(iou, dice)` per sample, in dataset order.
    pub per_sample: Vec<(f64, f64)>,
    pub mean_bce: f64,
    pub mean_dice_loss: f64,
}

/// Everything that evolves during training, apart from the model.
pub struct TrainState<F: Float = f32> {
    pub optimizer: Adam<F>,
    pub schedule: LrSchedule,
    pub normalization: Normalization,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub rng: RngState,
}

fn stack<F: Float>(tensors: &[Tensor]) -> Result<Tensor<F>> {
    let first = tensors.first().ok_or_else(|| Error::arg("empty batch"))?;
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * tensors.len());
    for t in tensors {
        if t.shape() != first.shape() {
            return Err(Error::shape(format!("batch mixes {:?} and {:?}", first.shape(), t.shape())));
        }
        data.extend(t.data().iter().map(|&v| F::from_f32(v)));
    }
    Tensor::new(shape, data)
}

/// One pass over `samples` in a shuffled order, one Adam step per batch.
/// The learning rate is taken from the schedule at `epoch`.
pub fn train_epoch<F: Float>(
    model: &mut VigUnet<F>,
    samples: &[SegSample],
    state: &mut TrainState<F>,
    epoch: usize,
) -> Result<EpochReport> {
    if samples.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    if state.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let lr = state.schedule.lr(epoch)?;
    state.optimizer.lr = lr;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut state.rng);
    let mut batch_losses = Vec::with_capacity(order.len().div_ceil(state.batch_size));
    for chunk in order.chunks(state.batch_size) {
        let mut imgs = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &samples[i];
            let (img, mask) = augment_sample(&s.image, &s.mask, state.augment, &state.normalization, &mut state.rng)?;
            imgs.push(img);
            masks.push(mask);
        }
        let (x, y) = (stack::<F>(&imgs)?, stack::<F>(&masks)?);
        let mut tape = Tape::new();
        let input = tape.constant(x);
        let logits = model.forward_on(&mut tape, input, Mode::Train, &mut state.rng, Hooks::default())?;
        let (loss, parts) = mixed_loss_on(&mut tape, logits, &y)?;
        let grads = tape.backward(loss)?;
        drop(tape);
        let store = model.store_mut();
        store.zero_grad();
        grads.accumulate_into(store)?;
        state.optimizer.step(store)?;
        batch_losses.push(parts.total);
    }
    Ok(EpochReport { epoch, lr, batch_losses })
}

/// Eval-mode predictions thresholded at `logit >= 0`, scored per sample.
pub fn evaluate<F: Float>(
    model: &mut VigUnet<F>,
    samples: &[SegSample],
    normalization: &Normalization,
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let (mut bce_sum, mut dice_sum) = (0.0, 0.0);
    // eval mode consumes no randomness
    let mut rng = RngState::new(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs = chunk
            .iter()
            .map(|s| normalization.apply(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let x = stack::<F>(&imgs)?;
        let logits = model.predict(&x, Mode::Eval, &mut rng)?;
        let pixels = logits.numel() / chunk.len();
        for (s, z) in chunk.iter().zip(logits.data().chunks(pixels)) {
            let target = metrics::binarize(s.mask.data());
            let pred = metrics::threshold_logits(z);
            per_sample.push((metrics::iou(&pred, &target)?, metrics::dice(&pred, &target)?));
            let zt = Tensor::new(s.mask.shape().to_vec(), z.to_vec())?;
            let yt: Tensor<F> = s.mask.cast();
            bce_sum += bce_loss(&zt, &yt)?.to_f64();
            dice_sum += dice_loss(&zt, &yt)?.to_f64();
        }
    }
    let n = per_sample.len() as f64;
    Ok(EvalReport {
        mean_iou: per_sample.iter().map(|p| p.0).sum::<f64>() / n,
        mean_dice: per_sample.iter().map(|p| p.1).sum::<f64>() / n,
        per_sample,
        mean_bce: bce_sum / n,
        mean_dice_loss: dice_sum / n,
    })
}
