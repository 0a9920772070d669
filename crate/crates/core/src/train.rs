//! Training loop: masked squared error, backpropagation and Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Mode, ParamStore, Tape, Tensor};
use crate::camera::{CameraIntrinsics, DepthMap};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::net::{CompletionNet, SampleRef};

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` color in `[0, 1]`.
    pub rgb: Tensor<f32>,
    pub sparse: DepthMap,
    pub gt: DepthMap,
    pub intrinsics: CameraIntrinsics,
}

impl Sample {
    pub fn as_ref(&self) -> SampleRef<'_> {
        SampleRef {
            rgb: &self.rgb,
            sparse: &self.sparse,
            intrinsics: &self.intrinsics,
        }
    }

    /// Horizontal mirror of rgb, both depth maps and the principal point.
    pub fn flipped(&self) -> Self {
        let (h, w) = (self.gt.height(), self.gt.width());
        let mut rgb = self.rgb.clone();
        let src = self.rgb.data();
        let dst = rgb.data_mut();
        for c in 0..3 {
            for v in 0..h {
                for u in 0..w {
                    dst[(c * h + v) * w + (w - 1 - u)] = src[(c * h + v) * w + u];
                }
            }
        }
        Self {
            rgb,
            sparse: self.sparse.flip_horizontal(),
            gt: self.gt.flip_horizontal(),
            intrinsics: self.intrinsics.flipped(w),
        }
    }
}

/// One optimizer step on `batch`. Returns the loss before the update.
pub fn train_step(
    net: &CompletionNet,
    store: &mut ParamStore<f32>,
    adam: &Adam,
    batch: &[&Sample],
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step on an empty batch".into()));
    }
    let refs: Vec<SampleRef<'_>> = batch.iter().map(|s| s.as_ref()).collect();
    let gts: Vec<&DepthMap> = batch.iter().map(|s| &s.gt).collect();
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, store, &refs, Mode::Train, seed)?;
    let loss = net.loss(&mut tape, out.depth, &gts, net.config.loss_reduction)?;
    store.zero_grads();
    let value = tape.backward_into(loss, store)? as f64;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("training loss became {value}")));
    }
    adam.step(store)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        format!("step={} epoch={} loss={:e}", self.step, self.epoch, self.loss)
    }
}

pub fn format_log(log: &[LossRecord]) -> String {
    log.iter().map(|r| r.to_line() + "\n").collect()
}

/// Runs epochs of shuffled mini-batches. `on_epoch` is called after every
/// completed epoch (and after the last partial one when `max_steps` stops
/// training early) with the epoch index and the current parameters.
pub fn train<F>(
    net: &CompletionNet,
    store: &mut ParamStore<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(usize, &ParamStore<f32>, &[LossRecord]) -> Result<()>,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| log.len() >= m) {
                break;
            }
            let flipped: Vec<Option<Sample>> = chunk
                .iter()
                .map(|&i| (cfg.flip && rng.gen_bool(0.5)).then(|| samples[i].flipped()))
                .collect();
            let batch: Vec<&Sample> = chunk
                .iter()
                .zip(&flipped)
                .map(|(&i, f)| f.as_ref().unwrap_or(&samples[i]))
                .collect();
            let step = log.len() + 1;
            let loss = train_step(net, store, &cfg.adam, &batch, seed.wrapping_add(step as u64))
                .map_err(|e| match e {
                    Error::NoSupervision | Error::EmptyInput(_) | Error::Dimension { .. } => Error::Contract(
                        format!("training sample(s) {chunk:?}: {e}"),
                    ),
                    e => e,
                })?;
            log::debug!("step {step} loss {loss}");
            log.push(LossRecord { step, epoch, loss });
        }
        on_epoch(epoch, store, &log)?;
        if cfg.max_steps.is_some_and(|m| log.len() >= m) {
            break;
        }
    }
    Ok(log)
}
