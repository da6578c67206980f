use rand::seq::SliceRandom;

use super::{backward, NetworkSpec};
use crate::ecloss::{update_beta, BetaSchedule, LossConfig};
use crate::error::{domain, Error, Result};
use crate::rng;
use crate::templates::TemplateSet;
use crate::tensor::Tensor;

/// Images stored back to back as `n x c x h x w`, with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Gathers the given samples into an image batch and label list.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((
            Tensor::new(vec![indices.len(), self.channels, self.height, self.width], pixels)?,
            labels,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: Vec<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of SGD updates applied so far.
    pub step: usize,
    pub rng_seed: u64,
    pub loss_config: LossConfig,
}

impl TrainerState {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(domain(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(domain("batch size must be positive"));
        }
        self.loss_config.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub cls_loss: f64,
    pub mi: f64,
    pub total_loss: f64,
    pub beta: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,cls_loss,mi,total_loss,beta";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e}",
            self.step, self.cls_loss, self.mi, self.total_loss, self.beta
        )
    }
}

/// Plain SGD over `epochs` passes, shuffling each epoch from the state's seed.
/// Epoch numbering continues from `state.step`, so resuming is deterministic too.
pub fn train(
    spec: &NetworkSpec,
    data: &LabeledImages,
    set: &TemplateSet,
    mut state: TrainerState,
    epochs: usize,
) -> Result<(TrainerState, Vec<LogRow>)> {
    state.validate()?;
    if data.is_empty() {
        return Err(domain("training set is empty"));
    }
    if state.params.len() != spec.param_count()? {
        return Err(domain("parameter vector does not match the network"));
    }
    let steps_per_epoch = data.len().div_ceil(state.batch_size);
    let first_epoch = state.step / steps_per_epoch;
    let mut log = Vec::with_capacity(epochs * steps_per_epoch);
    let mut history = Vec::new();

    for epoch in first_epoch..first_epoch + epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::indexed_stream(state.rng_seed, "shuffle", epoch as u64));
        for chunk in order.chunks(state.batch_size) {
            let (images, labels) = data.batch(chunk)?;
            let out = backward(spec, &state.params, &images, &labels, set, &state.loss_config)?;
            let finite = out.total_loss.is_finite() && out.grad.iter().all(|g| g.is_finite());
            if !finite {
                return Err(Error::Divergence { step: state.step });
            }
            for (p, g) in state.params.iter_mut().zip(&out.grad) {
                *p -= state.learning_rate * g;
            }
            log.push(LogRow {
                step: state.step,
                cls_loss: out.cls_loss,
                mi: out.mi,
                total_loss: out.total_loss,
                beta: state.loss_config.beta,
            });
            state.step += 1;
            if let BetaSchedule::Auto { window, .. } = state.loss_config.beta_schedule {
                history.push(out.total_loss);
                if state.step.is_multiple_of(window) {
                    state.loss_config = update_beta(&state.loss_config, &history);
                }
            }
        }
    }
    Ok((state, log))
}
