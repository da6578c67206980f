//! Mutual information between a template set and a batch of feature maps, the
//! explainable channel loss `-MI` and its gradient.
//!
//! Each `(sample, channel)` map `x` is one equally weighted draw. Its template
//! posterior is the softmax of the fitness scores `<x, T>`, and the estimate is
//! the batch average of `KL(P(T|x) || P(T))` against the uniform prior.

use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::templates::TemplateSet;
use crate::tensor::{FeatureBatch, Tensor};

/// Fitness of one map against every template: the sum of the elementwise
/// product `sum_ij x_ij T_ij`.
pub fn fitness(x: &[f64], set: &TemplateSet) -> Result<Vec<f64>> {
    if x.len() != set.params().cells() {
        return Err(domain(format!(
            "feature map has {} cells, templates expect {}x{}",
            x.len(),
            set.params().height,
            set.params().width
        )));
    }
    Ok(fitness_unchecked(x, set))
}

fn fitness_unchecked(x: &[f64], set: &TemplateSet) -> Vec<f64> {
    set.templates()
        .iter()
        .map(|t| x.iter().zip(t.values()).map(|(a, b)| a * b).sum())
        .collect()
}

/// Max-shifted softmax.
pub fn conditional_likelihood(fitness: &[f64]) -> Vec<f64> {
    let max = fitness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = fitness.iter().map(|f| (f - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Batch mean of conditional rows, the empirical template posterior standing
/// in for integration over `P(x)`. `conditional` is row-major with
/// `n_templates` columns.
pub fn marginal(conditional: &[f64], n_templates: usize) -> Result<Vec<f64>> {
    if n_templates == 0 || conditional.is_empty() || !conditional.len().is_multiple_of(n_templates) {
        return Err(domain("marginal needs at least one complete conditional row"));
    }
    let rows = conditional.len() / n_templates;
    let mut out = vec![0.0; n_templates];
    for row in conditional.chunks_exact(n_templates) {
        for (o, p) in out.iter_mut().zip(row) {
            *o += p;
        }
    }
    for o in &mut out {
        *o /= rows as f64;
    }
    Ok(out)
}

/// Deterministic pairwise (binary tree) summation.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

/// `sum_T p_T (ln p_T - ln prior)`, with `0 ln 0 = 0`, clamped to its exact
/// range `[0, ln n]` against rounding. A uniform row gives exactly 0.
fn kl_to_uniform(p: &[f64], prior: f64) -> f64 {
    let ln_prior = prior.ln();
    let kl: f64 = p
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * (q.ln() - ln_prior))
        .sum();
    kl.clamp(0.0, (p.len() as f64).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MIResult {
    /// Mutual information in nats.
    pub mi: f64,
    /// Mean over the rows of each channel index.
    pub per_channel_mi: Vec<f64>,
    /// `(b*c) x |T|` row-stochastic matrix of `P(T|x)`, rows sample-major.
    pub conditional: Vec<f64>,
    pub n_templates: usize,
    pub marginal: Vec<f64>,
}

impl MIResult {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.conditional[r * self.n_templates..(r + 1) * self.n_templates]
    }
}

fn check_shape(batch: &FeatureBatch, set: &TemplateSet) -> Result<()> {
    let p = set.params();
    if batch.height() != p.height || batch.width() != p.width {
        return Err(domain(format!(
            "feature maps are {}x{}, templates are {}x{}",
            batch.height(),
            batch.width(),
            p.height,
            p.width
        )));
    }
    if batch.rows() == 0 {
        return Err(domain("feature batch is empty"));
    }
    Ok(())
}

struct RowEval {
    conditional: Vec<f64>,
    kl: f64,
}

fn eval_rows(batch: &FeatureBatch, set: &TemplateSet) -> Vec<RowEval> {
    let prior = set.prior();
    (0..batch.rows())
        .into_par_iter()
        .map(|r| {
            let conditional = conditional_likelihood(&fitness_unchecked(batch.map(r), set));
            let kl = kl_to_uniform(&conditional, prior);
            RowEval { conditional, kl }
        })
        .collect()
}

pub fn mutual_information(batch: &FeatureBatch, set: &TemplateSet) -> Result<MIResult> {
    check_shape(batch, set)?;
    let rows = eval_rows(batch, set);
    let kls: Vec<f64> = rows.iter().map(|r| r.kl).collect();
    let ln_n = (set.len() as f64).ln();
    let mean = |vals: &[f64]| (pairwise_sum(vals) / vals.len() as f64).min(ln_n);
    let mi = mean(&kls);

    let channels = batch.channels();
    let per_channel_mi = (0..channels)
        .map(|c| {
            let vals: Vec<f64> = kls.iter().skip(c).step_by(channels).copied().collect();
            mean(&vals)
        })
        .collect();

    let n_templates = set.len();
    let conditional: Vec<f64> = rows.into_iter().flat_map(|r| r.conditional).collect();
    let marginal = marginal(&conditional, n_templates)?;
    Ok(MIResult {
        mi,
        per_channel_mi,
        conditional,
        n_templates,
        marginal,
    })
}

/// Explainable channel loss `-MI` and its exact gradient with respect to every
/// feature-map entry.
///
/// Per row, `d KL / d f_k = p_k (ln p_k - sum_T p_T ln p_T)`, chained through
/// the linear fitness map and scaled by `1 / (b*c)`.
pub fn ecloss_and_gradient(batch: &FeatureBatch, set: &TemplateSet) -> Result<(f64, Tensor)> {
    check_shape(batch, set)?;
    let n_rows = batch.rows();
    let cells = set.params().cells();
    let prior = set.prior();
    let scale = 1.0 / n_rows as f64;

    let per_row: Vec<(f64, Vec<f64>)> = (0..n_rows)
        .into_par_iter()
        .map(|r| {
            let p = conditional_likelihood(&fitness_unchecked(batch.map(r), set));
            let kl = kl_to_uniform(&p, prior);
            let neg_entropy: f64 = p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum();
            let mut grad = vec![0.0; cells];
            for (q, t) in p.iter().zip(set.templates()) {
                if *q <= 0.0 {
                    continue;
                }
                // ECLoss = -MI, hence the sign flip.
                let coeff = -scale * q * (q.ln() - neg_entropy);
                for (g, v) in grad.iter_mut().zip(t.values()) {
                    *g += coeff * v;
                }
            }
            (kl, grad)
        })
        .collect();

    let kls: Vec<f64> = per_row.iter().map(|(kl, _)| *kl).collect();
    let loss = -(pairwise_sum(&kls) * scale).min((set.len() as f64).ln());
    let data: Vec<f64> = per_row.into_iter().flat_map(|(_, g)| g).collect();
    let grad = Tensor::new(batch.tensor().shape().to_vec(), data)?;
    Ok((loss, grad))
}

/// How the ECLoss weight evolves during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSchedule {
    Fixed,
    /// Every `window` steps: grow beta by `up` when the total loss fell over
    /// the window, shrink by `down` when it rose, clamped to `[min, max]`.
    Auto {
        window: usize,
        up: f64,
        down: f64,
        min: f64,
        max: f64,
    },
}

impl BetaSchedule {
    pub fn auto_default() -> Self {
        BetaSchedule::Auto {
            window: 50,
            up: 1.5,
            down: 0.5,
            min: 1e-7,
            max: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Classification weight.
    pub alpha: f64,
    /// ECLoss weight.
    pub beta: f64,
    pub beta_schedule: BetaSchedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-5,
            beta_schedule: BetaSchedule::Fixed,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(domain(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(domain(format!("beta must be >= 0, got {}", self.beta)));
        }
        if let BetaSchedule::Auto { window, min, max, up, down } = self.beta_schedule {
            if window < 2 || !(min > 0.0 && min <= max) || up <= 0.0 || down <= 0.0 {
                return Err(domain("invalid automatic beta schedule"));
            }
        }
        Ok(())
    }
}

/// `alpha * cls_loss - beta * mi`.
pub fn total_loss(cls_loss: f64, mi: f64, config: &LossConfig) -> f64 {
    config.alpha * cls_loss - config.beta * mi
}

/// Applies the automatic beta rule to the most recent window of total losses.
pub fn update_beta(config: &LossConfig, history: &[f64]) -> LossConfig {
    let BetaSchedule::Auto { window, up, down, min, max } = config.beta_schedule else {
        return *config;
    };
    let recent = &history[history.len().saturating_sub(window)..];
    if recent.len() < 2 {
        return *config;
    }
    let (first, last) = (recent[0], recent[recent.len() - 1]);
    let factor = if last < first {
        up
    } else if last > first {
        down
    } else {
        1.0
    };
    LossConfig {
        beta: (config.beta * factor).clamp(min, max),
        ..*config
    }
}
