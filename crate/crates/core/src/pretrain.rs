//! Joint training of the backbone, projection and both caption decoders on
//! (image, caption) pairs: SGD with momentum inside LookAhead, a warmup plus
//! cosine schedule per parameter family, and optional global-norm clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CaptionModel;
use crate::optim::{clip_global_norm, warmup_cosine, LookAheadState, SgdMomentum};
use crate::tape::{Mat, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Peak visual learning rate at `reference_batch`.
    pub reference_lr_visual: f64,
    /// Peak learning rate of projection and decoders at `reference_batch`.
    pub reference_lr_textual: f64,
    pub reference_batch: usize,
    /// Explicit peak rates; when absent the reference rates are scaled by
    /// `batch_size / reference_batch`.
    pub max_lr_visual: Option<f64>,
    pub max_lr_textual: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lookahead_alpha: f64,
    pub lookahead_k: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Fraction of pairs held out for perplexity.
    pub holdout_fraction: f64,
    /// Held-out perplexity is logged every this many steps and at the end.
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            reference_lr_visual: 0.2,
            reference_lr_textual: 1e-3,
            reference_batch: 256,
            max_lr_visual: None,
            max_lr_textual: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            lookahead_alpha: 0.5,
            lookahead_k: 5,
            warmup_steps: 50,
            total_steps: 600,
            batch_size: 16,
            seed: 0,
            clip_grad_norm: Some(10.0),
            holdout_fraction: 0.1,
            eval_every: 100,
        }
    }
}

impl PretrainConfig {
    fn scale(&self) -> f64 {
        self.batch_size as f64 / self.reference_batch as f64
    }

    pub fn peak_lr_visual(&self) -> f64 {
        self.max_lr_visual.unwrap_or(self.reference_lr_visual * self.scale())
    }

    pub fn peak_lr_textual(&self) -> f64 {
        self.max_lr_textual.unwrap_or(self.reference_lr_textual * self.scale())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pretrain.reference_lr_visual", self.reference_lr_visual),
            ("pretrain.reference_lr_textual", self.reference_lr_textual),
            ("pretrain.peak_lr_visual", self.peak_lr_visual()),
            ("pretrain.peak_lr_textual", self.peak_lr_textual()),
            ("pretrain.momentum", self.momentum),
            ("pretrain.lookahead_alpha", self.lookahead_alpha),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("pretrain.weight_decay", "must be non-negative"));
        }
        if self.lookahead_alpha > 1.0 {
            return Err(Error::config("pretrain.lookahead_alpha", "must be at most 1"));
        }
        for (field, v) in [
            ("pretrain.reference_batch", self.reference_batch),
            ("pretrain.batch_size", self.batch_size),
            ("pretrain.lookahead_k", self.lookahead_k),
            ("pretrain.eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::config(
                "pretrain.warmup_steps",
                format!("{} is not below total_steps {}", self.warmup_steps, self.total_steps),
            ));
        }
        if let Some(c) = self.clip_grad_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("pretrain.clip_grad_norm", "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("pretrain.holdout_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `(lr_visual, lr_textual)` at `step`.
pub fn lr_at_step(step: usize, config: &PretrainConfig) -> Result<(f64, f64)> {
    let f = warmup_cosine(step, config.warmup_steps, config.total_steps)?;
    Ok((f * config.peak_lr_visual(), f * config.peak_lr_textual()))
}

/// One training example: a channel-major image and its encoded caption.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPair {
    pub image: Mat,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogLine {
    pub step: usize,
    pub loss_fwd: f64,
    pub loss_bwd: f64,
    pub lr_visual: f64,
    pub lr_textual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ppl_holdout: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub log: Vec<PretrainLogLine>,
    /// Perplexity on the held-out pairs after the last step.
    pub holdout_perplexity: Option<f64>,
    pub holdout: Vec<usize>,
}

/// Splits `n` pair indices into `(train, holdout)`.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let held = if n < 2 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).min(n - 1)
    };
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x686f_6c64));
    let mut holdout = order.split_off(n - held);
    order.sort_unstable();
    holdout.sort_unstable();
    (order, holdout)
}

/// Per-token perplexity over both reading directions.
pub fn perplexity<'a>(model: &CaptionModel, pairs: impl IntoIterator<Item = &'a CaptionPair>) -> Result<f64> {
    let mut nll = 0.0;
    let mut positions = 0usize;
    for pair in pairs {
        let (g, vars) = model.image_caption_loss(&pair.image, &pair.tokens)?;
        nll += g.scalar(vars.total);
        positions += 2 * (pair.tokens.len() - 1);
    }
    if positions == 0 {
        return Err(Error::EmptyInput("perplexity pairs"));
    }
    Ok((nll / positions as f64).exp())
}

/// Mean forward/backward loss and gradients of one batch.
fn batch_gradients(model: &CaptionModel, batch: &[&CaptionPair]) -> Result<(f64, f64, Vec<Mat>)> {
    let mut grads = model.params.zeros_like();
    let weight = 1.0 / batch.len() as f64;
    let (mut fwd, mut bwd) = (0.0, 0.0);
    for pair in batch {
        let (g, vars) = model.image_caption_loss(&pair.image, &pair.tokens)?;
        fwd += g.scalar(vars.forward) * weight;
        bwd += g.scalar(vars.backward) * weight;
        g.backward(&[(vars.total, Mat::from_elem((1, 1), 1.0))])
            .accumulate_into(&mut grads, weight);
    }
    Ok((fwd, bwd, grads))
}

/// Trains `model` in place. On divergence the model is left at the last
/// parameters that produced a finite loss and a `Divergence` error returns.
pub fn run_pretraining(
    config: &PretrainConfig,
    model: &mut CaptionModel,
    pairs: &[CaptionPair],
) -> Result<PretrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus"));
    }
    let (train, holdout) = holdout_split(pairs.len(), config.holdout_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = SgdMomentum::new(&model.params, config.momentum, config.weight_decay);
    let mut lookahead = LookAheadState::from_store(&model.params, config.lookahead_alpha, config.lookahead_k);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.total_steps);
    let holdout_ppl = |model: &CaptionModel| -> Result<Option<f64>> {
        if holdout.is_empty() {
            Ok(None)
        } else {
            perplexity(model, holdout.iter().map(|&i| &pairs[i])).map(Some)
        }
    };

    for step in 0..config.total_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = train.clone();
                order.shuffle(&mut rng);
            }
            batch.push(&pairs[order.pop().expect("refilled")]);
        }
        let (lr_visual, lr_textual) = lr_at_step(step, config)?;
        let (loss_fwd, loss_bwd, mut grads) = batch_gradients(model, &batch)?;
        let diverged = |reason: String| Error::Divergence { step, reason };
        if !(loss_fwd + loss_bwd).is_finite() {
            return Err(diverged(format!("loss {}", loss_fwd + loss_bwd)));
        }
        if let Some(max) = config.clip_grad_norm {
            let norm = clip_global_norm(&mut grads, max);
            if !norm.is_finite() {
                return Err(diverged("non-finite gradient norm".into()));
            }
        }
        let before = model.params.clone();
        let lr = |g: ParamGroup| if g.is_visual() { lr_visual } else { lr_textual };
        if let Err(e) = sgd.step(&mut model.params, &grads, lr) {
            model.params = before;
            return Err(match e {
                Error::Divergence { reason, .. } => diverged(reason),
                other => other,
            });
        }
        lookahead.update_store(&mut model.params);
        if !model.params.all_finite() {
            model.params = before;
            return Err(diverged("non-finite parameters".into()));
        }
        let last = step + 1 == config.total_steps;
        let ppl_holdout = if (step + 1) % config.eval_every == 0 && !last {
            holdout_ppl(model)?
        } else {
            None
        };
        log::debug!("pretrain step {step}: fwd {loss_fwd:.4} bwd {loss_bwd:.4}");
        log.push(PretrainLogLine {
            step,
            loss_fwd,
            loss_bwd,
            lr_visual,
            lr_textual,
            ppl_holdout,
        });
    }
    model.params.round_to_f32();
    let holdout_perplexity = holdout_ppl(model)?;
    if let Some(line) = log.last_mut() {
        line.ppl_holdout = holdout_perplexity;
    }
    Ok(PretrainOutcome {
        log,
        holdout_perplexity,
        holdout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let cfg = PretrainConfig {
            max_lr_visual: Some(0.2),
            max_lr_textual: Some(0.01),
            warmup_steps: 10,
            total_steps: 50,
            ..Default::default()
        };
        assert_eq!(lr_at_step(10, &cfg).unwrap(), (0.2, 0.01));
        let (v, t) = lr_at_step(50, &cfg).unwrap();
        assert!(v.abs() < 1e-15 && t.abs() < 1e-15);
        assert_eq!(lr_at_step(5, &cfg).unwrap(), (0.1, 0.005));
        assert!(matches!(lr_at_step(51, &cfg), Err(Error::Range(_))));
    }

    #[test]
    fn reference_rates_scale_with_batch() {
        let cfg = PretrainConfig {
            batch_size: 64,
            reference_batch: 256,
            ..Default::default()
        };
        assert!((cfg.peak_lr_visual() - 0.05).abs() < 1e-15);
        assert!((cfg.peak_lr_textual() - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn warmup_must_precede_total() {
        let cfg = PretrainConfig {
            warmup_steps: 10,
            total_steps: 10,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "pretrain.warmup_steps"));
    }

    #[test]
    fn holdout_split_partitions() {
        let (train, held) = holdout_split(50, 0.1, 3);
        assert_eq!(held.len(), 5);
        let mut all: Vec<usize> = train.iter().chain(&held).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(holdout_split(1, 0.5, 0).1.len(), 0);
    }
}
