//! SGD with momentum, the LookAhead wrapper, Adam, learning-rate schedules, and
//! global-norm clipping. Optimizers act on a whole [`ParamStore`] with one
//! gradient matrix per parameter, in store order.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tape::{Mat, ParamGroup, ParamStore};

fn ensure_finite(grad: &Mat) -> Result<()> {
    if grad.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: 0,
            reason: "non-finite gradient".into(),
        })
    }
}

/// `v ← momentum·v + (g + weight_decay·p)`, then `p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut Mat,
    grad: &Mat,
    velocity: &mut Mat,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    ensure_finite(grad)?;
    if params.dim() != grad.dim() || params.dim() != velocity.dim() {
        return Err(Error::Dimension(format!(
            "param {:?}, grad {:?}, velocity {:?}",
            params.dim(),
            grad.dim(),
            velocity.dim()
        )));
    }
    ndarray::Zip::from(&mut *params)
        .and(grad)
        .and(&mut *velocity)
        .for_each(|p, &g, v| {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        });
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Mat>,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.zeros_like(),
        }
    }

    /// One update; parameters flagged `decay = false` skip weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        for ((entry, g), v) in store.entries_mut().zip(grads).zip(&mut self.velocity) {
            let wd = if entry.decay { self.weight_decay } else { 0.0 };
            sgd_momentum_step(&mut entry.value, g, v, lr(entry.group), self.momentum, wd)?;
        }
        Ok(())
    }
}

/// Slow weights and the inner-step counter.
#[derive(Debug, Clone)]
pub struct LookAheadState {
    pub alpha: f64,
    pub k: usize,
    slow: Vec<Mat>,
    counter: usize,
}

impl LookAheadState {
    pub fn new(fast: &[Mat], alpha: f64, k: usize) -> Self {
        assert!(k > 0, "lookahead needs k >= 1");
        Self {
            alpha,
            k,
            slow: fast.to_vec(),
            counter: 0,
        }
    }

    pub fn from_store(store: &ParamStore, alpha: f64, k: usize) -> Self {
        let fast: Vec<Mat> = store.entries().iter().map(|e| e.value.clone()).collect();
        Self::new(&fast, alpha, k)
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn slow(&self) -> &[Mat] {
        &self.slow
    }

    /// Call after every inner step. Returns true when a sync happened.
    pub fn update<'a>(&mut self, fast: impl IntoIterator<Item = &'a mut Mat>) -> bool {
        self.counter += 1;
        if self.counter < self.k {
            return false;
        }
        self.counter = 0;
        let a = self.alpha;
        for (slow, fast) in self.slow.iter_mut().zip(fast) {
            // convex-combination form: exact at a = 0 and a = 1
            ndarray::Zip::from(&mut *slow).and(&mut *fast).for_each(|s, f| {
                *s = (1.0 - a) * *s + a * *f;
                *f = *s;
            });
        }
        true
    }

    pub fn update_store(&mut self, store: &mut ParamStore) -> bool {
        self.update(store.entries_mut().map(|e| &mut e.value))
    }
}

/// Functional form of [`LookAheadState::update`].
pub fn lookahead_update(mut state: LookAheadState, mut fast: Vec<Mat>) -> (LookAheadState, Vec<Mat>) {
    state.update(fast.iter_mut());
    (state, fast)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: store.zeros_like(),
            v: store.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((entry, g), (m, v)) in store
            .entries_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ensure_finite(g)?;
            let wd = if entry.decay { self.weight_decay } else { 0.0 };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(&mut entry.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Linear warmup from 0 to 1 over `warmup` steps, then cosine decay to 0 at `total`.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize) -> Result<f64> {
    if step > total {
        return Err(Error::Range(format!("step {step} beyond total_steps {total}")));
    }
    if step < warmup {
        return Ok(step as f64 / warmup as f64);
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return Ok(1.0);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(0.5 * (1.0 + (PI * progress).cos()))
}

/// Linear warmup over `warmup` steps, then constant.
pub fn warmup_constant(step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        1.0
    } else {
        step as f64 / warmup as f64
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads {
            *g *= k;
        }
    }
    norm
}
