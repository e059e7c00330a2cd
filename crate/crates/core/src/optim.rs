use crate::error::{Error, Result};
use crate::nn::Module;

/// AdamW moment buffers for an ordered parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update. `params[i]` pairs with `grads[i]`; `decay[i]`
    /// selects decoupled weight decay for that tensor.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != decay.len() {
            return Err(Error::shape("adamw_step", "parameter/gradient lists differ in length"));
        }
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape("adamw_step", format!("parameter {i}: {} vs {}", p.len(), g.len())));
            }
        }
        self.begin(&sizes, grads.iter().map(Vec::as_slice), lr)?;
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p, &grads[i], decay[i], lr);
        }
        Ok(())
    }

    fn begin<'g>(&mut self, sizes: &[usize], grads: impl Iterator<Item = &'g [f64]>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {lr}")));
        }
        for (i, g) in grads.enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {i}"),
                });
            }
        }
        if self.first.is_empty() {
            self.first = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != sizes.len() || self.first.iter().zip(sizes).any(|(m, &n)| m.len() != n) {
            return Err(Error::shape("adamw_step", "parameter set changed between steps"));
        }
        self.step += 1;
        Ok(())
    }

    fn update(&mut self, i: usize, p: &mut [f64], g: &[f64], decay: bool, lr: f64) {
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let shrink = if decay { 1.0 - lr * self.weight_decay } else { 1.0 };
        let (m, v) = (&mut self.first[i], &mut self.second[i]);
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] = p[j] * shrink - lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let total = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if total > max_norm {
        let s = max_norm / (total + 1e-12);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    total
}

/// Linear warm-up to `base` over `warmup` steps, then cosine decay to zero
/// at `total`.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize, cosine: bool) -> f64 {
    if warmup > 0 && step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if !cosine {
        return base;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Applies one AdamW step to every trainable tensor of `module` using the
/// gradients stored in their `grad` slots. Matrices get weight decay;
/// vectors (biases, norm gains, router rows) do not.
pub fn step_module<M: Module + ?Sized>(module: &mut M, state: &mut OptimizerState, lr: f64) -> Result<()> {
    step_module_scaled(module, state, lr, |_| 1.0)
}

/// [`step_module`] with a per-tensor learning-rate multiplier chosen by name.
pub fn step_module_scaled<M: Module + ?Sized>(
    module: &mut M,
    state: &mut OptimizerState,
    lr: f64,
    scale: impl Fn(&str) -> f64,
) -> Result<()> {
    let mut sizes = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    module.visit(&mut |_, t| {
        if t.requires_grad {
            sizes.push(t.len());
            grads.push(t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()]));
        }
    });
    state.begin(&sizes, grads.iter().map(Vec::as_slice), lr)?;
    let mut i = 0;
    module.visit_mut(&mut |name, t| {
        if t.requires_grad {
            let decay = t.shape().len() >= 2;
            state.update(i, t.data_mut(), &grads[i], decay, lr * scale(name));
            i += 1;
        }
    });
    Ok(())
}
