//! Distillation objectives.
//!
//! `‖·‖²` everywhere means the sum of squares per sample, averaged over the
//! batch.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub use_sem: bool,
    pub use_act: bool,
    pub use_lb: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            eta: 0.5,
            gamma: 0.05,
            kappa: 2.0,
            use_sem: true,
            use_act: true,
            use_lb: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("kappa", self.kappa),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{k} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.use_sem {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.use_act {
            self.beta
        } else {
            0.0
        }
    }

    pub fn effective_gamma(&self) -> f64 {
        if self.use_lb {
            self.gamma
        } else {
            0.0
        }
    }
}

/// `λ_l = (l / L)^κ` for `l = 1..=L`.
pub fn lambda_weights(layers: usize, kappa: f64) -> Vec<f64> {
    (1..=layers).map(|l| (l as f64 / layers as f64).powf(kappa)).collect()
}

/// Instance term `mean_b(1 − cos(s_b, t_b))` plus `η ‖C(s) − C(t)‖_F²`
/// where `C` is the `B × B` pairwise cosine matrix of the batch.
///
/// `s_tea` should not carry gradients; pass it as a constant.
pub fn semantic_loss(g: &mut Graph<'_>, s_stu: Var, s_tea: Var, eta: f64) -> Result<Var> {
    let cos = g.cosine_rows(s_stu, s_tea)?;
    let mean_cos = g.mean(cos)?;
    let inst = g.rsub(1.0, mean_cos)?;
    if eta == 0.0 {
        return Ok(inst);
    }
    let gs = cosine_gram(g, s_stu)?;
    let gt = cosine_gram(g, s_tea)?;
    let rel = g.frob_sq_diff(gs, gt)?;
    let rel = g.scale(rel, eta)?;
    g.add(inst, rel)
}

fn cosine_gram(g: &mut Graph<'_>, s: Var) -> Result<Var> {
    let n = g.l2_normalize_rows(s).map_err(|_| Error::Invalid("semantic_loss: zero-norm capsule".into()))?;
    let nt = g.transpose(n)?;
    g.matmul(n, nt)
}

/// Batch mean of `‖x − y‖²` over rows.
pub fn batch_sq_error(g: &mut Graph<'_>, x: Var, y: Var) -> Result<Var> {
    let rows = g.dims(x).0 as f64;
    let d = g.sub(x, y)?;
    let s = g.sum_sq(d)?;
    g.scale(s, 1.0 / rows)
}

/// Triple-MSE: ground truth, teacher layer prediction and the previous
/// student layer's prediction behind a stop-gradient. `prev` is `None` for
/// the first layer. `stop_gradient = false` exists only for the regression
/// test that shows the stop-gradient matters.
pub fn action_loss(
    g: &mut Graph<'_>,
    pred: Var,
    target: Var,
    teacher: Var,
    prev: Option<Var>,
    stop_gradient: bool,
) -> Result<Var> {
    let gt = batch_sq_error(g, pred, target)?;
    let tea = batch_sq_error(g, pred, teacher)?;
    let mut total = g.add(gt, tea)?;
    if let Some(p) = prev {
        let p = if stop_gradient { g.stop_grad(p)? } else { p };
        let cons = batch_sq_error(g, pred, p)?;
        total = g.add(total, cons)?;
    }
    Ok(total)
}

/// `mean_b Σ_l (g_{b,l} − ḡ_b)²` for gates `[B, L]`.
pub fn load_balance(g: &mut Graph<'_>, gates: Var) -> Result<Var> {
    let (b, l) = g.dims(gates);
    let mut centre = Tensor::identity(l);
    centre.data_mut().iter_mut().for_each(|v| *v -= 1.0 / l as f64);
    let c = g.constant(centre)?;
    let dev = g.matmul(gates, c)?;
    let s = g.sum_sq(dev)?;
    g.scale(s, 1.0 / b as f64)
}

/// Per-layer decomposition of the total objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub sem: Vec<f64>,
    pub act: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lb: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossReport {
    /// `Σ λ_l (α sem_l + β act_l) + γ lb` from the stored parts.
    pub fn recompose(&self) -> f64 {
        let distill: f64 = self
            .lambda
            .iter()
            .zip(self.sem.iter().zip(&self.act))
            .map(|(l, (s, a))| l * (self.alpha * s + self.beta * a))
            .sum();
        distill + self.gamma * self.lb
    }

    pub fn distill(&self) -> f64 {
        self.recompose() - self.gamma * self.lb
    }
}

/// Graph nodes of the per-layer terms; `total_loss` folds them.
pub struct LossTerms {
    pub sem: Vec<Option<Var>>,
    pub act: Vec<Option<Var>>,
    pub lb: Option<Var>,
}

/// `Σ_l λ_l (α sem_l + β act_l) + γ lb`. Disabled terms contribute zero and
/// are reported as zero.
pub fn total_loss(g: &mut Graph<'_>, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    let layers = terms.sem.len();
    let lambda = lambda_weights(layers, w.kappa);
    let (alpha, beta, gamma) = (w.effective_alpha(), w.effective_beta(), w.effective_gamma());
    let mut parts = Vec::new();
    let mut report = LossReport {
        lambda: lambda.clone(),
        alpha,
        beta,
        gamma,
        ..Default::default()
    };
    for l in 0..layers {
        let sem = terms.sem[l].map(|v| g.scalar(v)).unwrap_or(0.0);
        let act = terms.act[l].map(|v| g.scalar(v)).unwrap_or(0.0);
        report.sem.push(sem);
        report.act.push(act);
        if let Some(s) = terms.sem[l].filter(|_| alpha != 0.0) {
            parts.push(g.scale(s, lambda[l] * alpha)?);
        }
        if let Some(a) = terms.act[l].filter(|_| beta != 0.0) {
            parts.push(g.scale(a, lambda[l] * beta)?);
        }
    }
    if let Some(lb) = terms.lb {
        report.lb = g.scalar(lb);
        if gamma != 0.0 {
            parts.push(g.scale(lb, gamma)?);
        }
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => g.constant(Tensor::scalar(0.0))?,
    };
    for &p in parts.iter().skip(1) {
        total = g.add(total, p)?;
    }
    report.total = g.scalar(total);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn c(g: &mut Graph<'_>, rows: usize, cols: usize, v: Vec<f64>) -> Var {
        g.constant(Tensor::matrix(rows, cols, v)).unwrap()
    }

    #[test]
    fn semantic_identities() {
        let mut g = Graph::new();
        let s = c(&mut g, 2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let z = semantic_loss(&mut g, s, s, 0.5).unwrap();
        assert!(g.scalar(z).abs() < 1e-15);
        let a = c(&mut g, 1, 2, vec![1.0, 0.0]);
        let b = c(&mut g, 1, 2, vec![0.0, 2.0]);
        let v = semantic_loss(&mut g, a, b, 0.5).unwrap();
        assert_eq!(g.scalar(v), 1.0);
        let nb = c(&mut g, 1, 2, vec![-3.0, 0.0]);
        let v = semantic_loss(&mut g, a, nb, 0.5).unwrap();
        assert_eq!(g.scalar(v), 2.0);
    }

    #[test]
    fn semantic_rejects_zero_capsule() {
        let mut g = Graph::new();
        let a = c(&mut g, 1, 2, vec![0.0, 0.0]);
        let b = c(&mut g, 1, 2, vec![1.0, 0.0]);
        assert!(semantic_loss(&mut g, a, b, 0.5).is_err());
    }

    #[test]
    fn action_loss_counts() {
        let mut g = Graph::new();
        let zero = c(&mut g, 1, 7, vec![0.0; 7]);
        let one = c(&mut g, 1, 7, vec![1.0; 7]);
        let deep = action_loss(&mut g, zero, one, one, Some(one), true).unwrap();
        assert_eq!(g.scalar(deep), 21.0);
        let first = action_loss(&mut g, zero, one, one, None, true).unwrap();
        assert_eq!(g.scalar(first), 14.0);
        let same = action_loss(&mut g, one, one, one, Some(one), true).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn lambda_power_law() {
        assert_eq!(lambda_weights(4, 2.0), vec![0.0625, 0.25, 0.5625, 1.0]);
        assert_eq!(lambda_weights(5, 0.0), vec![1.0; 5]);
        for l in 1..9 {
            assert_eq!(*lambda_weights(l, 1.7).last().unwrap(), 1.0);
        }
    }

    #[test]
    fn load_balance_values() {
        let mut g = Graph::new();
        let u = c(&mut g, 1, 4, vec![0.3; 4]);
        let v = load_balance(&mut g, u).unwrap();
        assert!(g.scalar(v).abs() < 1e-30);
        let a = c(&mut g, 1, 2, vec![1.0, 0.0]);
        let v = load_balance(&mut g, a).unwrap();
        assert_eq!(g.scalar(v), 0.5);
        let b = c(&mut g, 1, 2, vec![0.2, 0.8]);
        let v = load_balance(&mut g, b).unwrap();
        assert!((g.scalar(v) - 0.18).abs() < 1e-15);
    }

    #[test]
    fn total_recomposes_and_gamma_zero_is_distill() {
        let mut g = Graph::new();
        let s1 = g.constant(Tensor::scalar(0.3)).unwrap();
        let s2 = g.constant(Tensor::scalar(0.1)).unwrap();
        let a1 = g.constant(Tensor::scalar(2.0)).unwrap();
        let a2 = g.constant(Tensor::scalar(1.5)).unwrap();
        let lb = g.constant(Tensor::scalar(0.7)).unwrap();
        let terms = LossTerms {
            sem: vec![Some(s1), Some(s2)],
            act: vec![Some(a1), Some(a2)],
            lb: Some(lb),
        };
        let (_, rep) = total_loss(&mut g, &terms, &LossWeights::default()).unwrap();
        assert!((rep.total - rep.recompose()).abs() < 1e-12);
        let w0 = LossWeights {
            gamma: 0.0,
            ..Default::default()
        };
        let (_, rep0) = total_loss(&mut g, &terms, &w0).unwrap();
        let distill = 0.25 * (0.3 + 2.0) + 1.0 * (0.1 + 1.5);
        assert!((rep0.total - distill).abs() < 1e-12);
        assert_eq!(rep0.lb, 0.7);
        let zero_terms = LossTerms {
            sem: vec![None, None],
            act: vec![None, None],
            lb: None,
        };
        let (_, rz) = total_loss(&mut g, &zero_terms, &LossWeights::default()).unwrap();
        assert_eq!(rz.total, 0.0);
    }
}
