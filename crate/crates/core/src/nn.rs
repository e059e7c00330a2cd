//! Parameter containers shared by every model in the crate.

use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{tensor_key, Graph, Var};
use crate::error::Result;
use crate::tensor::{hex, Tensor};

/// Anything that owns named parameter tensors.
///
/// Both visitors must yield the same tensors in the same order; that order
/// is the parameter order used by the optimizer and the checkpoint files.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn named_tensors<M: Module + ?Sized>(m: &M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

pub fn param_count<M: Module + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit(&mut |_, t| n += t.len());
    n
}

/// SHA-256 over names and contents of every parameter.
pub fn module_hash<M: Module + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    m.visit(&mut |n, t| {
        h.update((n.len() as u64).to_le_bytes());
        h.update(n.as_bytes());
        t.feed_hash(&mut h);
    });
    hex(&h.finalize())
}

pub fn set_trainable<M: Module + ?Sized>(m: &mut M, on: bool) {
    m.visit_mut(&mut |_, t| {
        t.requires_grad = on;
        if !on {
            t.grad = None;
        }
    });
}

pub fn zero_grads<M: Module + ?Sized>(m: &mut M) {
    m.visit_mut(&mut |_, t| t.grad = None);
}

/// Adds per-tensor gradients (keyed by tensor address, as produced by one
/// backward sweep over a graph that borrowed `m`) into the grad slots.
pub fn add_grads<M: Module + ?Sized>(m: &mut M, grads: &HashMap<usize, Vec<f64>>, scale: f64) {
    m.visit_mut(&mut |_, t| {
        if !t.requires_grad {
            return;
        }
        if let Some(g) = grads.get(&tensor_key(t)) {
            let slot = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += scale * v;
            }
        }
    });
}

/// Global L2 norm of all stored gradients.
pub fn grad_norm<M: Module + ?Sized>(m: &M) -> f64 {
    let mut s = 0.0;
    m.visit(&mut |_, t| {
        if let Some(g) = &t.grad {
            s += g.iter().map(|v| v * v).sum::<f64>();
        }
    });
    s.sqrt()
}

/// Rescales stored gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grads<M: Module + ?Sized>(m: &mut M, max_norm: f64) -> f64 {
    let total = grad_norm(m);
    if total > max_norm {
        let s = max_norm / (total + 1e-12);
        m.visit_mut(&mut |_, t| {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        });
    }
    total
}

/// Copies every tensor of `src` into `dst` by visit order. Shapes must agree.
pub fn copy_params<A: Module + ?Sized, B: Module + ?Sized>(src: &A, dst: &mut B) {
    let values: Vec<Vec<f64>> = {
        let mut v = Vec::new();
        src.visit(&mut |_, t| v.push(t.data().to_vec()));
        v
    };
    let mut i = 0;
    dst.visit_mut(&mut |n, t| {
        assert_eq!(t.len(), values[i].len(), "copy_params: size mismatch at {n}");
        t.data_mut().copy_from_slice(&values[i]);
        i += 1;
    });
}

/// `x @ W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = Tensor::kaiming_uniform(&[fan_in, fan_out], fan_in, rng).trainable();
        let b = bias.then(|| Tensor::zeros(&[fan_out]).trainable());
        Self { w, b }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]).trainable(),
            b: bias.then(|| Tensor::zeros(&[fan_out]).trainable()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        let y = g.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let bv = g.param(b);
                g.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}_w"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{prefix}_b"), b);
        }
    }

    pub fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}_w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}_b"), b);
        }
    }
}

/// Two-layer perceptron `Linear -> ReLU -> dropout -> Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(input, hidden, true, rng),
            out: Linear::new(hidden, output, true, rng),
        }
    }

    pub fn forward<'p, R: Rng>(&'p self, g: &mut Graph<'p>, x: Var, dropout: f64, rng: Option<&mut R>) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, dropout, rng)?;
        self.out.forward(g, h)
    }

    pub fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit_named(&format!("{prefix}/fc1"), f);
        self.out.visit_named(&format!("{prefix}/fc2"), f);
    }

    pub fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_named_mut(&format!("{prefix}/fc1"), f);
        self.out.visit_named_mut(&format!("{prefix}/fc2"), f);
    }
}
