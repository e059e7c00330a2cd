//! The routed student: a replica of the teacher backbone plus per-layer
//! capsule encoders and heads, and a router that decides per input which
//! layers run.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, EncoderOutputs};
use crate::error::{Error, Result};
use crate::graph::{encapsulate, CapsuleParams, GraphConfig};
use crate::nn::{Mlp, Module};
use crate::probe::TeacherProbe;
use crate::tensor::Tensor;
use crate::world::Episode;

/// One gate per layer: `g_l = σ(w_l · [mean(v_e); l_e] + b_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `[2d, 1]` per layer
    pub w: Vec<Tensor>,
    /// `[1]` per layer
    pub b: Vec<Tensor>,
}

impl RouterParams {
    pub fn new(layers: usize, width: usize, bias_init: f64) -> Self {
        Self {
            w: (0..layers).map(|_| Tensor::zeros(&[2 * width, 1]).trainable()).collect(),
            b: (0..layers).map(|_| Tensor::full(&[1], bias_init).trainable()).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.w.len()
    }

    fn visit_named(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            f(&format!("router/layer{i}/w"), w);
            f(&format!("router/layer{i}/b"), b);
        }
    }

    fn visit_named_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (w, b)) in self.w.iter_mut().zip(self.b.iter_mut()).enumerate() {
            f(&format!("router/layer{i}/w"), w);
            f(&format!("router/layer{i}/b"), b);
        }
    }
}

impl Module for RouterParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_named(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_named_mut(f)
    }
}

/// Gate values and the execution mask they induce at threshold `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub g: Vec<f64>,
    pub mask: Vec<bool>,
    pub tau: f64,
}

impl GateVector {
    /// `tau = 0` is accepted and means "execute everything".
    pub fn new(g: Vec<f64>, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Invalid(format!("tau must lie in [0, 1), got {tau}")));
        }
        let mask = g.iter().map(|&v| v >= tau).collect();
        Ok(Self { g, mask, tau })
    }

    pub fn executed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Mask that runs every layer except the `n` with the lowest gates (ties
/// skip the deeper layer first).
pub fn skip_lowest(g: &[f64], n: usize) -> Result<Vec<bool>> {
    if n >= g.len() {
        return Err(Error::Invalid(format!("cannot skip {n} of {} layers", g.len())));
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[a].total_cmp(&g[b]).then(b.cmp(&a)));
    let mut mask = vec![true; g.len()];
    for &l in &order[..n] {
        mask[l] = false;
    }
    Ok(mask)
}

/// Per-layer outputs of a soft-gated pass.
#[derive(Debug, Clone)]
pub struct SoftForward {
    /// `[1, L]`
    pub gates: Var,
    pub z0: Var,
    /// `z_1..z_L`
    pub states: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct LayerOutputs {
    /// `[1, d_c]`
    pub capsule: Var,
    /// `[1, 7]`
    pub action: Var,
}

/// Result of a hard-routed pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub z_hat: Tensor,
    pub gates: GateVector,
    pub action: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    /// replica of the teacher; its native head is the final head `H^stu`
    pub backbone: Backbone,
    pub graph: Vec<CapsuleParams>,
    pub heads: Vec<Mlp>,
    pub router: RouterParams,
    pub graph_cfg: GraphConfig,
}

impl Module for StudentModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit_named("student/backbone", f);
        for (i, (c, h)) in self.graph.iter().zip(&self.heads).enumerate() {
            c.visit_named(&format!("student/layer{i}"), f);
            h.visit_named(&format!("student/layer{i}/head"), f);
        }
        self.router.visit_named(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_named_mut("student/backbone", f);
        for (i, (c, h)) in self.graph.iter_mut().zip(self.heads.iter_mut()).enumerate() {
            c.visit_named_mut(&format!("student/layer{i}"), f);
            h.visit_named_mut(&format!("student/layer{i}/head"), f);
        }
        self.router.visit_named_mut(f);
    }
}

impl StudentModel {
    /// Self-derived initialisation: the backbone and final head are copied
    /// from the teacher, capsule encoders and per-layer heads from the
    /// trained probe.
    pub fn from_teacher(teacher: &Backbone, probe: &TeacherProbe, bias_init: f64) -> Result<Self> {
        let layers = teacher.cfg.layers;
        if probe.graph.len() != layers {
            return Err(Error::shape(
                "student_init",
                format!("probe has {} layers, teacher {layers}", probe.graph.len()),
            ));
        }
        let mut backbone = teacher.clone();
        crate::nn::set_trainable(&mut backbone, true);
        let mut graph = probe.graph.clone();
        for c in &mut graph {
            for t in [&mut c.phi, &mut c.psi, &mut c.w1, &mut c.w2, &mut c.wp, &mut c.proj] {
                t.requires_grad = true;
                t.grad = None;
            }
        }
        let mut heads = probe.heads.clone();
        for h in &mut heads {
            h.visit_named_mut("head", &mut |_, t| {
                t.requires_grad = true;
                t.grad = None;
            });
        }
        Ok(Self {
            backbone,
            graph,
            heads,
            router: RouterParams::new(layers, teacher.cfg.width, bias_init),
            graph_cfg: probe.cfg.clone(),
        })
    }

    pub fn layers(&self) -> usize {
        self.backbone.layers.len()
    }

    /// Gates `[1, L]` from the pooled encoder outputs.
    pub fn compute_gates<'p>(&'p self, g: &mut Graph<'p>, enc: EncoderOutputs) -> Result<Var> {
        let v = g.mean_rows(enc.visual)?;
        let x = g.concat_cols(&[v, enc.language])?;
        let mut gates = Vec::with_capacity(self.layers());
        for (w, b) in self.router.w.iter().zip(&self.router.b) {
            let (wv, bv) = (g.param(w), g.param(b));
            let logit = g.matmul(x, wv)?;
            let logit = g.add_row(logit, bv)?;
            gates.push(g.sigmoid(logit)?);
        }
        g.concat_cols(&gates)
    }

    /// Gate values for one episode, outside any training graph.
    pub fn gate_values(&self, e: &Episode) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let enc = self.backbone.encode_episode(&mut g, e)?;
        let gates = self.compute_gates(&mut g, enc)?;
        Ok(g.value(gates).to_vec())
    }

    /// `z_l = g_l · layer_l(z_{l-1}) + (1 − g_l) · z_{l-1}` for every layer.
    /// `gates` is a `[1, L]` node, usually from [`compute_gates`](Self::compute_gates).
    pub fn soft_gated_forward<'p>(&'p self, g: &mut Graph<'p>, enc: EncoderOutputs, gates: Var) -> Result<SoftForward> {
        let l_count = self.layers();
        if g.dims(gates) != (1, l_count) {
            return Err(Error::shape("soft_gated_forward", format!("gates {:?}, expected [1, {l_count}]", g.shape(gates))));
        }
        let z0 = Backbone::initial_state(g, enc)?;
        let mut z = z0;
        let mut states = Vec::with_capacity(l_count);
        for l in 0..l_count {
            let step = |g: &mut Graph<'p>| -> Result<Var> {
                let tmp = self.backbone.layer_forward(g, l, z)?;
                let gl = g.slice_cols(gates, l, l + 1)?;
                let on = g.scale_by(tmp, gl)?;
                let keep = g.one_minus(gl)?;
                let off = g.scale_by(z, keep)?;
                g.add(on, off)
            };
            z = step(g).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("student layer {l}: {context}"),
                },
                other => other,
            })?;
            states.push(z);
        }
        Ok(SoftForward { gates, z0, states })
    }

    /// Student capsule and per-layer head prediction for `z_l`.
    pub fn layer_outputs<'p, R: Rng>(
        &'p self,
        g: &mut Graph<'p>,
        layer: usize,
        z: Var,
        mut rng: Option<&mut R>,
    ) -> Result<LayerOutputs> {
        let enc = encapsulate(g, z, &self.graph[layer], &self.graph_cfg, rng.as_deref_mut())?;
        let action = self.heads[layer].forward(g, enc.capsule, self.graph_cfg.dropout, rng)?;
        Ok(LayerOutputs {
            capsule: enc.capsule,
            action,
        })
    }

    /// Runs exactly the layers selected by `mask`; skipped layers pass the
    /// state through untouched. Returns `ẑ`.
    pub fn masked_forward<'p>(&'p self, g: &mut Graph<'p>, enc: EncoderOutputs, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.layers() {
            return Err(Error::shape("hard_routed_forward", format!("mask length {} vs {} layers", mask.len(), self.layers())));
        }
        let mut z = Backbone::initial_state(g, enc)?;
        for (l, &run) in mask.iter().enumerate() {
            if run {
                z = self.backbone.layer_forward(g, l, z)?;
            }
        }
        Ok(z)
    }

    /// `â = H^stu(ẑ)`; the running state after the last position already is
    /// the state of the last executed layer.
    pub fn predict_action<'p>(&'p self, g: &mut Graph<'p>, z_hat: Var) -> Result<Var> {
        self.backbone.native_action_head(g, z_hat)
    }

    /// Inference with threshold `tau`.
    pub fn hard_routed_forward(&self, e: &Episode, tau: f64) -> Result<Routed> {
        self.routed_with(e, |g| GateVector::new(g.to_vec(), tau))
    }

    /// Inference that skips the `n` lowest-gated layers of each input.
    pub fn skip_n_forward(&self, e: &Episode, n: usize) -> Result<Routed> {
        self.routed_with(e, |g| {
            let mask = skip_lowest(g, n)?;
            Ok(GateVector {
                g: g.to_vec(),
                mask,
                tau: f64::NAN,
            })
        })
    }

    /// Inference with an explicit execution mask.
    pub fn forward_with_mask(&self, e: &Episode, mask: &[bool]) -> Result<Routed> {
        self.routed_with(e, |g| {
            Ok(GateVector {
                g: g.to_vec(),
                mask: mask.to_vec(),
                tau: f64::NAN,
            })
        })
    }

    fn routed_with(&self, e: &Episode, decide: impl FnOnce(&[f64]) -> Result<GateVector>) -> Result<Routed> {
        let mut g = Graph::new();
        let enc = self.backbone.encode_episode(&mut g, e)?;
        let gv = self.compute_gates(&mut g, enc)?;
        let gates = decide(g.value(gv))?;
        let z = self.masked_forward(&mut g, enc, &gates.mask)?;
        let a = self.predict_action(&mut g, z)?;
        Ok(Routed {
            z_hat: g.to_tensor(z),
            gates,
            action: g.to_tensor(a),
        })
    }

    /// Soft pass with externally fixed gate values, returning `z_L`. Used to
    /// compare the training path with routed inference.
    pub fn soft_forward_fixed(&self, e: &Episode, gates: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.backbone.encode_episode(&mut g, e)?;
        let gv = g.constant_slice(&[1, gates.len()], gates)?;
        let out = self.soft_gated_forward(&mut g, enc, gv)?;
        Ok(g.to_tensor(*out.states.last().expect("layers >= 2")))
    }
}

/// Dropout RNG type used on training graphs.
pub type TrainRng = ChaCha8Rng;
