//! The toy multimodal policy: modality encoders, an `L`-layer pre-norm
//! transformer trunk over `[visual tokens; instruction token]`, and a
//! mean-pool MLP action head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Module};
use crate::tensor::Tensor;
use crate::world::{Episode, ACTION_DIMS, INSTRUCTION_DIMS};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub token_dim: usize,
    pub instruction_dim: usize,
    pub capsule_dim: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 64,
            heads: 4,
            ffn_mult: 2,
            token_dim: 16,
            instruction_dim: INSTRUCTION_DIMS,
            capsule_dim: 32,
            head_hidden: 64,
            seed: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::config(m.to_string()));
        if self.layers < 2 {
            return err("backbone.layers must be >= 2");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return err("backbone.width must be divisible by backbone.heads");
        }
        if self.capsule_dim == 0 || self.capsule_dim > self.width {
            return err("backbone.capsule_dim must lie in [1, backbone.width]");
        }
        if self.ffn_mult == 0 || self.head_hidden == 0 {
            return err("backbone.ffn_mult and backbone.head_hidden must be >= 1");
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.width * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// One pre-norm residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl LayerParams {
    fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        let sq = |rng: &mut ChaCha8Rng| Tensor::kaiming_uniform(&[d, d], d, rng).trainable();
        Self {
            ln1_g: Tensor::full(&[d], 1.0).trainable(),
            ln1_b: Tensor::zeros(&[d]).trainable(),
            wq: sq(rng),
            wk: sq(rng),
            wv: sq(rng),
            wo: sq(rng),
            ln2_g: Tensor::full(&[d], 1.0).trainable(),
            ln2_b: Tensor::zeros(&[d]).trainable(),
            ff1: Linear::new(d, cfg.ffn_dim(), true, rng),
            ff2: Linear::new(cfg.ffn_dim(), d, true, rng),
        }
    }

    fn visit_named(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{p}/ln1_g"), &self.ln1_g);
        f(&format!("{p}/ln1_b"), &self.ln1_b);
        f(&format!("{p}/wq"), &self.wq);
        f(&format!("{p}/wk"), &self.wk);
        f(&format!("{p}/wv"), &self.wv);
        f(&format!("{p}/wo"), &self.wo);
        f(&format!("{p}/ln2_g"), &self.ln2_g);
        f(&format!("{p}/ln2_b"), &self.ln2_b);
        self.ff1.visit_named(&format!("{p}/ff1"), f);
        self.ff2.visit_named(&format!("{p}/ff2"), f);
    }

    fn visit_named_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{p}/ln1_g"), &mut self.ln1_g);
        f(&format!("{p}/ln1_b"), &mut self.ln1_b);
        f(&format!("{p}/wq"), &mut self.wq);
        f(&format!("{p}/wk"), &mut self.wk);
        f(&format!("{p}/wv"), &mut self.wv);
        f(&format!("{p}/wo"), &mut self.wo);
        f(&format!("{p}/ln2_g"), &mut self.ln2_g);
        f(&format!("{p}/ln2_b"), &mut self.ln2_b);
        self.ff1.visit_named_mut(&format!("{p}/ff1"), f);
        self.ff2.visit_named_mut(&format!("{p}/ff2"), f);
    }

    /// Sets every weight and bias of the block to zero (norm gains stay 1).
    pub fn zero_weights(&mut self) {
        for t in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            t.data_mut().fill(0.0);
        }
        for l in [&mut self.ff1, &mut self.ff2] {
            l.w.data_mut().fill(0.0);
            if let Some(b) = &mut l.b {
                b.data_mut().fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutputs {
    /// `[N_v, d]`
    pub visual: Var,
    /// `[1, d]`
    pub language: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub enc_v: Linear,
    pub enc_l: Linear,
    pub layers: Vec<LayerParams>,
    pub head: Mlp,
}

impl Module for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_named("backbone", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_named_mut("backbone", f);
    }
}

impl Backbone {
    pub fn visit_named(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.enc_v.visit_named(&format!("{p}/enc_v"), f);
        self.enc_l.visit_named(&format!("{p}/enc_l"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_named(&format!("{p}/layer{i}"), f);
        }
        self.head.visit_named(&format!("{p}/head"), f);
    }

    pub fn visit_named_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.enc_v.visit_named_mut(&format!("{p}/enc_v"), f);
        self.enc_l.visit_named_mut(&format!("{p}/enc_l"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_named_mut(&format!("{p}/layer{i}"), f);
        }
        self.head.visit_named_mut(&format!("{p}/head"), f);
    }

    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc_v = Linear::new(cfg.token_dim, cfg.width, true, &mut rng);
        let enc_l = Linear::new(cfg.instruction_dim, cfg.width, true, &mut rng);
        let layers = (0..cfg.layers).map(|_| LayerParams::new(cfg, &mut rng)).collect();
        let head = Mlp::new(cfg.width, cfg.head_hidden, ACTION_DIMS, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            enc_v,
            enc_l,
            layers,
            head,
        })
    }

    pub fn encode<'p>(&'p self, g: &mut Graph<'p>, visual: &Tensor, instruction: &Tensor) -> Result<EncoderOutputs> {
        let (n, din) = visual.dims2();
        if din != self.cfg.token_dim || instruction.len() != self.cfg.instruction_dim {
            return Err(Error::shape(
                "encode",
                format!(
                    "visual [{n},{din}] / instruction {} vs config token_dim {} / instruction_dim {}",
                    instruction.len(),
                    self.cfg.token_dim,
                    self.cfg.instruction_dim
                ),
            ));
        }
        let v = g.constant_slice(&[n, din], visual.data())?;
        let l = g.constant_slice(&[1, instruction.len()], instruction.data())?;
        Ok(EncoderOutputs {
            visual: self.enc_v.forward(g, v)?,
            language: self.enc_l.forward(g, l)?,
        })
    }

    pub fn encode_episode<'p>(&'p self, g: &mut Graph<'p>, e: &Episode) -> Result<EncoderOutputs> {
        self.encode(g, &e.visual, &e.instruction)
    }

    /// `h_0 = [v_e; l_e]`
    pub fn initial_state(g: &mut Graph<'_>, enc: EncoderOutputs) -> Result<Var> {
        g.concat_rows(&[enc.visual, enc.language])
    }

    /// Multi-head attention mixing before the output projection:
    /// `concat_h softmax(q_h k_hᵀ / √d_h) v_h` on the normed input.
    pub fn attention_mix<'p>(&'p self, g: &mut Graph<'p>, layer: usize, normed: Var) -> Result<Var> {
        let p = &self.layers[layer];
        let (wq, wk, wv) = (g.param(&p.wq), g.param(&p.wk), g.param(&p.wv));
        let q = g.matmul(normed, wq)?;
        let k = g.matmul(normed, wk)?;
        let v = g.matmul(normed, wv)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let w = g.softmax_rows(s)?;
            outs.push(g.matmul(w, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }

    /// One residual block applied to `x: [N, d]`.
    pub fn layer_forward<'p>(&'p self, g: &mut Graph<'p>, layer: usize, x: Var) -> Result<Var> {
        let p = &self.layers[layer];
        let (g1, b1) = (g.param(&p.ln1_g), g.param(&p.ln1_b));
        let h = g.layer_norm_rows(x, g1, b1, LN_EPS)?;
        let mix = self.attention_mix(g, layer, h)?;
        let wo = g.param(&p.wo);
        let attn = g.matmul(mix, wo)?;
        let x1 = g.add(x, attn)?;
        let (g2, b2) = (g.param(&p.ln2_g), g.param(&p.ln2_b));
        let h2 = g.layer_norm_rows(x1, g2, b2, LN_EPS)?;
        let f = p.ff1.forward(g, h2)?;
        let f = g.relu(f)?;
        let f = p.ff2.forward(g, f)?;
        g.add(x1, f)
    }

    /// Runs every layer; returns `h_1..h_L`.
    pub fn forward_all_layers<'p>(&'p self, g: &mut Graph<'p>, enc: EncoderOutputs) -> Result<Vec<Var>> {
        let mut x = Self::initial_state(g, enc)?;
        let mut states = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            x = self.layer_forward(g, l, x).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("backbone layer {l}: {context}"),
                },
                other => other,
            })?;
            states.push(x);
        }
        Ok(states)
    }

    /// Mean-pooled representation through the two-layer head: `[1, 7]`.
    pub fn native_action_head<'p>(&'p self, g: &mut Graph<'p>, h: Var) -> Result<Var> {
        let pooled = g.mean_rows(h)?;
        self.head.forward::<ChaCha8Rng>(g, pooled, 0.0, None)
    }

    /// Dense teacher prediction for one episode, outside any training graph.
    pub fn predict(&self, e: &Episode) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.encode_episode(&mut g, e)?;
        let hs = self.forward_all_layers(&mut g, enc)?;
        let a = self.native_action_head(&mut g, *hs.last().expect("layers >= 2"))?;
        Ok(g.to_tensor(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::module_hash;
    use crate::world::{gen_episode, WorldConfig};

    fn small() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            width: 32,
            heads: 4,
            ..Default::default()
        }
    }

    #[test]
    fn config_invariants() {
        let mut c = small();
        c.width = 30;
        assert!(Backbone::new(&c).is_err());
        let mut c = small();
        c.layers = 1;
        assert!(Backbone::new(&c).is_err());
        let mut c = small();
        c.capsule_dim = 33;
        assert!(Backbone::new(&c).is_err());
    }

    #[test]
    fn zero_inputs_zero_bias_give_zero_embeddings() {
        let b = Backbone::new(&small()).unwrap();
        let mut g = Graph::new();
        let enc = b.encode(&mut g, &Tensor::zeros(&[6, 16]), &Tensor::zeros(&[17])).unwrap();
        assert!(g.value(enc.visual).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(enc.visual), &[6, 32]);
        assert_eq!(g.shape(enc.language), &[1, 32]);
    }

    #[test]
    fn encoder_rejects_dim_mismatch() {
        let b = Backbone::new(&small()).unwrap();
        let mut g = Graph::new();
        assert!(b.encode(&mut g, &Tensor::zeros(&[6, 15]), &Tensor::zeros(&[17])).is_err());
    }

    #[test]
    fn layer_count_and_shapes() {
        let b = Backbone::new(&small()).unwrap();
        let e = gen_episode(&WorldConfig::default(), 0).unwrap();
        let mut g = Graph::new();
        let enc = b.encode_episode(&mut g, &e).unwrap();
        let hs = b.forward_all_layers(&mut g, enc).unwrap();
        assert_eq!(hs.len(), 2);
        for h in hs {
            assert_eq!(g.shape(h), &[9, 32]);
        }
    }

    #[test]
    fn zero_weights_give_residual_identity() {
        let mut b = Backbone::new(&small()).unwrap();
        b.layers.iter_mut().for_each(LayerParams::zero_weights);
        let e = gen_episode(&WorldConfig::default(), 3).unwrap();
        let mut g = Graph::new();
        let enc = b.encode_episode(&mut g, &e).unwrap();
        let h0 = Backbone::initial_state(&mut g, enc).unwrap();
        let hs = b.forward_all_layers(&mut g, enc).unwrap();
        assert_eq!(g.value(*hs.last().unwrap()), g.value(h0));
    }

    #[test]
    fn zero_head_gives_zero_action() {
        let mut b = Backbone::new(&small()).unwrap();
        b.head.out.w.data_mut().fill(0.0);
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[9, 32])).unwrap();
        let a = b.native_action_head(&mut g, h).unwrap();
        assert_eq!(g.value(a), &[0.0; 7]);
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = Backbone::new(&small()).unwrap();
        let b = Backbone::new(&small()).unwrap();
        assert_eq!(module_hash(&a), module_hash(&b));
        let e = gen_episode(&WorldConfig::default(), 1).unwrap();
        assert_eq!(a.predict(&e).unwrap(), b.predict(&e).unwrap());
    }
}
