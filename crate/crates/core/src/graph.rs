//! Graph-structured encapsulation of one layer's token states.
//!
//! Tokens are nodes; edge affinities are `exp(φ(h_i)·ψ(h_j))`, each row keeps
//! its `k` strongest edges (self loops included) and is L1-normalised. Two
//! ReLU message-passing passes share that adjacency, then attention pooling
//! and a projection give the semantic capsule of the layer.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{topk_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-normalisation epsilon for the sparsified affinities.
pub const L1_EPS: f64 = 1e-12;
/// Largest affinity exponent accepted before `exp` would lose ordering.
pub const MAX_AFFINITY_EXPONENT: f64 = 700.0;
const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Top-k affinity graph with two message-passing passes and attention pooling.
    Gat,
    /// Ablation: per-token two-layer MLP and mean pooling, no graph.
    MeanPoolMlp,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gat" => Ok(EncoderKind::Gat),
            "mlp" => Ok(EncoderKind::MeanPoolMlp),
            other => Err(Error::config(format!("graph.encoder must be gat or mlp, got {other}"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Gat => "gat",
            EncoderKind::MeanPoolMlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    pub affinity_dim: usize,
    pub dropout: f64,
    pub encoder: EncoderKind,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 8,
            affinity_dim: 16,
            dropout: 0.1,
            encoder: EncoderKind::Gat,
        }
    }
}

/// Per-layer encapsulation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleParams {
    /// `φ: [d, d_a]`
    pub phi: Tensor,
    /// `ψ: [d, d_a]`
    pub psi: Tensor,
    /// first pass transform `[d, d]`
    pub w1: Tensor,
    /// second pass transform `[d, d]`
    pub w2: Tensor,
    /// pooling scorer `[d, 1]`
    pub wp: Tensor,
    /// capsule projection `[d, d_c]`
    pub proj: Tensor,
    /// frozen standardisation statistics `[d_c]`; all-zero variance means
    /// "not calibrated yet"
    pub std_mean: Tensor,
    pub std_var: Tensor,
}

impl CapsuleParams {
    /// `φ`, `ψ` start at unit-variance columns shrunk by `d_a^{-1/4}` each, so
    /// the initial affinity exponent has the scale of `q·k/√d_a` attention.
    pub fn new<R: Rng>(width: usize, affinity_dim: usize, capsule_dim: usize, rng: &mut R) -> Self {
        let d = width;
        let shrink = 3f64.sqrt() * (affinity_dim as f64).powf(-0.25);
        let affinity = |rng: &mut R| {
            let mut t = Tensor::kaiming_uniform(&[d, affinity_dim], d, rng);
            t.data_mut().iter_mut().for_each(|v| *v *= shrink);
            t.trainable()
        };
        Self {
            phi: affinity(rng),
            psi: affinity(rng),
            w1: Tensor::kaiming_uniform(&[d, d], d, rng).trainable(),
            w2: Tensor::kaiming_uniform(&[d, d], d, rng).trainable(),
            wp: Tensor::kaiming_uniform(&[d, 1], d, rng).trainable(),
            proj: Tensor::kaiming_uniform(&[d, capsule_dim], d, rng).trainable(),
            std_mean: Tensor::zeros(&[capsule_dim]),
            std_var: Tensor::zeros(&[capsule_dim]),
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.std_var.data().iter().all(|&v| v > 0.0)
    }

    pub fn capsule_dim(&self) -> usize {
        self.proj.shape()[1]
    }

    /// Freezes per-dimension mean and variance of raw (projected, not yet
    /// standardised) capsules.
    pub fn calibrate(&mut self, raw_capsules: &[Vec<f64>]) -> Result<()> {
        let dc = self.capsule_dim();
        if raw_capsules.is_empty() || raw_capsules.iter().any(|c| c.len() != dc) {
            return Err(Error::shape("calibrate", format!("need non-empty rows of width {dc}")));
        }
        let n = raw_capsules.len() as f64;
        let mut mean = vec![0.0; dc];
        for c in raw_capsules {
            mean.iter_mut().zip(c).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dc];
        for c in raw_capsules {
            var.iter_mut().zip(c).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        var.iter_mut().for_each(|v| *v = v.max(STD_EPS));
        self.std_mean = Tensor::new(&[dc], mean)?;
        self.std_var = Tensor::new(&[dc], var)?;
        Ok(())
    }

    pub fn visit_named(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{p}/phi"), &self.phi);
        f(&format!("{p}/psi"), &self.psi);
        f(&format!("{p}/W1"), &self.w1);
        f(&format!("{p}/W2"), &self.w2);
        f(&format!("{p}/wp"), &self.wp);
        f(&format!("{p}/proj"), &self.proj);
        f(&format!("{p}/std_mean"), &self.std_mean);
        f(&format!("{p}/std_var"), &self.std_var);
    }

    pub fn visit_named_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{p}/phi"), &mut self.phi);
        f(&format!("{p}/psi"), &mut self.psi);
        f(&format!("{p}/W1"), &mut self.w1);
        f(&format!("{p}/W2"), &mut self.w2);
        f(&format!("{p}/wp"), &mut self.wp);
        f(&format!("{p}/proj"), &mut self.proj);
        f(&format!("{p}/std_mean"), &mut self.std_mean);
        f(&format!("{p}/std_var"), &mut self.std_var);
    }
}

/// Top-k neighbour lists and their normalised weights, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    pub indices: Arc<Vec<Vec<usize>>>,
    pub weights: Vec<Vec<f64>>,
}

impl SparseAdjacency {
    pub fn k(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    /// Dense `[N, N]` matrix with zeros off the kept edges.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.indices.len();
        let mut out = vec![vec![0.0; n]; n];
        for (i, (idx, w)) in self.indices.iter().zip(&self.weights).enumerate() {
            for (&j, &a) in idx.iter().zip(w) {
                out[i][j] = a;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsuleOrigin {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCapsule {
    pub s: Tensor,
    pub layer: usize,
    pub origin: CapsuleOrigin,
}

/// Adjacency as it lives on the tape: weights `[N, k]` plus neighbour table.
#[derive(Debug, Clone)]
pub struct TapeAdjacency {
    pub weights: Var,
    pub indices: Arc<Vec<Vec<usize>>>,
}

impl TapeAdjacency {
    pub fn snapshot(&self, g: &Graph<'_>) -> SparseAdjacency {
        let (n, k) = g.dims(self.weights);
        let w = g.value(self.weights);
        SparseAdjacency {
            indices: self.indices.clone(),
            weights: (0..n).map(|r| w[r * k..(r + 1) * k].to_vec()).collect(),
        }
    }
}

/// `Â(i,j) = exp(φ(h_i)·ψ(h_j))`, dense `[N, N]`.
pub fn build_affinity<'p>(g: &mut Graph<'p>, h: Var, phi: &'p Tensor, psi: &'p Tensor) -> Result<Var> {
    let (n, _) = g.dims(h);
    if n < 2 {
        return Err(Error::Invalid(format!("affinity graph needs at least 2 nodes, got {n}")));
    }
    let (p, s) = (g.param(phi), g.param(psi));
    let q = g.matmul(h, p)?;
    let k = g.matmul(h, s)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    if let Some(&mx) = g.value(logits).iter().find(|&&v| v > MAX_AFFINITY_EXPONENT) {
        return Err(Error::AffinityOverflow { value: mx });
    }
    g.exp(logits)
}

/// Keeps the `k` largest entries per row (ties to the smaller index) and
/// divides them by their sum plus [`L1_EPS`].
pub fn topk_normalize(g: &mut Graph<'_>, affinity: Var, k: usize) -> Result<TapeAdjacency> {
    let (n, m) = g.dims(affinity);
    if k > m {
        return Err(Error::Invalid(format!("k = {k} exceeds node count {m}")));
    }
    let indices = Arc::new(topk_rows(g.value(affinity), n, m, k)?);
    let kept = g.gather_cols(affinity, indices.clone())?;
    let weights = g.l1_normalize_rows(kept, L1_EPS)?;
    Ok(TapeAdjacency { weights, indices })
}

/// `Σ_{j∈TopK(i)} A(i,j) · (h_j W)` before the activation.
pub fn aggregate<'p>(g: &mut Graph<'p>, h: Var, adj: &TapeAdjacency, w: &'p Tensor) -> Result<Var> {
    let wv = g.param(w);
    let msg = g.matmul(h, wv)?;
    g.sparse_aggregate(adj.weights, msg, adj.indices.clone())
}

/// Two ReLU passes over the same adjacency, `W1` then `W2`; dropout on each
/// pass output when an RNG is supplied.
pub fn message_pass<'p, R: Rng>(
    g: &mut Graph<'p>,
    h: Var,
    adj: &TapeAdjacency,
    params: &'p CapsuleParams,
    dropout: f64,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    let a1 = aggregate(g, h, adj, &params.w1)?;
    let h1 = g.relu(a1)?;
    let h1 = g.dropout(h1, dropout, rng.as_deref_mut())?;
    let a2 = aggregate(g, h1, adj, &params.w2)?;
    let h2 = g.relu(a2)?;
    g.dropout(h2, dropout, rng)
}

/// Pooling weights `α = softmax_i(w_p · h̃_i)` as a `[1, N]` row.
pub fn pooling_weights<'p>(g: &mut Graph<'p>, h_tilde: Var, params: &'p CapsuleParams) -> Result<Var> {
    let wp = g.param(&params.wp);
    let scores = g.matmul(h_tilde, wp)?;
    let row = g.transpose(scores)?;
    g.softmax_rows(row)
}

/// `Σ_i α_i h̃_i`, `[1, d]`.
pub fn attention_pool_raw<'p>(g: &mut Graph<'p>, h_tilde: Var, params: &'p CapsuleParams) -> Result<Var> {
    let alpha = pooling_weights(g, h_tilde, params)?;
    g.matmul(alpha, h_tilde)
}

/// Projects a pooled `[1, d]` row to the capsule width and standardises it
/// when statistics are available.
pub fn project_capsule<'p>(g: &mut Graph<'p>, pooled: Var, params: &'p CapsuleParams) -> Result<Var> {
    let raw = project_raw(g, pooled, params)?;
    standardize(g, raw, params)
}

fn project_raw<'p>(g: &mut Graph<'p>, pooled: Var, params: &'p CapsuleParams) -> Result<Var> {
    let proj = g.param(&params.proj);
    g.matmul(pooled, proj)
}

fn standardize<'p>(g: &mut Graph<'p>, raw: Var, params: &'p CapsuleParams) -> Result<Var> {
    if !params.is_calibrated() {
        return Ok(raw);
    }
    let dc = params.capsule_dim();
    let neg_mean: Vec<f64> = params.std_mean.data().iter().map(|m| -m).collect();
    let inv_std: Vec<f64> = params.std_var.data().iter().map(|v| 1.0 / v.sqrt()).collect();
    let shift = g.constant_slice(&[dc], &neg_mean)?;
    let scale = g.constant_slice(&[1, dc], &inv_std)?;
    let centred = g.add_row(raw, shift)?;
    g.mul(centred, scale)
}

/// Attention pooling followed by projection (and standardisation).
pub fn attention_pool<'p>(g: &mut Graph<'p>, h_tilde: Var, params: &'p CapsuleParams) -> Result<Var> {
    let pooled = attention_pool_raw(g, h_tilde, params)?;
    project_capsule(g, pooled, params)
}

/// Output of [`encapsulate`].
#[derive(Debug, Clone)]
pub struct Encapsulation {
    pub adjacency: Option<TapeAdjacency>,
    /// `[1, d_c]`
    pub capsule: Var,
    /// projected capsule before standardisation, `[1, d_c]`
    pub raw: Var,
}

/// Affinity, sparsification, message passing and pooling for one layer.
pub fn encapsulate<'p, R: Rng>(
    g: &mut Graph<'p>,
    h: Var,
    params: &'p CapsuleParams,
    cfg: &GraphConfig,
    rng: Option<&mut R>,
) -> Result<Encapsulation> {
    match cfg.encoder {
        EncoderKind::Gat => {
            let aff = build_affinity(g, h, &params.phi, &params.psi)?;
            let adj = topk_normalize(g, aff, cfg.k)?;
            let h_tilde = message_pass(g, h, &adj, params, cfg.dropout, rng)?;
            let pooled = attention_pool_raw(g, h_tilde, params)?;
            let raw = project_raw(g, pooled, params)?;
            let capsule = standardize(g, raw, params)?;
            Ok(Encapsulation {
                adjacency: Some(adj),
                capsule,
                raw,
            })
        }
        EncoderKind::MeanPoolMlp => {
            let mut rng = rng;
            let w1 = g.param(&params.w1);
            let x = g.matmul(h, w1)?;
            let x = g.relu(x)?;
            let x = g.dropout(x, cfg.dropout, rng.as_deref_mut())?;
            let w2 = g.param(&params.w2);
            let x = g.matmul(x, w2)?;
            let x = g.relu(x)?;
            let x = g.dropout(x, cfg.dropout, rng)?;
            let pooled = g.mean_rows(x)?;
            let raw = project_raw(g, pooled, params)?;
            let capsule = standardize(g, raw, params)?;
            Ok(Encapsulation {
                adjacency: None,
                capsule,
                raw,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn ident_params(d: usize) -> CapsuleParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = CapsuleParams::new(d, d, d, &mut rng);
        p.phi = Tensor::identity(d);
        p.psi = Tensor::identity(d);
        p
    }

    #[test]
    fn zero_projections_give_unit_affinity() {
        let mut p = ident_params(2);
        p.phi = Tensor::zeros(&[2, 2]);
        p.psi = Tensor::zeros(&[2, 2]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let a = build_affinity(&mut g, h, &p.phi, &p.psi).unwrap();
        assert!(g.value(a).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_projection_affinity_row() {
        let p = ident_params(2);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let a = build_affinity(&mut g, h, &p.phi, &p.psi).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(&g.value(a)[..3], &[e, 1.0, e]);
        assert!(g.value(a).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn overflow_is_reported() {
        let mut p = ident_params(2);
        p.phi = Tensor::full(&[2, 2], 30.0);
        p.psi = Tensor::full(&[2, 2], 30.0);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(matches!(
            build_affinity(&mut g, h, &p.phi, &p.psi),
            Err(Error::AffinityOverflow { .. })
        ));
    }

    #[test]
    fn single_node_rejected() {
        let p = ident_params(2);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0])).unwrap();
        assert!(build_affinity(&mut g, h, &p.phi, &p.psi).is_err());
    }

    #[test]
    fn topk_on_tied_row() {
        let e = std::f64::consts::E;
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 3, vec![e, 1.0, e])).unwrap();
        let adj = topk_normalize(&mut g, a, 2).unwrap().snapshot(&g);
        assert_eq!(adj.indices[0], vec![0, 2]);
        assert!((adj.weights[0][0] - 0.5).abs() < 1e-12);
        assert!((adj.weights[0][1] - 0.5).abs() < 1e-12);
        assert!(topk_normalize(&mut g, a, 4).is_err());
    }

    #[test]
    fn self_loop_identity_pass() {
        let mut p = ident_params(3);
        p.w1 = Tensor::identity(3);
        p.w2 = Tensor::identity(3);
        let hv = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, -1.0, 3.0, -0.5]);
        let mut g = Graph::new();
        let h = g.constant(hv.clone()).unwrap();
        let w = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0])).unwrap();
        let adj = TapeAdjacency {
            weights: w,
            indices: Arc::new(vec![vec![0], vec![1]]),
        };
        let out = message_pass::<NoRng>(&mut g, h, &adj, &p, 0.0, None).unwrap();
        let expect: Vec<f64> = hv.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(g.value(out), expect.as_slice());
    }

    #[test]
    fn negative_transform_clips_to_zero() {
        let mut p = ident_params(2);
        p.w1 = Tensor::full(&[2, 2], -1.0);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 0.5, 0.1])).unwrap();
        let aff = build_affinity(&mut g, h, &p.phi, &p.psi).unwrap();
        let adj = topk_normalize(&mut g, aff, 2).unwrap();
        let out = message_pass::<NoRng>(&mut g, h, &adj, &p, 0.0, None).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_pool_scorer_gives_mean() {
        let mut p = ident_params(2);
        p.wp = Tensor::zeros(&[2, 1]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0])).unwrap();
        let pooled = attention_pool_raw(&mut g, h, &p).unwrap();
        let v = g.value(pooled);
        assert!((v[0] - 3.0).abs() < 1e-12 && (v[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dominant_row_saturates_pool() {
        let mut p = ident_params(2);
        p.wp = Tensor::matrix(2, 1, vec![1.0, 0.0]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(3, 2, vec![0.0, 1.0, 60.0, -2.0, 0.5, 3.0])).unwrap();
        let alpha = pooling_weights(&mut g, h, &p).unwrap();
        assert!((g.value(alpha).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pooled = attention_pool_raw(&mut g, h, &p).unwrap();
        let v = g.value(pooled);
        assert!((v[0] - 60.0).abs() < 1e-8 && (v[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn calibration_standardises() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = CapsuleParams::new(4, 2, 2, &mut rng);
        assert!(!p.is_calibrated());
        p.calibrate(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert!(p.is_calibrated());
        let mut g = Graph::new();
        let raw = g.constant(Tensor::matrix(1, 2, vec![3.0, 5.0])).unwrap();
        let s = standardize(&mut g, raw, &p).unwrap();
        assert!((g.value(s)[0] - 1.0).abs() < 1e-6);
        assert_eq!(g.value(s)[1], 0.0);
    }
}
