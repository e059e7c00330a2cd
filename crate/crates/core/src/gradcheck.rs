//! Central finite differences, the reference every analytic gradient in
//! this crate is checked against.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::graph::{encapsulate, CapsuleParams, EncoderKind, GraphConfig};
use crate::losses::{action_loss, load_balance, semantic_loss, LossWeights};
use crate::nn::{set_trainable, Module};
use crate::probe::{aux_loss, export_from_states, teacher_states, TeacherProbe};
use crate::student::StudentModel;
use crate::tensor::Tensor;
use crate::trainer::{apply_ordered, stage2_loss_and_grads, Stage2Inputs};
use crate::world::{make_range, WorldConfig, ACTION_DIMS};

/// `(f(θ + ε e_i) - f(θ - ε e_i)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Invalid(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let x0 = theta.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = x0 - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite difference at coordinate {i}"),
            });
        }
        out.push((fp - fm) / (2.0 * eps));
    }
    Tensor::new(theta.shape(), out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute error when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Tolerance every suite comparison must meet.
pub const SUITE_TOL: f64 = 1e-5;
const FD_EPS: f64 = 1e-6;

/// Central differences at the listed coordinates only.
pub fn finite_diff_coords<F>(mut f: F, theta: &[f64], coords: &[usize], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    coords
        .iter()
        .map(|&i| {
            let x0 = theta[i];
            probe[i] = x0 + eps;
            let fp = f(&probe);
            probe[i] = x0 - eps;
            let fm = f(&probe);
            probe[i] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite difference at coordinate {i}"),
                });
            }
            Ok((fp - fm) / (2.0 * eps))
        })
        .collect()
}

/// Values of every trainable tensor of `m`, in visit order.
pub fn trainable_values<M: Module + ?Sized>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit(&mut |_, t| {
        if t.requires_grad {
            out.extend_from_slice(t.data());
        }
    });
    out
}

/// Inverse of [`trainable_values`].
pub fn write_trainable<M: Module + ?Sized>(m: &mut M, theta: &[f64]) {
    let mut at = 0;
    m.visit_mut(&mut |_, t| {
        if t.requires_grad {
            let n = t.len();
            t.data_mut().copy_from_slice(&theta[at..at + n]);
            at += n;
        }
    });
}

/// Stored grad slots of the trainable tensors, zeros where absent.
pub fn trainable_grads<M: Module + ?Sized>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit(&mut |_, t| {
        if t.requires_grad {
            match &t.grad {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
    });
    out
}

/// Relative error between the tape gradient of `loss` and central
/// differences, over the trainable tensors of `m` (all coordinates when
/// `coords` is `None`). Returns `(coordinates checked, error)`.
pub fn check_module<M, F>(m: &M, loss: F, coords: Option<&[usize]>) -> Result<(usize, f64)>
where
    M: Module + Clone,
    F: for<'p> Fn(&'p M, &mut Graph<'p>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let v = loss(m, &mut g)?;
        let grads = g.backward(v)?;
        let mut out = Vec::new();
        m.visit(&mut |_, t| {
            if t.requires_grad {
                match grads.get(t) {
                    Some(x) => out.extend_from_slice(x),
                    None => out.extend(std::iter::repeat(0.0).take(t.len())),
                }
            }
        });
        out
    };
    let eval = |theta: &[f64]| {
        let mut probe = m.clone();
        write_trainable(&mut probe, theta);
        let mut g = Graph::new();
        loss(&probe, &mut g).map(|v| g.scalar(v)).unwrap_or(f64::NAN)
    };
    compare(&trainable_values(m), &analytic, eval, coords)
}

fn compare(theta: &[f64], analytic: &[f64], mut eval: impl FnMut(&[f64]) -> f64, coords: Option<&[usize]>) -> Result<(usize, f64)> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut fd = finite_diff_coords(&mut eval, theta, coords, FD_EPS)?;
    let an: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    for (j, &i) in coords.iter().enumerate() {
        if !near(an[j], fd[j], 1e-6) {
            fd[j] = refine(&mut eval, theta, i, fd[j])?;
        }
    }
    Ok((coords.len(), relative_error(&an, &fd)))
}

fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Re-estimates a disagreeing coordinate at steps `h/10` and `h/100`. A
/// ReLU kink or top-k switch within `h` of `theta` spoils the coarse central
/// difference; when the two finer estimates agree the function is smooth at
/// that scale and the finer one is used, otherwise `coarse` stands.
fn refine(eval: &mut impl FnMut(&[f64]) -> f64, theta: &[f64], i: usize, coarse: f64) -> Result<f64> {
    let mid = finite_diff_coords(&mut *eval, theta, &[i], FD_EPS / 10.0)?[0];
    let fine = finite_diff_coords(&mut *eval, theta, &[i], FD_EPS / 100.0)?[0];
    Ok(if near(mid, fine, SUITE_TOL) { fine } else { coarse })
}

/// One randomised comparison of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub check: &'static str,
    pub instance: usize,
    pub coords: usize,
    pub rel_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_err < SUITE_TOL
    }
}

/// Names of the suite's checks, in run order.
pub const CHECKS: [&str; 8] = [
    "capsule_gat",
    "capsule_mlp",
    "aux",
    "semantic",
    "action",
    "load_balance",
    "soft_router",
    "stage2_total",
];

/// Runs every check on `instances` random small problems (at most 8
/// tokens, width at most 16) derived from `seed`.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (c, &check) in CHECKS.iter().enumerate() {
        for i in 0..instances {
            let (coords, rel_err) = draw_and_check(check, seed, ((c as u64) << 32) | ((i as u64) << 8))?;
            out.push(CheckOutcome {
                check,
                instance: i,
                coords,
                rel_err,
            });
        }
    }
    Ok(out)
}

/// Redraws instances that fall outside the domain of the loss (a zero
/// capsule has no cosine); any other error is returned.
fn draw_and_check(check: &str, seed: u64, stream: u64) -> Result<(usize, f64)> {
    const ATTEMPTS: u64 = 16;
    let mut last = None;
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream | attempt);
        match run_check(check, &mut rng) {
            Err(e @ (Error::Invalid(_) | Error::AffinityOverflow { .. })) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches data")
}

/// Trainable tensors plus fixed inputs, so inputs can be differentiated too.
#[derive(Debug, Clone)]
struct Bundle<M> {
    model: M,
    inputs: Vec<Tensor>,
}

impl<M: Module> Module for Bundle<M> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.model.visit(f);
        for (i, t) in self.inputs.iter().enumerate() {
            f(&format!("input{i}"), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.model.visit_mut(f);
        for (i, t) in self.inputs.iter_mut().enumerate() {
            f(&format!("input{i}"), t);
        }
    }
}

#[derive(Debug, Clone)]
struct Capsule {
    params: CapsuleParams,
    cfg: GraphConfig,
}

impl Module for Capsule {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.params.visit_named("capsule", f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.params.visit_named_mut("capsule", f)
    }
}

#[derive(Debug, Clone)]
struct NoParams;

impl Module for NoParams {
    fn visit(&self, _: &mut dyn FnMut(&str, &Tensor)) {}

    fn visit_mut(&mut self, _: &mut dyn FnMut(&str, &mut Tensor)) {}
}

/// Adds `U(-0.1, 0.1)` to every trainable coordinate. Fresh modules hold
/// exact zeros (biases, dead units) that put ReLUs on their kink, where
/// central differences and the subgradient legitimately disagree.
fn jitter<M: Module + ?Sized>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit_mut(&mut |_, t| {
        if t.requires_grad {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    });
}

/// `Σ r ⊙ x` for a fixed random readout, so every output coordinate matters.
fn readout(g: &mut Graph<'_>, x: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone())?;
    let y = g.mul(x, r)?;
    g.sum(y)
}

fn run_check(check: &str, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    match check {
        "capsule_gat" | "capsule_mlp" => {
            let n = rng.gen_range(3..=8);
            let d = rng.gen_range(4..=16);
            let da = rng.gen_range(2..=d);
            let dc = rng.gen_range(2..=d);
            let encoder = if check == "capsule_gat" { EncoderKind::Gat } else { EncoderKind::MeanPoolMlp };
            let cfg = GraphConfig {
                k: rng.gen_range(1..=n),
                affinity_dim: da,
                dropout: 0.0,
                encoder,
            };
            let mut params = CapsuleParams::new(d, da, dc, rng);
            if rng.gen_bool(0.5) {
                params.std_mean = uniform(&[dc], 1.0, rng);
                params.std_var = Tensor::new(&[dc], (0..dc).map(|_| rng.gen_range(0.5..2.0)).collect())?;
            }
            let h = uniform(&[n, d], 1.0, rng).trainable();
            let r = uniform(&[1, dc], 1.0, rng);
            let mut b = Bundle {
                model: Capsule { params, cfg },
                inputs: vec![h],
            };
            jitter(&mut b, rng);
            check_module(
                &b,
                |b, g| {
                    let h = g.param(&b.inputs[0]);
                    let enc = encapsulate::<ChaCha8Rng>(g, h, &b.model.params, &b.model.cfg, None)?;
                    readout(g, enc.capsule, &r)
                },
                None,
            )
        }
        "aux" => {
            let layers = rng.gen_range(2..=3);
            let n = rng.gen_range(3..=8);
            let heads = 2;
            let width = 2 * rng.gen_range(2..=8);
            let bcfg = BackboneConfig {
                layers,
                width,
                heads,
                capsule_dim: rng.gen_range(2..=width),
                head_hidden: rng.gen_range(2..=8),
                ..Default::default()
            };
            let gcfg = GraphConfig {
                k: rng.gen_range(1..=n),
                affinity_dim: rng.gen_range(2..=width),
                dropout: 0.0,
                encoder: EncoderKind::Gat,
            };
            let mut probe = TeacherProbe::new(&bcfg, &gcfg, rng.gen());
            jitter(&mut probe, rng);
            let hidden: Vec<Tensor> = (0..layers).map(|_| uniform(&[n, width], 1.0, rng)).collect();
            let action = uniform(&[1, ACTION_DIMS], 1.0, rng);
            check_module(
                &probe,
                |p, g| {
                    let hs = hidden.iter().map(|h| g.constant(h.clone())).collect::<Result<Vec<_>>>()?;
                    let a = g.constant(action.clone())?;
                    Ok(aux_loss::<ChaCha8Rng>(g, p, &hs, a, None)?.0)
                },
                None,
            )
        }
        "semantic" => {
            let rows = rng.gen_range(1..=6);
            let dc = rng.gen_range(2..=16);
            let eta = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
            let tea = uniform(&[rows, dc], 1.0, rng);
            let b = Bundle {
                model: NoParams,
                inputs: vec![uniform(&[rows, dc], 1.0, rng).trainable()],
            };
            check_module(
                &b,
                |b, g| {
                    let s = g.param(&b.inputs[0]);
                    let t = g.constant(tea.clone())?;
                    semantic_loss(g, s, t, eta)
                },
                None,
            )
        }
        "action" => {
            let rows = rng.gen_range(1..=6);
            let first = rng.gen_bool(0.25);
            let target = uniform(&[rows, ACTION_DIMS], 1.0, rng);
            let tea = uniform(&[rows, ACTION_DIMS], 1.0, rng);
            let b = Bundle {
                model: NoParams,
                inputs: vec![
                    uniform(&[rows, ACTION_DIMS], 1.0, rng).trainable(),
                    uniform(&[rows, ACTION_DIMS], 1.0, rng).trainable(),
                ],
            };
            // The full gradient: the stop-gradient variant is checked by the
            // stop-gradient law, not against finite differences.
            check_module(
                &b,
                |b, g| {
                    let pred = g.param(&b.inputs[0]);
                    let prev = g.param(&b.inputs[1]);
                    let y = g.constant(target.clone())?;
                    let t = g.constant(tea.clone())?;
                    action_loss(g, pred, y, t, (!first).then_some(prev), false)
                },
                None,
            )
        }
        "load_balance" => {
            let rows = rng.gen_range(1..=6);
            let layers = rng.gen_range(2..=8);
            let gates = Tensor::new(&[rows, layers], (0..rows * layers).map(|_| rng.gen_range(0.01..0.99)).collect())?;
            let b = Bundle {
                model: NoParams,
                inputs: vec![gates.trainable()],
            };
            check_module(
                &b,
                |b, g| {
                    let x = g.param(&b.inputs[0]);
                    load_balance(g, x)
                },
                None,
            )
        }
        "soft_router" => {
            let (student, data, _) = tiny_student(rng)?;
            let mut s = student;
            set_trainable(&mut s, false);
            set_trainable(&mut s.router, true);
            let e = &data.episodes[0];
            let n = data.episodes[0].visual.shape()[0] + 1;
            let r = uniform(&[n, s.backbone.cfg.width], 1.0, rng);
            check_module(
                &s,
                |s, g| {
                    let enc = s.backbone.encode_episode(g, e)?;
                    let gates = s.compute_gates(g, enc)?;
                    let soft = s.soft_gated_forward(g, enc, gates)?;
                    readout(g, *soft.states.last().expect("layers >= 2"), &r)
                },
                None,
            )
        }
        "stage2_total" => {
            let (student, data, cache) = tiny_student(rng)?;
            let weights = LossWeights {
                eta: rng.gen_range(0.0..1.0),
                gamma: rng.gen_range(0.01..1.0),
                ..Default::default()
            };
            let inputs = Stage2Inputs {
                data: &data,
                cache: &cache,
                weights: &weights,
                stop_gradient: false,
                router_lr_scale: 1.0,
            };
            let batch: Vec<usize> = (0..data.len()).collect();
            let mut student = student;
            let (_, grads) = stage2_loss_and_grads(&student, &inputs, &batch, None)?;
            apply_ordered(&mut student, grads);
            let analytic = trainable_grads(&student);
            let theta = trainable_values(&student);
            // every router coordinate plus a random sample of the rest
            let router = {
                let mut n = 0;
                student.router.visit(&mut |_, t| n += t.len());
                n
            };
            let others = theta.len() - router;
            let mut coords: Vec<usize> = (others..theta.len()).collect();
            coords.extend(sample(rng, others, others.min(160)).into_iter());
            coords.sort_unstable();
            let eval = |th: &[f64]| {
                let mut s = student.clone();
                write_trainable(&mut s, th);
                stage2_loss_and_grads(&s, &inputs, &batch, None).map(|r| r.0.total).unwrap_or(f64::NAN)
            };
            compare(&theta, &analytic, eval, Some(&coords))
        }
        other => Err(Error::Invalid(format!("unknown gradient check {other}"))),
    }
}

/// A three-layer student on 7-token episodes with random router weights, its
/// data and a calibrated probe's teacher cache.
fn tiny_student(rng: &mut ChaCha8Rng) -> Result<(StudentModel, crate::world::Dataset, crate::probe::CapsuleCache)> {
    let world = WorldConfig {
        n_tokens: 7,
        n_objects: 3,
        seed: rng.gen(),
        ..Default::default()
    };
    let bcfg = BackboneConfig {
        layers: 3,
        width: 8,
        heads: 2,
        capsule_dim: 4,
        head_hidden: 6,
        seed: rng.gen(),
        ..Default::default()
    };
    let gcfg = GraphConfig {
        k: rng.gen_range(2..=8),
        affinity_dim: 4,
        dropout: 0.0,
        encoder: EncoderKind::Gat,
    };
    let data = make_range(&world, 0, 3)?;
    let teacher = Backbone::new(&bcfg)?;
    let mut probe = TeacherProbe::new(&bcfg, &gcfg, rng.gen());
    let states = teacher_states(&teacher, &data.episodes)?;
    probe.calibrate(&states)?;
    let cache = export_from_states(&probe, &states, &data)?;
    let mut student = StudentModel::from_teacher(&teacher, &probe, 0.0)?;
    for (w, b) in student.router.w.iter_mut().zip(student.router.b.iter_mut()) {
        w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        b.data_mut()[0] = rng.gen_range(-1.0..1.0);
    }
    // also moves the trunk off the teacher, so the distillation terms are not at zero
    jitter(&mut student, rng);
    Ok((student, data, cache))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratics() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn reports_offending_coordinate() {
        let x = Tensor::from_vec(vec![1.0, 0.0]);
        let err = finite_diff_grad(|t| 1.0 / t.data()[1].abs().min(t.data()[0]) - 1.0 / 0.0 * t.data()[1].signum().abs(), &x, 1e-5);
        match err {
            Err(Error::NonFinite { context }) => assert!(context.contains("coordinate")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn suite_smoke() {
        let out = run_suite(11, 1).unwrap();
        assert_eq!(out.len(), CHECKS.len());
        for o in &out {
            assert!(o.passed(), "{} instance {}: {:.3e}", o.check, o.instance, o.rel_err);
        }
    }

    #[test]
    fn kink_inside_the_step_is_refined() {
        // |x - 3e-7| at 0: the coarse difference straddles the kink
        let f = |t: &[f64]| (t[0] - 3e-7).abs();
        let (_, err) = compare(&[0.0], &[-1.0], f, None).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn refinement_does_not_hide_a_wrong_gradient() {
        let f = |t: &[f64]| t[0].sin() + t[1] * t[1];
        let (_, err) = compare(&[0.3, 0.7], &[0.3f64.cos() * 1.001, 1.4], f, None).unwrap();
        assert!(err > SUITE_TOL, "{err}");
        let (_, err) = compare(&[0.0], &[-0.5], |t: &[f64]| (t[0] - 3e-7).abs(), None).unwrap();
        assert!(err > 0.4, "{err}");
    }

    #[test]
    fn step_bounds_enforced() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(finite_diff_grad(|t| t.data()[0], &x, 1e-2).is_err());
    }
}
