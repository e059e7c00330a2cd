//! Exact loss identities, the stop-gradient law on a real student, and
//! consistency of the reported decomposition.

mod common;

use common::{data, normal, rng, routed_student};
use gatedistill::losses::{action_loss, lambda_weights, load_balance, semantic_loss};
use gatedistill::probe::export_teacher_capsules;
use gatedistill::trainer::{stage2_loss_and_grads, Stage2Inputs};
use gatedistill::{Gradients, Graph, LossWeights, StudentModel, Tensor};
use rand_chacha::ChaCha8Rng;

type NoRng = ChaCha8Rng;

fn scalar_of(f: impl for<'p> FnOnce(&mut Graph<'p>) -> gatedistill::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.scalar(v)
}

fn c(g: &mut Graph<'_>, rows: usize, cols: usize, v: Vec<f64>) -> gatedistill::Var {
    g.constant(Tensor::matrix(rows, cols, v)).unwrap()
}

#[test]
fn identities_are_exact() {
    let mut r = rng(1);
    for eta in [0.0, 0.5, 2.0] {
        let s = normal(&[4, 6], &mut r);
        let v = scalar_of(|g| {
            let x = g.constant(s.clone()).unwrap();
            semantic_loss(g, x, x, eta).unwrap()
        });
        assert!(v.abs() <= 1e-15, "semantic(s, s) = {v:e}");
    }

    let a = normal(&[3, 7], &mut r);
    let v = scalar_of(|g| {
        let x = g.constant(a.clone()).unwrap();
        action_loss(g, x, x, x, Some(x), true).unwrap()
    });
    assert_eq!(v, 0.0);

    let deep = scalar_of(|g| {
        let (z, o) = (c(g, 1, 7, vec![0.0; 7]), c(g, 1, 7, vec![1.0; 7]));
        action_loss(g, z, o, o, Some(o), true).unwrap()
    });
    let first = scalar_of(|g| {
        let (z, o) = (c(g, 1, 7, vec![0.0; 7]), c(g, 1, 7, vec![1.0; 7]));
        action_loss(g, z, o, o, None, true).unwrap()
    });
    assert_eq!((first, deep), (14.0, 21.0));

    let uniform = scalar_of(|g| {
        let x = c(g, 2, 5, vec![0.37; 10]);
        load_balance(g, x).unwrap()
    });
    assert!(uniform.abs() <= 1e-30);
    let split = scalar_of(|g| {
        let x = c(g, 1, 2, vec![1.0, 0.0]);
        load_balance(g, x).unwrap()
    });
    assert_eq!(split, 0.5);

    assert_eq!(lambda_weights(4, 2.0), vec![0.0625, 0.25, 0.5625, 1.0]);
}

#[test]
fn semantic_loss_ignores_capsule_scale() {
    let mut r = rng(2);
    for eta in [0.0, 0.5] {
        let s = normal(&[5, 8], &mut r);
        let t = normal(&[5, 8], &mut r);
        let scaled = Tensor::new(s.shape(), s.data().iter().map(|v| v * 3.7).collect()).unwrap();
        let at = |x: &Tensor| {
            scalar_of(|g| {
                let (a, b) = (g.constant(x.clone()).unwrap(), g.constant(t.clone()).unwrap());
                semantic_loss(g, a, b, eta).unwrap()
            })
        };
        let (base, big) = (at(&s), at(&scaled));
        assert!((base - big).abs() <= 1e-12 * base.abs().max(1.0), "{base} vs {big}");
    }
}

/// Sum of |grad| over the capsule encoder and head of `layer`, the only
/// parameters that reach `â_layer` without reaching later layers' states.
fn side_branch_mass(s: &StudentModel, grads: &Gradients, layer: usize) -> f64 {
    let mut mass = 0.0;
    let mut add = |_: &str, t: &Tensor| {
        if let Some(gr) = grads.get(t) {
            mass += gr.iter().map(|v| v.abs()).sum::<f64>();
        }
    };
    s.graph[layer].visit_named("g", &mut add);
    s.heads[layer].visit_named("h", &mut add);
    mass
}

#[test]
fn stop_gradient_blocks_the_previous_layer_branch() {
    let episodes = data(3);
    for seed in 0..4 {
        let (_, _, student) = routed_student(seed);
        for e in &episodes.episodes {
            for l in 1..student.layers() {
                let mass = |stop: bool| {
                    let mut g = Graph::new();
                    let enc = student.backbone.encode_episode(&mut g, e).unwrap();
                    let gates = student.compute_gates(&mut g, enc).unwrap();
                    let soft = student.soft_gated_forward(&mut g, enc, gates).unwrap();
                    let prev = student.layer_outputs::<NoRng>(&mut g, l - 1, soft.states[l - 1], None).unwrap();
                    let cur = student.layer_outputs::<NoRng>(&mut g, l, soft.states[l], None).unwrap();
                    let target = g.constant_slice(&[1, 7], e.action.data()).unwrap();
                    let teacher = g.constant(Tensor::matrix(1, 7, vec![0.1; 7])).unwrap();
                    let loss = action_loss(&mut g, cur.action, target, teacher, Some(prev.action), stop).unwrap();
                    side_branch_mass(&student, &g.backward(loss).unwrap(), l - 1)
                };
                assert_eq!(mass(true), 0.0, "seed {seed} layer {l}");
                assert!(mass(false) > 0.0, "seed {seed} layer {l}: no gradient without the stop");
            }
        }
    }
}

#[test]
fn reported_total_recomposes_from_parts() {
    let set = data(6);
    for seed in 0..3 {
        let (teacher, probe, student) = routed_student(seed);
        let cache = export_teacher_capsules(&teacher, &probe, &set).unwrap();
        for weights in [
            LossWeights::default(),
            LossWeights {
                alpha: 0.3,
                beta: 2.0,
                gamma: 0.7,
                eta: 0.25,
                ..Default::default()
            },
            LossWeights {
                use_lb: false,
                ..Default::default()
            },
        ] {
            let inputs = Stage2Inputs {
                data: &set,
                cache: &cache,
                weights: &weights,
                stop_gradient: true,
                router_lr_scale: 1.0,
            };
            let (rep, _) = stage2_loss_and_grads(&student, &inputs, &[0, 2, 3, 5], None).unwrap();
            assert!((rep.total - rep.recompose()).abs() <= 1e-12, "{} vs {}", rep.total, rep.recompose());
            assert_eq!(rep.lambda, lambda_weights(student.layers(), weights.kappa));
        }
    }
}
