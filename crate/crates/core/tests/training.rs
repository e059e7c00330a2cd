//! Optimisation behaviour of the three training stages on tiny models.

mod common;

use common::{data, tiny_backbone, tiny_graph};
use gatedistill::nn::{clip_grads, grad_norm, module_hash, set_trainable};
use gatedistill::probe::{export_teacher_capsules, stage1_train, teacher_states, CapsuleCache};
use gatedistill::trainer::{apply_ordered, frozen_guard, stage2_loss_and_grads, stage2_train, train_teacher, Stage2Inputs};
use gatedistill::{Backbone, Dataset, Error, IntegrityKind, LossWeights, StudentModel, TeacherProbe, TrainSchedule};

/// Probe standardised over 32 episodes; a single-episode calibration would
/// have zero variance and map its own capsule to exactly zero.
fn calibrated_probe(teacher: &Backbone) -> TeacherProbe {
    let mut probe = TeacherProbe::new(&tiny_backbone(), &tiny_graph(), 1);
    probe.calibrate(&teacher_states(teacher, &data(32).episodes).unwrap()).unwrap();
    probe
}

fn frozen_pair(episodes: usize) -> (Backbone, TeacherProbe, Dataset) {
    let mut teacher = Backbone::new(&tiny_backbone()).unwrap();
    set_trainable(&mut teacher, false);
    let mut probe = calibrated_probe(&teacher);
    set_trainable(&mut probe, false);
    (teacher, probe, data(episodes))
}

fn schedule(epochs: usize, batch: usize, lr: f64, warmup: usize) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch,
        lr,
        warmup,
        ..Default::default()
    }
}

/// Total loss of each Stage II step, from the per-layer loss CSV.
fn step_totals(csv: &gatedistill::report::Csv, layers: usize) -> Vec<f64> {
    csv.column("total").unwrap().into_iter().step_by(layers).collect()
}

/// Stage II after a Stage I fit on the same episode, so the teacher-side
/// targets agree with the ground truth and the loss has no large floor.
#[test]
fn stage2_overfits_a_single_episode() {
    let (teacher, _, set) = frozen_pair(1);
    let mut probe = calibrated_probe(&teacher);
    stage1_train(&teacher, &mut probe, &set, &schedule(300, 1, 3e-3, 10)).unwrap();
    set_trainable(&mut probe, false);
    let cache = export_teacher_capsules(&teacher, &probe, &set).unwrap();
    let weights = LossWeights::default();
    let inputs = Stage2Inputs {
        data: &set,
        cache: &cache,
        weights: &weights,
        stop_gradient: true,
        router_lr_scale: 1.0,
    };
    let mut student = StudentModel::from_teacher(&teacher, &probe, 0.0).unwrap();
    let summary = stage2_train(&mut student, &inputs, &schedule(200, 1, 1e-3, 10), frozen_guard(&teacher, &probe)).unwrap();
    let totals = step_totals(&summary.losses, student.layers());
    assert_eq!(totals.len(), 200);
    let (first, last) = (totals[0], *totals.last().unwrap());
    eprintln!("stage 2 overfit: {first:.4e} -> {last:.4e} ({:.1}x)", first / last);
    assert!(first >= 10.0 * last, "loss only fell from {first} to {last}");
}

#[test]
fn stage1_layer_losses_fall_from_the_start() {
    let (teacher, _, set) = frozen_pair(1);
    let layers = tiny_backbone().layers;
    let mut probe = calibrated_probe(&teacher);
    let csv = stage1_train(&teacher, &mut probe, &set, &schedule(11, 1, 1e-3, 0)).unwrap();
    let mse = csv.column("aux_mse").unwrap();
    let monotone = (0..layers)
        .filter(|&l| {
            let curve: Vec<f64> = mse.iter().skip(l).step_by(layers).copied().collect();
            curve.windows(2).all(|w| w[1] <= w[0])
        })
        .count();
    assert!(monotone + 1 >= layers, "only {monotone} of {layers} layers fell monotonically");
}

#[test]
fn teacher_fits_its_training_set() {
    let set = data(1);
    let mut teacher = Backbone::new(&tiny_backbone()).unwrap();
    let curve = train_teacher(&mut teacher, &set, &schedule(200, 1, 3e-3, 10)).unwrap();
    let loss = curve.column("loss").unwrap();
    assert!(loss[0] >= 10.0 * loss.last().unwrap(), "{} -> {}", loss[0], loss.last().unwrap());
}

#[test]
fn training_is_bit_reproducible() {
    let (teacher, probe, set) = frozen_pair(6);
    let cache = export_teacher_capsules(&teacher, &probe, &set).unwrap();
    let weights = LossWeights::default();
    let inputs = Stage2Inputs {
        data: &set,
        cache: &cache,
        weights: &weights,
        stop_gradient: true,
        router_lr_scale: 1.0,
    };
    let run = || {
        let mut s = StudentModel::from_teacher(&teacher, &probe, 0.0).unwrap();
        let sum = stage2_train(&mut s, &inputs, &schedule(2, 4, 1e-3, 1), frozen_guard(&teacher, &probe)).unwrap();
        (module_hash(&s), sum.losses.render(), sum.gates.render())
    };
    assert_eq!(run(), run());

    let stage1 = || {
        let mut p = TeacherProbe::new(&tiny_backbone(), &tiny_graph(), 4);
        let csv = stage1_train(&teacher, &mut p, &set, &schedule(2, 3, 1e-3, 1)).unwrap();
        (module_hash(&p), csv.render())
    };
    assert_eq!(stage1(), stage1());
}

#[test]
fn clipped_gradient_norm_respects_the_bound() {
    let (teacher, probe, set) = frozen_pair(4);
    let cache = export_teacher_capsules(&teacher, &probe, &set).unwrap();
    let weights = LossWeights::default();
    let inputs = Stage2Inputs {
        data: &set,
        cache: &cache,
        weights: &weights,
        stop_gradient: true,
        router_lr_scale: 1.0,
    };
    let mut student = StudentModel::from_teacher(&teacher, &probe, 0.0).unwrap();
    for max_norm in [1e-4, 1e-2, 1.0, 1e3] {
        let (_, grads) = stage2_loss_and_grads(&student, &inputs, &[0, 1, 2, 3], None).unwrap();
        apply_ordered(&mut student, grads);
        let before = clip_grads(&mut student, max_norm);
        let after = grad_norm(&student);
        assert!(after <= max_norm + 1e-9, "{after} > {max_norm}");
        if before <= max_norm {
            assert_eq!(after, before);
        }
    }
}

#[test]
fn frozen_models_are_guarded() {
    let (teacher, probe, set) = frozen_pair(4);
    let cache: CapsuleCache = export_teacher_capsules(&teacher, &probe, &set).unwrap();
    let (th, ph) = (module_hash(&teacher), module_hash(&probe));
    let weights = LossWeights::default();
    let inputs = Stage2Inputs {
        data: &set,
        cache: &cache,
        weights: &weights,
        stop_gradient: true,
        router_lr_scale: 1.0,
    };
    let mut student = StudentModel::from_teacher(&teacher, &probe, 0.0).unwrap();
    stage2_train(&mut student, &inputs, &schedule(1, 2, 1e-3, 0), frozen_guard(&teacher, &probe)).unwrap();
    assert_eq!((module_hash(&teacher), module_hash(&probe)), (th.clone(), ph));
    assert_ne!(module_hash(&student.backbone), th);

    let tripped = || {
        Err(Error::Integrity {
            kind: IntegrityKind::FrozenViolation,
            msg: "changed".into(),
        })
    };
    let err = stage2_train(&mut student, &inputs, &schedule(1, 2, 1e-3, 0), tripped).unwrap_err();
    assert!(matches!(err, Error::Integrity { kind: IntegrityKind::FrozenViolation, .. }), "{err}");
}
