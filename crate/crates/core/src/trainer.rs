//! Optimisation loops: teacher pre-training and Stage II distillation, plus
//! the shared batching, gradient reduction and checkpoint plumbing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::backbone::Backbone;
use crate::checkpoint::Container;
use crate::error::{Error, IntegrityKind, Result};
use crate::losses::{action_loss, batch_sq_error, load_balance, semantic_loss, total_loss, LossReport, LossTerms, LossWeights};
use crate::nn::{add_grads, clip_grads, module_hash, zero_grads, Module};
use crate::optim::{step_module, step_module_scaled, OptimizerState};
use crate::probe::{numerical, CapsuleCache};
use crate::report::Csv;
use crate::student::StudentModel;
use crate::tensor::{hex, Tensor};
use crate::world::{Dataset, ACTION_DIMS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub cosine: bool,
    pub clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 16,
            lr: 1e-3,
            warmup: 100,
            cosine: true,
            clip: 1.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch.max(1))
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("clip max-norm must be > 0"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        let total = self.total_steps(n);
        if total > 0 && self.warmup > total {
            return Err(Error::config(format!("warmup {} exceeds total steps {total}", self.warmup)));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        crate::optim::lr_at(step, self.lr, self.warmup, total, self.cosine)
    }

    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(self.lr, self.weight_decay)
    }
}

/// Visiting order of an epoch; a fixed permutation of `0..n` per
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Dropout stream of one sample: distinct per stage, step and batch slot.
pub fn sample_rng(seed: u64, stage: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((step as u64) << 16) | slot as u64);
    rng
}

/// Resets the grad slots of `model` and adds per-sample gradients in the
/// order given, so the reduction never depends on scheduling.
pub fn apply_ordered<M: Module + ?Sized>(model: &mut M, grads: Vec<Gradients>) {
    zero_grads(model);
    for g in grads {
        add_grads(model, &g.take_by_key(), 1.0);
    }
}

/// Provenance embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_hash: String,
    pub teacher_hash: String,
    pub probe_hash: String,
    pub stage: String,
    /// short content hash of the stored tensors, filled in on save
    pub version: String,
}

const MANIFEST_KEYS: [&str; 6] = ["config_hash", "dataset_hash", "teacher_hash", "probe_hash", "stage", "version"];

fn content_version(c: &Container) -> String {
    let mut h = Sha256::new();
    for (name, t) in c.tensors() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        t.feed_hash(&mut h);
    }
    hex(&h.finalize()[..8])
}

impl RunManifest {
    fn fields(&self) -> [&String; 6] {
        [
            &self.config_hash,
            &self.dataset_hash,
            &self.teacher_hash,
            &self.probe_hash,
            &self.stage,
            &self.version,
        ]
    }

    pub fn read(c: &Container) -> Result<Self> {
        let get = |k: &str| {
            c.meta(k)
                .map(str::to_string)
                .ok_or_else(|| Error::integrity(IntegrityKind::Malformed, format!("manifest key {k} missing")))
        };
        Ok(Self {
            config_hash: get("config_hash")?,
            dataset_hash: get("dataset_hash")?,
            teacher_hash: get("teacher_hash")?,
            probe_hash: get("probe_hash")?,
            stage: get("stage")?,
            version: get("version")?,
        })
    }
}

/// Container holding every tensor of `m` plus the manifest.
pub fn checkpoint_container<M: Module + ?Sized>(m: &M, manifest: &RunManifest) -> Result<Container> {
    let mut c = Container::new();
    c.insert_module(m)?;
    let mut man = manifest.clone();
    man.version = content_version(&c);
    for (k, v) in MANIFEST_KEYS.iter().zip(man.fields()) {
        c.set_meta(k, v);
    }
    Ok(c)
}

/// Loads tensors into `m` after checking the stored content version.
pub fn restore_from<M: Module + ?Sized>(c: &Container, m: &mut M) -> Result<RunManifest> {
    let man = RunManifest::read(c)?;
    c.expect_meta("version", &content_version(c))?;
    let mut expected = Vec::new();
    m.visit(&mut |n, _| expected.push(n.to_string()));
    if let Some(n) = expected.iter().find(|n| c.get(n).is_none()) {
        return Err(Error::shape("load_checkpoint", format!("tensor {n} expected by the model is absent from the checkpoint")));
    }
    if let Some((n, _)) = c.tensors().iter().find(|(n, _)| !expected.contains(n)) {
        return Err(Error::shape("load_checkpoint", format!("checkpoint tensor {n} has no counterpart in the model")));
    }
    c.load_module(m)?;
    Ok(man)
}

pub fn save_checkpoint<M: Module + ?Sized>(path: &Path, m: &M, manifest: &RunManifest) -> Result<()> {
    checkpoint_container(m, manifest)?.save(path)
}

pub fn load_checkpoint<M: Module + ?Sized>(path: &Path, m: &mut M) -> Result<RunManifest> {
    restore_from(&Container::load(path)?, m)
}

/// Fits the teacher's native head and trunk to the oracle actions. Returns
/// the loss curve (`step, loss`).
pub fn train_teacher(model: &mut Backbone, data: &Dataset, schedule: &TrainSchedule) -> Result<Csv> {
    let n = data.len();
    schedule.validate(n)?;
    let total = schedule.total_steps(n);
    let mut opt = schedule.optimizer();
    let mut csv = Csv::new(&["step", "loss"]);
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        for batch in epoch_order(n, schedule.seed, epoch).chunks(schedule.batch) {
            let scale = 1.0 / batch.len() as f64;
            let frozen: &Backbone = model;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let e = &data.episodes[i];
                    let mut g = Graph::new();
                    let enc = frozen.encode_episode(&mut g, e)?;
                    let hs = frozen.forward_all_layers(&mut g, enc)?;
                    let pred = frozen.native_action_head(&mut g, *hs.last().expect("layers >= 2"))?;
                    let a = g.constant_slice(&[1, ACTION_DIMS], e.action.data())?;
                    let err = batch_sq_error(&mut g, pred, a)?;
                    let loss = g.scale(err, scale)?;
                    Ok((g.backward(loss)?, g.scalar(err)))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| numerical("teacher", step, e))?;
            let loss: f64 = results.iter().map(|r| r.1 * scale).sum();
            apply_ordered(model, results.into_iter().map(|r| r.0).collect());
            clip_grads(model, schedule.clip);
            step_module(model, &mut opt, schedule.lr_at(step, total)).map_err(|e| numerical("teacher", step, e))?;
            csv.push(vec![step.into(), loss.into()]);
            step += 1;
        }
    }
    zero_grads(model);
    Ok(csv)
}

/// Everything Stage II needs besides the student itself.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Inputs<'a> {
    pub data: &'a Dataset,
    pub cache: &'a CapsuleCache,
    pub weights: &'a LossWeights,
    /// `false` only in the regression test that shows the stop-gradient
    /// matters.
    pub stop_gradient: bool,
    /// learning-rate multiplier applied to `router/*` tensors
    pub router_lr_scale: f64,
}

struct SampleTape<'p> {
    g: Graph<'p>,
    gates: Var,
    capsules: Vec<Var>,
    actions: Vec<Var>,
}

fn sample_forward<'p>(
    student: &'p StudentModel,
    e: &crate::world::Episode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<SampleTape<'p>> {
    let mut rng = rng;
    let mut g = Graph::new();
    let enc = student.backbone.encode_episode(&mut g, e)?;
    let gates = student.compute_gates(&mut g, enc)?;
    let soft = student.soft_gated_forward(&mut g, enc, gates)?;
    let mut capsules = Vec::with_capacity(soft.states.len());
    let mut actions = Vec::with_capacity(soft.states.len());
    for (l, &z) in soft.states.iter().enumerate() {
        let out = student.layer_outputs(&mut g, l, z, rng.as_deref_mut())?;
        capsules.push(out.capsule);
        actions.push(out.action);
    }
    Ok(SampleTape {
        g,
        gates,
        capsules,
        actions,
    })
}

fn stack_rows(tapes: &[SampleTape<'_>], pick: impl Fn(&SampleTape<'_>) -> Var) -> Tensor {
    let first = pick(&tapes[0]);
    let cols = tapes[0].g.value(first).len();
    let mut data = Vec::with_capacity(tapes.len() * cols);
    for t in tapes {
        data.extend_from_slice(t.g.value(pick(t)));
    }
    Tensor::matrix(tapes.len(), cols, data).trainable()
}

fn gather(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Tensor {
    let data: Vec<f64> = rows.collect::<Vec<_>>().concat();
    Tensor::matrix(data.len() / cols, cols, data)
}

/// Loss and per-sample gradients of one Stage II batch. With `rng_seed =
/// None` dropout is off and the result is a deterministic function of the
/// parameters (used by gradient checks).
pub fn stage2_loss_and_grads(
    student: &StudentModel,
    inputs: &Stage2Inputs<'_>,
    batch: &[usize],
    rng_seed: Option<(u64, usize)>,
) -> Result<(LossReport, Vec<Gradients>)> {
    let layers = student.layers();
    let w = inputs.weights;
    let tapes = batch
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let mut rng = rng_seed.map(|(seed, step)| sample_rng(seed, 2, step, pos));
            sample_forward(student, &inputs.data.episodes[i], rng.as_mut())
        })
        .collect::<Result<Vec<_>>>()?;

    // Batch-level loss over detached copies of the per-sample outputs.
    let gates_t = stack_rows(&tapes, |t| t.gates);
    let caps_t: Vec<Tensor> = (0..layers).map(|l| stack_rows(&tapes, |t| t.capsules[l])).collect();
    let acts_t: Vec<Tensor> = (0..layers).map(|l| stack_rows(&tapes, |t| t.actions[l])).collect();
    let dc = caps_t[0].dims2().1;
    let mut bg = Graph::new();
    let gates = bg.param(&gates_t);
    let caps: Vec<Var> = caps_t.iter().map(|t| bg.param(t)).collect();
    let acts: Vec<Var> = acts_t.iter().map(|t| bg.param(t)).collect();
    let target = bg.constant(gather(batch.iter().map(|&i| inputs.data.episodes[i].action.data().to_vec()), ACTION_DIMS))?;
    let mut terms = LossTerms {
        sem: vec![None; layers],
        act: vec![None; layers],
        lb: None,
    };
    for l in 0..layers {
        if w.effective_alpha() > 0.0 {
            let tea = bg.constant(gather(batch.iter().map(|&i| inputs.cache.capsules[i][l].clone()), dc))?;
            terms.sem[l] = Some(semantic_loss(&mut bg, caps[l], tea, w.eta)?);
        }
        if w.effective_beta() > 0.0 {
            let tea = bg.constant(gather(batch.iter().map(|&i| inputs.cache.actions[i][l].clone()), ACTION_DIMS))?;
            let prev = (l > 0).then(|| acts[l - 1]);
            terms.act[l] = Some(action_loss(&mut bg, acts[l], target, tea, prev, inputs.stop_gradient)?);
        }
    }
    if w.effective_gamma() > 0.0 {
        terms.lb = Some(load_balance(&mut bg, gates)?);
    }
    let (total, report) = total_loss(&mut bg, &terms, w)?;

    if !bg.requires_grad(total) {
        return Ok((report, Vec::new()));
    }
    let adj = bg.backward(total)?;

    let row = |t: &Tensor, b: usize| -> Vec<f64> {
        let cols = t.dims2().1;
        adj.get(t).map_or_else(|| vec![0.0; cols], |g| g[b * cols..(b + 1) * cols].to_vec())
    };
    let grads = tapes
        .into_par_iter()
        .enumerate()
        .map(|(b, t)| {
            let mut seeds = vec![(t.gates, row(&gates_t, b))];
            for l in 0..layers {
                seeds.push((t.capsules[l], row(&caps_t[l], b)));
                seeds.push((t.actions[l], row(&acts_t[l], b)));
            }
            t.g.backward_seeded(&seeds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((report, grads))
}

/// One optimizer step of Stage II on `batch`. On a non-finite value the
/// student is left untouched and a numerical error naming the batch is
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    student: &mut StudentModel,
    opt: &mut OptimizerState,
    inputs: &Stage2Inputs<'_>,
    batch: &[usize],
    schedule: &TrainSchedule,
    step: usize,
    lr: f64,
) -> Result<LossReport> {
    let abort = |e: Error| match e {
        Error::NonFinite { context } => Error::Numerical {
            stage: "stage2",
            step,
            msg: format!("batch {step}: {context}"),
        },
        other => other,
    };
    let (mut report, grads) = stage2_loss_and_grads(student, inputs, batch, Some((schedule.seed, step))).map_err(abort)?;
    if !report.total.is_finite() {
        return Err(abort(Error::NonFinite {
            context: "total loss".into(),
        }));
    }
    apply_ordered(student, grads);
    report.grad_norm = clip_grads(student, schedule.clip);
    if !report.grad_norm.is_finite() {
        zero_grads(student);
        return Err(abort(Error::NonFinite {
            context: "gradient norm".into(),
        }));
    }
    let rs = inputs.router_lr_scale;
    step_module_scaled(student, opt, lr, |n| if n.starts_with("router/") { rs } else { 1.0 }).map_err(abort)?;
    Ok(report)
}

/// Loss CSV header of Stage II.
pub fn stage2_csv() -> Csv {
    Csv::new(&["step", "layer", "sem", "act", "lambda", "lb", "total"])
}

#[derive(Debug, Clone)]
pub struct Stage2Summary {
    pub losses: Csv,
    /// batch-mean gate per layer at every step
    pub gates: Csv,
    /// batches rolled back after a non-finite value
    pub skipped: Vec<usize>,
}

/// Full Stage II run. `check_frozen` runs before and after every epoch and
/// should verify the teacher and probe hashes.
pub fn stage2_train(
    student: &mut StudentModel,
    inputs: &Stage2Inputs<'_>,
    schedule: &TrainSchedule,
    check_frozen: impl Fn() -> Result<()>,
) -> Result<Stage2Summary> {
    let n = inputs.data.len();
    schedule.validate(n)?;
    inputs.weights.validate()?;
    if inputs.cache.capsules.len() != n || inputs.cache.layers != student.layers() {
        return Err(Error::shape(
            "stage2_train",
            format!(
                "cache has {} episodes x {} layers, expected {n} x {}",
                inputs.cache.capsules.len(),
                inputs.cache.layers,
                student.layers()
            ),
        ));
    }
    let total = schedule.total_steps(n);
    let mut opt = schedule.optimizer();
    let mut summary = Stage2Summary {
        losses: stage2_csv(),
        gates: Csv::new(&["step", "layer", "mean_gate"]),
        skipped: Vec::new(),
    };
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        check_frozen()?;
        for batch in epoch_order(n, schedule.seed, epoch).chunks(schedule.batch) {
            let lr = schedule.lr_at(step, total);
            match stage2_step(student, &mut opt, inputs, batch, schedule, step, lr) {
                Ok(r) => {
                    for l in 0..r.sem.len() {
                        summary.losses.push(vec![
                            step.into(),
                            l.into(),
                            r.sem[l].into(),
                            r.act[l].into(),
                            r.lambda[l].into(),
                            r.lb.into(),
                            r.total.into(),
                        ]);
                    }
                }
                Err(Error::Numerical { .. }) => summary.skipped.push(step),
                Err(e) => return Err(e),
            }
            let means = batch_gate_means(student, inputs.data, batch)?;
            for (l, m) in means.iter().enumerate() {
                summary.gates.push(vec![step.into(), l.into(), (*m).into()]);
            }
            step += 1;
        }
        check_frozen()?;
    }
    zero_grads(student);
    Ok(summary)
}

fn batch_gate_means(student: &StudentModel, data: &Dataset, batch: &[usize]) -> Result<Vec<f64>> {
    let gs = batch
        .par_iter()
        .map(|&i| student.gate_values(&data.episodes[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut m = vec![0.0; student.layers()];
    for g in &gs {
        m.iter_mut().zip(g).for_each(|(a, v)| *a += v / gs.len() as f64);
    }
    Ok(m)
}

/// Guard used by Stage II: both frozen models must keep their hashes.
pub fn frozen_guard<'a>(teacher: &'a Backbone, probe: &'a crate::probe::TeacherProbe) -> impl Fn() -> Result<()> + 'a {
    let (th, ph) = (module_hash(teacher), module_hash(probe));
    move || {
        if module_hash(teacher) != th || module_hash(probe) != ph {
            return Err(Error::integrity(IntegrityKind::FrozenViolation, "teacher or probe changed during stage 2"));
        }
        Ok(())
    }
}
