#![allow(dead_code)]

use gatedistill::backbone::BackboneConfig;
use gatedistill::graph::GraphConfig;
use gatedistill::nn::Module;
use gatedistill::world::{make_range, WorldConfig};
use gatedistill::{Backbone, Dataset, StudentModel, TeacherProbe, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A bag of trainable leaves, for differentiating free-standing inputs.
#[derive(Debug, Clone)]
pub struct Leaves(pub Vec<Tensor>);

impl Module for Leaves {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, t) in self.0.iter().enumerate() {
            f(&format!("leaf{i}"), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.0.iter_mut().enumerate() {
            f(&format!("leaf{i}"), t);
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        layers: 3,
        width: 16,
        heads: 2,
        capsule_dim: 8,
        head_hidden: 16,
        ..Default::default()
    }
}

pub fn tiny_graph() -> GraphConfig {
    GraphConfig {
        k: 4,
        affinity_dim: 4,
        dropout: 0.0,
        ..Default::default()
    }
}

pub fn data(n: usize) -> Dataset {
    make_range(&WorldConfig::default(), 0, n).unwrap()
}

/// Teacher, uncalibrated probe and a student whose router weights are
/// random, so gates spread around one half.
pub fn routed_student(seed: u64) -> (Backbone, TeacherProbe, StudentModel) {
    let cfg = BackboneConfig { seed, ..tiny_backbone() };
    let teacher = Backbone::new(&cfg).unwrap();
    let probe = TeacherProbe::new(&cfg, &tiny_graph(), seed + 1);
    let mut student = StudentModel::from_teacher(&teacher, &probe, 0.0).unwrap();
    let mut r = rng(seed + 2);
    for (w, b) in student.router.w.iter_mut().zip(student.router.b.iter_mut()) {
        w.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        b.data_mut()[0] = r.gen_range(-1.0..1.0);
    }
    (teacher, probe, student)
}
