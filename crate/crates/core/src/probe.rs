//! Stage I: with the teacher frozen, fit one capsule encoder and one
//! auxiliary action head per layer on the teacher's hidden states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::Container;
use crate::error::{Error, IntegrityKind, Result};
use crate::graph::{encapsulate, CapsuleParams, GraphConfig};
use crate::losses::batch_sq_error;
use crate::nn::{module_hash, Mlp, Module};
use crate::report::Csv;
use crate::tensor::{hex, Tensor};
use crate::trainer::{apply_ordered, epoch_order, sample_rng, TrainSchedule};
use crate::world::{Dataset, Episode, ACTION_DIMS};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherProbe {
    pub graph: Vec<CapsuleParams>,
    /// `H_l^tea: d_c -> hidden -> 7`
    pub heads: Vec<Mlp>,
    pub cfg: GraphConfig,
}

impl Module for TeacherProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (c, h)) in self.graph.iter().zip(&self.heads).enumerate() {
            c.visit_named(&format!("probe/layer{i}"), f);
            h.visit_named(&format!("probe/layer{i}/head"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (c, h)) in self.graph.iter_mut().zip(self.heads.iter_mut()).enumerate() {
            c.visit_named_mut(&format!("probe/layer{i}"), f);
            h.visit_named_mut(&format!("probe/layer{i}/head"), f);
        }
    }
}

impl TeacherProbe {
    pub fn new(bcfg: &BackboneConfig, gcfg: &GraphConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graph = Vec::with_capacity(bcfg.layers);
        let mut heads = Vec::with_capacity(bcfg.layers);
        for _ in 0..bcfg.layers {
            graph.push(CapsuleParams::new(bcfg.width, gcfg.affinity_dim, bcfg.capsule_dim, &mut rng));
            heads.push(Mlp::new(bcfg.capsule_dim, bcfg.head_hidden, ACTION_DIMS, &mut rng));
        }
        Self {
            graph,
            heads,
            cfg: gcfg.clone(),
        }
    }

    pub fn layers(&self) -> usize {
        self.graph.len()
    }

    pub fn is_calibrated(&self) -> bool {
        self.graph.iter().all(CapsuleParams::is_calibrated)
    }

    /// Capsule and head prediction of layer `l` for states `h` on `g`.
    pub fn layer_outputs<'p, R: Rng>(
        &'p self,
        g: &mut Graph<'p>,
        layer: usize,
        h: Var,
        mut rng: Option<&mut R>,
    ) -> Result<(Var, Var)> {
        let enc = encapsulate(g, h, &self.graph[layer], &self.cfg, rng.as_deref_mut())?;
        let a = self.heads[layer].forward(g, enc.capsule, self.cfg.dropout, rng)?;
        Ok((enc.capsule, a))
    }

    /// Freezes the standardisation statistics from one eval-mode pass of the
    /// current parameters over `states`.
    pub fn calibrate(&mut self, states: &[Vec<Tensor>]) -> Result<()> {
        let layers = self.layers();
        let raw: Vec<Vec<Vec<f64>>> = states
            .par_iter()
            .map(|hs| {
                let mut g = Graph::new();
                (0..layers)
                    .map(|l| {
                        let h = g.constant(hs[l].clone())?;
                        let enc = encapsulate::<ChaCha8Rng>(&mut g, h, &self.graph[l], &self.cfg, None)?;
                        Ok(g.value(enc.raw).to_vec())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for l in 0..layers {
            let rows: Vec<Vec<f64>> = raw.iter().map(|r| r[l].clone()).collect();
            self.graph[l].calibrate(&rows)?;
        }
        Ok(())
    }
}

/// Teacher hidden states `h_1..h_L` for every episode.
pub fn teacher_states(teacher: &Backbone, episodes: &[Episode]) -> Result<Vec<Vec<Tensor>>> {
    episodes
        .par_iter()
        .map(|e| {
            let mut g = Graph::new();
            let enc = teacher.encode_episode(&mut g, e)?;
            let hs = teacher.forward_all_layers(&mut g, enc)?;
            Ok(hs.into_iter().map(|h| g.to_tensor(h)).collect())
        })
        .collect()
}

/// `Σ_l ‖H_l(s_l) − a‖²` for one sample; also returns each layer's term.
pub fn aux_loss<'p, R: Rng>(
    g: &mut Graph<'p>,
    probe: &'p TeacherProbe,
    hidden: &[Var],
    action: Var,
    mut rng: Option<&mut R>,
) -> Result<(Var, Vec<Var>)> {
    if hidden.len() != probe.layers() {
        return Err(Error::shape("aux_loss", format!("{} hidden states for {} probe layers", hidden.len(), probe.layers())));
    }
    let mut terms = Vec::with_capacity(hidden.len());
    for (l, &h) in hidden.iter().enumerate() {
        let (_, pred) = probe.layer_outputs(g, l, h, rng.as_deref_mut())?;
        terms.push(batch_sq_error(g, pred, action)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, terms))
}

/// Loss curve of a Stage I run: one row per step and layer.
pub fn stage1_csv() -> Csv {
    Csv::new(&["step", "layer", "aux_mse"])
}

/// Trains the probe on the frozen teacher's hidden states. Calibrates the
/// standardisation first when it has not been done yet.
pub fn stage1_train(
    teacher: &Backbone,
    probe: &mut TeacherProbe,
    data: &Dataset,
    schedule: &TrainSchedule,
) -> Result<Csv> {
    let teacher_hash = module_hash(teacher);
    let states = teacher_states(teacher, &data.episodes)?;
    if !probe.is_calibrated() {
        probe.calibrate(&states)?;
    }
    stage1_train_on_states(probe, &states, &data.episodes, schedule, || {
        if module_hash(teacher) != teacher_hash {
            return Err(Error::integrity(IntegrityKind::FrozenViolation, "teacher parameters changed during stage 1"));
        }
        Ok(())
    })
}

/// Stage I loop over precomputed hidden states. `check_frozen` runs before
/// and after every epoch.
pub fn stage1_train_on_states(
    probe: &mut TeacherProbe,
    states: &[Vec<Tensor>],
    episodes: &[Episode],
    schedule: &TrainSchedule,
    check_frozen: impl Fn() -> Result<()>,
) -> Result<Csv> {
    let n = episodes.len();
    schedule.validate(n)?;
    let total = schedule.total_steps(n);
    let layers = probe.layers();
    let mut opt = schedule.optimizer();
    let mut csv = stage1_csv();
    let mut step = 0usize;
    for epoch in 0..schedule.epochs {
        check_frozen()?;
        let order = epoch_order(n, schedule.seed, epoch);
        for batch in order.chunks(schedule.batch) {
            let scale = 1.0 / batch.len() as f64;
            let frozen: &TeacherProbe = probe;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let mut rng = sample_rng(schedule.seed, 1, step, pos);
                    let mut g = Graph::new();
                    let hidden = states[i]
                        .iter()
                        .map(|h| g.constant(h.clone()))
                        .collect::<Result<Vec<_>>>()?;
                    let a = g.constant_slice(&[1, ACTION_DIMS], episodes[i].action.data())?;
                    let (loss, terms) = aux_loss(&mut g, frozen, &hidden, a, Some(&mut rng))?;
                    let per_layer: Vec<f64> = terms.iter().map(|&t| g.scalar(t)).collect();
                    let loss = g.scale(loss, scale)?;
                    Ok((g.backward(loss)?, per_layer))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| numerical("stage1", step, e))?;
            let mut layer_mse = vec![0.0; layers];
            let grads = results
                .into_iter()
                .map(|(gr, per)| {
                    layer_mse.iter_mut().zip(&per).for_each(|(m, v)| *m += v * scale);
                    gr
                })
                .collect();
            apply_ordered(probe, grads);
            crate::nn::clip_grads(probe, schedule.clip);
            let lr = schedule.lr_at(step, total);
            crate::optim::step_module(probe, &mut opt, lr).map_err(|e| numerical("stage1", step, e))?;
            for (l, m) in layer_mse.iter().enumerate() {
                csv.push(vec![step.into(), l.into(), (*m).into()]);
            }
            step += 1;
        }
        check_frozen()?;
    }
    crate::nn::zero_grads(probe);
    Ok(csv)
}

pub(crate) fn numerical(stage: &'static str, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { context } => Error::Numerical {
            stage,
            step,
            msg: context,
        },
        other => other,
    }
}

/// Teacher capsule and head prediction per episode and layer, computed in
/// eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleCache {
    pub layers: usize,
    /// `[episode][layer]`
    pub capsules: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub probe_hash: String,
    pub dataset_hash: String,
}

impl CapsuleCache {
    pub fn entries(&self) -> usize {
        self.capsules.iter().map(Vec::len).sum()
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (cs, as_) in self.capsules.iter().zip(&self.actions) {
            for v in cs.iter().chain(as_) {
                for x in v {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "capsule-cache");
        c.set_meta("layers", self.layers);
        c.set_meta("episodes", self.capsules.len());
        c.set_meta("probe_hash", &self.probe_hash);
        c.set_meta("dataset_hash", &self.dataset_hash);
        c.set_meta("content_hash", self.content_hash());
        for (i, (cs, as_)) in self.capsules.iter().zip(&self.actions).enumerate() {
            for l in 0..self.layers {
                c.insert(format!("cache/{i}/{l}/s"), Tensor::from_vec(cs[l].clone()))?;
                c.insert(format!("cache/{i}/{l}/a"), Tensor::from_vec(as_[l].clone()))?;
            }
        }
        Ok(c)
    }

    /// Rebuilds a cache and checks it belongs to the given probe and dataset.
    pub fn from_container(c: &Container, probe_hash: &str, dataset_hash: &str) -> Result<Self> {
        c.expect_meta("probe_hash", probe_hash)?;
        c.expect_meta("dataset_hash", dataset_hash)?;
        let parse = |k: &str| -> Result<usize> {
            c.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::integrity(IntegrityKind::Malformed, format!("cache meta {k} missing")))
        };
        let (layers, n) = (parse("layers")?, parse("episodes")?);
        let mut capsules = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let mut cs = Vec::with_capacity(layers);
            let mut as_ = Vec::with_capacity(layers);
            for l in 0..layers {
                cs.push(c.require(&format!("cache/{i}/{l}/s"))?.data().to_vec());
                as_.push(c.require(&format!("cache/{i}/{l}/a"))?.data().to_vec());
            }
            capsules.push(cs);
            actions.push(as_);
        }
        let cache = Self {
            layers,
            capsules,
            actions,
            probe_hash: probe_hash.to_string(),
            dataset_hash: dataset_hash.to_string(),
        };
        c.expect_meta("content_hash", &cache.content_hash())?;
        Ok(cache)
    }
}

/// Eval-mode teacher capsules and predictions for every episode.
pub fn export_teacher_capsules(teacher: &Backbone, probe: &TeacherProbe, data: &Dataset) -> Result<CapsuleCache> {
    let states = teacher_states(teacher, &data.episodes)?;
    export_from_states(probe, &states, data)
}

pub fn export_from_states(probe: &TeacherProbe, states: &[Vec<Tensor>], data: &Dataset) -> Result<CapsuleCache> {
    let layers = probe.layers();
    let per: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = states
        .par_iter()
        .map(|hs| {
            let mut g = Graph::new();
            let mut cs = Vec::with_capacity(layers);
            let mut as_ = Vec::with_capacity(layers);
            for (l, h) in hs.iter().enumerate() {
                let h = g.constant(h.clone())?;
                let (s, a) = probe.layer_outputs::<ChaCha8Rng>(&mut g, l, h, None)?;
                cs.push(g.value(s).to_vec());
                as_.push(g.value(a).to_vec());
            }
            Ok((cs, as_))
        })
        .collect::<Result<_>>()?;
    let (capsules, actions) = per.into_iter().unzip();
    Ok(CapsuleCache {
        layers,
        capsules,
        actions,
        probe_hash: module_hash(probe),
        dataset_hash: data.hash().to_string(),
    })
}

/// Per-layer eval-mode auxiliary error `mean_b ‖H_l(s_l) − a_b‖²`.
pub fn layer_errors(cache: &CapsuleCache, data: &Dataset) -> Vec<f64> {
    let n = data.len() as f64;
    (0..cache.layers)
        .map(|l| {
            cache
                .actions
                .iter()
                .zip(&data.episodes)
                .map(|(a, e)| a[l].iter().zip(e.action.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>())
                .sum::<f64>()
                / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_dataset, WorldConfig};

    fn tiny_cfg() -> (BackboneConfig, GraphConfig) {
        (
            BackboneConfig {
                layers: 2,
                width: 16,
                heads: 2,
                capsule_dim: 8,
                head_hidden: 8,
                ..Default::default()
            },
            GraphConfig {
                k: 4,
                affinity_dim: 4,
                ..Default::default()
            },
        )
    }

    fn zero_head(h: &mut Mlp) {
        h.visit_named_mut("h", &mut |_, t| t.data_mut().fill(0.0));
    }

    #[test]
    fn aux_loss_examples() {
        let (bc, gc) = tiny_cfg();
        let mut p = TeacherProbe::new(&bc, &gc, 0);
        for h in &mut p.heads {
            zero_head(h);
        }
        let e = crate::world::gen_episode(&WorldConfig::default(), 0).unwrap();
        let t = Backbone::new(&bc).unwrap();
        let states = teacher_states(&t, std::slice::from_ref(&e)).unwrap();

        let mut g = Graph::new();
        let hs: Vec<Var> = states[0].iter().map(|h| g.constant(h.clone()).unwrap()).collect();
        let ones = g.constant(Tensor::full(&[1, 7], 1.0)).unwrap();
        let (_, terms) = aux_loss::<ChaCha8Rng>(&mut g, &p, &hs[..], ones, None).unwrap();
        assert_eq!(g.scalar(terms[0]), 7.0);

        // heads whose output bias equals the target give zero loss
        for h in &mut p.heads {
            h.out.b.as_mut().unwrap().data_mut().copy_from_slice(e.action.data());
        }
        let mut g = Graph::new();
        let hs: Vec<Var> = states[0].iter().map(|h| g.constant(h.clone()).unwrap()).collect();
        let a = g.constant_slice(&[1, 7], e.action.data()).unwrap();
        let (total, _) = aux_loss::<ChaCha8Rng>(&mut g, &p, &hs[..], a, None).unwrap();
        assert_eq!(g.scalar(total), 0.0);
    }

    #[test]
    fn zero_epochs_keep_init_and_cache_shape() {
        let (bc, gc) = tiny_cfg();
        let t = Backbone::new(&bc).unwrap();
        let data = make_dataset(&WorldConfig::default(), 6).unwrap();
        let mut p = TeacherProbe::new(&bc, &gc, 0);
        let before = p.clone();
        let sched = TrainSchedule {
            epochs: 0,
            ..TrainSchedule::default()
        };
        stage1_train(&t, &mut p, &data, &sched).unwrap();
        assert!(p.is_calibrated());
        let mut uncal = p.clone();
        for c in &mut uncal.graph {
            c.std_mean = before.graph[0].std_mean.clone();
            c.std_var = before.graph[0].std_var.clone();
        }
        assert_eq!(uncal, before);

        let cache = export_teacher_capsules(&t, &p, &data).unwrap();
        assert_eq!(cache.entries(), 6 * 2);
        let again = export_teacher_capsules(&t, &p, &data).unwrap();
        assert_eq!(cache.content_hash(), again.content_hash());
        let c = cache.to_container().unwrap();
        let back = CapsuleCache::from_container(&c, &cache.probe_hash, &cache.dataset_hash).unwrap();
        assert_eq!(back, cache);
        assert!(CapsuleCache::from_container(&c, "other", &cache.dataset_hash).is_err());
    }

    #[test]
    fn stage1_is_deterministic() {
        let (bc, gc) = tiny_cfg();
        let t = Backbone::new(&bc).unwrap();
        let data = make_dataset(&WorldConfig::default(), 8).unwrap();
        let sched = TrainSchedule {
            epochs: 2,
            batch: 4,
            warmup: 1,
            ..TrainSchedule::default()
        };
        let run = || {
            let mut p = TeacherProbe::new(&bc, &gc, 0);
            stage1_train(&t, &mut p, &data, &sched).unwrap().render()
        };
        assert_eq!(run(), run());
    }
}
