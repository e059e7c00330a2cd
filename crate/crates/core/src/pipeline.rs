//! End-to-end orchestration shared by the command line and the acceptance
//! suite: data, teacher, Stage I, Stage II, routed evaluation.

use crate::backbone::Backbone;
use crate::config::Config;
use crate::error::{Error, IntegrityKind, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::nn::{module_hash, set_trainable};
use crate::probe::{export_from_states, stage1_train_on_states, teacher_states, CapsuleCache, TeacherProbe};
use crate::report::Csv;
use crate::student::StudentModel;
use crate::trainer::{frozen_guard, stage2_train, train_teacher, RunManifest, Stage2Inputs, Stage2Summary};
use crate::world::{make_range, Dataset};

/// Train episodes `0..n_train`, test episodes right after them.
pub fn datasets(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let train = make_range(&cfg.world, 0, cfg.data.train_episodes)?;
    let test = make_range(&cfg.world, cfg.data.train_episodes as u64, cfg.data.test_episodes)?;
    Ok((train, test))
}

/// Backbone config with the world-dependent widths filled in.
pub fn backbone_config(cfg: &Config) -> crate::backbone::BackboneConfig {
    let mut b = cfg.backbone.clone();
    b.token_dim = cfg.world.token_dim;
    b
}

/// Trains and freezes the teacher.
pub fn build_teacher(cfg: &Config, train: &Dataset) -> Result<(Backbone, Csv)> {
    let mut t = Backbone::new(&backbone_config(cfg))?;
    let csv = train_teacher(&mut t, train, &cfg.teacher)?;
    set_trainable(&mut t, false);
    Ok((t, csv))
}

pub fn probe_seed(cfg: &Config) -> u64 {
    cfg.backbone.seed.wrapping_add(0x5EED)
}

/// Stage I on a frozen teacher; returns the probe, its loss curve and the
/// eval-mode capsule cache of `train`.
pub fn build_probe(cfg: &Config, teacher: &Backbone, train: &Dataset) -> Result<(TeacherProbe, Csv, CapsuleCache)> {
    let teacher_hash = module_hash(teacher);
    let states = teacher_states(teacher, &train.episodes)?;
    let mut probe = TeacherProbe::new(&teacher.cfg, &cfg.graph, probe_seed(cfg));
    probe.calibrate(&states)?;
    let csv = stage1_train_on_states(&mut probe, &states, &train.episodes, &cfg.stage1, || {
        if module_hash(teacher) != teacher_hash {
            return Err(Error::integrity(IntegrityKind::FrozenViolation, "teacher parameters changed during stage 1"));
        }
        Ok(())
    })?;
    set_trainable(&mut probe, false);
    let cache = export_from_states(&probe, &states, train)?;
    Ok((probe, csv, cache))
}

pub fn build_student(
    cfg: &Config,
    teacher: &Backbone,
    probe: &TeacherProbe,
    cache: &CapsuleCache,
    train: &Dataset,
) -> Result<(StudentModel, Stage2Summary)> {
    let mut student = StudentModel::from_teacher(teacher, probe, cfg.router.bias_init)?;
    let inputs = Stage2Inputs {
        data: train,
        cache,
        weights: &cfg.loss,
        stop_gradient: true,
        router_lr_scale: cfg.router.lr_scale,
    };
    let summary = stage2_train(&mut student, &inputs, &cfg.train, frozen_guard(teacher, probe))?;
    Ok((student, summary))
}

pub fn manifest(cfg: &Config, data: &Dataset, stage: &str, teacher: Option<&Backbone>, probe: Option<&TeacherProbe>) -> RunManifest {
    RunManifest {
        config_hash: cfg.hash(),
        dataset_hash: data.hash().to_string(),
        teacher_hash: teacher.map(module_hash).unwrap_or_default(),
        probe_hash: probe.map(module_hash).unwrap_or_default(),
        stage: stage.to_string(),
        version: String::new(),
    }
}

/// Everything produced by one full run.
pub struct Outcome {
    pub train: Dataset,
    pub test: Dataset,
    pub teacher: Backbone,
    pub teacher_curve: Csv,
    pub probe: TeacherProbe,
    pub stage1_curve: Csv,
    pub cache: CapsuleCache,
    pub student: StudentModel,
    pub stage2: Stage2Summary,
    pub dense: EvalReport,
    pub routed: EvalReport,
}

pub fn run_all(cfg: &Config) -> Result<Outcome> {
    cfg.validate()?;
    let (train, test) = datasets(cfg)?;
    let (teacher, teacher_curve) = build_teacher(cfg, &train)?;
    let (probe, stage1_curve, cache) = build_probe(cfg, &teacher, &train)?;
    let (student, stage2) = build_student(cfg, &teacher, &probe, &cache, &train)?;
    let dense = evaluate(&student, &test, 0.0, cfg.success_threshold)?;
    let routed = evaluate(&student, &test, cfg.router.tau, cfg.success_threshold)?;
    Ok(Outcome {
        train,
        test,
        teacher,
        teacher_curve,
        probe,
        stage1_curve,
        cache,
        student,
        stage2,
        dense,
        routed,
    })
}

/// Which knob an ablation run varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    /// graph encoder versus mean-pool MLP
    Encoder,
    /// full objective versus each term disabled
    Losses,
    /// neighbourhood size `k`
    K,
    /// `α:β` pairs
    Ratio,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "losses" => Ok(Self::Losses),
            "k" => Ok(Self::K),
            "ratio" => Ok(Self::Ratio),
            other => Err(Error::config(format!("ablation kind must be encoder, losses, k or ratio, got {other}"))),
        }
    }
}

/// Named config variants of `base`. `values` overrides the default grid of
/// the `k` (`"2,4,8"`) and `ratio` (`"0.5:1,1:1,1:0.5"`) sweeps.
pub fn ablation_configs(base: &Config, kind: AblationKind, values: Option<&str>) -> Result<Vec<(String, Config)>> {
    let with = |name: String, sets: &[(&str, String)]| -> Result<(String, Config)> {
        let mut c = base.clone();
        for (k, v) in sets {
            c.set(k, v).map_err(Error::config)?;
        }
        c.validate()?;
        Ok((name, c))
    };
    let list = |default: &str| -> Vec<String> {
        values.unwrap_or(default).split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    };
    match kind {
        AblationKind::Encoder => vec![
            with("gat".into(), &[("graph.encoder", "gat".into())]),
            with("mlp".into(), &[("graph.encoder", "mlp".into())]),
        ]
        .into_iter()
        .collect(),
        AblationKind::Losses => vec![
            with("full".into(), &[]),
            with("no_sem".into(), &[("loss.use_sem", "false".into())]),
            with("no_act".into(), &[("loss.use_act", "false".into())]),
            with("no_lb".into(), &[("loss.use_lb", "false".into())]),
        ]
        .into_iter()
        .collect(),
        AblationKind::K => list("2,4,8").into_iter().map(|k| with(format!("k={k}"), &[("graph.k", k.clone())])).collect(),
        AblationKind::Ratio => list("0.5:1,1:1,1:0.5")
            .into_iter()
            .map(|pair| {
                let (a, b) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::config(format!("ratio values must look like alpha:beta, got {pair:?}")))?;
                with(format!("{a}:{b}"), &[("loss.alpha", a.to_string()), ("loss.beta", b.to_string())])
            })
            .collect(),
    }
}

/// Stage I (when the encoder settings differ from `base`) and Stage II for
/// every variant, evaluated densely and at the configured threshold.
/// `base_probe` is reused by variants that keep the base encoder.
pub fn run_ablation(
    base: &Config,
    variants: &[(String, Config)],
    teacher: &Backbone,
    base_probe: Option<(&TeacherProbe, &CapsuleCache)>,
    train: &Dataset,
    test: &Dataset,
) -> Result<Csv> {
    let mut csv = Csv::new(&["variant", "tau", "success", "action_mse", "mean_executed", "flops_ratio", "backbone_ratio"]);
    for (name, cfg) in variants {
        let built;
        let (probe, cache) = match base_probe {
            Some(pc) if cfg.graph == base.graph && cfg.stage1 == base.stage1 => pc,
            _ => {
                let (p, _, c) = build_probe(cfg, teacher, train)?;
                built = (p, c);
                (&built.0, &built.1)
            }
        };
        let (student, _) = build_student(cfg, teacher, probe, cache, train)?;
        for tau in [0.0, cfg.router.tau] {
            let r = evaluate(&student, test, tau, cfg.success_threshold)?;
            csv.push(vec![
                name.as_str().into(),
                tau.into(),
                r.success.into(),
                r.action_mse.into(),
                r.mean_executed.into(),
                r.flops_ratio.into(),
                r.backbone_ratio.into(),
            ]);
        }
    }
    Ok(csv)
}
