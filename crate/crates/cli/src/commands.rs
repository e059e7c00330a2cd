use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use gatedistill::checkpoint::Container;
use gatedistill::config::Config;
use gatedistill::gradcheck::{run_suite, SUITE_TOL};
use gatedistill::metrics::{activation_histogram, eval_csv, evaluate, gate_trace, sweep_skip_n, sweep_tau, teacher_success};
use gatedistill::nn::{module_hash, set_trainable};
use gatedistill::pipeline::{
    ablation_configs, backbone_config, build_probe, build_student, build_teacher, datasets, manifest, probe_seed, run_ablation,
    AblationKind,
};
use gatedistill::probe::{export_teacher_capsules, layer_errors, CapsuleCache};
use gatedistill::report::Csv;
use gatedistill::trainer::{load_checkpoint, save_checkpoint, RunManifest};
use gatedistill::{Backbone, Dataset, Error, IntegrityKind, Result, StudentModel, TeacherProbe};

use crate::Common;

/// Defaults, then the config file, then `--seed`, then `--set` overrides.
pub fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = Config::default();
    let mut lines = HashMap::new();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        lines = cfg.apply_text(&text)?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.apply_overrides(&common.sets, &mut lines)?;
    cfg.validate_with_lines(&lines)?;
    Ok(cfg)
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::Integrity {
        kind: IntegrityKind::HashMismatch,
        msg: msg.into(),
    }
}

pub struct Ctx {
    cfg: Config,
    out: PathBuf,
    seed: u64,
}

impl Ctx {
    pub fn new(cfg: Config, out: PathBuf, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            out,
            seed: seed.unwrap_or(0),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn open(&self, name: &str, producer: &str) -> Result<Container> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Integrity {
                kind: IntegrityKind::MissingArtifact,
                msg: format!("{} not found; run {producer} first", p.display()),
            });
        }
        Container::load(&p)
    }

    fn write(&self, csv: &Csv, name: &str) -> Result<()> {
        csv.write(&self.path(name))?;
        println!("wrote {}", self.path(name).display());
        Ok(())
    }

    fn load_split(&self, name: &str, start: u64, count: usize) -> Result<Dataset> {
        let d = Dataset::from_container(&self.open(name, "gen-data")?)?;
        let m = &d.manifest;
        if m.config_hash != self.cfg.world.hash() || m.start != start || m.count != count {
            return Err(mismatch(format!("{name} was generated for a different world or split; rerun gen-data")));
        }
        Ok(d)
    }

    fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.cfg.data;
        let train = self.load_split(&self.cfg.paths.train_data, 0, d.train_episodes)?;
        let test = self.load_split(&self.cfg.paths.test_data, d.train_episodes as u64, d.test_episodes)?;
        Ok((train, test))
    }

    fn load_teacher(&self, train: &Dataset) -> Result<Backbone> {
        let mut t = Backbone::new(&backbone_config(&self.cfg))?;
        let c = self.open(&self.cfg.paths.teacher, "train-teacher")?;
        let man = gatedistill::trainer::restore_from(&c, &mut t)?;
        if man.dataset_hash != train.hash() {
            return Err(mismatch("teacher was trained on a different dataset"));
        }
        set_trainable(&mut t, false);
        Ok(t)
    }

    fn load_probe(&self, teacher: &Backbone, train: &Dataset) -> Result<(TeacherProbe, CapsuleCache)> {
        let mut p = TeacherProbe::new(&teacher.cfg, &self.cfg.graph, probe_seed(&self.cfg));
        let c = self.open(&self.cfg.paths.probe, "stage1")?;
        let man = gatedistill::trainer::restore_from(&c, &mut p)?;
        if man.teacher_hash != module_hash(teacher) {
            return Err(mismatch("probe belongs to a different teacher"));
        }
        set_trainable(&mut p, false);
        let cache = CapsuleCache::from_container(&self.open(&self.cfg.paths.cache, "stage1")?, &module_hash(&p), train.hash())?;
        Ok((p, cache))
    }

    fn load_student(&self) -> Result<(StudentModel, Dataset)> {
        let (train, test) = self.load_data()?;
        let teacher = self.load_teacher(&train)?;
        let (probe, _) = self.load_probe(&teacher, &train)?;
        let mut s = StudentModel::from_teacher(&teacher, &probe, self.cfg.router.bias_init)?;
        let p = self.path(&self.cfg.paths.student);
        if !p.exists() {
            return Err(Error::Integrity {
                kind: IntegrityKind::MissingArtifact,
                msg: format!("{} not found; run stage2 first", p.display()),
            });
        }
        let man: RunManifest = load_checkpoint(&p, &mut s)?;
        if man.teacher_hash != module_hash(&teacher) || man.probe_hash != module_hash(&probe) {
            return Err(mismatch("student belongs to a different teacher or probe"));
        }
        Ok((s, test))
    }

    pub fn gen_data(&self) -> Result<bool> {
        let (train, test) = datasets(&self.cfg)?;
        let mut csv = Csv::new(&["split", "episodes", "hash"]);
        for (split, d, name) in [("train", &train, &self.cfg.paths.train_data), ("test", &test, &self.cfg.paths.test_data)] {
            d.to_container()?.save(&self.path(name))?;
            csv.push(vec![split.into(), d.len().into(), d.hash().into()]);
            println!("{split}_hash={}", d.hash());
        }
        self.write(&csv, "data.csv")?;
        Ok(true)
    }

    pub fn train_teacher(&self) -> Result<bool> {
        let (train, test) = self.load_data()?;
        let (teacher, curve) = build_teacher(&self.cfg, &train)?;
        save_checkpoint(&self.path(&self.cfg.paths.teacher), &teacher, &manifest(&self.cfg, &train, "teacher", None, None))?;
        self.write(&curve, "teacher_loss.csv")?;
        let mut csv = Csv::new(&["split", "success", "action_mse"]);
        for (split, d) in [("train", &train), ("test", &test)] {
            let (s, mse) = teacher_success(&teacher, d, self.cfg.success_threshold)?;
            csv.push(vec![split.into(), s.into(), mse.into()]);
            println!("teacher_{split}_success={s}");
        }
        self.write(&csv, "teacher_eval.csv")?;
        Ok(true)
    }

    pub fn stage1(&self) -> Result<bool> {
        let (train, test) = self.load_data()?;
        let teacher = self.load_teacher(&train)?;
        let (probe, curve, cache) = build_probe(&self.cfg, &teacher, &train)?;
        save_checkpoint(&self.path(&self.cfg.paths.probe), &probe, &manifest(&self.cfg, &train, "stage1", Some(&teacher), None))?;
        cache.to_container()?.save(&self.path(&self.cfg.paths.cache))?;
        self.write(&curve, "stage1_loss.csv")?;
        let train_err = layer_errors(&cache, &train);
        let test_err = layer_errors(&export_teacher_capsules(&teacher, &probe, &test)?, &test);
        let mut csv = Csv::new(&["layer", "train_mse", "test_mse"]);
        for (l, (a, b)) in train_err.iter().zip(&test_err).enumerate() {
            csv.push(vec![l.into(), (*a).into(), (*b).into()]);
        }
        self.write(&csv, "stage1_layers.csv")?;
        Ok(true)
    }

    pub fn stage2(&self) -> Result<bool> {
        let (train, _) = self.load_data()?;
        let teacher = self.load_teacher(&train)?;
        let (probe, cache) = self.load_probe(&teacher, &train)?;
        let (student, summary) = build_student(&self.cfg, &teacher, &probe, &cache, &train)?;
        let man = manifest(&self.cfg, &train, "stage2", Some(&teacher), Some(&probe));
        save_checkpoint(&self.path(&self.cfg.paths.student), &student, &man)?;
        self.write(&summary.losses, "stage2_loss.csv")?;
        self.write(&summary.gates, "stage2_gates.csv")?;
        println!("skipped_batches={}", summary.skipped.len());
        Ok(true)
    }

    pub fn eval(&self) -> Result<bool> {
        let (student, test) = self.load_student()?;
        let thr = self.cfg.success_threshold;
        let dense = evaluate(&student, &test, 0.0, thr)?;
        let routed = evaluate(&student, &test, self.cfg.router.tau, thr)?;
        println!("dense_success={} routed_success={} flops_ratio={}", dense.success, routed.success, routed.flops_ratio);
        self.write(&eval_csv(&[dense, routed.clone()]), "eval.csv")?;
        self.write(&gate_trace(&routed), "gate_trace.csv")?;
        Ok(true)
    }

    pub fn sweep_tau(&self, taus: &[f64]) -> Result<bool> {
        let (student, test) = self.load_student()?;
        let (csv, _) = sweep_tau(&student, &test, taus, self.cfg.success_threshold)?;
        self.write(&csv, "sweep_tau.csv")?;
        Ok(true)
    }

    pub fn sweep_skip(&self, ns: &[usize]) -> Result<bool> {
        let (student, test) = self.load_student()?;
        let ns: Vec<usize> = if ns.is_empty() { (0..student.layers()).collect() } else { ns.to_vec() };
        let (csv, _) = sweep_skip_n(&student, &test, &ns, self.cfg.success_threshold)?;
        self.write(&csv, "sweep_skip.csv")?;
        Ok(true)
    }

    pub fn activation_hist(&self) -> Result<bool> {
        let (student, test) = self.load_student()?;
        let r = evaluate(&student, &test, self.cfg.router.tau, self.cfg.success_threshold)?;
        self.write(&activation_histogram(&r), "activation_hist.csv")?;
        Ok(true)
    }

    pub fn gradcheck(&self, instances: usize) -> Result<bool> {
        let results = run_suite(self.seed, instances)?;
        let mut csv = Csv::new(&["check", "instance", "coords", "rel_err", "pass"]);
        for r in &results {
            csv.push(vec![r.check.into(), r.instance.into(), r.coords.into(), r.rel_err.into(), r.passed().into()]);
        }
        self.write(&csv, "gradcheck.csv")?;
        let worst = results.iter().map(|r| r.rel_err).fold(0.0, f64::max);
        let failed = results.iter().filter(|r| !r.passed()).count();
        println!("instances={} failed={failed} max_rel_err={worst:e} tol={SUITE_TOL:e}", results.len());
        Ok(failed == 0)
    }

    pub fn ablate(&self, kind: &str, values: Option<&str>) -> Result<bool> {
        let kind: AblationKind = kind.parse()?;
        let variants = ablation_configs(&self.cfg, kind, values)?;
        let (train, test) = self.load_data()?;
        let teacher = self.load_teacher(&train)?;
        let base = self.load_probe(&teacher, &train).ok();
        let csv = run_ablation(&self.cfg, &variants, &teacher, base.as_ref().map(|(p, c)| (p, c)), &train, &test)?;
        let name = format!("ablation_{}.csv", kind_name(kind));
        self.write(&csv, &name)?;
        Ok(true)
    }
}

fn kind_name(k: AblationKind) -> &'static str {
    match k {
        AblationKind::Encoder => "encoder",
        AblationKind::Losses => "losses",
        AblationKind::K => "k",
        AblationKind::Ratio => "ratio",
    }
}
