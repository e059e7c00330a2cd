//! Flat `key = value` configuration with namespaced keys.
//!
//! Every key has a default; unknown keys, unparsable values and violated
//! invariants are reported with the line that introduced them (line 0 means
//! a command-line override).

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::{EncoderKind, GraphConfig};
use crate::losses::LossWeights;
use crate::metrics::SUCCESS_THRESHOLD;
use crate::tensor::hex;
use crate::trainer::TrainSchedule;
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RouterConfig {
    pub tau: f64,
    pub bias_init: f64,
    /// learning-rate multiplier for the router during Stage II
    pub lr_scale: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            bias_init: -1.0,
            lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_episodes: usize,
    pub test_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_episodes: 4096,
            test_episodes: 512,
        }
    }
}

/// Artifact file names inside the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub train_data: String,
    pub test_data: String,
    pub teacher: String,
    pub probe: String,
    pub cache: String,
    pub student: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_data: "train.ckpt".into(),
            test_data: "test.ckpt".into(),
            teacher: "teacher.ckpt".into(),
            probe: "probe.ckpt".into(),
            cache: "capsules.ckpt".into(),
            student: "student.ckpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub loss: LossWeights,
    pub router: RouterConfig,
    /// Stage II schedule
    pub train: TrainSchedule,
    pub teacher: TrainSchedule,
    pub stage1: TrainSchedule,
    pub success_threshold: f64,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            graph: GraphConfig::default(),
            loss: LossWeights::default(),
            router: RouterConfig::default(),
            train: TrainSchedule::default(),
            teacher: TrainSchedule {
                epochs: 12,
                batch: 32,
                lr: 2e-3,
                warmup: 50,
                ..TrainSchedule::default()
            },
            stage1: TrainSchedule {
                epochs: 3,
                ..TrainSchedule::default()
            },
            success_threshold: SUCCESS_THRESHOLD,
            paths: Paths::default(),
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("cannot parse {v:?} as bool")),
    }
}

fn schedule_key(s: &mut TrainSchedule, field: &str, v: &str) -> Option<std::result::Result<(), String>> {
    let r = match field {
        "lr" => num(v).map(|x| s.lr = x),
        "epochs" => num(v).map(|x| s.epochs = x),
        "batch" => num(v).map(|x| s.batch = x),
        "warmup" => num(v).map(|x| s.warmup = x),
        "clip" => num(v).map(|x| s.clip = x),
        "seed" => num(v).map(|x| s.seed = x),
        "weight_decay" => num(v).map(|x| s.weight_decay = x),
        "cosine" => flag(v).map(|x| s.cosine = x),
        _ => return None,
    };
    Some(r)
}

fn schedule_entries(prefix: &str, s: &TrainSchedule, out: &mut Vec<(String, String)>) {
    for (k, v) in [
        ("lr", s.lr.to_string()),
        ("epochs", s.epochs.to_string()),
        ("batch", s.batch.to_string()),
        ("warmup", s.warmup.to_string()),
        ("clip", s.clip.to_string()),
        ("seed", s.seed.to_string()),
        ("weight_decay", s.weight_decay.to_string()),
        ("cosine", s.cosine.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

impl Config {
    /// Sets one key. The error string does not carry a line number.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        let (ns, field) = key.split_once('.').ok_or_else(|| format!("unknown key {key:?}"))?;
        let r = match (ns, field) {
            ("world", "n_tokens") => num(v).map(|x| self.world.n_tokens = x),
            ("world", "token_dim") => num(v).map(|x| {
                self.world.token_dim = x;
                self.backbone.token_dim = x;
            }),
            ("world", "n_objects") => num(v).map(|x| self.world.n_objects = x),
            ("world", "noise_std") => num(v).map(|x| self.world.noise_std = x),
            ("world", "seed") => num(v).map(|x| self.world.seed = x),
            ("data", "train_episodes") => num(v).map(|x| self.data.train_episodes = x),
            ("data", "test_episodes") => num(v).map(|x| self.data.test_episodes = x),
            ("backbone", "layers") => num(v).map(|x| self.backbone.layers = x),
            ("backbone", "width") => num(v).map(|x| self.backbone.width = x),
            ("backbone", "heads") => num(v).map(|x| self.backbone.heads = x),
            ("backbone", "ffn_mult") => num(v).map(|x| self.backbone.ffn_mult = x),
            ("backbone", "capsule_dim") => num(v).map(|x| self.backbone.capsule_dim = x),
            ("backbone", "head_hidden") => num(v).map(|x| self.backbone.head_hidden = x),
            ("backbone", "seed") => num(v).map(|x| self.backbone.seed = x),
            ("graph", "k") => num(v).map(|x| self.graph.k = x),
            ("graph", "affinity_dim") => num(v).map(|x| self.graph.affinity_dim = x),
            ("graph", "dropout") => num(v).map(|x| self.graph.dropout = x),
            ("graph", "encoder") => v.parse::<EncoderKind>().map(|x| self.graph.encoder = x).map_err(|e| e.to_string()),
            ("loss", "alpha") => num(v).map(|x| self.loss.alpha = x),
            ("loss", "beta") => num(v).map(|x| self.loss.beta = x),
            ("loss", "eta") => num(v).map(|x| self.loss.eta = x),
            ("loss", "gamma") => num(v).map(|x| self.loss.gamma = x),
            ("loss", "kappa") => num(v).map(|x| self.loss.kappa = x),
            ("loss", "use_sem") => flag(v).map(|x| self.loss.use_sem = x),
            ("loss", "use_act") => flag(v).map(|x| self.loss.use_act = x),
            ("loss", "use_lb") => flag(v).map(|x| self.loss.use_lb = x),
            ("router", "tau") => num(v).map(|x| self.router.tau = x),
            ("router", "bias_init") => num(v).map(|x| self.router.bias_init = x),
            ("router", "lr_scale") => num(v).map(|x| self.router.lr_scale = x),
            ("eval", "success_threshold") => num(v).map(|x| self.success_threshold = x),
            ("paths", "train_data") => Ok(self.paths.train_data = v.to_string()),
            ("paths", "test_data") => Ok(self.paths.test_data = v.to_string()),
            ("paths", "teacher") => Ok(self.paths.teacher = v.to_string()),
            ("paths", "probe") => Ok(self.paths.probe = v.to_string()),
            ("paths", "cache") => Ok(self.paths.cache = v.to_string()),
            ("paths", "student") => Ok(self.paths.student = v.to_string()),
            ("train", f) => schedule_key(&mut self.train, f, v).unwrap_or_else(|| Err(format!("unknown key {key:?}"))),
            ("teacher", f) => schedule_key(&mut self.teacher, f, v).unwrap_or_else(|| Err(format!("unknown key {key:?}"))),
            ("stage1", f) => schedule_key(&mut self.stage1, f, v).unwrap_or_else(|| Err(format!("unknown key {key:?}"))),
            _ => Err(format!("unknown key {key:?}")),
        };
        r.map_err(|m| if m.starts_with("unknown") { m } else { format!("{key}: {m}") })
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = [
            ("world.n_tokens", self.world.n_tokens.to_string()),
            ("world.token_dim", self.world.token_dim.to_string()),
            ("world.n_objects", self.world.n_objects.to_string()),
            ("world.noise_std", self.world.noise_std.to_string()),
            ("world.seed", self.world.seed.to_string()),
            ("data.train_episodes", self.data.train_episodes.to_string()),
            ("data.test_episodes", self.data.test_episodes.to_string()),
            ("backbone.layers", self.backbone.layers.to_string()),
            ("backbone.width", self.backbone.width.to_string()),
            ("backbone.heads", self.backbone.heads.to_string()),
            ("backbone.ffn_mult", self.backbone.ffn_mult.to_string()),
            ("backbone.capsule_dim", self.backbone.capsule_dim.to_string()),
            ("backbone.head_hidden", self.backbone.head_hidden.to_string()),
            ("backbone.seed", self.backbone.seed.to_string()),
            ("graph.k", self.graph.k.to_string()),
            ("graph.affinity_dim", self.graph.affinity_dim.to_string()),
            ("graph.dropout", self.graph.dropout.to_string()),
            ("graph.encoder", self.graph.encoder.to_string()),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.eta", self.loss.eta.to_string()),
            ("loss.gamma", self.loss.gamma.to_string()),
            ("loss.kappa", self.loss.kappa.to_string()),
            ("loss.use_sem", self.loss.use_sem.to_string()),
            ("loss.use_act", self.loss.use_act.to_string()),
            ("loss.use_lb", self.loss.use_lb.to_string()),
            ("router.tau", self.router.tau.to_string()),
            ("router.bias_init", self.router.bias_init.to_string()),
            ("router.lr_scale", self.router.lr_scale.to_string()),
            ("eval.success_threshold", self.success_threshold.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        schedule_entries("train", &self.train, &mut out);
        schedule_entries("teacher", &self.teacher, &mut out);
        schedule_entries("stage1", &self.stage1, &mut out);
        for (k, v) in [
            ("paths.train_data", &self.paths.train_data),
            ("paths.test_data", &self.paths.test_data),
            ("paths.teacher", &self.paths.teacher),
            ("paths.probe", &self.paths.probe),
            ("paths.cache", &self.paths.cache),
            ("paths.student", &self.paths.student),
        ] {
            out.push((k.to_string(), v.clone()));
        }
        out
    }

    /// `key = value` text that parses back to the same config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash over everything except output file names.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !k.starts_with("paths.") {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Checks cross-field invariants; the error names the offending key.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let fail = |k: &'static str, m: String| Err((k, m));
        let wrap = |k: &'static str, r: Result<()>| r.map_err(|e| (k, e.to_string()));
        wrap("world.n_objects", self.world.validate())?;
        wrap("backbone.width", self.backbone.validate())?;
        if self.graph.k < 1 {
            return fail("graph.k", "graph.k must be >= 1".into());
        }
        if self.graph.k > self.world.n_tokens + 1 {
            return fail("graph.k", format!("graph.k = {} exceeds the token count {}", self.graph.k, self.world.n_tokens + 1));
        }
        if self.graph.affinity_dim == 0 {
            return fail("graph.affinity_dim", "graph.affinity_dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.graph.dropout) {
            return fail("graph.dropout", "graph.dropout must lie in [0, 1)".into());
        }
        wrap("loss.alpha", self.loss.validate())?;
        if !(self.router.tau > 0.0 && self.router.tau < 1.0) {
            return fail("router.tau", format!("router.tau must lie in (0, 1), got {}", self.router.tau));
        }
        if !self.router.bias_init.is_finite() {
            return fail("router.bias_init", "router.bias_init must be finite".into());
        }
        if !(self.router.lr_scale >= 0.0 && self.router.lr_scale.is_finite()) {
            return fail("router.lr_scale", "router.lr_scale must be finite and >= 0".into());
        }
        if !(self.success_threshold > 0.0) {
            return fail("eval.success_threshold", "eval.success_threshold must be > 0".into());
        }
        if self.data.train_episodes == 0 || self.data.test_episodes == 0 {
            return fail("data.train_episodes", "episode counts must be >= 1".into());
        }
        let n = self.data.train_episodes;
        wrap("train.warmup", self.train.validate(n))?;
        wrap("teacher.warmup", self.teacher.validate(n))?;
        wrap("stage1.warmup", self.stage1.validate(n))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, m)| Error::config(m))
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let lines = cfg.apply_text(text)?;
        cfg.validate_with_lines(&lines)?;
        Ok(cfg)
    }

    /// Applies lines without validating; returns the line of each key.
    pub fn apply_text(&mut self, text: &str) -> Result<HashMap<String, usize>> {
        let mut seen = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got {body:?}"),
            })?;
            let k = k.trim();
            self.set(k, v).map_err(|msg| Error::Config { line, msg })?;
            seen.insert(k.to_string(), line);
        }
        Ok(seen)
    }

    /// Applies `key=value` overrides (line 0).
    pub fn apply_overrides(&mut self, sets: &[String], lines: &mut HashMap<String, usize>) -> Result<()> {
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("override must be key=value, got {s:?}"),
            })?;
            self.set(k.trim(), v).map_err(|msg| Error::Config { line: 0, msg })?;
            lines.insert(k.trim().to_string(), 0);
        }
        Ok(())
    }

    pub fn validate_with_lines(&self, lines: &HashMap<String, usize>) -> Result<()> {
        self.check().map_err(|(k, msg)| Error::Config {
            line: lines.get(k).copied().unwrap_or(0),
            msg,
        })
    }

    /// Master seed: world, initialisation and every training stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.backbone.seed = seed;
        self.train.seed = seed;
        self.teacher.seed = seed;
        self.stage1.seed = seed;
    }
}
