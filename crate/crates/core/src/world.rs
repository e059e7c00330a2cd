//! Synthetic embodied episodes with an analytic ground-truth action.
//!
//! Each episode is a set of visual tokens, an instruction naming a target
//! object, a receptacle object and a gripper command, and the 7-DoF action
//! that moves the target onto the receptacle:
//!
//! * `a[0..3]` receptacle position minus target position,
//! * `a[3..6]` `0.1 ×` the unit direction of `a[0..3]` (zero if coincident),
//! * `a[6]` the gripper command, `±1`.
//!
//! Visual token layout: `[id code (8) | position (3) | zeros]` for objects,
//! Gaussian noise in every dimension for distractors.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::{hex, Tensor};

pub const ID_DIMS: usize = 8;
pub const POS_DIMS: usize = 3;
pub const ACTION_DIMS: usize = 7;
/// Instruction width: target code, receptacle code, gripper bit.
pub const INSTRUCTION_DIMS: usize = 2 * ID_DIMS + 1;
pub const ROTATION_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_tokens: usize,
    pub token_dim: usize,
    pub n_objects: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_tokens: 8,
            token_dim: 16,
            n_objects: 4,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim < ID_DIMS + POS_DIMS {
            return Err(Error::config(format!("world.token_dim must be >= {}", ID_DIMS + POS_DIMS)));
        }
        if self.n_objects < 2 || self.n_objects > self.n_tokens || self.n_objects > ID_DIMS {
            return Err(Error::config(format!(
                "world.n_objects must lie in [2, min(n_tokens, {ID_DIMS})], got {}",
                self.n_objects
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("world.noise_std must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = format!(
            "n_tokens={};token_dim={};n_objects={};noise_std={:e};seed={}",
            self.n_tokens, self.token_dim, self.n_objects, self.noise_std, self.seed
        );
        hex(&Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub visual: Tensor,
    pub instruction: Tensor,
    pub action: Tensor,
}

/// Action for moving `target` onto `receptacle` with gripper command `grip`.
pub fn action_from(target: [f64; 3], receptacle: [f64; 3], grip: f64) -> [f64; ACTION_DIMS] {
    let d = [receptacle[0] - target[0], receptacle[1] - target[1], receptacle[2] - target[2]];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let r = if n == 0.0 {
        [0.0; 3]
    } else {
        [ROTATION_SCALE * d[0] / n, ROTATION_SCALE * d[1] / n, ROTATION_SCALE * d[2] / n]
    };
    [d[0], d[1], d[2], r[0], r[1], r[2], grip]
}

fn id_code(id: usize) -> [f64; ID_DIMS] {
    let mut c = [0.0; ID_DIMS];
    c[id] = 1.0;
    c
}

pub fn instruction_for(target_id: usize, receptacle_id: usize, grip: f64) -> Tensor {
    let mut v = vec![0.0; INSTRUCTION_DIMS];
    v[target_id] = 1.0;
    v[ID_DIMS + receptacle_id] = 1.0;
    v[2 * ID_DIMS] = grip;
    Tensor::from_vec(v)
}

/// Writes an object token (id code + position) into row `slot`.
pub fn place_object(visual: &mut Tensor, slot: usize, id: usize, pos: [f64; 3]) {
    let d = visual.shape()[1];
    let row = &mut visual.data_mut()[slot * d..(slot + 1) * d];
    row.iter_mut().for_each(|v| *v = 0.0);
    row[..ID_DIMS].copy_from_slice(&id_code(id));
    row[ID_DIMS..ID_DIMS + POS_DIMS].copy_from_slice(&pos);
}

/// Deterministic in `(cfg.seed, index)`.
pub fn gen_episode(cfg: &WorldConfig, index: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let mut visual = Tensor::randn(&[cfg.n_tokens, cfg.token_dim], cfg.noise_std, &mut rng);
    let ids = sample(&mut rng, ID_DIMS, cfg.n_objects).into_vec();
    let slots = sample(&mut rng, cfg.n_tokens, cfg.n_objects).into_vec();
    let mut positions = Vec::with_capacity(cfg.n_objects);
    for (&id, &slot) in ids.iter().zip(&slots) {
        let pos = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        place_object(&mut visual, slot, id, pos);
        positions.push(pos);
    }
    let grip = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let action = action_from(positions[0], positions[1], grip);
    Ok(Episode {
        visual,
        instruction: instruction_for(ids[0], ids[1], grip),
        action: Tensor::from_vec(action.to_vec()),
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn find_object(visual: &Tensor, id: usize) -> Result<[f64; 3]> {
    let code = id_code(id);
    let (n, _) = visual.dims2();
    (0..n)
        .map(|r| visual.row(r))
        .find(|row| row[..ID_DIMS] == code)
        .map(|row| [row[ID_DIMS], row[ID_DIMS + 1], row[ID_DIMS + 2]])
        .ok_or_else(|| Error::Episode(format!("instruction references object id {id} absent from the scene")))
}

/// Recomputes the action from the scene and the instruction alone.
pub fn oracle_action(e: &Episode) -> Result<Tensor> {
    let ins = e.instruction.data();
    if ins.len() != INSTRUCTION_DIMS || e.visual.dims2().1 < ID_DIMS + POS_DIMS {
        return Err(Error::Episode("malformed episode dimensions".into()));
    }
    let target = find_object(&e.visual, argmax(&ins[..ID_DIMS]))?;
    let receptacle = find_object(&e.visual, argmax(&ins[ID_DIMS..2 * ID_DIMS]))?;
    let grip = if ins[2 * ID_DIMS] >= 0.0 { 1.0 } else { -1.0 };
    Ok(Tensor::from_vec(action_from(target, receptacle, grip).to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub start: u64,
    pub count: usize,
    pub content_hash: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub manifest: DatasetManifest,
}

fn content_hash(episodes: &[Episode]) -> String {
    let mut h = Sha256::new();
    for e in episodes {
        e.visual.feed_hash(&mut h);
        e.instruction.feed_hash(&mut h);
        e.action.feed_hash(&mut h);
    }
    hex(&h.finalize())
}

/// Episodes `0..n` of the configured world.
pub fn make_dataset(cfg: &WorldConfig, n: usize) -> Result<Dataset> {
    make_range(cfg, 0, n)
}

/// Episodes `start..start + n`; disjoint ranges give disjoint splits.
pub fn make_range(cfg: &WorldConfig, start: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("dataset needs at least one episode".into()));
    }
    cfg.validate()?;
    let episodes = (0..n as u64)
        .map(|i| gen_episode(cfg, start + i))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        start,
        count: n,
        content_hash: content_hash(&episodes),
    };
    Ok(Dataset { episodes, manifest })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn hash(&self) -> &str {
        &self.manifest.content_hash
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "dataset");
        c.set_meta("config_hash", &self.manifest.config_hash);
        c.set_meta("start", self.manifest.start);
        c.set_meta("count", self.manifest.count);
        c.set_meta("content_hash", &self.manifest.content_hash);
        for (i, e) in self.episodes.iter().enumerate() {
            c.insert(format!("episode/{i}/v"), e.visual.clone())?;
            c.insert(format!("episode/{i}/l"), e.instruction.clone())?;
            c.insert(format!("episode/{i}/a"), e.action.clone())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let count: usize = c
            .meta("count")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::integrity(crate::error::IntegrityKind::Malformed, "dataset count missing"))?;
        let episodes = (0..count)
            .map(|i| {
                Ok(Episode {
                    visual: c.require(&format!("episode/{i}/v"))?.clone(),
                    instruction: c.require(&format!("episode/{i}/l"))?.clone(),
                    action: c.require(&format!("episode/{i}/a"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hash = content_hash(&episodes);
        c.expect_meta("content_hash", &hash)?;
        Ok(Self {
            manifest: DatasetManifest {
                config_hash: c.meta("config_hash").unwrap_or_default().to_string(),
                start: c.meta("start").and_then(|v| v.parse().ok()).unwrap_or(0),
                count,
                content_hash: hash,
            },
            episodes,
        })
    }
}
