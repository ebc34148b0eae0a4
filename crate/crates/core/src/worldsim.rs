//! Deterministic 2-D push-world: one actuated pusher disc and `K` passive
//! blocks in the unit arena, with elastic equal-mass contacts.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 4] = b"CJWD";
const DATASET_VERSION: u32 = 1;
/// Overlap tolerated after contact resolution.
pub const OVERLAP_TOL: f64 = 1e-6;
/// Gap under which two discs count as touching for the event log.
pub const TOUCH_TOL: f64 = 1e-9;
const MAX_PASSES: usize = 16;

/// SplitMix64 combination of a base seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Pusher,
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub radius: f64,
    pub mass: f64,
    pub kind: Kind,
}

impl Disc {
    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.mass * (self.vel[0] * self.vel[0] + self.vel[1] * self.vel[1])
    }
}

/// Object 0 is always the pusher.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub objects: Vec<Disc>,
    pub step: u64,
}

impl EnvState {
    pub fn pusher(&self) -> &Disc {
        &self.objects[0]
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.objects.iter().map(Disc::kinetic_energy).sum()
    }

    pub fn proprio(&self) -> Proprio {
        let p = self.pusher();
        Proprio([p.pos[0], p.pos[1], p.vel[0], p.vel[1]])
    }

    /// Mean Euclidean distance between corresponding blocks.
    pub fn block_error(&self, goal: &EnvState) -> f64 {
        let errs: Vec<f64> = self
            .objects
            .iter()
            .zip(&goal.objects)
            .filter(|(a, _)| a.kind == Kind::Block)
            .map(|(a, b)| ((a.pos[0] - b.pos[0]).powi(2) + (a.pos[1] - b.pos[1]).powi(2)).sqrt())
            .collect();
        if errs.is_empty() {
            0.0
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action(pub [f64; 2]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proprio(pub [f64; 4]);

/// Unordered contact between objects `i < j` present in frame `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub step: u32,
    pub i: u32,
    pub j: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub dt: f64,
    /// Fraction of velocity removed per step.
    pub drag: f64,
    pub a_max: f64,
    pub blocks: usize,
    pub pusher_radius: f64,
    pub block_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            drag: 0.05,
            a_max: 0.5,
            blocks: 3,
            pusher_radius: 0.05,
            block_radius: 0.08,
        }
    }
}

impl EnvConfig {
    pub fn objects(&self) -> usize {
        self.blocks + 1
    }
}

/// Exchanges the normal velocity components of two equal-mass discs that
/// approach along `normal` (unit vector from `a` to `b`).
pub fn elastic_exchange(a: &mut Disc, b: &mut Disc, normal: [f64; 2]) {
    let rel = (b.vel[0] - a.vel[0]) * normal[0] + (b.vel[1] - a.vel[1]) * normal[1];
    if rel < 0.0 {
        for k in 0..2 {
            a.vel[k] += rel * normal[k];
            b.vel[k] -= rel * normal[k];
        }
    }
}

fn resolve_walls(d: &mut Disc) {
    for k in 0..2 {
        if d.pos[k] < d.radius {
            d.pos[k] = d.radius;
            d.vel[k] = d.vel[k].abs();
        } else if d.pos[k] > 1.0 - d.radius {
            d.pos[k] = 1.0 - d.radius;
            d.vel[k] = -d.vel[k].abs();
        }
    }
}

fn pair_overlap(a: &Disc, b: &Disc) -> (f64, [f64; 2], f64) {
    let dx = b.pos[0] - a.pos[0];
    let dy = b.pos[1] - a.pos[1];
    let dist = (dx * dx + dy * dy).sqrt();
    let normal = if dist > 0.0 { [dx / dist, dy / dist] } else { [1.0, 0.0] };
    (a.radius + b.radius - dist, normal, dist)
}

/// Resolves overlaps in ascending `(i, j)` order, repeating passes until no
/// pair overlaps by more than [`OVERLAP_TOL`]. Returns resolved pairs.
pub fn resolve_contacts(objects: &mut [Disc]) -> Vec<(usize, usize)> {
    let n = objects.len();
    let mut pairs = Vec::new();
    for _ in 0..MAX_PASSES {
        for i in 0..n {
            for j in i + 1..n {
                let (overlap, normal, _) = pair_overlap(&objects[i], &objects[j]);
                if overlap <= 0.0 {
                    continue;
                }
                let (lo, hi) = objects.split_at_mut(j);
                let (a, b) = (&mut lo[i], &mut hi[0]);
                for k in 0..2 {
                    a.pos[k] -= 0.5 * overlap * normal[k];
                    b.pos[k] += 0.5 * overlap * normal[k];
                }
                elastic_exchange(a, b, normal);
                if !pairs.contains(&(i, j)) {
                    pairs.push((i, j));
                }
            }
        }
        for d in objects.iter_mut() {
            resolve_walls(d);
        }
        let worst = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| pair_overlap(&objects[i], &objects[j]).0)
            .fold(f64::NEG_INFINITY, f64::max);
        if worst <= OVERLAP_TOL {
            break;
        }
    }
    pairs
}

/// Pairs whose surfaces are within [`TOUCH_TOL`].
pub fn touching_pairs(objects: &[Disc]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            if pair_overlap(&objects[i], &objects[j]).0 >= -TOUCH_TOL {
                out.push((i, j));
            }
        }
    }
    out
}

/// One transition: pusher acceleration, drag, semi-implicit Euler, then
/// contact and wall resolution.
pub fn step(state: &EnvState, action: Action, cfg: &EnvConfig) -> (EnvState, Vec<Event>) {
    let dt = cfg.dt.clamp(1e-6, 0.1);
    let keep = 1.0 - cfg.drag.clamp(0.0, 1.0);
    let a = action.0.map(|v| if v.is_finite() { v.clamp(-cfg.a_max, cfg.a_max) } else { 0.0 });
    let mut objects = state.objects.clone();
    for (idx, d) in objects.iter_mut().enumerate() {
        if idx == 0 {
            d.vel[0] += a[0] * dt;
            d.vel[1] += a[1] * dt;
        }
        d.vel[0] *= keep;
        d.vel[1] *= keep;
        d.pos[0] += d.vel[0] * dt;
        d.pos[1] += d.vel[1] * dt;
    }
    let mut pairs = resolve_contacts(&mut objects);
    for p in touching_pairs(&objects) {
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    pairs.sort_unstable();
    let next_step = state.step + 1;
    let events = pairs
        .into_iter()
        .map(|(i, j)| Event {
            step: next_step as u32,
            i: i as u32,
            j: j as u32,
        })
        .collect();
    (
        EnvState {
            objects,
            step: next_step,
        },
        events,
    )
}

/// Random non-overlapping placement at rest.
pub fn random_state<R: Rng>(cfg: &EnvConfig, rng: &mut R) -> EnvState {
    let mut objects: Vec<Disc> = Vec::with_capacity(cfg.objects());
    for idx in 0..cfg.objects() {
        let (radius, kind) = if idx == 0 {
            (cfg.pusher_radius, Kind::Pusher)
        } else {
            (cfg.block_radius, Kind::Block)
        };
        let margin = radius + 0.02;
        let mut pos = [0.5, 0.5];
        for _ in 0..1000 {
            pos = [rng.gen_range(margin..1.0 - margin), rng.gen_range(margin..1.0 - margin)];
            let clear = objects.iter().all(|o| {
                let d = ((o.pos[0] - pos[0]).powi(2) + (o.pos[1] - pos[1]).powi(2)).sqrt();
                d > o.radius + radius + 0.02
            });
            if clear {
                break;
            }
        }
        objects.push(Disc {
            pos,
            vel: [0.0, 0.0],
            radius,
            mass: 1.0,
            kind,
        });
    }
    EnvState { objects, step: 0 }
}

/// Behaviour policy used to populate datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Random,
    Pursuit,
}

struct BehaviourPolicy {
    mode: Mode,
    remaining: usize,
    held: [f64; 2],
    target: usize,
}

impl BehaviourPolicy {
    fn new() -> Self {
        Self {
            mode: Mode::Random,
            remaining: 0,
            held: [0.0, 0.0],
            target: 1,
        }
    }

    fn act<R: Rng>(&mut self, state: &EnvState, cfg: &EnvConfig, rng: &mut R) -> Action {
        if self.remaining == 0 {
            self.mode = if rng.gen_bool(0.6) { Mode::Pursuit } else { Mode::Random };
            self.remaining = rng.gen_range(5..15);
            let p = state.pusher().pos;
            // pursuit picks the nearest block, occasionally a random one
            self.target = if rng.gen_bool(0.7) {
                (1..state.objects.len())
                    .min_by(|&a, &b| {
                        let da = dist2(state.objects[a].pos, p);
                        let db = dist2(state.objects[b].pos, p);
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0)
            } else {
                rng.gen_range(1..state.objects.len().max(2))
            };
        }
        self.remaining -= 1;
        let a = match self.mode {
            Mode::Random => {
                if rng.gen_bool(0.3) {
                    self.held = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                }
                [self.held[0] * cfg.a_max, self.held[1] * cfg.a_max]
            }
            Mode::Pursuit => {
                let p = state.pusher();
                let t = state.objects.get(self.target).map_or(p.pos, |o| o.pos);
                let dx = [t[0] - p.pos[0], t[1] - p.pos[1]];
                let n = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt().max(1e-9);
                [
                    cfg.a_max * dx[0] / n + rng.gen_range(-0.2..0.2) * cfg.a_max,
                    cfg.a_max * dx[1] / n + rng.gen_range(-0.2..0.2) * cfg.a_max,
                ]
            }
        };
        Action(a.map(|v| v.clamp(-cfg.a_max, cfg.a_max)))
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Recorded episode. `actions[t]` is applied to `states[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub proprio: Vec<Proprio>,
    pub events: Vec<Event>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Unordered object pairs with at least one contact in frames `[from, to]`.
    pub fn contact_pairs(&self, from: usize, to: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .events
            .iter()
            .filter(|e| (e.step as usize) >= from && (e.step as usize) <= to)
            .map(|e| (e.i as usize, e.j as usize))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Rolls out one episode of `length` frames from `seed`.
pub fn rollout_episode(cfg: &EnvConfig, seed: u64, length: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = random_state(cfg, &mut rng);
    let mut policy = BehaviourPolicy::new();
    let mut traj = Trajectory {
        states: Vec::with_capacity(length),
        actions: Vec::with_capacity(length),
        proprio: Vec::with_capacity(length),
        events: Vec::new(),
        seed,
    };
    for _ in 0..length {
        let action = policy.act(&state, cfg, &mut rng);
        traj.proprio.push(state.proprio());
        traj.actions.push(action);
        let (next, events) = step(&state, action, cfg);
        traj.states.push(state);
        if traj.states.len() < length {
            traj.events.extend(events);
        }
        state = next;
    }
    traj
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub length: usize,
    pub blocks: usize,
    pub episodes: Vec<Trajectory>,
}

/// Generates `episodes` trajectories of `length` frames. Episode `e` uses
/// seed `derive_seed(seed, e)`. `window` is the shortest usable length.
pub fn generate_dataset(cfg: &EnvConfig, seed: u64, episodes: usize, length: usize, window: usize) -> Result<Dataset> {
    if length < window.max(1) {
        return Err(Error::Config(format!("episode length {length} shorter than window {window}")));
    }
    let episodes = (0..episodes)
        .map(|e| rollout_episode(cfg, derive_seed(seed, e as u64), length))
        .collect();
    Ok(Dataset {
        seed,
        length,
        blocks: cfg.blocks,
        episodes,
    })
}

fn kind_code(k: Kind) -> f64 {
    match k {
        Kind::Pusher => 0.0,
        Kind::Block => 1.0,
    }
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.episodes.len() as u32);
        w.u32(self.length as u32);
        w.u32(self.blocks as u32);
        w.u64(self.seed);
        for ep in &self.episodes {
            w.u64(ep.seed);
            for t in 0..self.length {
                for d in &ep.states[t].objects {
                    for v in [d.pos[0], d.pos[1], d.vel[0], d.vel[1], d.radius, d.mass, kind_code(d.kind)] {
                        w.f64(v);
                    }
                }
                for v in ep.actions[t].0 {
                    w.f64(v);
                }
                for v in ep.proprio[t].0 {
                    w.f64(v);
                }
            }
            w.varint(ep.events.len() as u64);
            for e in &ep.events {
                w.varint(u64::from(e.step));
                w.varint(u64::from(e.i));
                w.varint(u64::from(e.j));
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("not a push-world dataset".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n_ep = r.u32()? as usize;
        let length = r.u32()? as usize;
        let blocks = r.u32()? as usize;
        let seed = r.u64()?;
        let mut episodes = Vec::with_capacity(n_ep);
        for _ in 0..n_ep {
            let ep_seed = r.u64()?;
            let mut states = Vec::with_capacity(length);
            let mut actions = Vec::with_capacity(length);
            let mut proprio = Vec::with_capacity(length);
            for t in 0..length {
                let mut objects = Vec::with_capacity(blocks + 1);
                for _ in 0..=blocks {
                    let mut v = [0.0; 7];
                    for x in v.iter_mut() {
                        *x = r.f64()?;
                    }
                    objects.push(Disc {
                        pos: [v[0], v[1]],
                        vel: [v[2], v[3]],
                        radius: v[4],
                        mass: v[5],
                        kind: if v[6] == 0.0 { Kind::Pusher } else { Kind::Block },
                    });
                }
                states.push(EnvState { objects, step: t as u64 });
                actions.push(Action([r.f64()?, r.f64()?]));
                proprio.push(Proprio([r.f64()?, r.f64()?, r.f64()?, r.f64()?]));
            }
            let n_events = r.varint()? as usize;
            let mut events = Vec::with_capacity(n_events);
            for _ in 0..n_events {
                events.push(Event {
                    step: r.varint()? as u32,
                    i: r.varint()? as u32,
                    j: r.varint()? as u32,
                });
            }
            episodes.push(Trajectory {
                states,
                actions,
                proprio,
                events,
                seed: ep_seed,
            });
        }
        r.finish()?;
        Ok(Self {
            seed,
            length,
            blocks,
            episodes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// The recorded state `offset` frames after `t`.
pub fn sample_goal(traj: &Trajectory, t: usize, offset: usize) -> Result<EnvState> {
    let idx = t + offset;
    traj.states
        .get(idx)
        .cloned()
        .ok_or_else(|| Error::OutOfRange(format!("goal frame {idx} beyond episode length {}", traj.len())))
}
