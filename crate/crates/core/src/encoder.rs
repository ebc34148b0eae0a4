//! Frozen object-centric slot encoder over ground-truth object states, the
//! trainable temporal embedders for auxiliary signals, and entity-token
//! grid assembly.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NumericsError, ParamId, ParameterStore, Tensor, Var};
use crate::worldsim::{derive_seed, Dataset, EnvState, Kind};

pub const FEATURES: usize = 7;
const CACHE_MAGIC: &[u8; 4] = b"CJED";
const CACHE_VERSION: u32 = 1;

/// Bijection on slot positions: slot `k` holds object `order[k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &o in &order {
            if o >= order.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Config(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Self(order))
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self(order)
    }

    /// Per-episode slot order derived from the encoder seed and episode seed.
    pub fn for_episode(encoder_seed: u64, episode_seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(encoder_seed, episode_seed));
        Self::random(n, &mut rng)
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Slot index holding `object`.
    pub fn slot_of(&self, object: usize) -> usize {
        self.0.iter().position(|&o| o == object).expect("object in permutation")
    }
}

/// The `N` slot vectors of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSet {
    /// `[N, d]`
    pub slots: Tensor,
    pub time: usize,
    pub perm: Permutation,
}

impl SlotSet {
    pub fn n(&self) -> usize {
        self.slots.rows()
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }
}

/// Frozen map `s = tanh(x A + b)` from per-object features to slots.
#[derive(Clone, Debug)]
pub struct SlotEncoder {
    weights: Tensor,
    bias: Tensor,
    seed: u64,
}

impl SlotEncoder {
    /// Rows of `A` are orthonormalized before scaling, so `A` has full row
    /// rank whenever `dim >= 7`.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(FEATURES);
        for _ in 0..FEATURES {
            let mut r: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for prev in &rows {
                let dot: f64 = r.iter().zip(prev).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                r.iter_mut().for_each(|v| *v /= norm);
            }
            rows.push(r);
        }
        let scale = 0.8;
        let data = rows.iter().flatten().map(|v| v * scale).collect();
        let bias = (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self {
            weights: Tensor::new(vec![FEATURES, dim], data).unwrap(),
            bias: Tensor::vector(bias),
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(position, velocity, radius, kind one-hot)`, centred and rescaled.
    pub fn features(d: &crate::worldsim::Disc) -> [f64; FEATURES] {
        let (pusher, block) = match d.kind {
            Kind::Pusher => (1.0, 0.0),
            Kind::Block => (0.0, 1.0),
        };
        [
            2.0 * d.pos[0] - 1.0,
            2.0 * d.pos[1] - 1.0,
            4.0 * d.vel[0],
            4.0 * d.vel[1],
            10.0 * d.radius - 0.5,
            pusher,
            block,
        ]
    }

    /// Slots in object order, `[N, d]`.
    pub fn encode_objects(&self, state: &EnvState) -> Tensor {
        let dim = self.dim();
        let mut out = Vec::with_capacity(state.objects.len() * dim);
        for d in &state.objects {
            let x = Self::features(d);
            for c in 0..dim {
                let mut s = self.bias.data()[c];
                for (k, xv) in x.iter().enumerate() {
                    s += xv * self.weights.at(k, c);
                }
                out.push(s.tanh());
            }
        }
        Tensor::new(vec![state.objects.len(), dim], out).unwrap()
    }

    pub fn encode_frame(&self, state: &EnvState, perm: &Permutation) -> SlotSet {
        let by_object = self.encode_objects(state);
        let rows: Vec<Vec<f64>> = perm.order().iter().map(|&o| by_object.row(o).to_vec()).collect();
        SlotSet {
            slots: Tensor::from_rows(&rows).unwrap(),
            time: state.step as usize,
            perm: perm.clone(),
        }
    }
}

/// Trainable zero-padded temporal convolution from a raw per-step signal
/// to `d`-dimensional tokens.
#[derive(Clone, Debug)]
pub struct AuxEmbedder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub in_dim: usize,
}

impl AuxEmbedder {
    pub fn init<R: Rng>(store: &mut ParameterStore, name: &str, in_dim: usize, out_dim: usize, width: usize, rng: &mut R) -> Self {
        let weight = store.insert_uniform(&format!("{name}.w"), &[width * in_dim, out_dim], width * in_dim, rng);
        let bias = store.insert_uniform(&format!("{name}.b"), &[out_dim], width * in_dim, rng);
        Self {
            weight,
            bias,
            width,
            in_dim,
        }
    }

    pub fn embed_graph(&self, g: &mut Graph, store: &ParameterStore, signal: &Tensor) -> Result<Var, NumericsError> {
        let x = g.constant(signal.clone());
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, b, self.width)
    }

    pub fn embed(&self, store: &ParameterStore, signal: &Tensor) -> Result<Tensor, NumericsError> {
        let mut g = Graph::new();
        let v = self.embed_graph(&mut g, store, signal)?;
        Ok(g.value(v).clone())
    }
}

/// Raw auxiliary signals over the window, one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxSignals {
    /// `[T, action_dim]`
    pub actions: Tensor,
    /// `[T, 4]`
    pub proprio: Option<Tensor>,
}

/// Embeds actions (and proprio if given) into per-step tokens.
pub fn embed_aux(
    store: &ParameterStore,
    action_embedder: &AuxEmbedder,
    proprio_embedder: Option<&AuxEmbedder>,
    signals: &AuxSignals,
) -> Result<Vec<Tensor>> {
    let mut out = vec![action_embedder.embed(store, &signals.actions)?];
    if let (Some(p), Some(e)) = (&signals.proprio, proprio_embedder) {
        if p.rows() != signals.actions.rows() {
            return Err(Error::Dimension(format!(
                "{} action steps vs {} proprio steps",
                signals.actions.rows(),
                p.rows()
            )));
        }
        out.push(e.embed(store, p)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Slot,
    Action,
    Proprio,
}

/// Slot tokens over the window plus raw auxiliary signals. Slot row
/// `tau * n + i` holds object-slot `i` at window step `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityTokenSeq {
    pub slots: Tensor,
    pub n: usize,
    pub t_h: usize,
    pub t_p: usize,
    pub aux: Option<AuxSignals>,
}

impl EntityTokenSeq {
    pub fn steps(&self) -> usize {
        self.t_h + self.t_p
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub fn roles(&self) -> Vec<Role> {
        let mut r = vec![Role::Slot; self.n];
        if let Some(aux) = &self.aux {
            r.push(Role::Action);
            if aux.proprio.is_some() {
                r.push(Role::Proprio);
            }
        }
        r
    }

    /// `(steps, entities)`
    pub fn grid_shape(&self) -> (usize, usize) {
        (self.steps(), self.roles().len())
    }

    pub fn slot(&self, tau: usize, i: usize) -> &[f64] {
        self.slots.row(tau * self.n + i)
    }

    /// Slot cells with `tau >= t_h`, i.e. the ones to be predicted.
    pub fn future_cells(&self) -> Vec<(usize, usize)> {
        (self.t_h..self.steps()).flat_map(|t| (0..self.n).map(move |i| (t, i))).collect()
    }

    /// Drops entity columns not in `keep` (in the given order).
    pub fn select_entities(&self, keep: &[usize]) -> EntityTokenSeq {
        let mut rows = Vec::new();
        for t in 0..self.steps() {
            for &i in keep {
                rows.push(self.slot(t, i).to_vec());
            }
        }
        EntityTokenSeq {
            slots: Tensor::from_rows(&rows).unwrap(),
            n: keep.len(),
            t_h: self.t_h,
            t_p: self.t_p,
            aux: self.aux.clone(),
        }
    }
}

/// Builds the window grid from `t_h + t_p` slot sets. Future slot sets may
/// be placeholders; they are always masked downstream.
pub fn assemble(frames: &[SlotSet], aux: Option<AuxSignals>, t_h: usize, t_p: usize) -> Result<EntityTokenSeq> {
    if frames.len() != t_h + t_p {
        return Err(Error::Dimension(format!("{} frames for window {t_h}+{t_p}", frames.len())));
    }
    let n = frames.first().map_or(0, SlotSet::n);
    let dim = frames.first().map_or(0, SlotSet::dim);
    if let Some(bad) = frames.iter().find(|f| f.n() != n || f.dim() != dim) {
        return Err(Error::Dimension(format!("frame with {} slots, expected {n}", bad.n())));
    }
    if let Some(a) = &aux {
        if a.actions.rows() != t_h + t_p || a.proprio.as_ref().is_some_and(|p| p.rows() != t_h + t_p) {
            return Err(Error::Dimension("auxiliary signals do not span the window".into()));
        }
    }
    let data = frames.iter().flat_map(|f| f.slots.data().iter().copied()).collect();
    Ok(EntityTokenSeq {
        slots: Tensor::new(vec![(t_h + t_p) * n, dim], data)?,
        n,
        t_h,
        t_p,
        aux,
    })
}

/// An encoded episode: slots per frame in the episode's slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedEpisode {
    pub seed: u64,
    pub perm: Permutation,
    /// One `[N, d]` tensor per frame.
    pub frames: Vec<Tensor>,
    pub actions: Vec<[f64; 2]>,
    pub proprio: Vec<[f64; 4]>,
    pub events: Vec<crate::worldsim::Event>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub seed: u64,
    pub encoder_seed: u64,
    pub n: usize,
    pub dim: usize,
    pub episodes: Vec<EncodedEpisode>,
}

impl EncodedEpisode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Number of window start frames for `steps` model steps at frame skip `skip`.
    pub fn window_count(&self, steps: usize, skip: usize) -> usize {
        let span = steps.saturating_sub(1) * skip;
        self.len().saturating_sub(span)
    }

    /// Window of `t_h + t_p` frames from `start`, every `skip` frames. The
    /// action row of step `tau` concatenates the `skip` actions taken between
    /// steps `tau` and `tau + 1`; the last row is zero. Proprio rows past the
    /// history are zero.
    pub fn window(&self, start: usize, t_h: usize, t_p: usize, skip: usize, with_proprio: bool) -> Result<EntityTokenSeq> {
        let steps = t_h + t_p;
        if skip == 0 || start >= self.window_count(steps, skip) {
            return Err(Error::OutOfRange(format!("window at {start} with skip {skip}")));
        }
        let n = self.frames[start].rows();
        let dim = self.frames[start].cols();
        let mut slots = Vec::with_capacity(steps * n * dim);
        let mut actions = Tensor::zeros(&[steps, 2 * skip]);
        let mut proprio = Tensor::zeros(&[steps, 4]);
        for tau in 0..steps {
            let f = start + tau * skip;
            slots.extend_from_slice(self.frames[f].data());
            if tau + 1 < steps {
                actions.row_mut(tau).copy_from_slice(&action_block(&self.actions, f, skip));
            }
            if tau < t_h {
                proprio.row_mut(tau).copy_from_slice(&self.proprio[f]);
            }
        }
        Ok(EntityTokenSeq {
            slots: Tensor::new(vec![steps * n, dim], slots)?,
            n,
            t_h,
            t_p,
            aux: Some(AuxSignals {
                actions,
                proprio: with_proprio.then_some(proprio),
            }),
        })
    }
}

/// The `skip` consecutive actions from frame `from`, flattened.
pub fn action_block(actions: &[[f64; 2]], from: usize, skip: usize) -> Vec<f64> {
    actions[from..from + skip].iter().flat_map(|a| a.iter().copied()).collect()
}

impl EncodedDataset {
    pub fn encode(ds: &Dataset, encoder: &SlotEncoder) -> Self {
        let n = ds.blocks + 1;
        let episodes = ds
            .episodes
            .iter()
            .map(|ep| {
                let perm = Permutation::for_episode(encoder.seed(), ep.seed, n);
                EncodedEpisode {
                    seed: ep.seed,
                    frames: ep.states.iter().map(|s| encoder.encode_frame(s, &perm).slots).collect(),
                    perm,
                    actions: ep.actions.iter().map(|a| a.0).collect(),
                    proprio: ep.proprio.iter().map(|p| p.0).collect(),
                    events: ep.events.clone(),
                }
            })
            .collect();
        Self {
            seed: ds.seed,
            encoder_seed: encoder.seed(),
            n,
            dim: encoder.dim(),
            episodes,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CACHE_MAGIC);
        w.u32(CACHE_VERSION);
        w.u32(self.episodes.len() as u32);
        let length = self.episodes.first().map_or(0, |e| e.frames.len());
        w.u32(length as u32);
        w.u32(self.n as u32);
        w.u32(self.dim as u32);
        w.u64(self.seed);
        w.u64(self.encoder_seed);
        for ep in &self.episodes {
            w.u64(ep.seed);
            for &o in ep.perm.order() {
                w.varint(o as u64);
            }
            for t in 0..length {
                for v in ep.frames[t].data() {
                    w.f64(*v);
                }
                for v in ep.actions[t] {
                    w.f64(v);
                }
                for v in ep.proprio[t] {
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
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::Format("not an encoded dataset".into()));
        }
        if r.u32()? != CACHE_VERSION {
            return Err(Error::Format("unsupported encoded dataset version".into()));
        }
        let n_ep = r.u32()? as usize;
        let length = r.u32()? as usize;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let seed = r.u64()?;
        let encoder_seed = r.u64()?;
        let mut episodes = Vec::with_capacity(n_ep);
        for _ in 0..n_ep {
            let ep_seed = r.u64()?;
            let order = (0..n).map(|_| r.varint().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let perm = Permutation::new(order)?;
            let mut frames = Vec::with_capacity(length);
            let mut actions = Vec::with_capacity(length);
            let mut proprio = Vec::with_capacity(length);
            for _ in 0..length {
                let data = (0..n * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                frames.push(Tensor::new(vec![n, dim], data)?);
                actions.push([r.f64()?, r.f64()?]);
                proprio.push([r.f64()?, r.f64()?, r.f64()?, r.f64()?]);
            }
            let n_events = r.varint()? as usize;
            let mut events = Vec::with_capacity(n_events);
            for _ in 0..n_events {
                events.push(crate::worldsim::Event {
                    step: r.varint()? as u32,
                    i: r.varint()? as u32,
                    j: r.varint()? as u32,
                });
            }
            episodes.push(EncodedEpisode {
                seed: ep_seed,
                perm,
                frames,
                actions,
                proprio,
                events,
            });
        }
        r.finish()?;
        Ok(Self {
            seed,
            encoder_seed,
            n,
            dim,
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
