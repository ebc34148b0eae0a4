//! Bidirectional masked transformer over the entity-token grid, the masked
//! latent loss with its history/future split, training and rollout.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{AuxEmbedder, AuxSignals, EntityTokenSeq, Role};
use crate::error::{Error, Result};
use crate::masking::{apply, inference_mask, Budget, MaskSampler, MaskTokenizer, MaskedSequence, Strategy, ANCHOR_STEP};
use crate::numerics::{adam_step, AdamConfig, Graph, NumericsError, ParamId, ParameterStore, Tensor, Var};
use crate::worldsim::derive_seed;

const CONFIG_FILE: &str = "config.txt";
const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub t_h: usize,
    pub t_p: usize,
    pub n: usize,
    pub d: usize,
    /// Width of one action row; 0 disables the action token.
    pub action_dim: usize,
    pub proprio: bool,
    pub aux_width: usize,
    pub mask: MaskSampler,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            head_dim: 8,
            mlp_dim: 64,
            t_h: 3,
            t_p: 1,
            n: 4,
            d: 16,
            action_dim: 0,
            proprio: false,
            aux_width: 3,
            mask: MaskSampler::objects(0, 2),
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn steps(&self) -> usize {
        self.t_h + self.t_p
    }

    /// Entities per step: slots plus auxiliary tokens.
    pub fn entities(&self) -> usize {
        self.n + usize::from(self.action_dim > 0) + usize::from(self.action_dim > 0 && self.proprio)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.t_h < 2 {
            return fail("t_h must be at least 2");
        }
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.mlp_dim == 0 {
            return fail("layers, heads, head_dim and mlp_dim must be positive");
        }
        if self.n == 0 || self.d == 0 {
            return fail("n and d must be positive");
        }
        if self.aux_width.is_multiple_of(2) {
            return fail("aux_width must be odd");
        }
        if self.proprio && self.action_dim == 0 {
            return fail("proprio tokens require an action token");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.mask.budgets.is_empty() {
            return fail("mask budget range is empty");
        }
        for b in &self.mask.budgets {
            match (self.mask.strategy, b) {
                (Strategy::Object, Budget::Objects(m)) if *m < self.n => {}
                (Strategy::Token | Strategy::Tube, Budget::Fraction(f)) if (0.0..1.0).contains(f) => {}
                _ => return Err(Error::Config(format!("budget {b} invalid for {} masking", self.mask.strategy))),
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let budgets: Vec<String> = self.mask.budgets.iter().map(Budget::to_string).collect();
        let mut s = String::new();
        for (k, v) in [
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("mlp_dim", self.mlp_dim.to_string()),
            ("t_h", self.t_h.to_string()),
            ("t_p", self.t_p.to_string()),
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("action_dim", self.action_dim.to_string()),
            ("proprio", self.proprio.to_string()),
            ("aux_width", self.aux_width.to_string()),
            ("mask_strategy", self.mask.strategy.to_string()),
            ("mask_budgets", budgets.join(",")),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line}")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field from its text form; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value for {k}: {v}")))
        }
        match key {
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "head_dim" => self.head_dim = num(key, value)?,
            "mlp_dim" => self.mlp_dim = num(key, value)?,
            "t_h" => self.t_h = num(key, value)?,
            "t_p" => self.t_p = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "action_dim" => self.action_dim = num(key, value)?,
            "proprio" => self.proprio = num(key, value)?,
            "aux_width" => self.aux_width = num(key, value)?,
            "mask_strategy" => self.mask.strategy = value.parse()?,
            "mask_budgets" => {
                self.mask.budgets = value
                    .split(',')
                    .filter(|b| !b.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Masked transformer predictor. Entity columns carry only a role
/// embedding, so the model is equivariant to slot order.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub store: ParameterStore,
    pub tokenizer: MaskTokenizer,
    action: Option<AuxEmbedder>,
    proprio: Option<AuxEmbedder>,
    in_w: ParamId,
    in_b: ParamId,
    role: ParamId,
    time: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Forward trace handles.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[T * n, d]` slot predictions.
    pub pred: Var,
    /// One attention node per layer.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub pred: Tensor,
    /// Per layer, `[heads, T*E, T*E]` weights flattened; token `tau*E + e`.
    pub attention: Vec<Vec<f64>>,
    pub entities: usize,
}

impl Predictor {
    pub fn new(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
        let mut store = ParameterStore::new();
        let (d, dm, mlp) = (config.d, config.model_dim(), config.mlp_dim);
        let tokenizer = MaskTokenizer::init(&mut store, d, config.steps());
        let action = (config.action_dim > 0)
            .then(|| AuxEmbedder::init(&mut store, "aux.action", config.action_dim, d, config.aux_width, &mut rng));
        let proprio = (config.action_dim > 0 && config.proprio)
            .then(|| AuxEmbedder::init(&mut store, "aux.proprio", 4, d, config.aux_width, &mut rng));
        let in_w = store.insert_uniform("in.w", &[d, dm], d, &mut rng);
        let in_b = store.insert("in.b", Tensor::zeros(&[dm]));
        let role = store.insert_uniform("embed.role", &[3, dm], 100, &mut rng);
        let time = store.insert_uniform("embed.time", &[config.steps(), dm], 100, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("block{l}.{s}");
                Block {
                    ln1_g: store.insert(&p("ln1.g"), Tensor::filled(&[dm], 1.0)),
                    ln1_b: store.insert(&p("ln1.b"), Tensor::zeros(&[dm])),
                    wq: store.insert_uniform(&p("wq"), &[dm, dm], dm, &mut rng),
                    wk: store.insert_uniform(&p("wk"), &[dm, dm], dm, &mut rng),
                    wv: store.insert_uniform(&p("wv"), &[dm, dm], dm, &mut rng),
                    wo: store.insert_uniform(&p("wo"), &[dm, dm], dm, &mut rng),
                    bo: store.insert(&p("bo"), Tensor::zeros(&[dm])),
                    ln2_g: store.insert(&p("ln2.g"), Tensor::filled(&[dm], 1.0)),
                    ln2_b: store.insert(&p("ln2.b"), Tensor::zeros(&[dm])),
                    w1: store.insert_uniform(&p("w1"), &[dm, mlp], dm, &mut rng),
                    b1: store.insert(&p("b1"), Tensor::zeros(&[mlp])),
                    w2: store.insert_uniform(&p("w2"), &[mlp, dm], mlp, &mut rng),
                    b2: store.insert(&p("b2"), Tensor::zeros(&[dm])),
                }
            })
            .collect();
        let lnf_g = store.insert("out.ln.g", Tensor::filled(&[dm], 1.0));
        let lnf_b = store.insert("out.ln.b", Tensor::zeros(&[dm]));
        let head_w = store.insert_uniform("out.w", &[dm, d], dm, &mut rng);
        let head_b = store.insert("out.b", Tensor::zeros(&[d]));
        Ok(Self {
            config,
            store,
            tokenizer,
            action,
            proprio,
            in_w,
            in_b,
            role,
            time,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        })
    }

    fn check(&self, masked: &MaskedSequence) -> Result<()> {
        let c = &self.config;
        if masked.n != c.n || masked.t_h != c.t_h || masked.t_p != c.t_p || masked.tokens.cols() != c.d {
            return Err(Error::Dimension(format!(
                "grid n={} t_h={} t_p={} d={} for model n={} t_h={} t_p={} d={}",
                masked.n,
                masked.t_h,
                masked.t_p,
                masked.tokens.cols(),
                c.n,
                c.t_h,
                c.t_p,
                c.d
            )));
        }
        if c.action_dim > 0 {
            let aux = masked
                .aux
                .as_ref()
                .ok_or_else(|| Error::Config("model needs action signals".into()))?;
            if aux.actions.cols() != c.action_dim || aux.actions.rows() != c.steps() {
                return Err(Error::Dimension(format!(
                    "action signal {:?}, expected [{}, {}]",
                    aux.actions.shape(),
                    c.steps(),
                    c.action_dim
                )));
            }
            if c.proprio && aux.proprio.as_ref().is_none_or(|p| p.rows() != c.steps() || p.cols() != 4) {
                return Err(Error::Dimension("proprio signal missing or misshaped".into()));
            }
        }
        Ok(())
    }

    /// Records the forward pass. Masked cells are rebuilt from their anchors
    /// so gradients reach the mask-token parameters.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParameterStore, masked: &MaskedSequence) -> Result<Forward> {
        self.check(masked)?;
        let c = &self.config;
        let (n, steps) = (masked.n, masked.steps());
        let e = c.entities();
        let rows = steps * n;
        let mut visible = masked.tokens.clone();
        let mut masked_rows = Vec::new();
        let mut anchors = Vec::new();
        let mut taus = Vec::new();
        for tau in 0..steps {
            for i in 0..n {
                let r = tau * n + i;
                if masked.indicator[r] {
                    visible.row_mut(r).fill(0.0);
                    masked_rows.push(r);
                    anchors.push(masked.tokens.row(ANCHOR_STEP * n + i).to_vec());
                    taus.push(tau);
                }
            }
        }
        let mut slots = g.constant(visible);
        if !masked_rows.is_empty() {
            let mt = self
                .tokenizer
                .mask_tokens_graph(g, store, Tensor::from_rows(&anchors)?, &taus)?;
            let placed = g.scatter_rows(mt, &masked_rows, rows)?;
            slots = g.add(slots, placed)?;
        }
        let slot_pos: Vec<usize> = (0..steps).flat_map(|t| (0..n).map(move |i| t * e + i)).collect();
        let mut x = g.scatter_rows(slots, &slot_pos, steps * e)?;
        let mut roles = vec![Role::Slot; n];
        if let (Some(emb), Some(aux)) = (&self.action, &masked.aux) {
            let pos: Vec<usize> = (0..steps).map(|t| t * e + n).collect();
            let tok = emb.embed_graph(g, store, &aux.actions)?;
            let placed = g.scatter_rows(tok, &pos, steps * e)?;
            x = g.add(x, placed)?;
            roles.push(Role::Action);
            if let (Some(pe), Some(p)) = (&self.proprio, &aux.proprio) {
                let pos: Vec<usize> = (0..steps).map(|t| t * e + n + 1).collect();
                let tok = pe.embed_graph(g, store, p)?;
                let placed = g.scatter_rows(tok, &pos, steps * e)?;
                x = g.add(x, placed)?;
                roles.push(Role::Proprio);
            }
        }
        let role_idx: Vec<usize> = (0..steps)
            .flat_map(|_| roles.iter().map(|r| *r as usize))
            .collect();
        let time_idx: Vec<usize> = (0..steps).flat_map(|t| std::iter::repeat_n(t, e)).collect();

        let (w, b) = (g.param(store, self.in_w), g.param(store, self.in_b));
        let mut h = g.affine(x, w, b)?;
        let role_tab = g.param(store, self.role);
        let re = g.gather_rows(role_tab, &role_idx)?;
        h = g.add(h, re)?;
        let time_tab = g.param(store, self.time);
        let te = g.gather_rows(time_tab, &time_idx)?;
        h = g.add(h, te)?;

        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (lg, lb) = (g.param(store, blk.ln1_g), g.param(store, blk.ln1_b));
            let a = g.layer_norm(h, lg, lb)?;
            let wq = g.param(store, blk.wq);
            let wk = g.param(store, blk.wk);
            let wv = g.param(store, blk.wv);
            let q = g.matmul(a, wq)?;
            let k = g.matmul(a, wk)?;
            let v = g.matmul(a, wv)?;
            let att = g.attention(q, k, v, c.heads)?;
            attention.push(att);
            let (wo, bo) = (g.param(store, blk.wo), g.param(store, blk.bo));
            let o = g.affine(att, wo, bo)?;
            h = g.add(h, o)?;
            let (lg, lb) = (g.param(store, blk.ln2_g), g.param(store, blk.ln2_b));
            let m = g.layer_norm(h, lg, lb)?;
            let (w1, b1) = (g.param(store, blk.w1), g.param(store, blk.b1));
            let u = g.affine(m, w1, b1)?;
            let u = g.gelu(u);
            let (w2, b2) = (g.param(store, blk.w2), g.param(store, blk.b2));
            let u = g.affine(u, w2, b2)?;
            h = g.add(h, u)?;
        }
        let (lg, lb) = (g.param(store, self.lnf_g), g.param(store, self.lnf_b));
        let hf = g.layer_norm(h, lg, lb)?;
        let (w, b) = (g.param(store, self.head_w), g.param(store, self.head_b));
        let out = g.affine(hf, w, b)?;
        let pred = g.gather_rows(out, &slot_pos)?;
        Ok(Forward { pred, attention })
    }

    pub fn forward(&self, masked: &MaskedSequence) -> Result<Prediction> {
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, &self.store, masked)?;
        Ok(Prediction {
            pred: g.value(f.pred).clone(),
            attention: f
                .attention
                .iter()
                .map(|&a| g.attention_weights(a).unwrap_or_default().to_vec())
                .collect(),
            entities: self.config.entities(),
        })
    }

    /// Scalar masked loss on a graph, for training and gradient checks.
    pub fn loss_graph(&self, g: &mut Graph, store: &ParameterStore, masked: &MaskedSequence, target: &EntityTokenSeq) -> Result<Var> {
        let f = self.forward_graph(g, store, masked)?;
        let weights: Vec<f64> = masked.indicator.iter().map(|&b| f64::from(u8::from(b))).collect();
        Ok(g.masked_mse(f.pred, &target.slots, &weights)?)
    }

    /// Predicts `horizon` future slot sets from `history` (`[t_h * n, d]`).
    ///
    /// `actions` rows index model steps from the first history step and must
    /// cover `t_h - 1 + horizon` rows when the model has an action token.
    /// `proprio` gives rows for the history steps only.
    pub fn rollout(&self, history: &Tensor, actions: Option<&Tensor>, proprio: Option<&Tensor>, horizon: usize) -> Result<Rollout> {
        let c = &self.config;
        if horizon == 0 {
            return Err(Error::OutOfRange("rollout horizon must be at least 1".into()));
        }
        let n = history.rows() / c.t_h;
        if n * c.t_h != history.rows() || history.cols() != c.d {
            return Err(Error::Dimension(format!("history {:?} for t_h={}", history.shape(), c.t_h)));
        }
        let needed = c.t_h - 1 + horizon;
        let actions = match (c.action_dim, actions) {
            (0, _) => None,
            (_, None) => return Err(Error::Config("rollout needs future actions".into())),
            (a, Some(t)) if t.cols() != a || t.rows() < needed => {
                return Err(Error::Dimension(format!("actions {:?}, need [{needed}, {a}]", t.shape())))
            }
            (_, Some(t)) => Some(t),
        };
        let mut frames: Vec<Vec<f64>> = (0..c.t_h)
            .map(|t| history.data()[t * n * c.d..(t + 1) * n * c.d].to_vec())
            .collect();
        let mut passes = 0;
        while frames.len() < c.t_h + horizon {
            let s = frames.len() - c.t_h;
            let mut data = Vec::with_capacity(c.steps() * n * c.d);
            for f in &frames[s..] {
                data.extend_from_slice(f);
            }
            data.resize(c.steps() * n * c.d, 0.0);
            let aux = actions.map(|a| {
                let mut rows = Tensor::zeros(&[c.steps(), c.action_dim]);
                for tau in 0..c.steps() - 1 {
                    if s + tau < a.rows() {
                        rows.row_mut(tau).copy_from_slice(a.row(s + tau));
                    }
                }
                let p = (c.proprio).then(|| {
                    let mut pr = Tensor::zeros(&[c.steps(), 4]);
                    if let Some(src) = proprio {
                        for tau in 0..c.t_h {
                            if s + tau < c.t_h && s + tau < src.rows() {
                                pr.row_mut(tau).copy_from_slice(src.row(s + tau));
                            }
                        }
                    }
                    pr
                });
                AuxSignals { actions: rows, proprio: p }
            });
            let seq = EntityTokenSeq {
                slots: Tensor::new(vec![c.steps() * n, c.d], data)?,
                n,
                t_h: c.t_h,
                t_p: c.t_p,
                aux,
            };
            let masked = inference_mask(&seq, &self.tokenizer, &self.store)?;
            let pred = self.forward(&masked)?.pred;
            passes += 1;
            for tau in c.t_h..c.steps() {
                frames.push(pred.data()[tau * n * c.d..(tau + 1) * n * c.d].to_vec());
            }
        }
        let frames = frames[c.t_h..c.t_h + horizon]
            .iter()
            .map(|f| Tensor::new(vec![n, c.d], f.clone()))
            .collect::<std::result::Result<_, NumericsError>>()?;
        Ok(Rollout { frames, passes })
    }

    /// Trains in place on `windows`. Deterministic for a fixed config seed.
    pub fn train(&mut self, windows: &[EntityTokenSeq]) -> Result<TrainLog> {
        let c = self.config.clone();
        if windows.is_empty() {
            return Err(Error::Config("no training windows".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, 1));
        let adam = AdamConfig {
            lr: c.lr,
            ..AdamConfig::default()
        };
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut log = TrainLog::default();
        for epoch in 0..c.epochs {
            order.shuffle(&mut rng);
            for (batch, idx) in order.chunks(c.batch_size).enumerate() {
                self.store.zero_grads();
                let mut sums = [0.0; 3];
                let mut counts = [0usize; 2];
                for &w in idx {
                    let seq = &windows[w];
                    let spec = c.mask.sample(seq.n, seq.t_h, &mut rng)?;
                    let masked = apply(seq, &spec, &self.tokenizer, &self.store)?;
                    let mut g = Graph::new();
                    let f = self.forward_graph(&mut g, &self.store, &masked)?;
                    let weights: Vec<f64> = masked.indicator.iter().map(|&b| f64::from(u8::from(b))).collect();
                    let loss = g.masked_mse(f.pred, &seq.slots, &weights)?;
                    let value = g.value(loss).data()[0];
                    if !value.is_finite() {
                        let mut h = DefaultHasher::new();
                        idx.hash(&mut h);
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            batch,
                            fingerprint: h.finish(),
                        });
                    }
                    let report = loss_mask(g.value(f.pred), seq, &masked.indicator)?;
                    sums[0] += report.l_mask;
                    if report.n_history > 0 {
                        sums[1] += report.l_history;
                        counts[0] += 1;
                    }
                    if report.n_future > 0 {
                        sums[2] += report.l_future;
                        counts[1] += 1;
                    }
                    g.backward(loss, &mut self.store)?;
                }
                self.store.scale_grads(1.0 / idx.len() as f64);
                adam_step(&mut self.store, &adam)?;
                let row = LossRow {
                    epoch,
                    batch,
                    l_mask: sums[0] / idx.len() as f64,
                    l_history: (counts[0] > 0).then(|| sums[1] / counts[0] as f64),
                    l_future: (counts[1] > 0).then(|| sums[2] / counts[1] as f64),
                };
                debug!("epoch {epoch} batch {batch} loss {:.6}", row.l_mask);
                log.rows.push(row);
            }
        }
        Ok(log)
    }

    /// Writes `config.txt` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        self.store.save(&dir.join(PARAMS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = PredictorConfig::from_text(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let mut model = Self::new(config)?;
        let stored = ParameterStore::load(&dir.join(PARAMS_FILE))?;
        model.store.copy_values_from(&stored)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `[n, d]` per predicted step.
    pub frames: Vec<Tensor>,
    pub passes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub batch: usize,
    pub l_mask: f64,
    /// `None` when no history cell was masked in the batch.
    pub l_history: Option<f64>,
    pub l_future: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LossRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9e}"));
        let mut s = String::from("epoch,batch,L_mask,L_history,L_future\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.9e},{},{}",
                r.epoch,
                r.batch,
                r.l_mask,
                opt(r.l_history),
                opt(r.l_future)
            );
        }
        s
    }

    pub fn has_history_loss(&self) -> bool {
        self.rows.iter().any(|r| r.l_history.is_some())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_mask: f64,
    pub l_history: f64,
    pub l_future: f64,
    pub n_history: usize,
    pub n_future: usize,
    /// Set when no cell is masked; all losses are then 0.
    pub empty: bool,
}

impl LossReport {
    /// Count-weighted recombination of the two partitions.
    pub fn recombined(&self) -> f64 {
        let total = self.n_history + self.n_future;
        if total == 0 {
            return 0.0;
        }
        (self.n_history as f64 * self.l_history + self.n_future as f64 * self.l_future) / total as f64
    }
}

/// Mean over masked cells of the squared cell error, overall and split into
/// history (`tau < t_h`) and future cells.
pub fn loss_mask(pred: &Tensor, target: &EntityTokenSeq, indicator: &[bool]) -> Result<LossReport> {
    if pred.shape() != target.slots.shape() || indicator.len() != pred.rows() {
        return Err(Error::Dimension(format!(
            "prediction {:?}, target {:?}, indicator {}",
            pred.shape(),
            target.slots.shape(),
            indicator.len()
        )));
    }
    let split = target.t_h * target.n;
    let (mut sh, mut sf, mut nh, mut nf) = (0.0, 0.0, 0usize, 0usize);
    for (r, _) in indicator.iter().enumerate().filter(|(_, &m)| m) {
        let e: f64 = pred.row(r).iter().zip(target.slots.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
        if r < split {
            sh += e;
            nh += 1;
        } else {
            sf += e;
            nf += 1;
        }
    }
    let empty = nh + nf == 0;
    if empty {
        warn!("loss requested with an all-false mask indicator");
    }
    let mean = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    Ok(LossReport {
        l_mask: mean(sh + sf, nh + nf),
        l_history: mean(sh, nh),
        l_future: mean(sf, nf),
        n_history: nh,
        n_future: nf,
        empty,
    })
}
