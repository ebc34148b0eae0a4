//! Masked input construction: object-, token- and tube-level history masks
//! with identity anchors, and future-only masking for inference.
//!
//! A masked cell `(tau, i)` is replaced by `anchor_i * Phi + e_tau` where the
//! anchor is the same object's token at the earliest window step. The true
//! token at a masked cell is never read.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::encoder::{AuxSignals, EntityTokenSeq};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NumericsError, ParamId, ParameterStore, Tensor, Var};

/// Earliest history step; the identity anchor lives here.
pub const ANCHOR_STEP: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Object,
    Token,
    Tube,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Object => "object",
            Strategy::Token => "token",
            Strategy::Tube => "tube",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Strategy::Object),
            "token" => Ok(Strategy::Token),
            "tube" => Ok(Strategy::Tube),
            other => Err(Error::Config(format!("unknown mask strategy {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    /// Number of masked objects.
    Objects(usize),
    /// Fraction of non-anchor history slot cells.
    Fraction(f64),
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Objects(m) => write!(f, "objects:{m}"),
            Budget::Fraction(x) => write!(f, "fraction:{x}"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad budget {s}"));
        match s.split_once(':') {
            Some(("objects", m)) => m.parse().map(Budget::Objects).map_err(|_| bad()),
            Some(("fraction", x)) => x.parse().map(Budget::Fraction).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub strategy: Strategy,
    pub budget: Budget,
    pub n: usize,
    pub t_h: usize,
    /// Masked history cells `(tau, entity)`; never contains `tau == 0`.
    pub cells: BTreeSet<(usize, usize)>,
}

impl MaskSpec {
    pub fn empty(n: usize, t_h: usize) -> Self {
        Self {
            strategy: Strategy::Object,
            budget: Budget::Objects(0),
            n,
            t_h,
            cells: BTreeSet::new(),
        }
    }

    /// Masks every non-anchor history cell of the listed objects.
    pub fn objects(n: usize, t_h: usize, objects: &[usize]) -> Self {
        let cells = objects
            .iter()
            .flat_map(|&i| (ANCHOR_STEP + 1..t_h).map(move |t| (t, i)))
            .collect();
        Self {
            strategy: Strategy::Object,
            budget: Budget::Objects(objects.len()),
            n,
            t_h,
            cells,
        }
    }

    /// Objects with at least one masked history cell.
    pub fn masked_objects(&self) -> BTreeSet<usize> {
        self.cells.iter().map(|&(_, i)| i).collect()
    }

    pub fn eligible_cells(n: usize, t_h: usize) -> usize {
        n * t_h.saturating_sub(1)
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<String> = self.cells.iter().map(|(t, i)| format!("{t}:{i}")).collect();
        format!(
            "strategy={} budget={} n={} t_h={} cells={}",
            self.strategy,
            self.budget,
            self.n,
            self.t_h,
            cells.join(",")
        )
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut strategy = None;
        let mut budget = None;
        let mut n = None;
        let mut t_h = None;
        let mut cells = BTreeSet::new();
        let bad = |what: &str| Error::Config(format!("mask spec: {what}"));
        for field in s.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(field))?;
            match k {
                "strategy" => strategy = Some(v.parse()?),
                "budget" => budget = Some(v.parse()?),
                "n" => n = Some(v.parse().map_err(|_| bad(field))?),
                "t_h" => t_h = Some(v.parse().map_err(|_| bad(field))?),
                "cells" => {
                    for c in v.split(',').filter(|c| !c.is_empty()) {
                        let (t, i) = c.split_once(':').ok_or_else(|| bad(c))?;
                        cells.insert((t.parse().map_err(|_| bad(c))?, i.parse().map_err(|_| bad(c))?));
                    }
                }
                _ => return Err(bad(k)),
            }
        }
        let spec = Self {
            strategy: strategy.ok_or_else(|| bad("missing strategy"))?,
            budget: budget.ok_or_else(|| bad("missing budget"))?,
            n: n.ok_or_else(|| bad("missing n"))?,
            t_h: t_h.ok_or_else(|| bad("missing t_h"))?,
            cells,
        };
        if spec.cells.iter().any(|&(t, i)| t == ANCHOR_STEP || t >= spec.t_h || i >= spec.n) {
            return Err(bad("cell outside the maskable history"));
        }
        Ok(spec)
    }
}

/// Number of masked cells a fractional budget realizes.
pub fn fraction_count(fraction: f64, n: usize, t_h: usize) -> usize {
    (fraction * MaskSpec::eligible_cells(n, t_h) as f64).round() as usize
}

pub fn sample_mask<R: Rng>(strategy: Strategy, budget: Budget, n: usize, t_h: usize, rng: &mut R) -> Result<MaskSpec> {
    let mut cells = BTreeSet::new();
    match (strategy, budget) {
        (Strategy::Object, Budget::Objects(m)) => {
            if n == 0 || m > n - 1 {
                return Err(Error::OutOfRange(format!("object budget {m} with {n} objects")));
            }
            for i in sample(rng, n, m).into_iter() {
                for t in ANCHOR_STEP + 1..t_h {
                    cells.insert((t, i));
                }
            }
        }
        (Strategy::Token, Budget::Fraction(f)) => {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::OutOfRange(format!("token fraction {f}")));
            }
            let eligible = MaskSpec::eligible_cells(n, t_h);
            let count = fraction_count(f, n, t_h).min(eligible);
            for c in sample(rng, eligible, count).into_iter() {
                cells.insert((ANCHOR_STEP + 1 + c / n, c % n));
            }
        }
        (Strategy::Tube, Budget::Fraction(f)) => {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::OutOfRange(format!("tube fraction {f}")));
            }
            let span = t_h.saturating_sub(1);
            let count = fraction_count(f, n, t_h).min(n * span);
            if count > 0 {
                // one tube per masked-object equivalent, widened if needed
                let mut tubes = ((f * n as f64).round() as usize).clamp(1, n);
                tubes = tubes.max(count.div_ceil(span)).min(n);
                let objects = sample(rng, n, tubes).into_vec();
                let base = count / tubes;
                let extra = count % tubes;
                for (k, &i) in objects.iter().enumerate() {
                    let len = base + usize::from(k < extra);
                    if len == 0 {
                        continue;
                    }
                    let start = ANCHOR_STEP + 1 + rng.gen_range(0..=span - len);
                    for t in start..start + len {
                        cells.insert((t, i));
                    }
                }
            }
        }
        (s, b) => return Err(Error::Config(format!("budget {b} does not apply to {s} masking"))),
    }
    Ok(MaskSpec {
        strategy,
        budget,
        n,
        t_h,
        cells,
    })
}

/// Per-sample budget distribution used during training.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSampler {
    pub strategy: Strategy,
    pub budgets: Vec<Budget>,
}

impl MaskSampler {
    /// Object masking with a budget drawn uniformly from `lo..=hi`.
    pub fn objects(lo: usize, hi: usize) -> Self {
        Self {
            strategy: Strategy::Object,
            budgets: (lo..=hi).map(Budget::Objects).collect(),
        }
    }

    pub fn sample<R: Rng>(&self, n: usize, t_h: usize, rng: &mut R) -> Result<MaskSpec> {
        let b = self.budgets[rng.gen_range(0..self.budgets.len())];
        let b = match b {
            Budget::Objects(m) => Budget::Objects(m.min(n.saturating_sub(1))),
            other => other,
        };
        sample_mask(self.strategy, b, n, t_h, rng)
    }

    pub fn max_objects(&self) -> usize {
        self.budgets
            .iter()
            .map(|b| match b {
                Budget::Objects(m) => *m,
                Budget::Fraction(f) => usize::from(*f > 0.0),
            })
            .max()
            .unwrap_or(0)
    }
}

/// Fixed sinusoidal encoding of step `tau` in `dim` dimensions.
pub fn sinusoid(tau: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
            let a = tau as f64 * freq;
            if c % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Trainable pieces of the mask-token construction.
#[derive(Clone, Debug)]
pub struct MaskTokenizer {
    /// `[d, d]`, identity at initialization.
    pub phi: ParamId,
    /// `[steps, d]`; `e_tau` is this row plus the fixed sinusoid.
    pub step_embed: ParamId,
    pub dim: usize,
    pub steps: usize,
}

impl MaskTokenizer {
    /// The learned rows start at minus the sinusoid so `e_tau` is zero.
    pub fn init(store: &mut ParameterStore, dim: usize, steps: usize) -> Self {
        let phi = store.insert("mask.phi", Tensor::identity(dim));
        let rows: Vec<Vec<f64>> = (0..steps).map(|t| sinusoid(t, dim).iter().map(|v| -v).collect()).collect();
        let step_embed = store.insert("mask.step_embed", Tensor::from_rows(&rows).unwrap());
        Self {
            phi,
            step_embed,
            dim,
            steps,
        }
    }

    pub fn e_tau(&self, store: &ParameterStore, tau: usize) -> Vec<f64> {
        let learned = store.value(self.step_embed).row(tau);
        learned.iter().zip(sinusoid(tau, self.dim)).map(|(a, b)| a + b).collect()
    }

    pub fn mask_token(&self, store: &ParameterStore, anchor: &[f64], tau: usize) -> Vec<f64> {
        let phi = store.value(self.phi);
        let e = self.e_tau(store, tau);
        (0..self.dim)
            .map(|c| {
                let mut s = 0.0;
                for (k, a) in anchor.iter().enumerate() {
                    s += a * phi.at(k, c);
                }
                s + e[c]
            })
            .collect()
    }

    /// Differentiable mask tokens for anchor rows `anchors` at steps `taus`.
    pub fn mask_tokens_graph(&self, g: &mut Graph, store: &ParameterStore, anchors: Tensor, taus: &[usize]) -> Result<Var, NumericsError> {
        let a = g.constant(anchors);
        let phi = g.param(store, self.phi);
        let proj = g.matmul(a, phi)?;
        let table = g.param(store, self.step_embed);
        let learned = g.gather_rows(table, taus)?;
        let rows: Vec<Vec<f64>> = taus.iter().map(|&t| sinusoid(t, self.dim)).collect();
        let pe = g.constant(Tensor::from_rows(&rows)?);
        let e = g.add(learned, pe)?;
        g.add(proj, e)
    }
}

/// Window grid with masked cells replaced, plus the mask indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    /// `[T * n, d]`, row `tau * n + i`.
    pub tokens: Tensor,
    pub indicator: Vec<bool>,
    pub n: usize,
    pub t_h: usize,
    pub t_p: usize,
    pub aux: Option<AuxSignals>,
}

impl MaskedSequence {
    pub fn steps(&self) -> usize {
        self.t_h + self.t_p
    }

    pub fn masked_count(&self) -> usize {
        self.indicator.iter().filter(|&&b| b).count()
    }

    pub fn is_masked(&self, tau: usize, i: usize) -> bool {
        self.indicator[tau * self.n + i]
    }

    /// The grid as a plain sequence (mask tokens in place).
    pub fn to_sequence(&self) -> EntityTokenSeq {
        EntityTokenSeq {
            slots: self.tokens.clone(),
            n: self.n,
            t_h: self.t_h,
            t_p: self.t_p,
            aux: self.aux.clone(),
        }
    }

    /// Anchor tokens for every masked row (zeros elsewhere) and the step
    /// index of every row.
    pub fn anchor_rows(&self) -> (Tensor, Vec<usize>) {
        let d = self.tokens.cols();
        let mut anchors = Tensor::zeros(&[self.tokens.rows(), d]);
        let mut taus = Vec::with_capacity(self.tokens.rows());
        for tau in 0..self.steps() {
            for i in 0..self.n {
                let r = tau * self.n + i;
                taus.push(tau);
                if self.indicator[r] {
                    anchors.row_mut(r).copy_from_slice(self.tokens.row(ANCHOR_STEP * self.n + i));
                }
            }
        }
        (anchors, taus)
    }
}

/// Replaces spec cells and every future slot cell by mask tokens.
pub fn apply(seq: &EntityTokenSeq, spec: &MaskSpec, tok: &MaskTokenizer, store: &ParameterStore) -> Result<MaskedSequence> {
    if spec.n != seq.n || spec.t_h != seq.t_h {
        return Err(Error::Dimension(format!(
            "mask spec for n={} t_h={} applied to n={} t_h={}",
            spec.n, spec.t_h, seq.n, seq.t_h
        )));
    }
    if seq.t_h == 0 {
        return Err(Error::Dimension("empty history window".into()));
    }
    if seq.dim() != tok.dim || seq.steps() > tok.steps {
        return Err(Error::Dimension("token width or window exceeds the mask tokenizer".into()));
    }
    let d = seq.dim();
    let rows = seq.steps() * seq.n;
    let mut tokens = Tensor::zeros(&[rows, d]);
    let mut indicator = vec![false; rows];
    for tau in 0..seq.steps() {
        for i in 0..seq.n {
            let r = tau * seq.n + i;
            let masked = tau >= seq.t_h || (tau != ANCHOR_STEP && spec.cells.contains(&(tau, i)));
            indicator[r] = masked;
            if masked {
                let token = tok.mask_token(store, seq.slot(ANCHOR_STEP, i), tau);
                tokens.row_mut(r).copy_from_slice(&token);
            } else {
                tokens.row_mut(r).copy_from_slice(seq.slot(tau, i));
            }
        }
    }
    Ok(MaskedSequence {
        tokens,
        indicator,
        n: seq.n,
        t_h: seq.t_h,
        t_p: seq.t_p,
        aux: seq.aux.clone(),
    })
}

/// Future-only masking.
pub fn inference_mask(seq: &EntityTokenSeq, tok: &MaskTokenizer, store: &ParameterStore) -> Result<MaskedSequence> {
    apply(seq, &MaskSpec::empty(seq.n, seq.t_h), tok, store)
}
