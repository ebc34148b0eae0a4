//! Linear-Gaussian systems with known interaction structure: exact Bayes
//! predictors, minimal sufficient context sets and risk gaps, plus
//! influence estimates read off a trained predictor.

use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::encoder::EntityTokenSeq;
use crate::error::{Error, Result};
use crate::masking::{apply, MaskSpec, ANCHOR_STEP};
use crate::numerics::Tensor;
use crate::predictor::Predictor;

/// Largest context for subset enumeration.
pub const MAX_ENUMERATION: usize = 16;
const RIDGE: f64 = 1e-10;
const SUFFICIENCY_TOL: f64 = 1e-9;

/// One scalar variable of the window: component `comp` of object `object`
/// at window step `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct VarId {
    pub step: usize,
    pub object: usize,
    pub comp: usize,
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "z{}[{}]@{}", self.object, self.comp, self.step)
    }
}

/// `z_t = sum_l W_l z_{t-l} + e_t` with diagonal Gaussian noise, where
/// `z_t` stacks the `n` object states of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianSystem {
    pub n: usize,
    pub dim: usize,
    /// One `[n*dim, n*dim]` matrix per lag, lag 1 first.
    pub w: Vec<DMatrix<f64>>,
    /// Noise variances, length `n*dim`.
    pub noise: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conditional {
    /// Mean coefficients, `[targets, given]`.
    pub coef: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    /// Set when the ridge was needed to invert the context covariance.
    pub regularized: bool,
}

impl Conditional {
    /// Trace of the conditional covariance.
    pub fn risk(&self) -> f64 {
        self.cov.trace()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    Exact,
    MaskPerturbation,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeighborhoodEstimate {
    pub object: usize,
    pub step: usize,
    pub set: Vec<VarId>,
    pub method: Method,
}

impl LinearGaussianSystem {
    pub fn new(n: usize, dim: usize, w: Vec<DMatrix<f64>>, noise: Vec<f64>) -> Result<Self> {
        let m = n * dim;
        if m == 0 || w.is_empty() {
            return Err(Error::Config("system needs objects, state width and at least one lag".into()));
        }
        if w.iter().any(|b| b.nrows() != m || b.ncols() != m) || noise.len() != m {
            return Err(Error::Dimension(format!("blocks and noise must have size {m}")));
        }
        if noise.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("noise variances must be finite and non-negative".into()));
        }
        let sys = Self { n, dim, w, noise };
        let rho = sys.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::Config(format!("companion spectral radius {rho:.6} is not below 1")));
        }
        Ok(sys)
    }

    /// Scalar chain `0 -> 1 -> ... -> n-1` with one lag: object 0 has no
    /// memory, the others keep `self_weight` of their state and receive
    /// `coupling` times their parent.
    pub fn chain(n: usize, self_weight: f64, coupling: f64, noise: f64) -> Result<Self> {
        let mut w = DMatrix::zeros(n, n);
        for i in 1..n {
            w[(i, i)] = self_weight;
            w[(i, i - 1)] = coupling;
        }
        Self::new(n, 1, vec![w], vec![noise; n])
    }

    pub fn lags(&self) -> usize {
        self.w.len()
    }

    fn width(&self) -> usize {
        self.n * self.dim
    }

    /// `adjacency[i][j]`: `j` enters `i`'s transition at some lag (`j != i`).
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let d = self.dim;
        (0..self.n)
            .map(|i| {
                (0..self.n)
                    .map(|j| {
                        i != j
                            && self.w.iter().any(|b| {
                                (0..d).any(|r| (0..d).any(|c| b[(i * d + r, j * d + c)] != 0.0))
                            })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn companion(&self) -> DMatrix<f64> {
        let m = self.width();
        let k = m * self.lags();
        let mut a = DMatrix::zeros(k, k);
        for (l, b) in self.w.iter().enumerate() {
            a.view_mut((0, l * m), (m, m)).copy_from(b);
        }
        for l in 1..self.lags() {
            for r in 0..m {
                a[(l * m + r, (l - 1) * m + r)] = 1.0;
            }
        }
        a
    }

    pub fn spectral_radius(&self) -> f64 {
        self.companion()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Stationary covariance of the companion state, by doubling.
    pub fn stationary_covariance(&self) -> DMatrix<f64> {
        let a = self.companion();
        let k = a.nrows();
        let mut q = DMatrix::zeros(k, k);
        for (r, v) in self.noise.iter().enumerate() {
            q[(r, r)] = *v;
        }
        let mut sigma = q;
        let mut ak = a;
        for _ in 0..64 {
            let next = &sigma + &ak * &sigma * ak.transpose();
            ak = &ak * &ak;
            let done = (&next - &sigma).amax() <= 1e-300 || ak.amax() < 1e-20;
            sigma = next;
            if done {
                break;
            }
        }
        sigma
    }

    fn index(&self, v: VarId) -> usize {
        (v.step * self.n + v.object) * self.dim + v.comp
    }

    /// Joint covariance of all variables over `steps` consecutive steps,
    /// indexed step-major, then object, then component.
    pub fn window_covariance(&self, steps: usize) -> DMatrix<f64> {
        let m = self.width();
        let a = self.companion();
        let sigma = self.stationary_covariance();
        // gamma[h] = Cov(z_{t+h}, z_t)
        let mut gamma = Vec::with_capacity(steps);
        let mut ah = sigma.clone();
        for _ in 0..steps {
            gamma.push(ah.view((0, 0), (m, m)).into_owned());
            ah = &a * ah;
        }
        let mut j = DMatrix::zeros(steps * m, steps * m);
        for s in 0..steps {
            for t in 0..steps {
                let block = if s >= t { gamma[s - t].clone() } else { gamma[t - s].transpose() };
                j.view_mut((s * m, t * m), (m, m)).copy_from(&block);
            }
        }
        j
    }

    /// Gaussian conditional of `targets` given `given` over a window of
    /// `steps` steps.
    pub fn conditional(&self, steps: usize, targets: &[VarId], given: &[VarId]) -> Conditional {
        let j = self.window_covariance(steps);
        let ti: Vec<usize> = targets.iter().map(|&v| self.index(v)).collect();
        let gi: Vec<usize> = given.iter().map(|&v| self.index(v)).collect();
        let pick = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |a, b| j[(r[a], c[b])]);
        let stt = pick(&ti, &ti);
        if gi.is_empty() {
            return Conditional {
                coef: DMatrix::zeros(ti.len(), 0),
                cov: stt,
                regularized: false,
            };
        }
        let sgg = pick(&gi, &gi);
        let stg = pick(&ti, &gi);
        let (inv, regularized) = match sgg.clone().cholesky() {
            Some(ch) if ch.l().diagonal().iter().all(|d| *d > 1e-12) => (ch.inverse(), false),
            _ => {
                let ridged = &sgg + DMatrix::identity(gi.len(), gi.len()) * RIDGE;
                let inv = ridged
                    .clone()
                    .cholesky()
                    .map(|c| c.inverse())
                    .or_else(|| ridged.try_inverse())
                    .unwrap_or_else(|| DMatrix::zeros(gi.len(), gi.len()));
                (inv, true)
            }
        };
        let coef = &stg * &inv;
        let cov = &stt - &coef * stg.transpose();
        Conditional { coef, cov, regularized }
    }

    /// Context of a masked object in a `t_h`-step history: every other
    /// object's history plus the object's own anchor.
    pub fn context(&self, object: usize, t_h: usize) -> Vec<VarId> {
        let mut v = Vec::new();
        for step in 0..t_h {
            for o in 0..self.n {
                if o != object || step == ANCHOR_STEP {
                    v.extend((0..self.dim).map(|comp| VarId { step, object: o, comp }));
                }
            }
        }
        v
    }

    pub fn target(&self, object: usize, step: usize) -> Vec<VarId> {
        (0..self.dim).map(|comp| VarId { step, object, comp }).collect()
    }

    /// Bayes prediction of the target given context values (in
    /// [`context`](Self::context) order) and its risk.
    pub fn exact_conditional_mean(&self, object: usize, step: usize, t_h: usize, values: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        let ctx = self.context(object, t_h);
        if values.len() != ctx.len() {
            return Err(Error::Dimension(format!("{} context values, expected {}", values.len(), ctx.len())));
        }
        let c = self.conditional(t_h.max(step + 1), &self.target(object, step), &ctx);
        let mean = &c.coef * DVector::from_column_slice(values);
        Ok((mean.iter().copied().collect(), c.risk(), c.regularized))
    }

    /// Smallest subset of the context with the same conditional law of the
    /// target as the full context; ties go to the lexicographically first.
    pub fn minimal_sufficient_set(&self, object: usize, step: usize, t_h: usize) -> Result<NeighborhoodEstimate> {
        let ctx = self.context(object, t_h);
        if ctx.len() > MAX_ENUMERATION {
            return Err(Error::EnumerationBound {
                vars: ctx.len(),
                limit: MAX_ENUMERATION,
            });
        }
        let steps = t_h.max(step + 1);
        let target = self.target(object, step);
        let full = self.conditional(steps, &target, &ctx);
        for size in 0..=ctx.len() {
            let mut found = None;
            for_each_combination(ctx.len(), size, |idx| {
                let given: Vec<VarId> = idx.iter().map(|&k| ctx[k]).collect();
                let c = self.conditional(steps, &target, &given);
                let mut coef = DMatrix::zeros(target.len(), ctx.len());
                for (col, &k) in idx.iter().enumerate() {
                    coef.set_column(k, &c.coef.column(col));
                }
                if (&coef - &full.coef).amax() <= SUFFICIENCY_TOL && (&c.cov - &full.cov).amax() <= SUFFICIENCY_TOL {
                    found = Some(given);
                    return true;
                }
                false
            });
            if let Some(set) = found {
                return Ok(NeighborhoodEstimate {
                    object,
                    step,
                    set,
                    method: Method::Exact,
                });
            }
        }
        unreachable!("the full context is always sufficient")
    }

    /// Bayes risk with the full context and with `ablated` removed.
    pub fn risk_gap(&self, object: usize, step: usize, t_h: usize, ablated: &[VarId]) -> (f64, f64) {
        let ctx = self.context(object, t_h);
        let steps = t_h.max(step + 1);
        let target = self.target(object, step);
        let kept: Vec<VarId> = ctx.iter().copied().filter(|v| !ablated.contains(v)).collect();
        let full = self.conditional(steps, &target, &ctx).risk();
        let abl = self.conditional(steps, &target, &kept).risk();
        (full, abl)
    }

    /// Independent stationary windows of `steps` steps, each flattened in
    /// window order.
    pub fn sample_windows<R: Rng>(&self, count: usize, steps: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let m = self.width();
        let k = m * self.lags();
        let sigma = self.stationary_covariance();
        let chol = (&sigma + DMatrix::identity(k, k) * 1e-14)
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::zeros(k, k));
        let sd: Vec<f64> = self.noise.iter().map(|v| v.sqrt()).collect();
        (0..count)
            .map(|_| {
                let e = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                // state[0] is the newest step
                let x = &chol * e;
                let mut hist: Vec<DVector<f64>> = (0..self.lags()).map(|l| x.rows(l * m, m).into_owned()).collect();
                let mut out = Vec::with_capacity(steps * m);
                out.extend(hist[0].iter());
                for _ in 1..steps {
                    let mut z = DVector::from_fn(m, |r, _| sd[r] * rng.sample::<f64, _>(StandardNormal));
                    for (l, b) in self.w.iter().enumerate() {
                        z += b * &hist[l];
                    }
                    hist.rotate_right(1);
                    hist[0] = z;
                    out.extend(hist[0].iter());
                }
                out
            })
            .collect()
    }

    /// Entity-token window with slots `[state, one-hot object id]`.
    pub fn to_sequence(&self, window: &[f64], t_h: usize, t_p: usize) -> Result<EntityTokenSeq> {
        let steps = t_h + t_p;
        let m = self.width();
        if window.len() != steps * m {
            return Err(Error::Dimension(format!("window of {} values for {steps} steps", window.len())));
        }
        let d = self.dim + self.n;
        let mut slots = Tensor::zeros(&[steps * self.n, d]);
        for t in 0..steps {
            for i in 0..self.n {
                let row = slots.row_mut(t * self.n + i);
                row[..self.dim].copy_from_slice(&window[t * m + i * self.dim..t * m + (i + 1) * self.dim]);
                row[self.dim + i] = 1.0;
            }
        }
        Ok(EntityTokenSeq {
            slots,
            n: self.n,
            t_h,
            t_p,
            aux: None,
        })
    }

    /// Text form: `n`, `dim`, `noise` (comma list) and one `w<lag>` line
    /// per lag with rows separated by `;`.
    pub fn to_text(&self) -> String {
        let mut s = format!("n={}\ndim={}\n", self.n, self.dim);
        let _ = writeln!(s, "noise={}", join(&self.noise));
        for (l, b) in self.w.iter().enumerate() {
            let rows: Vec<String> = (0..b.nrows())
                .map(|r| join(&b.row(r).iter().copied().collect::<Vec<_>>()))
                .collect();
            let _ = writeln!(s, "w{}={}", l + 1, rows.join(";"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n = None;
        let mut dim = None;
        let mut noise = None;
        let mut w: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
        let bad = |m: String| Error::Config(m);
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line}")))?;
            let (k, v) = (k.trim(), v.trim());
            let floats = |s: &str| -> Result<Vec<f64>> {
                s.split(',')
                    .map(|x| x.trim().parse().map_err(|_| bad(format!("bad number {x} in {k}"))))
                    .collect()
            };
            match k {
                "n" => n = Some(v.parse().map_err(|_| bad(format!("bad n {v}")))?),
                "dim" => dim = Some(v.parse().map_err(|_| bad(format!("bad dim {v}")))?),
                "noise" => noise = Some(floats(v)?),
                _ if k.starts_with('w') => {
                    let lag: usize = k[1..].parse().map_err(|_| bad(format!("unknown key {k}")))?;
                    let rows = v.split(';').map(floats).collect::<Result<Vec<_>>>()?;
                    w.push((lag, rows));
                }
                _ => return Err(bad(format!("unknown key {k}"))),
            }
        }
        let n: usize = n.ok_or_else(|| bad("missing n".into()))?;
        let dim: usize = dim.unwrap_or(1);
        let m = n * dim;
        w.sort_by_key(|(l, _)| *l);
        if w.iter().enumerate().any(|(k, (l, _))| *l != k + 1) {
            return Err(bad("lags must be numbered 1, 2, ... without gaps".into()));
        }
        let mats = w
            .into_iter()
            .map(|(_, rows)| {
                if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                    return Err(Error::Dimension(format!("transition blocks must be {m}x{m}")));
                }
                Ok(DMatrix::from_fn(m, m, |r, c| rows[r][c]))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n, dim, mats, noise.unwrap_or_else(|| vec![1.0; m]))
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// Calls `f` on each `k`-subset of `0..n` in lexicographic order until it
/// returns true.
pub fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize]) -> bool) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if f(&idx) {
            return;
        }
        let Some(p) = (0..k).rev().find(|&p| idx[p] != p + n - k) else { return };
        idx[p] += 1;
        for q in p + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// Squared error over the masked cells of `object`, history and future.
fn object_error(pred: &Tensor, seq: &EntityTokenSeq, object: usize, comps: usize) -> f64 {
    let mut e = 0.0;
    for tau in ANCHOR_STEP + 1..seq.steps() {
        let r = tau * seq.n + object;
        e += pred.row(r)[..comps]
            .iter()
            .zip(&seq.slots.row(r)[..comps])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    e
}

/// Per-window influence of each candidate on a masked target object.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowScores {
    /// Error increase when the candidate is masked as well.
    pub perturbation: Vec<f64>,
    /// Mean attention from the target's masked tokens to the candidate.
    pub attention: Vec<f64>,
}

/// Scores every entity `j != object` for one window. `comps` limits the
/// error to the leading slot components (all when `None`).
pub fn window_scores(model: &Predictor, seq: &EntityTokenSeq, object: usize, comps: Option<usize>) -> Result<WindowScores> {
    let n = seq.n;
    let comps = comps.unwrap_or(seq.dim());
    let base_spec = MaskSpec::objects(n, seq.t_h, &[object]);
    let base = model.forward(&apply(seq, &base_spec, &model.tokenizer, &model.store)?)?;
    let base_err = object_error(&base.pred, seq, object, comps);
    let e = base.entities;
    let steps = seq.steps();
    let tokens = steps * e;
    let heads = model.config.heads;
    let mut perturbation = vec![0.0; n];
    let mut attention = vec![0.0; n];
    for j in (0..n).filter(|&j| j != object) {
        let spec = MaskSpec::objects(n, seq.t_h, &[object, j]);
        let p = model.forward(&apply(seq, &spec, &model.tokenizer, &model.store)?)?;
        perturbation[j] = object_error(&p.pred, seq, object, comps) - base_err;
        let mut mass = 0.0;
        let mut queries = 0.0;
        for w in &base.attention {
            for h in 0..heads {
                for tau in ANCHOR_STEP + 1..steps {
                    let q = tau * e + object;
                    let row = &w[(h * tokens + q) * tokens..(h * tokens + q + 1) * tokens];
                    mass += (0..steps).map(|s| row[s * e + j]).sum::<f64>();
                    queries += 1.0;
                }
            }
        }
        attention[j] = mass / queries;
    }
    Ok(WindowScores { perturbation, attention })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InfluenceReport {
    pub target: usize,
    pub candidates: Vec<usize>,
    pub perturbation: Vec<f64>,
    pub attention: Vec<f64>,
    /// `truth[k]`: candidate `k` is a true neighbor of the target.
    pub truth: Vec<bool>,
    pub ranking_perturbation: f64,
    pub ranking_attention: f64,
    pub rank_correlation_perturbation: f64,
    pub rank_correlation_attention: f64,
    pub windows: usize,
    pub low_confidence: bool,
}

impl InfluenceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("target,candidate,true_edge,perturbation,attention\n");
        for (k, &c) in self.candidates.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{:.9e},{:.9e}",
                self.target,
                c,
                u8::from(self.truth[k]),
                self.perturbation[k],
                self.attention[k]
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    /// Candidates sorted by decreasing perturbation score.
    pub fn neighborhood(&self, size: usize) -> NeighborhoodEstimate {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by(|&a, &b| self.perturbation[b].total_cmp(&self.perturbation[a]).then(a.cmp(&b)));
        NeighborhoodEstimate {
            object: self.target,
            step: 0,
            set: order
                .into_iter()
                .take(size)
                .map(|k| VarId {
                    step: 0,
                    object: self.candidates[k],
                    comp: 0,
                })
                .collect(),
            method: Method::MaskPerturbation,
        }
    }
}

/// Averages window scores for `target` over `windows` and compares them with
/// the ground-truth neighbor flags `truth` (indexed by entity).
pub fn estimate_influence(
    model: &Predictor,
    windows: &[EntityTokenSeq],
    target: usize,
    truth: &[bool],
    comps: Option<usize>,
) -> Result<InfluenceReport> {
    let n = windows.first().map_or(0, |w| w.n);
    if target >= n || truth.len() != n {
        return Err(Error::OutOfRange(format!("target {target} or truth flags for {n} entities")));
    }
    let mut pert = vec![0.0; n];
    let mut att = vec![0.0; n];
    for w in windows {
        let s = window_scores(model, w, target, comps)?;
        for j in 0..n {
            pert[j] += s.perturbation[j] / windows.len() as f64;
            att[j] += s.attention[j] / windows.len() as f64;
        }
    }
    let candidates: Vec<usize> = (0..n).filter(|&j| j != target).collect();
    let pick = |v: &[f64]| candidates.iter().map(|&j| v[j]).collect::<Vec<_>>();
    let (perturbation, attention) = (pick(&pert), pick(&att));
    let truth: Vec<bool> = candidates.iter().map(|&j| truth[j]).collect();
    if perturbation.iter().chain(&attention).any(|v| !v.is_finite()) {
        return Err(Error::Numerics(crate::numerics::NumericsError::NonFinite(
            "influence scores".into(),
        )));
    }
    let low_confidence = model.store.steps_taken() == 0 || windows.len() < 10;
    Ok(InfluenceReport {
        target,
        ranking_perturbation: separation(&perturbation, &truth),
        ranking_attention: separation(&attention, &truth),
        rank_correlation_perturbation: spearman(&perturbation, &truth),
        rank_correlation_attention: spearman(&attention, &truth),
        candidates,
        perturbation,
        attention,
        truth,
        windows: windows.len(),
        low_confidence,
    })
}

/// Fraction of true-edge scores above every false-edge score; 1 when either
/// side is empty.
pub fn separation(scores: &[f64], truth: &[bool]) -> f64 {
    let max_false = scores
        .iter()
        .zip(truth)
        .filter(|(_, &t)| !t)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let trues: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| t).map(|(s, _)| *s).collect();
    if trues.is_empty() {
        return 1.0;
    }
    trues.iter().filter(|&&s| s > max_false).count() as f64 / trues.len() as f64
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation between scores and the truth flags; 0 when either
/// is constant.
pub fn spearman(scores: &[f64], truth: &[bool]) -> f64 {
    let a = ranks(scores);
    let b = ranks(&truth.iter().map(|&t| f64::from(u8::from(t))).collect::<Vec<_>>());
    let n = a.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// One push-world window with slot-indexed contact information.
#[derive(Clone, Debug)]
pub struct ContactWindow {
    pub seq: EntityTokenSeq,
    /// Slot pairs in contact during the window.
    pub contacts: Vec<(usize, usize)>,
    /// Slots that never contact each other anywhere in the episode.
    pub never: Vec<(usize, usize)>,
}

/// Ranking metric for push-world: for each window and each target slot
/// with both a contact partner and a never-contacting partner, the fraction
/// of contact-partner scores above the largest never-contacting score,
/// averaged over all such groups. Also returns the number of groups.
pub fn contact_ranking(model: &Predictor, windows: &[ContactWindow]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut groups = 0usize;
    for w in windows {
        for i in 0..w.seq.n {
            let partner = |pairs: &[(usize, usize)]| -> Vec<usize> {
                let mut v: Vec<usize> = pairs
                    .iter()
                    .filter_map(|&(a, b)| (a == i).then_some(b).or((b == i).then_some(a)))
                    .collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            let pos = partner(&w.contacts);
            let neg = partner(&w.never);
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let s = window_scores(model, &w.seq, i, None)?;
            let scores: Vec<f64> = pos.iter().chain(&neg).map(|&j| s.perturbation[j]).collect();
            let truth: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
            total += separation(&scores, &truth);
            groups += 1;
        }
    }
    Ok((if groups == 0 { 0.0 } else { total / groups as f64 }, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(step: usize, object: usize) -> VarId {
        VarId { step, object, comp: 0 }
    }

    #[test]
    fn independent_objects_need_only_the_anchor() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.7, 0.3]));
        let sys = LinearGaussianSystem::new(3, 1, vec![w], vec![1.0; 3]).unwrap();
        let est = sys.minimal_sufficient_set(1, 2, 3).unwrap();
        assert_eq!(est.set, vec![v(0, 1)]);
        let (full, abl) = sys.risk_gap(1, 2, 3, &[v(1, 0)]);
        assert!((full - abl).abs() < 1e-12);
        // prior propagated from the anchor: 0.49 z0, risk 1 + 0.49
        let ctx = sys.context(1, 3);
        let vals: Vec<f64> = ctx.iter().map(|c| if *c == v(0, 1) { 2.0 } else { 5.0 }).collect();
        let (mean, risk, reg) = sys.exact_conditional_mean(1, 2, 3, &vals).unwrap();
        assert!((mean[0] - 0.98).abs() < 1e-12);
        assert!((risk - 1.49).abs() < 1e-12);
        assert!(!reg);
    }

    #[test]
    fn noise_free_system_is_exact() {
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 0)] = 0.5;
        w[(1, 0)] = 1.0;
        let sys = LinearGaussianSystem::new(2, 1, vec![w], vec![1.0, 0.0]).unwrap();
        let (_, risk, _) = sys.exact_conditional_mean(1, 2, 3, &[0.3, 0.1, 0.2, -0.4]).unwrap();
        assert!(risk.abs() < 1e-9);
    }

    #[test]
    fn unstable_system_rejected() {
        assert!(LinearGaussianSystem::chain(3, 1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn two_object_parent_gap_is_coupling_squared() {
        let w = 1.5;
        let mut m = DMatrix::zeros(2, 2);
        m[(1, 0)] = w;
        let sys = LinearGaussianSystem::new(2, 1, vec![m], vec![1.0, 1.0]).unwrap();
        let (full, abl) = sys.risk_gap(1, 1, 2, &[v(0, 0)]);
        assert!((abl - full - w * w).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let sys = LinearGaussianSystem::chain(3, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(LinearGaussianSystem::from_text(&sys.to_text()).unwrap(), sys);
        assert!(LinearGaussianSystem::from_text("n=2\nw1=0,0;0,0\nfoo=1").is_err());
        assert!(LinearGaussianSystem::from_text("n=2\nw1=0,0;0").is_err());
    }

    #[test]
    fn enumeration_bound() {
        let sys = LinearGaussianSystem::chain(4, 0.5, 0.5, 1.0).unwrap();
        assert_eq!(sys.context(0, 5).len(), 16);
        assert!(matches!(
            sys.minimal_sufficient_set(0, 5, 6),
            Err(Error::EnumerationBound { vars: 19, limit: 16 })
        ));
    }

    #[test]
    fn combinations_are_lexicographic() {
        let mut seen = Vec::new();
        for_each_combination(4, 2, |c| {
            seen.push(c.to_vec());
            false
        });
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }

    #[test]
    fn sampled_windows_match_window_covariance() {
        let sys = LinearGaussianSystem::chain(3, 0.5, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = sys.sample_windows(100_000, 2, &mut rng);
        let j = sys.window_covariance(2);
        for (a, b) in [(0, 0), (1, 1), (2, 2), (4, 1), (5, 4), (3, 0)] {
            let emp: f64 = xs.iter().map(|x| x[a] * x[b]).sum::<f64>() / xs.len() as f64;
            assert!((emp - j[(a, b)]).abs() < 0.05 * j[(a, a)].max(1.0), "{a},{b}: {emp} vs {}", j[(a, b)]);
        }
    }

    #[test]
    fn separation_and_spearman() {
        assert_eq!(separation(&[3.0, 1.0, 2.0], &[true, false, false]), 1.0);
        assert_eq!(separation(&[3.0, 1.0, 2.0], &[true, false, true]), 1.0);
        assert_eq!(separation(&[1.5, 1.0, 2.0], &[true, false, false]), 0.0);
        assert!((spearman(&[3.0, 1.0, 2.0], &[true, false, false]) - 0.866_025_403_784_438_6).abs() < 1e-12);
    }
}
