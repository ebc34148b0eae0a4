//! Goal-conditioned latent planning: slot matching, CEM over action blocks
//! and receding-horizon execution in the push world.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::encoder::{action_block, Permutation, SlotEncoder};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::predictor::Predictor;
use crate::worldsim::{derive_seed, rollout_episode, step, Action, EnvConfig, EnvState};

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanConfig {
    /// Model steps per plan.
    pub horizon: usize,
    /// Environment steps per model step.
    pub block: usize,
    /// Model steps executed before replanning.
    pub receding: usize,
    pub samples: usize,
    pub elites: usize,
    pub iterations: usize,
    pub init_std: f64,
    /// Environment step budget per episode.
    pub budget: usize,
    pub goal_offset: usize,
    /// Mean block position error counted as success.
    pub threshold: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            block: 5,
            receding: 5,
            samples: 300,
            elites: 30,
            iterations: 30,
            init_std: 0.5,
            budget: 50,
            goal_offset: 25,
            threshold: 20.0 / 450.0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.horizon,
            self.block,
            self.receding,
            self.samples,
            self.elites,
            self.iterations,
            self.budget,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("plan counts must be positive".into()));
        }
        if self.receding > self.horizon {
            return Err(Error::Config("receding horizon exceeds planning horizon".into()));
        }
        if self.elites > self.samples {
            return Err(Error::Config("more elites than samples".into()));
        }
        if !(self.init_std > 0.0) || !(self.threshold > 0.0) {
            return Err(Error::Config("init_std and threshold must be positive".into()));
        }
        Ok(())
    }

    /// Flat length of a planned action sequence.
    pub fn plan_len(&self) -> usize {
        self.horizon * self.block * 2
    }
}

/// Minimum-cost assignment for a square cost matrix given row-major;
/// returns `assign[row] = col` and the total cost.
pub fn assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    // potentials formulation, 1-indexed with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|r| cost[r * n + assign[r]]).sum();
    (assign, total)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Matches rows of `a` to rows of `b` minimizing the summed squared
/// distance; `perm[k]` is the row of `b` matched to row `k` of `a`.
pub fn hungarian_match(a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, f64)> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Dimension(format!("slot sets {:?} and {:?}", a.shape(), b.shape())));
    }
    let n = a.rows();
    let cost: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(a.row(i), b.row(j)))
        .collect();
    Ok(assignment(&cost, n))
}

/// Matched terminal cost between predicted and goal slots.
pub fn latent_cost(pred: &Tensor, goal: &Tensor) -> Result<f64> {
    hungarian_match(pred, goal).map(|(_, c)| c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemResult {
    pub mean: Vec<f64>,
    pub best: Vec<f64>,
    pub best_cost: f64,
    /// Lowest sampled cost per iteration.
    pub iteration_costs: Vec<f64>,
}

/// Cross-entropy minimization of `cost` over a box `[-bound, bound]^dim`.
/// From the second iteration on, the last sample slot holds the best
/// sequence seen so far.
pub fn cem<R: Rng>(
    dim: usize,
    bound: f64,
    cfg: &PlanConfig,
    rng: &mut R,
    mut cost: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<CemResult> {
    cem_from(vec![0.0; dim], bound, cfg, rng, &mut cost)
}

/// [`cem`] starting from `mean`.
pub fn cem_from<R: Rng>(
    mut mean: Vec<f64>,
    bound: f64,
    cfg: &PlanConfig,
    rng: &mut R,
    cost: &mut impl FnMut(&[f64]) -> Result<f64>,
) -> Result<CemResult> {
    let dim = mean.len();
    let mut std = vec![cfg.init_std; dim];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut iteration_costs = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut samples: Vec<Vec<f64>> = (0..cfg.samples)
            .map(|_| {
                (0..dim)
                    .map(|k| (mean[k] + std[k] * rng.sample::<f64, _>(StandardNormal)).clamp(-bound, bound))
                    .collect()
            })
            .collect();
        if let Some((b, _)) = &best {
            *samples.last_mut().expect("samples is positive") = b.clone();
        }
        let mut scored = Vec::with_capacity(samples.len());
        for (k, s) in samples.iter().enumerate() {
            let c = cost(s)?;
            scored.push((if c.is_nan() { f64::INFINITY } else { c }, k));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (c0, k0) = scored[0];
        iteration_costs.push(c0);
        if best.as_ref().is_none_or(|(_, bc)| c0 < *bc) {
            best = Some((samples[k0].clone(), c0));
        }
        let elites = &scored[..cfg.elites];
        let m = elites.len() as f64;
        for k in 0..dim {
            let mu = elites.iter().map(|&(_, i)| samples[i][k]).sum::<f64>() / m;
            let var = elites.iter().map(|&(_, i)| (samples[i][k] - mu).powi(2)).sum::<f64>() / m;
            mean[k] = mu;
            std[k] = var.sqrt().max(STD_FLOOR);
        }
    }
    let (best, best_cost) = best.unwrap_or_else(|| (mean.clone(), f64::INFINITY));
    Ok(CemResult {
        mean,
        best,
        best_cost,
        iteration_costs,
    })
}

/// Goal slots plus the goal state used for success checks.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalSpec {
    pub slots: Tensor,
    pub state: EnvState,
}

impl GoalSpec {
    pub fn new(encoder: &SlotEncoder, perm: &Permutation, state: EnvState) -> Self {
        Self {
            slots: encoder.encode_frame(&state, perm).slots,
            state,
        }
    }
}

/// Planning context: model history frames and past action blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanHistory {
    /// `[t_h * n, d]`
    pub slots: Tensor,
    /// `[t_h - 1, 2 * block]`
    pub actions: Tensor,
}

/// Plans `horizon` action blocks; the cost is the matched latent distance
/// between the last predicted slot set and the goal.
pub fn cem_optimize<R: Rng>(
    model: &Predictor,
    history: &PlanHistory,
    goal: &GoalSpec,
    cfg: &PlanConfig,
    bound: f64,
    rng: &mut R,
) -> Result<CemResult> {
    let a_dim = 2 * cfg.block;
    if model.config.action_dim != a_dim {
        return Err(Error::Config(format!(
            "model action width {} does not match block size {}",
            model.config.action_dim, cfg.block
        )));
    }
    let past = history.actions.rows();
    let mut rows = Tensor::zeros(&[past + cfg.horizon, a_dim]);
    rows.data_mut()[..past * a_dim].copy_from_slice(history.actions.data());
    let mut cost = |plan: &[f64]| -> Result<f64> {
        let mut a = rows.clone();
        a.data_mut()[past * a_dim..].copy_from_slice(plan);
        let r = model.rollout(&history.slots, Some(&a), None, cfg.horizon)?;
        latent_cost(&r.frames[cfg.horizon - 1], &goal.slots)
    };
    cem_from(vec![0.0; cfg.plan_len()], bound, cfg, rng, &mut cost)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplanRecord {
    pub episode: usize,
    pub replan: usize,
    pub step: usize,
    pub iteration_costs: Vec<f64>,
    pub best_cost: f64,
    pub actions: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub actions: Vec<[f64; 2]>,
    pub replans: Vec<ReplanRecord>,
    /// Per block distance to its goal position at the end.
    pub final_errors: Vec<f64>,
    pub final_error: f64,
    pub success: bool,
    pub steps: usize,
    pub seconds: f64,
    pub failure: Option<String>,
}

fn block_errors(state: &EnvState, goal: &EnvState) -> Vec<f64> {
    state
        .objects
        .iter()
        .zip(&goal.objects)
        .filter(|(a, _)| a.kind == crate::worldsim::Kind::Block)
        .map(|(a, b)| ((a.pos[0] - b.pos[0]).powi(2) + (a.pos[1] - b.pos[1]).powi(2)).sqrt())
        .collect()
}

/// Model history ending at env frame `cur`: frames every `block` steps back,
/// repeating the first frame before the episode start.
pub fn history_at(
    frames: &[EnvState],
    actions: &[[f64; 2]],
    cur: usize,
    t_h: usize,
    block: usize,
    encoder: &SlotEncoder,
    perm: &Permutation,
) -> Result<PlanHistory> {
    let n = frames[0].objects.len();
    let mut slots = Vec::with_capacity(t_h * n * encoder.dim());
    let mut rows = Tensor::zeros(&[t_h - 1, 2 * block]);
    for tau in 0..t_h {
        let back = (t_h - 1 - tau) * block;
        let f = cur.checked_sub(back);
        let state = &frames[f.unwrap_or(0)];
        slots.extend_from_slice(encoder.encode_frame(state, perm).slots.data());
        if tau + 1 < t_h {
            if let Some(f) = f {
                rows.row_mut(tau).copy_from_slice(&action_block(actions, f, block));
            }
        }
    }
    Ok(PlanHistory {
        slots: Tensor::new(vec![t_h * n, encoder.dim()], slots)?,
        actions: rows,
    })
}

/// Receding-horizon execution of CEM plans from `start` toward `goal`.
#[allow(clippy::too_many_arguments)]
pub fn mpc_episode<R: Rng>(
    env: &EnvConfig,
    model: &Predictor,
    encoder: &SlotEncoder,
    perm: &Permutation,
    start: &EnvState,
    goal: &GoalSpec,
    cfg: &PlanConfig,
    episode: usize,
    rng: &mut R,
) -> Result<PlanResult> {
    cfg.validate()?;
    let clock = Instant::now();
    let mut frames = vec![start.clone()];
    let mut actions: Vec<[f64; 2]> = Vec::new();
    let mut replans = Vec::new();
    let mut failure = None;
    let mut success = start.block_error(&goal.state) < cfg.threshold;
    'outer: while !success && actions.len() < cfg.budget {
        let cur = actions.len();
        let history = history_at(&frames, &actions, cur, model.config.t_h, cfg.block, encoder, perm)?;
        let plan = cem_optimize(model, &history, goal, cfg, env.a_max, rng)?;
        let exec = (cfg.receding * cfg.block).min(cfg.budget - cur);
        let chosen: Vec<[f64; 2]> = plan.mean.chunks(2).take(exec).map(|c| [c[0], c[1]]).collect();
        replans.push(ReplanRecord {
            episode,
            replan: replans.len(),
            step: cur,
            iteration_costs: plan.iteration_costs.clone(),
            best_cost: plan.best_cost,
            actions: chosen.clone(),
        });
        for a in chosen {
            if !a.iter().all(|v| v.is_finite()) {
                failure = Some(format!("non-finite action at step {}", actions.len()));
                break 'outer;
            }
            let (next, _) = step(frames.last().expect("frames is non-empty"), Action(a), env);
            frames.push(next);
            actions.push(a);
            if frames.last().expect("frames is non-empty").block_error(&goal.state) < cfg.threshold {
                success = true;
                break;
            }
        }
    }
    let last = frames.last().expect("frames is non-empty");
    let final_errors = block_errors(last, &goal.state);
    Ok(PlanResult {
        final_error: last.block_error(&goal.state),
        final_errors,
        success: success && failure.is_none(),
        steps: actions.len(),
        actions,
        replans,
        seconds: clock.elapsed().as_secs_f64(),
        failure,
    })
}

/// Uniform random actions for the whole budget, stopping at success.
pub fn random_episode<R: Rng>(env: &EnvConfig, start: &EnvState, goal: &EnvState, cfg: &PlanConfig, rng: &mut R) -> PlanResult {
    let clock = Instant::now();
    let mut state = start.clone();
    let mut actions = Vec::new();
    let mut success = state.block_error(goal) < cfg.threshold;
    while !success && actions.len() < cfg.budget {
        let a = [rng.gen_range(-env.a_max..=env.a_max), rng.gen_range(-env.a_max..=env.a_max)];
        state = step(&state, Action(a), env).0;
        actions.push(a);
        success = state.block_error(goal) < cfg.threshold;
    }
    PlanResult {
        final_error: state.block_error(goal),
        final_errors: block_errors(&state, goal),
        success,
        steps: actions.len(),
        actions,
        replans: Vec::new(),
        seconds: clock.elapsed().as_secs_f64(),
        failure: None,
    }
}

/// Start and goal of one evaluation episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEpisode {
    pub seed: u64,
    pub start: EnvState,
    pub goal: EnvState,
}

/// Evaluation episodes: a resting start state and the behaviour-policy
/// state `goal_offset` steps later, kept only when the blocks moved by more
/// than the success threshold.
pub fn eval_episodes(env: &EnvConfig, seed: u64, count: usize, cfg: &PlanConfig) -> Vec<EvalEpisode> {
    let mut out = Vec::with_capacity(count);
    let mut k = 0u64;
    while out.len() < count {
        let s = derive_seed(seed, k);
        k += 1;
        let traj = rollout_episode(env, s, cfg.goal_offset + 1);
        let (start, goal) = (&traj.states[0], &traj.states[cfg.goal_offset]);
        if start.block_error(goal) > cfg.threshold {
            out.push(EvalEpisode {
                seed: s,
                start: start.clone(),
                goal: goal.clone(),
            });
        }
    }
    out
}

pub fn replans_to_jsonl(records: &[ReplanRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}", serde_json::to_string(r).unwrap_or_default());
    }
    s
}

/// `episode,success,steps,final_error,seconds` rows.
pub fn summary_csv(results: &[PlanResult]) -> String {
    let mut s = String::from("episode,success,steps,final_error,seconds\n");
    for (k, r) in results.iter().enumerate() {
        let _ = writeln!(s, "{k},{},{},{:.9e},{:.3}", u8::from(r.success), r.steps, r.final_error, r.seconds);
    }
    s
}

pub fn success_rate(results: &[PlanResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.success).count() as f64 / results.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sets_match_identity() {
        let a = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(hungarian_match(&a, &a).unwrap(), (vec![0, 1, 2], 0.0));
    }

    #[test]
    fn known_permutation_recovered() {
        let a = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap();
        let perm = [2, 0, 3, 1];
        let mut rows = vec![vec![]; 4];
        for (k, &p) in perm.iter().enumerate() {
            rows[p] = a.row(k).to_vec();
        }
        let b = Tensor::from_rows(&rows).unwrap();
        assert_eq!(hungarian_match(&a, &b).unwrap(), (perm.to_vec(), 0.0));
    }

    #[test]
    fn offset_slot_costs_its_squared_norm() {
        let a = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 3.0, 0.3, -0.4]).unwrap();
        assert!((latent_cost(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!(latent_cost(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn cem_without_selection_returns_sample_mean() {
        let cfg = PlanConfig {
            samples: 7,
            elites: 7,
            iterations: 1,
            ..PlanConfig::default()
        };
        let mut seen = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = cem(3, 10.0, &cfg, &mut rng, |a| {
            seen.push(a.to_vec());
            Ok(a[0])
        })
        .unwrap();
        for k in 0..3 {
            let mu = seen.iter().map(|s| s[k]).sum::<f64>() / 7.0;
            assert!((r.mean[k] - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn cem_is_deterministic_and_monotone() {
        let cfg = PlanConfig {
            samples: 40,
            elites: 5,
            iterations: 15,
            ..PlanConfig::default()
        };
        let f = |a: &[f64]| Ok(a.iter().map(|x| (x - 0.2).powi(2) + (3.0 * x).sin() * 0.1).sum::<f64>());
        let a = cem(6, 0.5, &cfg, &mut ChaCha8Rng::seed_from_u64(2), f).unwrap();
        let b = cem(6, 0.5, &cfg, &mut ChaCha8Rng::seed_from_u64(2), f).unwrap();
        assert_eq!(a, b);
        assert!(a.iteration_costs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_plan_configs() {
        let bad = [
            PlanConfig { receding: 6, ..PlanConfig::default() },
            PlanConfig { elites: 301, ..PlanConfig::default() },
            PlanConfig { samples: 0, ..PlanConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        assert!(PlanConfig::default().validate().is_ok());
    }

    fn tiny_model() -> Predictor {
        Predictor::new(PredictorConfig {
            layers: 1,
            heads: 1,
            head_dim: 4,
            mlp_dim: 4,
            d: 8,
            action_dim: 2,
            ..PredictorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn goal_at_start_is_immediate_success() {
        let env = EnvConfig::default();
        let enc = SlotEncoder::new(8, 1);
        let perm = Permutation::identity(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = crate::worldsim::random_state(&env, &mut rng);
        let goal = GoalSpec::new(&enc, &perm, start.clone());
        let cfg = PlanConfig {
            block: 1,
            horizon: 1,
            receding: 1,
            ..PlanConfig::default()
        };
        let r = mpc_episode(&env, &tiny_model(), &enc, &perm, &start, &goal, &cfg, 0, &mut rng).unwrap();
        assert!(r.success);
        assert_eq!(r.steps, 0);
        assert!(r.replans.is_empty());
    }

    #[test]
    fn full_receding_horizon_replans_once_per_plan() {
        let env = EnvConfig::default();
        let enc = SlotEncoder::new(8, 1);
        let perm = Permutation::identity(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let start = crate::worldsim::random_state(&env, &mut rng);
        let mut far = start.clone();
        for o in far.objects.iter_mut().skip(1) {
            o.pos = [1.0 - o.pos[0], 1.0 - o.pos[1]];
        }
        let goal = GoalSpec::new(&enc, &perm, far);
        let cfg = PlanConfig {
            horizon: 2,
            block: 1,
            receding: 2,
            samples: 4,
            elites: 2,
            iterations: 2,
            budget: 6,
            ..PlanConfig::default()
        };
        let r = mpc_episode(&env, &tiny_model(), &enc, &perm, &start, &goal, &cfg, 0, &mut rng).unwrap();
        assert!(r.steps <= cfg.budget);
        if !r.success {
            assert_eq!(r.steps, 6);
            assert_eq!(r.replans.len(), 3);
            assert!(r.replans.iter().all(|p| p.actions.len() == 2));
        }
    }

    #[test]
    fn eval_episodes_are_nontrivial() {
        let env = EnvConfig::default();
        let cfg = PlanConfig::default();
        let eps = eval_episodes(&env, 5, 4, &cfg);
        assert_eq!(eps.len(), 4);
        assert!(eps.iter().all(|e| e.start.block_error(&e.goal) > cfg.threshold));
        let r = random_episode(&env, &eps[0].start, &eps[0].goal, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.steps <= cfg.budget);
    }
}
