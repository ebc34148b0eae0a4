//! Experiment building blocks shared by the subcommands.

use cjepa::encoder::{action_block, EncodedDataset, EntityTokenSeq, Permutation, SlotEncoder};
use cjepa::influence::{ContactWindow, LinearGaussianSystem};
use cjepa::masking::{Budget, MaskSampler, Strategy};
use cjepa::numerics::Tensor;
use cjepa::planner::{eval_episodes, mpc_episode, random_episode, GoalSpec, PlanConfig, PlanResult};
use cjepa::predictor::{Predictor, PredictorConfig, TrainLog};
use cjepa::worldsim::{derive_seed, generate_dataset, Dataset, EnvConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::CliError;

const TRAIN_STREAM: u64 = 11;
const VAL_STREAM: u64 = 12;
const EVAL_STREAM: u64 = 13;
const PLAN_STREAM: u64 = 14;
const RANDOM_STREAM: u64 = 15;

pub fn env_config(rc: &RunConfig) -> Result<EnvConfig, CliError> {
    Ok(EnvConfig {
        dt: rc.get("env.dt")?,
        drag: rc.get("env.drag")?,
        a_max: rc.get("env.a_max")?,
        blocks: rc.get("env.blocks")?,
        ..EnvConfig::default()
    })
}

pub fn encoder(rc: &RunConfig) -> Result<SlotEncoder, CliError> {
    let dim: usize = rc.get("encoder.dim")?;
    if dim < cjepa::encoder::FEATURES {
        return Err(CliError::Config(format!(
            "encoder.dim must be at least {}",
            cjepa::encoder::FEATURES
        )));
    }
    Ok(SlotEncoder::new(dim, rc.get("encoder.seed")?))
}

fn window_steps(rc: &RunConfig) -> Result<usize, CliError> {
    let steps = rc.get::<usize>("model.t_h")? + rc.get::<usize>("model.t_p")?;
    Ok((steps - 1) * rc.get::<usize>("data.frame_skip")? + 1)
}

/// Training and validation trajectories.
pub fn datasets(rc: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let env = env_config(rc)?;
    let seed = rc.seed()?;
    let length = rc.get("data.length")?;
    let window = window_steps(rc)?;
    let train = generate_dataset(&env, derive_seed(seed, TRAIN_STREAM), rc.get("data.episodes")?, length, window)?;
    let val = generate_dataset(&env, derive_seed(seed, VAL_STREAM), rc.get("data.val_episodes")?, length, window)?;
    Ok((train, val))
}

pub fn push_windows(eds: &EncodedDataset, t_h: usize, t_p: usize, skip: usize, proprio: bool) -> Result<Vec<EntityTokenSeq>, CliError> {
    let mut out = Vec::new();
    for ep in &eds.episodes {
        for s in 0..ep.window_count(t_h + t_p, skip) {
            out.push(ep.window(s, t_h, t_p, skip, proprio)?);
        }
    }
    Ok(out)
}

pub fn mask_sampler(rc: &RunConfig) -> Result<MaskSampler, CliError> {
    Ok(MaskSampler {
        strategy: rc.str("mask.strategy").parse()?,
        budgets: rc.list::<Budget>("mask.budgets")?,
    })
}

pub fn predictor_config(rc: &RunConfig) -> Result<PredictorConfig, CliError> {
    let skip: usize = rc.get("data.frame_skip")?;
    let cfg = PredictorConfig {
        layers: rc.get("model.layers")?,
        heads: rc.get("model.heads")?,
        head_dim: rc.get("model.head_dim")?,
        mlp_dim: rc.get("model.mlp_dim")?,
        t_h: rc.get("model.t_h")?,
        t_p: rc.get("model.t_p")?,
        n: rc.get::<usize>("env.blocks")? + 1,
        d: rc.get("encoder.dim")?,
        action_dim: 2 * skip,
        proprio: rc.get("model.proprio")?,
        aux_width: rc.get("model.aux_width")?,
        mask: mask_sampler(rc)?,
        lr: rc.get("train.lr")?,
        batch_size: rc.get("train.batch_size")?,
        epochs: rc.get("train.epochs")?,
        seed: rc.seed()?,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Encoded training and validation sets.
pub fn encoded(rc: &RunConfig) -> Result<(EncodedDataset, EncodedDataset), CliError> {
    let (train, val) = datasets(rc)?;
    let enc = encoder(rc)?;
    Ok((EncodedDataset::encode(&train, &enc), EncodedDataset::encode(&val, &enc)))
}

/// Trains a push-world predictor from scratch.
pub fn train_push(rc: &RunConfig) -> Result<(Predictor, TrainLog), CliError> {
    let cfg = predictor_config(rc)?;
    let (train, _) = encoded(rc)?;
    let windows = push_windows(&train, cfg.t_h, cfg.t_p, rc.get("data.frame_skip")?, cfg.proprio)?;
    let mut model = Predictor::new(cfg)?;
    let log = model.train(&windows)?;
    Ok((model, log))
}

/// Mean per-slot squared error of open-loop rollouts at each model step.
pub fn rollout_mse(model: &Predictor, eds: &EncodedDataset, skip: usize, horizon: usize, stride: usize) -> Result<Vec<f64>, CliError> {
    let t_h = model.config.t_h;
    let mut sums = vec![0.0; horizon];
    let mut count = 0usize;
    for ep in &eds.episodes {
        let mut s = 0;
        while s + (t_h - 1 + horizon) * skip < ep.len() {
            let hist: Vec<f64> = (0..t_h).flat_map(|t| ep.frames[s + t * skip].data().to_vec()).collect();
            let n = ep.frames[s].rows();
            let hist = Tensor::new(vec![t_h * n, eds.dim], hist).map_err(cjepa::Error::from)?;
            let rows: Vec<Vec<f64>> = (0..t_h - 1 + horizon)
                .map(|k| action_block(&ep.actions, s + k * skip, skip))
                .collect();
            let actions = Tensor::from_rows(&rows).map_err(cjepa::Error::from)?;
            let r = model.rollout(&hist, (model.config.action_dim > 0).then_some(&actions), None, horizon)?;
            for (k, f) in r.frames.iter().enumerate() {
                sums[k] += f.sq_dist(&ep.frames[s + (t_h + k) * skip]) / n as f64;
            }
            count += 1;
            s += stride.max(1);
        }
    }
    if count == 0 {
        return Err(CliError::Config("validation episodes too short for the rollout horizon".into()));
    }
    Ok(sums.into_iter().map(|v| v / count as f64).collect())
}

/// Mean of the per-step errors from step 3 on (1-based).
pub fn late_mse(per_step: &[f64]) -> f64 {
    let late = &per_step[per_step.len().min(2)..];
    if late.is_empty() {
        return f64::NAN;
    }
    late.iter().sum::<f64>() / late.len() as f64
}

pub fn plan_config(rc: &RunConfig) -> Result<PlanConfig, CliError> {
    let cfg = PlanConfig {
        horizon: rc.get("plan.horizon")?,
        block: rc.get("data.frame_skip")?,
        receding: rc.get("plan.receding")?,
        samples: rc.get("plan.samples")?,
        elites: rc.get("plan.elites")?,
        iterations: rc.get("plan.iterations")?,
        init_std: rc.get("plan.init_std")?,
        budget: rc.get("plan.budget")?,
        goal_offset: rc.get("plan.goal_offset")?,
        threshold: rc.get("plan.threshold")?,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// MPC with `model` on the evaluation suite.
pub fn plan_suite(rc: &RunConfig, model: &Predictor) -> Result<Vec<PlanResult>, CliError> {
    let env = env_config(rc)?;
    let enc = encoder(rc)?;
    let cfg = plan_config(rc)?;
    let seed = rc.seed()?;
    let episodes = eval_episodes(&env, derive_seed(seed, EVAL_STREAM), rc.get("plan.episodes")?, &cfg);
    let mut out = Vec::with_capacity(episodes.len());
    for (k, ep) in episodes.iter().enumerate() {
        let perm = Permutation::for_episode(enc.seed(), ep.seed, ep.start.objects.len());
        let goal = GoalSpec::new(&enc, &perm, ep.goal.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, PLAN_STREAM), k as u64));
        out.push(mpc_episode(&env, model, &enc, &perm, &ep.start, &goal, &cfg, k, &mut rng)?);
    }
    Ok(out)
}

/// Uniform random actions on the same suite.
pub fn random_suite(rc: &RunConfig) -> Result<Vec<PlanResult>, CliError> {
    let env = env_config(rc)?;
    let cfg = plan_config(rc)?;
    let seed = rc.seed()?;
    let episodes = eval_episodes(&env, derive_seed(seed, EVAL_STREAM), rc.get("plan.episodes")?, &cfg);
    Ok(episodes
        .iter()
        .enumerate()
        .map(|(k, ep)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, RANDOM_STREAM), k as u64));
            random_episode(&env, &ep.start, &ep.goal, &cfg, &mut rng)
        })
        .collect())
}

pub fn lg_system(rc: &RunConfig) -> Result<LinearGaussianSystem, CliError> {
    match rc.str("influence.system") {
        "chain" => Ok(LinearGaussianSystem::chain(3, 0.5, 1.0, 1.0)?),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read system file {path}: {e}")))?;
            LinearGaussianSystem::from_text(&text).map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

/// Mask sampler for an ablation cell with `objects` masked-object
/// equivalents out of `n`.
pub fn ablation_sampler(strategy: Strategy, objects: usize, n: usize) -> MaskSampler {
    let budget = match strategy {
        Strategy::Object => Budget::Objects(objects),
        _ => Budget::Fraction(objects as f64 / n as f64),
    };
    MaskSampler {
        strategy,
        budgets: vec![budget],
    }
}

/// Windows with at least one contact, annotated with slot pairs that touch
/// inside the window and pairs that never touch in the whole episode.
/// At most `per_episode` windows are taken from each episode.
pub fn contact_windows(eds: &EncodedDataset, t_h: usize, t_p: usize, skip: usize, per_episode: usize) -> Result<Vec<ContactWindow>, CliError> {
    let mut out = Vec::new();
    for ep in &eds.episodes {
        let n = ep.perm.len();
        let slot = |o: u32| ep.perm.slot_of(o as usize);
        let pair = |a: usize, b: usize| (a.min(b), a.max(b));
        let touched: Vec<(usize, usize)> = ep.events.iter().map(|e| pair(slot(e.i), slot(e.j))).collect();
        let never: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|p| !touched.contains(p))
            .collect();
        let span = (t_h + t_p - 1) * skip;
        let mut taken = 0;
        let mut s = 0;
        while taken < per_episode && s < ep.window_count(t_h + t_p, skip) {
            let mut contacts: Vec<(usize, usize)> = ep
                .events
                .iter()
                .filter(|e| (s..=s + span).contains(&(e.step as usize)))
                .map(|e| pair(slot(e.i), slot(e.j)))
                .collect();
            contacts.sort_unstable();
            contacts.dedup();
            if contacts.is_empty() {
                s += 1;
                continue;
            }
            out.push(ContactWindow {
                seq: ep.window(s, t_h, t_p, skip, false)?,
                contacts,
                never: never.clone(),
            });
            taken += 1;
            s += span + 1;
        }
    }
    Ok(out)
}
