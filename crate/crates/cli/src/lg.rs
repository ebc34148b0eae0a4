//! Predictor experiments on linear-Gaussian systems.

use cjepa::encoder::EntityTokenSeq;
use cjepa::influence::LinearGaussianSystem;
use cjepa::masking::{apply, MaskSampler, MaskSpec};
use cjepa::predictor::{Predictor, PredictorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::CliError;

#[derive(Clone, Debug)]
pub struct LgExperiment {
    pub sys: LinearGaussianSystem,
    pub t_h: usize,
    pub t_p: usize,
}

impl LgExperiment {
    pub fn new(sys: LinearGaussianSystem, t_h: usize, t_p: usize) -> Self {
        Self { sys, t_h, t_p }
    }

    pub fn windows(&self, count: usize, seed: u64) -> Result<Vec<EntityTokenSeq>, CliError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sys
            .sample_windows(count, self.t_h + self.t_p, &mut rng)
            .iter()
            .map(|w| self.sys.to_sequence(w, self.t_h, self.t_p).map_err(CliError::from))
            .collect()
    }

    /// Predictor sized for windows restricted to `entities` objects.
    pub fn config(&self, base: &PredictorConfig, entities: usize, epochs: usize, seed: u64) -> PredictorConfig {
        PredictorConfig {
            t_h: self.t_h,
            t_p: self.t_p,
            n: entities,
            d: self.sys.dim + self.sys.n,
            action_dim: 0,
            proprio: false,
            mask: MaskSampler::objects(0, entities - 1),
            epochs,
            seed,
            ..base.clone()
        }
    }

    /// Trains on `windows` restricted to the objects in `keep`.
    pub fn train(&self, windows: &[EntityTokenSeq], keep: &[usize], cfg: PredictorConfig) -> Result<Predictor, CliError> {
        let restricted: Vec<EntityTokenSeq> = windows.iter().map(|w| w.select_entities(keep)).collect();
        let mut model = Predictor::new(cfg)?;
        model.train(&restricted)?;
        Ok(model)
    }

    /// Mean squared error of the state at `(object, step)` with that object
    /// masked, on windows restricted to `keep`.
    pub fn masked_mse(&self, model: &Predictor, windows: &[EntityTokenSeq], keep: &[usize], object: usize, step: usize) -> Result<f64, CliError> {
        let col = keep
            .iter()
            .position(|&k| k == object)
            .ok_or_else(|| CliError::Config(format!("object {object} is not among the kept entities")))?;
        let n = keep.len();
        let dim = self.sys.dim;
        let mut total = 0.0;
        for w in windows {
            let seq = w.select_entities(keep);
            let spec = MaskSpec::objects(n, self.t_h, &[col]);
            let pred = model.forward(&apply(&seq, &spec, &model.tokenizer, &model.store)?)?.pred;
            let r = step * n + col;
            total += pred.row(r)[..dim]
                .iter()
                .zip(&seq.slots.row(r)[..dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total / windows.len().max(1) as f64)
    }

    /// Bayes risk of `(object, step)` given the masked-object context.
    pub fn bayes_risk(&self, object: usize, step: usize) -> f64 {
        self.sys.risk_gap(object, step, self.t_h, &[]).0
    }
}
