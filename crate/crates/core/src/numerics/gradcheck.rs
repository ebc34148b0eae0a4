use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, ParameterStore, Var};

const MIN_ENTRIES: usize = 64;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// `(parameter name, max relative error)` in store order.
    pub per_param: Vec<(String, f64)>,
    pub step: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of the scalar built by `build` with central
/// differences. Parameters with more than 64 entries are checked on a
/// deterministic random subsample of 64.
pub fn grad_check<F>(store: &ParameterStore, step: f64, build: F) -> Result<GradReport, NumericsError>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var, NumericsError>,
{
    let step = step.clamp(f64::MIN_POSITIVE, 1e-2);
    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, &work)?;
    g.backward(loss, &mut work)?;
    let eval = |s: &ParameterStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        Ok(g.value(l).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut per_param = Vec::new();
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        let n = work.value(id).len();
        let entries: Vec<usize> = if n <= MIN_ENTRIES {
            (0..n).collect()
        } else {
            sample(&mut rng, n, MIN_ENTRIES).into_vec()
        };
        let mut worst = 0.0f64;
        for e in entries {
            let analytic = work.grad(id).data()[e];
            let orig = work.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[e] = orig;
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * step)));
        }
        per_param.push((work.name(id).to_string(), worst));
    }
    Ok(GradReport { per_param, step })
}
