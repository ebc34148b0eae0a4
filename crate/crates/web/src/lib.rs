//! Browser bindings for a single static demo page.

use cjepa::influence::LinearGaussianSystem;
use cjepa::masking::{sample_mask, Budget, Strategy};
use cjepa::worldsim::{random_state, step, Action, EnvConfig, EnvState, Kind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Interactive push-world: the page feeds pusher accelerations and draws
/// the discs.
#[wasm_bindgen]
pub struct PushWorld {
    cfg: EnvConfig,
    state: EnvState,
    contacts: u32,
}

#[wasm_bindgen]
impl PushWorld {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> PushWorld {
        let cfg = EnvConfig::default();
        let state = random_state(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        PushWorld { cfg, state, contacts: 0 }
    }

    /// Advances one step; the action is clamped to the allowed range.
    /// Returns the number of contacts in this step.
    pub fn step(&mut self, ax: f64, ay: f64) -> u32 {
        let a = self.cfg.a_max;
        let (next, events) = step(&self.state, Action([ax.clamp(-a, a), ay.clamp(-a, a)]), &self.cfg);
        self.state = next;
        self.contacts += events.len() as u32;
        events.len() as u32
    }

    /// Flat `[x, y, radius, is_pusher]` per disc.
    pub fn discs(&self) -> Vec<f64> {
        self.state
            .objects
            .iter()
            .flat_map(|d| [d.pos[0], d.pos[1], d.radius, f64::from(u8::from(d.kind == Kind::Pusher))])
            .collect()
    }

    pub fn contacts(&self) -> u32 {
        self.contacts
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    pub fn a_max(&self) -> f64 {
        self.cfg.a_max
    }
}

/// Samples a mask and renders it as text, one line per step:
/// `A` anchor, `#` masked history, `.` visible, `?` future.
#[wasm_bindgen]
pub fn mask_grid(strategy: &str, budget: f64, n: usize, t_h: usize, t_p: usize, seed: u64) -> Result<String, JsValue> {
    let strategy: Strategy = strategy.parse().map_err(js_err)?;
    let budget = match strategy {
        Strategy::Object => Budget::Objects(budget.max(0.0).round() as usize),
        _ => Budget::Fraction(budget),
    };
    let spec = sample_mask(strategy, budget, n, t_h, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
    let mut out = String::new();
    for tau in 0..t_h + t_p {
        for i in 0..n {
            out.push(match () {
                _ if tau >= t_h => '?',
                _ if tau == 0 => 'A',
                _ if spec.cells.contains(&(tau, i)) => '#',
                _ => '.',
            });
        }
        out.push('\n');
    }
    Ok(out)
}

/// Exact neighborhood of a masked chain object and the Bayes risk after
/// removing each context variable, as JSON.
#[wasm_bindgen]
pub fn chain_explorer(coupling: f64, object: usize, step: usize, t_h: usize) -> Result<String, JsValue> {
    let sys = LinearGaussianSystem::chain(3, 0.5, coupling, 1.0).map_err(js_err)?;
    if object >= sys.n || step == 0 || step >= t_h {
        return Err(js_err("target must be a non-anchor history step of an existing object"));
    }
    let set = sys.minimal_sufficient_set(object, step, t_h).map_err(js_err)?.set;
    let ablations: Vec<_> = sys
        .context(object, t_h)
        .iter()
        .map(|v| {
            let (full, without) = sys.risk_gap(object, step, t_h, &[*v]);
            json!({"variable": v.to_string(), "in_set": set.contains(v), "risk": without, "gap": without - full})
        })
        .collect();
    let (full, _) = sys.risk_gap(object, step, t_h, &[]);
    Ok(json!({"bayes_risk": full, "variables": ablations}).to_string())
}
