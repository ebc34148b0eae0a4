//! Flat `key=value` run configuration with typed access.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("env.dt", "0.05"),
    ("env.drag", "0.05"),
    ("env.a_max", "0.5"),
    ("env.blocks", "3"),
    ("data.episodes", "200"),
    ("data.val_episodes", "40"),
    ("data.length", "100"),
    ("data.frame_skip", "5"),
    ("encoder.dim", "16"),
    ("encoder.seed", "7"),
    ("model.layers", "2"),
    ("model.heads", "2"),
    ("model.head_dim", "8"),
    ("model.mlp_dim", "64"),
    ("model.t_h", "3"),
    ("model.t_p", "1"),
    ("model.proprio", "false"),
    ("model.aux_width", "3"),
    ("mask.strategy", "object"),
    ("mask.budgets", "objects:0,objects:1,objects:2"),
    ("train.lr", "0.001"),
    ("train.batch_size", "32"),
    ("train.epochs", "10"),
    ("eval.checkpoints", ""),
    ("eval.horizon", "5"),
    ("eval.stride", "10"),
    ("plan.checkpoint", ""),
    ("plan.episodes", "50"),
    ("plan.horizon", "5"),
    ("plan.receding", "5"),
    ("plan.samples", "300"),
    ("plan.elites", "30"),
    ("plan.iterations", "30"),
    ("plan.init_std", "0.5"),
    ("plan.budget", "50"),
    ("plan.goal_offset", "25"),
    ("plan.threshold", "0.044444444444444446"),
    ("plan.baseline", "true"),
    ("ablate.seeds", "2"),
    ("ablate.objects", "1,2"),
    ("influence.system", "chain"),
    ("influence.t_h", "3"),
    ("influence.t_p", "1"),
    ("influence.object", "1"),
    ("influence.step", "2"),
    ("influence.windows", "20000"),
    ("influence.test_windows", "500"),
    ("influence.epochs", "5"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overridden by `text`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", no + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown config key {key}"))),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.str(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("bad value for {key}: {v:?}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Config(format!("bad entry {s:?} in {key}"))))
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    /// Every key in sorted order.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("seed=1\nmodel.colour=red").unwrap_err();
        assert!(err.to_string().contains("model.colour"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn resolved_round_trips() {
        let c = RunConfig::parse("seed=4 # comment\n\ntrain.epochs = 3").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 4);
        assert_eq!(RunConfig::parse(&c.resolved()).unwrap(), c);
    }

    #[test]
    fn lists_and_bad_values() {
        let c = RunConfig::parse("ablate.objects=1, 2,3").unwrap();
        assert_eq!(c.list::<usize>("ablate.objects").unwrap(), vec![1, 2, 3]);
        let c = RunConfig::parse("train.epochs=many").unwrap();
        assert!(c.get::<usize>("train.epochs").is_err());
    }
}
