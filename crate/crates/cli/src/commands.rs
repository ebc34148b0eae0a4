//! Subcommand implementations. Each writes its outputs under `out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cjepa::encoder::EncodedDataset;
use cjepa::masking::Strategy;
use cjepa::planner::{replans_to_jsonl, success_rate, summary_csv, PlanResult};
use cjepa::predictor::{Predictor, TrainLog};
use cjepa::worldsim::derive_seed;
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::lg::LgExperiment;
use crate::pipeline::{self, late_mse};
use crate::plot::{bar_chart, line_chart, Series};
use crate::{CliError, Command};

const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn dispatch(cmd: Command, rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    match cmd {
        Command::GenData => cmd_gen_data(rc, out),
        Command::Train => cmd_train(rc, out),
        Command::Eval => cmd_eval(rc, out),
        Command::Plan => cmd_plan(rc, out),
        Command::Ablate => cmd_ablate(rc, out),
        Command::Influence => cmd_influence(rc, out),
        Command::Report => cmd_report(rc, out),
    }
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = out.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn json_string(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default() + "\n"
}

pub fn cmd_gen_data(rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (train, val) = pipeline::datasets(rc)?;
    let enc = pipeline::encoder(rc)?;
    write(out, "data/train.cjwd", train.to_bytes())?;
    write(out, "data/val.cjwd", val.to_bytes())?;
    write(out, "data/train.cjed", EncodedDataset::encode(&train, &enc).to_bytes())?;
    write(out, "data/val.cjed", EncodedDataset::encode(&val, &enc).to_bytes())?;
    Ok(())
}

fn loss_svg(log: &TrainLog) -> String {
    let pts = |f: &dyn Fn(&cjepa::predictor::LossRow) -> Option<f64>| -> Vec<(f64, f64)> {
        log.rows
            .iter()
            .enumerate()
            .filter_map(|(k, r)| f(r).map(|v| (k as f64, v)))
            .collect()
    };
    line_chart(
        "training loss",
        "batch",
        "loss",
        &[
            Series {
                name: "L_mask",
                points: pts(&|r| Some(r.l_mask)),
            },
            Series {
                name: "L_history",
                points: pts(&|r| r.l_history),
            },
            Series {
                name: "L_future",
                points: pts(&|r| r.l_future),
            },
        ],
    )
}

pub fn cmd_train(rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (model, log) = pipeline::train_push(rc)?;
    model.save(&out.join("checkpoint"))?;
    write(out, "loss.csv", log.to_csv())?;
    write(out, "loss.svg", loss_svg(&log))?;
    Ok(())
}

fn checkpoint_names(paths: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for (k, p) in paths.iter().enumerate() {
        let base = p
            .components()
            .rev()
            .map(|c| c.as_os_str().to_string_lossy().to_string())
            .find(|c| c != "checkpoint" && c != "." && !c.is_empty())
            .unwrap_or_else(|| format!("model{k}"));
        let name = if names.contains(&base) { format!("{base}{k}") } else { base };
        names.push(name);
    }
    names
}

pub fn cmd_eval(rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    let paths: Vec<PathBuf> = rc.list::<String>("eval.checkpoints")?.into_iter().map(PathBuf::from).collect();
    if paths.is_empty() {
        return Err(CliError::Config("eval.checkpoints lists no checkpoint directories".into()));
    }
    let names = checkpoint_names(&paths);
    let (_, val) = pipeline::encoded(rc)?;
    let skip = rc.get("data.frame_skip")?;
    let horizon: usize = rc.get("eval.horizon")?;
    let stride = rc.get("eval.stride")?;
    let mut curves = Vec::new();
    for p in &paths {
        let model = Predictor::load(p)?;
        curves.push(pipeline::rollout_mse(&model, &val, skip, horizon, stride)?);
    }
    let mut csv = String::from("step");
    for n in &names {
        let _ = write!(csv, ",{n}");
    }
    csv.push('\n');
    for k in 0..horizon {
        let _ = write!(csv, "{}", k + 1);
        for c in &curves {
            let _ = write!(csv, ",{:.9e}", c[k]);
        }
        csv.push('\n');
    }
    write(out, "eval.csv", csv)?;
    let series: Vec<Series> = names
        .iter()
        .zip(&curves)
        .map(|(n, c)| Series {
            name: n,
            points: c.iter().enumerate().map(|(k, v)| ((k + 1) as f64, *v)).collect(),
        })
        .collect();
    write(out, "eval.svg", line_chart("rollout error", "step", "MSE", &series))?;
    let models: Vec<_> = names
        .iter()
        .zip(&curves)
        .map(|(n, c)| json!({"name": n, "mse": c, "late_mse": late_mse(c)}))
        .collect();
    write(
        out,
        "eval.json",
        json_string(&json!({"version": VERSION, "seed": rc.seed()?, "models": models})),
    )?;
    Ok(())
}

fn suite_json(results: &[PlanResult]) -> serde_json::Value {
    json!({
        "episodes": results.len(),
        "success_rate": success_rate(results),
        "mean_final_error": results.iter().map(|r| r.final_error).sum::<f64>() / results.len().max(1) as f64,
    })
}

pub fn cmd_plan(rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    let checkpoint = rc.str("plan.checkpoint");
    let baseline: bool = rc.get("plan.baseline")?;
    if checkpoint.is_empty() && !baseline {
        return Err(CliError::Config("plan.checkpoint is empty and plan.baseline is false".into()));
    }
    let mut summary = json!({"version": VERSION, "seed": rc.seed()?});
    if !checkpoint.is_empty() {
        let model = Predictor::load(Path::new(checkpoint))?;
        let results = pipeline::plan_suite(rc, &model)?;
        let records: Vec<_> = results.iter().flat_map(|r| r.replans.iter().cloned()).collect();
        write(out, "plan.jsonl", replans_to_jsonl(&records))?;
        write(out, "plan_summary.csv", summary_csv(&results))?;
        summary["planner"] = suite_json(&results);
    }
    if baseline {
        let results = pipeline::random_suite(rc)?;
        write(out, "random_summary.csv", summary_csv(&results))?;
        summary["random"] = suite_json(&results);
    }
    write(out, "plan.json", json_string(&summary))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub objects: usize,
    pub n: usize,
    pub fraction: f64,
    pub seeds: usize,
    pub late_mse_mean: f64,
    pub late_mse_stderr: f64,
}

impl AblationRow {
    pub fn budget_label(&self) -> String {
        format!("{}/{} ({:.0}%)", self.objects, self.n, self.fraction * 100.0)
    }
}

pub const ABLATION_HEADER: &str = "strategy,budget,objects,fraction,seeds,late_mse_mean,late_mse_stderr";

/// Trains every strategy and budget cell for `ablate.seeds` seeds.
pub fn ablation_rows(rc: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    let seeds: usize = rc.get("ablate.seeds")?;
    let budgets: Vec<usize> = rc.list("ablate.objects")?;
    let n = rc.get::<usize>("env.blocks")? + 1;
    if seeds == 0 || budgets.is_empty() {
        return Err(CliError::Config("ablation needs at least one seed and one budget".into()));
    }
    if let Some(b) = budgets.iter().find(|&&b| b == 0 || b >= n) {
        return Err(CliError::Config(format!("ablation budget {b} must lie in 1..{n}")));
    }
    let skip = rc.get("data.frame_skip")?;
    let horizon = rc.get("eval.horizon")?;
    let stride = rc.get("eval.stride")?;
    let base_seed = rc.seed()?;
    let mut rows = Vec::new();
    for strategy in [Strategy::Object, Strategy::Token, Strategy::Tube] {
        for &m in &budgets {
            let sampler = pipeline::ablation_sampler(strategy, m, n);
            let mut vals = Vec::with_capacity(seeds);
            for k in 0..seeds {
                let mut cell = rc.clone();
                cell.set("seed", &derive_seed(base_seed, 100 + k as u64).to_string())?;
                cell.set("mask.strategy", &strategy.to_string())?;
                let budgets: Vec<String> = sampler.budgets.iter().map(|b| b.to_string()).collect();
                cell.set("mask.budgets", &budgets.join(","))?;
                let (model, _) = pipeline::train_push(&cell)?;
                let (_, val) = pipeline::encoded(&cell)?;
                vals.push(late_mse(&pipeline::rollout_mse(&model, &val, skip, horizon, stride)?));
                info!("ablation {strategy} {m}/{n} seed {k}: {:.6}", vals[k]);
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let stderr = if vals.len() > 1 {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
                (var / vals.len() as f64).sqrt()
            } else {
                f64::NAN
            };
            rows.push(AblationRow {
                strategy: strategy.to_string(),
                objects: m,
                n,
                fraction: m as f64 / n as f64,
                seeds,
                late_mse_mean: mean,
                late_mse_stderr: stderr,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{},{:.9e},{:.9e}",
            r.strategy,
            r.budget_label(),
            r.objects,
            r.fraction,
            r.seeds,
            r.late_mse_mean,
            r.late_mse_stderr
        );
    }
    s
}

fn ablation_svg(rows: &[AblationRow]) -> String {
    let mut groups: Vec<String> = Vec::new();
    for r in rows {
        if !groups.contains(&r.budget_label()) {
            groups.push(r.budget_label());
        }
    }
    let series: Vec<(String, Vec<f64>)> = ["object", "token", "tube"]
        .iter()
        .map(|s| {
            let vals = groups
                .iter()
                .map(|g| {
                    rows.iter()
                        .find(|r| r.strategy == *s && r.budget_label() == *g)
                        .map_or(f64::NAN, |r| r.late_mse_mean)
                })
                .collect();
            (s.to_string(), vals)
        })
        .collect();
    bar_chart("masking ablation", "late rollout MSE", &groups, &series)
}

pub fn cmd_ablate(rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    let rows = ablation_rows(rc)?;
    write(out, "ablation.csv", ablation_csv(&rows))?;
    write(out, "ablation.svg", ablation_svg(&rows))?;
    write(
        out,
        "ablation.json",
        json_string(&json!({"version": VERSION, "seed": rc.seed()?, "rows": rows})),
    )?;
    Ok(())
}

pub fn cmd_influence(rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    let sys = pipeline::lg_system(rc)?;
    let t_h: usize = rc.get("influence.t_h")?;
    let t_p: usize = rc.get("influence.t_p")?;
    let object: usize = rc.get("influence.object")?;
    let step: usize = rc.get("influence.step")?;
    if object >= sys.n || step == 0 || step >= t_h {
        return Err(CliError::Config(format!(
            "influence target {object}@{step} outside the system or the masked history"
        )));
    }
    let exp = LgExperiment::new(sys.clone(), t_h, t_p);
    let exact = sys.minimal_sufficient_set(object, step, t_h)?;
    let context = sys.context(object, t_h);
    let ablations: Vec<_> = context
        .iter()
        .map(|v| {
            let (full, abl) = sys.risk_gap(object, step, t_h, &[*v]);
            json!({"variable": v.to_string(), "full_risk": full, "ablated_risk": abl})
        })
        .collect();

    let seed = rc.seed()?;
    let train = exp.windows(rc.get("influence.windows")?, derive_seed(seed, 21))?;
    let test = exp.windows(rc.get("influence.test_windows")?, derive_seed(seed, 22))?;
    let base = pipeline::predictor_config(rc)?;
    let all: Vec<usize> = (0..sys.n).collect();
    let cfg = exp.config(&base, sys.n, rc.get("influence.epochs")?, seed);
    let model = exp.train(&train, &all, cfg)?;
    let parents = sys.adjacency()[object].clone();
    let report = cjepa::influence::estimate_influence(&model, &test, object, &parents, Some(sys.dim))?;
    let mse = exp.masked_mse(&model, &test, &all, object, step)?;

    write(out, "influence.csv", report.to_csv())?;
    let labels: Vec<String> = report.candidates.iter().map(|c| format!("object {c}")).collect();
    write(
        out,
        "influence.svg",
        bar_chart(
            "influence on the masked target",
            "score",
            &labels,
            &[("perturbation".into(), report.perturbation.clone())],
        ),
    )?;
    write(
        out,
        "influence.json",
        json_string(&json!({
            "version": VERSION,
            "seed": seed,
            "system": sys.to_text(),
            "target": {"object": object, "step": step},
            "exact_neighborhood": exact.set.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
            "bayes_risk": exp.bayes_risk(object, step),
            "single_ablations": ablations,
            "model_masked_mse": mse,
            "report": report,
        })),
    )?;
    Ok(())
}

/// Re-renders plots from the CSV tables present in `out` and writes an index.
pub fn cmd_report(rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut files = Vec::new();
    if let Ok(text) = fs::read_to_string(out.join("loss.csv")) {
        let log = parse_loss_csv(&text)?;
        write(out, "loss.svg", loss_svg(&log))?;
        files.push("loss.csv");
    }
    if let Ok(text) = fs::read_to_string(out.join("eval.csv")) {
        let mut lines = text.lines();
        let names: Vec<String> = lines.next().unwrap_or("").split(',').skip(1).map(String::from).collect();
        let mut curves = vec![Vec::new(); names.len()];
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            let step: f64 = cells[0].parse().map_err(|_| CliError::Config("malformed eval.csv".into()))?;
            for (k, c) in cells[1..].iter().enumerate() {
                let v = c.parse().map_err(|_| CliError::Config("malformed eval.csv".into()))?;
                curves.get_mut(k).ok_or_else(|| CliError::Config("malformed eval.csv".into()))?.push((step, v));
            }
        }
        let series: Vec<Series> = names
            .iter()
            .zip(curves)
            .map(|(n, points)| Series { name: n, points })
            .collect();
        write(out, "eval.svg", line_chart("rollout error", "step", "MSE", &series))?;
        files.push("eval.csv");
    }
    for name in ["ablation.csv", "influence.csv", "plan_summary.csv", "random_summary.csv"] {
        if out.join(name).exists() {
            files.push(name);
        }
    }
    write(
        out,
        "report.json",
        json_string(&json!({"version": VERSION, "seed": rc.seed()?, "tables": files})),
    )?;
    Ok(())
}

fn parse_loss_csv(text: &str) -> Result<TrainLog, CliError> {
    let bad = || CliError::Config("malformed loss.csv".into());
    let mut lines = text.lines();
    if lines.next() != Some("epoch,batch,L_mask,L_history,L_future") {
        return Err(bad());
    }
    let mut log = TrainLog::default();
    for line in lines {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 5 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>, CliError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        log.rows.push(cjepa::predictor::LossRow {
            epoch: c[0].parse().map_err(|_| bad())?,
            batch: c[1].parse().map_err(|_| bad())?,
            l_mask: c[2].parse().map_err(|_| bad())?,
            l_history: opt(c[3])?,
            l_future: opt(c[4])?,
        });
    }
    Ok(log)
}
