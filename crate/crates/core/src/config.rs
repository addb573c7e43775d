//! Experiment files: a sectioned TOML subset mapped onto [`SimConfig`] and
//! [`Assertions`], with dotted `key=value` overrides applied before mapping.
//!
//! ```toml
//! shape = "absolute"          # absolute | relative | mixed | multiplicative
//! [mixed]
//! rho = 0.5
//! [model]
//! family = "bernoulli"        # bernoulli | poisson | exponential | normal | opaque
//! mu = 0.3
//! [rule]
//! kind = "df"                 # cdf | ld | nal | df
//! [schedule]
//! delta = 0.05
//! C_ratio = 2.0
//! [run]
//! mode = "sequential"         # sequential | multistage | fixed
//! epsilon = 0.1
//! trials = 1000
//! ```

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::margins::MarginShape;
use crate::models::{MeanModel, UniformMixture};
use crate::schedules::{DeltaMode, RuleFamily};
use crate::sim::{Assertions, RunMode, SimConfig};
use crate::stopping::RuleKind;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    shape: Option<String>,
    mixed: Option<RawMixed>,
    model: Option<RawModel>,
    schedule: Option<RawSchedule>,
    rule: Option<RawRule>,
    run: Option<RawRun>,
    #[serde(rename = "assert")]
    assertions: Option<RawAssert>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMixed {
    rho: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    family: Option<String>,
    mu: Option<f64>,
    sigma2: Option<f64>,
    opaque: Option<RawOpaque>,
    sixth_moment: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOpaque {
    kind: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    family: Option<String>,
    delta: Option<f64>,
    #[serde(rename = "C_ratio")]
    c_ratio: Option<f64>,
    delta_ell_mode: Option<String>,
    cap_n: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    kind: Option<String>,
    rho: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    mode: Option<String>,
    epsilon: Option<f64>,
    epsilons: Option<Vec<f64>>,
    trials: Option<u64>,
    seed: Option<u64>,
    workers: Option<usize>,
    cap: Option<u64>,
    ell_cap: Option<usize>,
    fixed_n: Option<u64>,
    trace_stages: Option<usize>,
    stride: Option<u64>,
    per_trial: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAssert {
    min_coverage: Option<f64>,
    max_ratio_dev: Option<f64>,
    max_trunc_rate: Option<f64>,
    risk_bound: Option<bool>,
    properties: Option<bool>,
    trends: Option<bool>,
}

/// A parsed experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub assertions: Assertions,
    /// Problems found while mapping the file (e.g. a non-positive variance),
    /// reported by [`ExperimentConfig::validate`].
    pub problems: Vec<String>,
}

impl ExperimentConfig {
    /// All violations: mapping problems followed by the run's own checks.
    pub fn validate(&self) -> Vec<String> {
        let mut v = self.problems.clone();
        v.extend(self.sim.validate());
        v
    }
}

/// Splits `key=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {k:?} is malformed")));
    }
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path through non-table key {p:?}")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Parses a config file's text and applies `overrides` in order.
pub fn load_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut root: toml::Table =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(&mut root, &path, value)?;
    }
    let raw: RawConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    build(raw)
}

pub fn load_file(path: &std::path::Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    load_str(&text, overrides)
}

fn build(raw: RawConfig) -> Result<ExperimentConfig> {
    let mut problems = Vec::new();

    let m = raw.model.unwrap_or_default();
    let family = m.family.as_deref().unwrap_or("bernoulli");
    let model = match family {
        "bernoulli" => MeanModel::bernoulli(),
        "poisson" => MeanModel::poisson(),
        "exponential" => MeanModel::exponential(),
        "normal" | "normal_known_var" => {
            let s2 = m.sigma2.unwrap_or(1.0);
            MeanModel::normal(s2).unwrap_or_else(|e| {
                problems.push(format!("model.sigma2: {e}"));
                MeanModel::normal(1.0).expect("unit variance")
            })
        }
        "opaque" => {
            let kind = m
                .opaque
                .and_then(|o| o.kind)
                .unwrap_or_else(|| "uniform_mixture".into());
            match kind.as_str() {
                "uniform_mixture" => MeanModel::new(crate::models::Family::Opaque(
                    crate::models::OpaqueKind::UniformMixture(UniformMixture::preset()),
                ))?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown opaque model kind {other:?}"
                    )))
                }
            }
        }
        other => return Err(Error::Config(format!("unknown model family {other:?}"))),
    };
    if m.sixth_moment == Some(false) {
        problems.push(format!(
            "{} declared without a finite sixth moment",
            model.name()
        ));
    }
    let default_mu = match family {
        "bernoulli" => 0.5,
        "normal" | "normal_known_var" => 0.0,
        "opaque" => 1.0,
        _ => 1.0,
    };
    let mu = m.mu.unwrap_or(default_mu);

    let shape = match raw.shape.as_deref().unwrap_or("absolute") {
        "absolute" => MarginShape::Absolute,
        "relative" => MarginShape::Relative,
        "multiplicative" => MarginShape::Multiplicative,
        "mixed" => {
            let rho = raw.mixed.and_then(|x| x.rho).unwrap_or(1.0);
            MarginShape::mixed(rho).unwrap_or_else(|e| {
                problems.push(format!("mixed.rho: {e}"));
                MarginShape::Absolute
            })
        }
        other => return Err(Error::Config(format!("unknown shape {other:?}"))),
    };

    let r = raw.rule.unwrap_or_default();
    let rule = RuleKind::from_name(r.kind.as_deref().unwrap_or("df"), r.rho)?;

    let s = raw.schedule.unwrap_or_default();
    if let Some(f) = s.family.as_deref() {
        let f = RuleFamily::parse(f)?;
        if f != rule.family() {
            problems.push(format!(
                "schedule.family = {f} does not match rule.kind = {}",
                rule.name()
            ));
        }
    }

    let mut sim = SimConfig::new(model, mu, rule);
    sim.shape = shape;
    if let Some(d) = s.delta {
        sim.delta = d;
    }
    if let Some(c) = s.c_ratio {
        sim.c_ratio = c;
    }
    if let Some(mode) = s.delta_ell_mode.as_deref() {
        sim.delta_mode = DeltaMode::parse(mode)?;
    }
    if let Some(c) = s.cap_n {
        sim.cap_n = c;
    }

    let run = raw.run.unwrap_or_default();
    if let Some(mode) = run.mode.as_deref() {
        sim.mode = RunMode::parse(mode)?;
    }
    if let Some(e) = run.epsilon {
        sim.epsilon = e;
    }
    if let Some(es) = run.epsilons {
        sim.epsilons = es;
    }
    if let Some(t) = run.trials {
        sim.trials = t;
    }
    if let Some(s) = run.seed {
        sim.seed = s;
    }
    if let Some(w) = run.workers {
        sim.workers = w;
    }
    sim.cap = run.cap;
    if let Some(l) = run.ell_cap {
        sim.ell_cap = l;
    }
    sim.fixed_n = run.fixed_n;
    sim.trace_stages = run.trace_stages;
    if let Some(s) = run.stride {
        sim.stride = s;
    }
    sim.per_trial = run.per_trial.unwrap_or(false);

    let a = raw.assertions.unwrap_or_default();
    let assertions = Assertions {
        min_coverage: a.min_coverage,
        max_ratio_dev: a.max_ratio_dev,
        max_trunc_rate: a.max_trunc_rate,
        risk_bound: a.risk_bound.unwrap_or(false),
        properties: a.properties.unwrap_or(false),
        trends: a.trends.unwrap_or(false),
    };

    Ok(ExperimentConfig {
        sim,
        assertions,
        problems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
shape = "absolute"
[model]
family = "bernoulli"
mu = 0.3
[rule]
kind = "cdf"
[schedule]
delta = 0.05
[run]
epsilon = 0.1
trials = 50
seed = 9
"#;

    #[test]
    fn parses_base() {
        let c = load_str(BASE, &[]).unwrap();
        assert!(c.validate().is_empty(), "{:?}", c.validate());
        assert_eq!(c.sim.rule, RuleKind::Cdf);
        assert_eq!(c.sim.mu, 0.3);
        assert_eq!(c.sim.trials, 50);
        assert!(c.assertions.is_empty());
    }

    #[test]
    fn empty_file_uses_defaults() {
        let c = load_str("", &[]).unwrap();
        assert!(c.validate().is_empty());
        assert_eq!(c.sim.rule, RuleKind::DistributionFree { rho: 0.5 });
    }

    #[test]
    fn override_changes_one_field() {
        let a = load_str(BASE, &[]).unwrap();
        let b = load_str(BASE, &["run.epsilon=0.05".into()]).unwrap();
        assert_eq!(b.sim.epsilon, 0.05);
        assert_eq!(
            format!(
                "{:?}",
                SimConfig {
                    epsilon: 0.1,
                    ..b.sim.clone()
                }
            ),
            format!("{:?}", a.sim)
        );
        let c = load_str(
            BASE,
            &["rule.kind=ld".into(), "model.family=\"poisson\"".into()],
        )
        .unwrap();
        assert_eq!(c.sim.rule, RuleKind::LargeDeviation);
        assert_eq!(c.sim.model.name(), MeanModel::poisson().name());
        let d = load_str(BASE, &["run.epsilons=[0.1, 0.05]".into()]).unwrap();
        assert_eq!(d.sim.epsilons, vec![0.1, 0.05]);
    }

    #[test]
    fn violations_and_parse_errors() {
        let c = load_str(
            BASE,
            &["schedule.C_ratio=1.0".into(), "run.mode=multistage".into()],
        )
        .unwrap();
        assert!(c
            .validate()
            .iter()
            .any(|m| m.contains("C-schedule ratio must exceed 1")));
        let c = load_str(BASE, &["shape=relative".into(), "run.epsilon=1.5".into()]).unwrap();
        assert!(!c.validate().is_empty());
        let c = load_str(BASE, &["schedule.family=df".into()]).unwrap();
        assert!(c.validate()[0].contains("does not match"));
        assert!(load_str("shape = ", &[]).is_err());
        assert!(load_str("bogus = 1", &[]).is_err());
        assert!(load_str(BASE, &["rule.kind=xyz".into()]).is_err());
        assert!(load_str(BASE, &["novalue".into()]).is_err());
    }

    #[test]
    fn opaque_and_assertions() {
        let text = r#"
[model]
family = "opaque"
opaque.kind = "uniform_mixture"
mu = 1.0
[rule]
kind = "df"
[assert]
min_coverage = 0.9
risk_bound = true
"#;
        let c = load_str(text, &[]).unwrap();
        assert!(c.sim.model.is_opaque());
        assert_eq!(c.assertions.min_coverage, Some(0.9));
        assert!(c.assertions.risk_bound);
        let c = load_str(text, &["rule.kind=cdf".into()]).unwrap();
        assert!(c.validate().iter().any(|m| m.contains("opaque")));
    }
}
