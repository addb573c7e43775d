//! Seeded Monte Carlo harness.
//!
//! Trial `i` draws from its own ChaCha8 stream seeded with
//! [`trial_seed`]`(master, i)`, so results do not depend on how trials are
//! scheduled over workers. Trials run on a rayon pool and are folded in
//! index order.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::asymptotics::{
    critical_index, fixed_size, pbar_pund_q, predict, MissBounds, StageAggregate, StageCounts,
};
use crate::error::{Error, Result};
use crate::margins::MarginShape;
use crate::models::{MeanModel, SampleState};
use crate::schedules::{DeltaMode, SeqSchedule, StagePlan, StageSchedule};
use crate::stopping::{
    run_multistage_plan, run_sequential, DecisionCache, ModelStream, MsOptions, RuleKind,
    SampleSource, SeqOptions, StageRecord, TrialOutcome,
};

const WILSON_Z: f64 = 1.959_963_984_540_054;
const DEFAULT_L_CAP: usize = 30;
const CAP_MULTIPLE: f64 = 64.0;

/// `splitmix64` finalizer over `master + (i + 1) * golden`.
pub fn trial_seed(master: u64, i: u64) -> u64 {
    let mut z = master.wrapping_add((i.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Sequential,
    Multistage,
    /// No stopping rule: every trial takes `fixed_n` (default `ceil(N)`) samples.
    Fixed,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(RunMode::Sequential),
            "multistage" => Ok(RunMode::Multistage),
            "fixed" => Ok(RunMode::Fixed),
            other => Err(Error::Config(format!("unknown run mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Sequential => "sequential",
            RunMode::Multistage => "multistage",
            RunMode::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: MeanModel,
    /// True mean of the simulated data.
    pub mu: f64,
    pub shape: MarginShape,
    pub rule: RuleKind,
    pub delta: f64,
    pub c_ratio: f64,
    pub delta_mode: DeltaMode,
    /// Largest admissible stage size.
    pub cap_n: u64,
    pub mode: RunMode,
    pub epsilon: f64,
    /// Strictly decreasing values for [`sweep`].
    pub epsilons: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
    pub workers: usize,
    /// Sequential sample cap; defaults to `64 N`.
    pub cap: Option<u64>,
    /// Last stage at which a multistage run may stop.
    pub ell_cap: usize,
    pub fixed_n: Option<u64>,
    /// Stage up to which multistage decisions are recorded; defaults to
    /// `max(jm, tau) + 2`.
    pub trace_stages: Option<usize>,
    pub stride: u64,
    pub per_trial: bool,
}

impl SimConfig {
    pub fn new(model: MeanModel, mu: f64, rule: RuleKind) -> Self {
        SimConfig {
            model,
            mu,
            shape: MarginShape::Absolute,
            rule,
            delta: 0.05,
            c_ratio: 2.0,
            delta_mode: DeltaMode::Constant,
            cap_n: 1 << 40,
            mode: RunMode::Sequential,
            epsilon: 0.1,
            epsilons: Vec::new(),
            trials: 1000,
            seed: 1,
            workers: 1,
            cap: None,
            ell_cap: DEFAULT_L_CAP,
            fixed_n: None,
            trace_stages: None,
            stride: 1,
            per_trial: false,
        }
    }

    pub fn seq_schedule(&self) -> SeqSchedule {
        SeqSchedule::new(self.rule.family(), self.delta)
    }

    pub fn stage_schedule(&self) -> StageSchedule {
        StageSchedule::geometric(self.rule.family(), self.delta, self.c_ratio)
            .with_delta_mode(self.delta_mode)
            .with_cap(self.cap_n)
    }

    /// `(kappa(mu), nu)` with `nu` the true variance at `mu`.
    pub fn kappa_nu(&self) -> Result<(f64, f64)> {
        Ok((self.shape.kappa(self.mu)?, self.model.variance(self.mu)?))
    }

    pub fn fixed_size(&self, eps: f64) -> Result<f64> {
        let (_, nu) = self.kappa_nu()?;
        fixed_size(eps, self.delta, self.mu, nu, &self.shape)
    }

    /// Every violated precondition, in human-readable form.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.trials == 0 {
            v.push("trial count must be at least 1".into());
        }
        if self.workers == 0 {
            v.push("worker count must be at least 1".into());
        }
        if self.stride == 0 {
            v.push("stride must be at least 1".into());
        }
        if !self.model.domain().contains(self.mu) {
            v.push(format!(
                "mean {} outside the domain of {}",
                self.mu,
                self.model.name()
            ));
        }
        let eps_list: Vec<f64> = if self.epsilons.is_empty() {
            vec![self.epsilon]
        } else {
            self.epsilons.clone()
        };
        for &e in &eps_list {
            if let Err(err) = self.shape.check_eps(e) {
                v.push(format!("{err}"));
            }
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            v.push("epsilon list must be strictly decreasing".into());
        }
        if let Err(err) = self.shape.kappa(self.mu) {
            v.push(format!("{err}"));
        }
        let multistage = self.mode == RunMode::Multistage;
        if self.mode != RunMode::Fixed {
            if let Err(err) = self.rule.validate(multistage) {
                v.push(format!("{err}"));
            }
            if self.rule.needs_model() && self.model.is_opaque() {
                v.push(format!(
                    "the {} rule needs a parametric model; {} is opaque",
                    self.rule.name(),
                    self.model.name()
                ));
            }
        }
        match self.mode {
            RunMode::Sequential => v.extend(self.seq_schedule().validate()),
            RunMode::Multistage => {
                v.extend(self.stage_schedule().validate());
                if self.ell_cap == 0 {
                    v.push("ell_cap must be at least 1".into());
                }
            }
            RunMode::Fixed => {
                if self.fixed_n == Some(0) {
                    v.push("fixed_n must be at least 1".into());
                }
            }
        }
        if let Some(c) = self.cap {
            if self.mode == RunMode::Sequential {
                for &e in &eps_list {
                    let m = self.seq_schedule().start_n(e);
                    if e > 0.0 && c < m {
                        v.push(format!("cap {c} below the starting size {m} at eps = {e}"));
                    }
                }
            }
        }
        v
    }

    fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// One trial in the per-trial output.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub index: u64,
    pub seed: u64,
    pub n: u64,
    pub stage: Option<usize>,
    pub estimate: f64,
    pub covered: bool,
    pub stop_covered: bool,
    pub truncated: bool,
}

impl TrialRecord {
    pub const CSV_HEADER: &'static str =
        "trial,seed,n,stage,estimate,covered,stop_covered,truncated";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.index,
            self.seed,
            self.n,
            self.stage.map(|s| s.to_string()).unwrap_or_default(),
            self.estimate,
            self.covered as u8,
            self.stop_covered as u8,
            self.truncated as u8
        )
    }
}

/// Empirical `Pr{l > stage}` against `Pr{D_stage = 0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRow {
    pub stage: usize,
    pub n: u64,
    pub p_beyond: f64,
    pub p_continue: f64,
    /// Every trial has a recorded decision at this stage.
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct SimSummary {
    pub mode: RunMode,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: u64,
    pub covered: u64,
    pub coverage: f64,
    pub coverage_lo: f64,
    pub coverage_hi: f64,
    /// Misses of the stopping interval.
    pub stop_misses: u64,
    pub miss_rate: f64,
    pub mean_n: f64,
    pub sd_n: f64,
    /// `(probability, n)` pairs, nearest-rank.
    pub n_quantiles: Vec<(f64, u64)>,
    pub n_fixed: f64,
    pub ratio: f64,
    pub risk_bound: Option<f64>,
    pub truncated: u64,
    pub trunc_rate: f64,
    /// Whether the model has the monotone likelihood the risk bound assumes.
    pub monotone: bool,
    pub jm: Option<usize>,
    pub pred_coverage: Option<f64>,
    pub pred_ratio: Option<f64>,
    /// `stage_hist[l - 1]` counts trials with stopping index `l`.
    pub stage_hist: Vec<u64>,
    pub stage_table: Vec<StageRow>,
    /// `n_tau + sum (n_{l+1} - n_l) Pr{D_l = 0}` over the table's stages.
    pub staircase_bound: Option<f64>,
    pub miss_bounds: Option<MissBounds>,
    pub trace_horizon: Option<usize>,
    pub records: Vec<TrialRecord>,
    pub wall_clock: Duration,
}

/// Equality ignores `wall_clock`.
impl PartialEq for SimSummary {
    fn eq(&self, o: &Self) -> bool {
        self.to_csv_row() == o.to_csv_row()
            && self.mode == o.mode
            && self.covered == o.covered
            && self.stop_misses == o.stop_misses
            && self.mean_n.to_bits() == o.mean_n.to_bits()
            && self.sd_n.to_bits() == o.sd_n.to_bits()
            && self.n_quantiles == o.n_quantiles
            && self.stage_hist == o.stage_hist
            && self.stage_table == o.stage_table
            && self.staircase_bound == o.staircase_bound
            && self.miss_bounds == o.miss_bounds
            && self.records == o.records
    }
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl SimSummary {
    pub const CSV_HEADER: &'static str = "epsilon,trials,coverage,coverage_lo,coverage_hi,mean_n,ratio_EnN,risk_bound,miss_rate,trunc_rate,jm,pred_coverage,pred_ratio";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epsilon,
            self.trials,
            self.coverage,
            self.coverage_lo,
            self.coverage_hi,
            self.mean_n,
            self.ratio,
            opt(self.risk_bound),
            self.miss_rate,
            self.trunc_rate,
            opt(self.jm),
            opt(self.pred_coverage),
            opt(self.pred_ratio)
        )
    }

    pub fn per_trial_csv(&self) -> String {
        let mut s = String::from(TrialRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_csv_row());
            s.push('\n');
        }
        s
    }

    /// Standard error of the coverage estimate.
    pub fn coverage_se(&self) -> f64 {
        (self.coverage * (1.0 - self.coverage) / self.trials as f64).sqrt()
    }

    pub fn ratio_se(&self) -> f64 {
        self.sd_n / (self.trials as f64).sqrt() / self.n_fixed
    }

    /// Fraction of trials whose stopping index is in `stages`.
    pub fn stage_fraction(&self, stages: &[usize]) -> f64 {
        let hits: u64 = stages
            .iter()
            .filter(|&&l| l >= 1 && l <= self.stage_hist.len())
            .map(|&l| self.stage_hist[l - 1])
            .sum();
        hits as f64 / self.trials as f64
    }

    /// Multi-line console summary.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "trials = {}", self.trials);
        let _ = writeln!(
            s,
            "coverage = {:.5} [{:.5}, {:.5}]",
            self.coverage, self.coverage_lo, self.coverage_hi
        );
        let _ = writeln!(
            s,
            "mean_n = {:.3} (sd {:.3}), N = {:.3}, E[n]/N = {:.4}",
            self.mean_n, self.sd_n, self.n_fixed, self.ratio
        );
        let q: Vec<String> = self
            .n_quantiles
            .iter()
            .map(|(p, n)| format!("q{p}={n}"))
            .collect();
        let _ = writeln!(s, "n quantiles: {}", q.join(" "));
        if let Some(b) = self.risk_bound {
            let _ = writeln!(
                s,
                "miss_rate = {:.5}, risk_bound = {:.5}",
                self.miss_rate, b
            );
        }
        let _ = writeln!(s, "trunc_rate = {}", self.trunc_rate);
        if let Some(jm) = self.jm {
            let _ = writeln!(s, "jm = {jm}");
        }
        if let (Some(c), Some(r)) = (self.pred_coverage, self.pred_ratio) {
            let _ = writeln!(s, "predicted coverage = {c:.6}, predicted E[n]/N = {r:.4}");
        }
        if !self.stage_hist.is_empty() {
            let _ = writeln!(s, "stage  n  stopped  Pr{{l>stage}}  Pr{{D=0}}");
            for row in &self.stage_table {
                let stopped = self.stage_hist.get(row.stage - 1).copied().unwrap_or(0);
                let _ = writeln!(
                    s,
                    "{:>5}  {}  {}  {:.5}  {:.5}{}",
                    row.stage,
                    row.n,
                    stopped,
                    row.p_beyond,
                    row.p_continue,
                    if row.complete { "" } else { " (partial)" }
                );
            }
        }
        if let Some(b) = self.staircase_bound {
            let _ = writeln!(s, "staircase bound on E[n] = {b:.3}");
        }
        if let Some(m) = self.miss_bounds {
            let _ = writeln!(
                s,
                "P_upper = {:.5}, P_lower = {:.5}, Q = {:.5}",
                m.p_upper, m.p_lower, m.q
            );
        }
        let _ = writeln!(s, "wall_clock = {:.3}s", self.wall_clock.as_secs_f64());
        s
    }
}

/// Wilson score interval at 95%.
pub fn wilson(successes: u64, trials: u64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn quantiles(sorted: &[u64]) -> Vec<(f64, u64)> {
    [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]
        .iter()
        .map(|&p| {
            let k = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            (p, sorted[k - 1])
        })
        .collect()
}

/// The pieces a run needs besides the config itself.
enum Plan {
    Sequential {
        sched: SeqSchedule,
        opts: SeqOptions,
    },
    Multistage {
        plan: StagePlan,
        opts: MsOptions,
        jm: Option<usize>,
    },
    Fixed {
        n: u64,
    },
}

fn build_plan(cfg: &SimConfig, eps: f64) -> Result<Plan> {
    let n_fixed = cfg.fixed_size(eps)?;
    Ok(match cfg.mode {
        RunMode::Sequential => {
            let sched = cfg.seq_schedule();
            let cap = cfg
                .cap
                .unwrap_or_else(|| (CAP_MULTIPLE * n_fixed).ceil() as u64)
                .max(sched.start_n(eps));
            let mut opts = SeqOptions::new(cap).with_truth(cfg.mu);
            opts.stride = cfg.stride;
            Plan::Sequential { sched, opts }
        }
        RunMode::Multistage => {
            let sched = cfg.stage_schedule();
            let (kappa, nu) = cfg.kappa_nu()?;
            let jm = critical_index(kappa, nu, &sched, 4096).ok();
            let tau = sched.tau(eps);
            let trace_to = cfg
                .trace_stages
                .unwrap_or_else(|| jm.unwrap_or(tau).max(tau) + 2)
                .min(cfg.ell_cap.max(tau));
            let plan = sched.plan(eps, cfg.ell_cap.max(trace_to))?;
            let opts = MsOptions::new(cfg.ell_cap)
                .with_truth(cfg.mu)
                .with_trace_to(trace_to);
            Plan::Multistage { plan, opts, jm }
        }
        RunMode::Fixed => Plan::Fixed {
            n: cfg.fixed_n.unwrap_or_else(|| n_fixed.ceil() as u64).max(1),
        },
    })
}

fn run_fixed(
    cfg: &SimConfig,
    src: &mut dyn SampleSource,
    n: u64,
    eps: f64,
) -> Result<TrialOutcome> {
    let mut s = SampleState::new();
    while s.n < n {
        s.push(
            src.next_sample()
                .ok_or_else(|| Error::domain("sample source exhausted"))?,
        );
    }
    let y = s.mean();
    let iv = |a: Result<f64>, b: Result<f64>| match (a, b) {
        (Ok(l), Ok(u)) => Some(crate::Interval::new(l, u)),
        _ => None,
    };
    let stop = iv(cfg.shape.lower(y, eps), cfg.shape.upper(y, eps));
    let rep = iv(
        cfg.shape.report_lower(y, eps),
        cfg.shape.report_upper(y, eps),
    );
    Ok(TrialOutcome {
        n,
        stage: None,
        estimate: y,
        stop_interval: stop,
        report_interval: rep,
        covered: Some(rep.is_some_and(|i| i.contains(cfg.mu))),
        stop_covered: Some(stop.is_some_and(|i| i.contains(cfg.mu))),
        truncated: false,
        trace: Vec::new(),
    })
}

fn run_one(
    cfg: &SimConfig,
    plan: &Plan,
    eps: f64,
    seed: u64,
    cache: &mut DecisionCache,
) -> Result<TrialOutcome> {
    let mut src = ModelStream::new(&cfg.model, cfg.mu, seed)?;
    match plan {
        Plan::Sequential { sched, opts } => run_sequential(
            &mut src,
            &cfg.rule,
            &cfg.model,
            &cfg.shape,
            eps,
            sched,
            opts,
            Some(cache),
        ),
        Plan::Multistage { plan, opts, .. } => run_multistage_plan(
            &mut src,
            &cfg.rule,
            &cfg.model,
            &cfg.shape,
            eps,
            plan,
            opts,
            Some(cache),
        ),
        Plan::Fixed { n } => run_fixed(cfg, &mut src, *n, eps),
    }
}

/// Runs `cfg.trials` trials at `cfg.epsilon`.
pub fn run_trials(cfg: &SimConfig) -> Result<SimSummary> {
    run_at(cfg, cfg.epsilon)
}

fn run_at(cfg: &SimConfig, eps: f64) -> Result<SimSummary> {
    cfg.ensure_valid()?;
    let start = Instant::now();
    let plan = build_plan(cfg, eps)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<(u64, TrialOutcome)> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map_init(DecisionCache::new, |cache, i| {
                let seed = trial_seed(cfg.seed, i);
                run_one(cfg, &plan, eps, seed, cache).map(|o| (seed, o))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut summary = summarize(cfg, &plan, eps, &outcomes)?;
    summary.wall_clock = start.elapsed();
    Ok(summary)
}

fn summarize(
    cfg: &SimConfig,
    plan: &Plan,
    eps: f64,
    outcomes: &[(u64, TrialOutcome)],
) -> Result<SimSummary> {
    let t = outcomes.len() as u64;
    let tf = t as f64;
    let n_fixed = cfg.fixed_size(eps)?;
    let mut covered = 0u64;
    let mut stop_misses = 0u64;
    let mut truncated = 0u64;
    let mut sum_n = 0.0;
    let mut ns = Vec::with_capacity(outcomes.len());
    let mut records = Vec::new();
    for (i, (seed, o)) in outcomes.iter().enumerate() {
        let cov = o.covered.unwrap_or(false);
        let scov = o.stop_covered.unwrap_or(false);
        covered += cov as u64;
        stop_misses += (!scov) as u64;
        truncated += o.truncated as u64;
        sum_n += o.n as f64;
        ns.push(o.n);
        if cfg.per_trial {
            records.push(TrialRecord {
                index: i as u64,
                seed: *seed,
                n: o.n,
                stage: o.stage,
                estimate: o.estimate,
                covered: cov,
                stop_covered: scov,
                truncated: o.truncated,
            });
        }
    }
    let mean_n = sum_n / tf;
    let var_n = ns.iter().map(|&n| (n as f64 - mean_n).powi(2)).sum::<f64>() / (tf - 1.0).max(1.0);
    ns.sort_unstable();
    let coverage = covered as f64 / tf;
    let (coverage_lo, coverage_hi) = wilson(covered, t);

    let mut summary = SimSummary {
        mode: cfg.mode,
        epsilon: eps,
        delta: cfg.delta,
        trials: t,
        covered,
        coverage,
        coverage_lo,
        coverage_hi,
        stop_misses,
        miss_rate: stop_misses as f64 / tf,
        mean_n,
        sd_n: var_n.sqrt(),
        n_quantiles: quantiles(&ns),
        n_fixed,
        ratio: mean_n / n_fixed,
        risk_bound: None,
        truncated,
        trunc_rate: truncated as f64 / tf,
        monotone: cfg.model.is_monotone(),
        jm: None,
        pred_coverage: None,
        pred_ratio: None,
        stage_hist: Vec::new(),
        stage_table: Vec::new(),
        staircase_bound: None,
        miss_bounds: None,
        trace_horizon: None,
        records,
        wall_clock: Duration::ZERO,
    };

    match plan {
        Plan::Sequential { sched, .. } => {
            // sum over distinct n of min(delta_n, Pr{n = n})
            let mut bound = 0.0;
            let mut i = 0;
            while i < ns.len() {
                let j = ns[i..]
                    .iter()
                    .position(|&n| n != ns[i])
                    .map_or(ns.len(), |k| i + k);
                bound += sched.delta_n(ns[i]).min((j - i) as f64 / tf);
                i = j;
            }
            summary.risk_bound = Some(bound);
            summary.pred_coverage = Some(1.0 - cfg.delta);
            summary.pred_ratio = Some(1.0);
        }
        Plan::Multistage { plan, opts, jm } => {
            multistage_stats(&mut summary, plan, opts, outcomes);
            summary.jm = *jm;
            let (_, nu) = cfg.kappa_nu()?;
            if let Ok(rep) = predict(
                eps,
                cfg.delta,
                cfg.mu,
                nu,
                &cfg.shape,
                &cfg.stage_schedule(),
                4096,
            ) {
                summary.pred_coverage = Some(rep.coverage_for_reporting());
                summary.pred_ratio = Some(rep.ratio_for_reporting());
            }
        }
        Plan::Fixed { .. } => {}
    }
    Ok(summary)
}

fn multistage_stats(
    s: &mut SimSummary,
    plan: &StagePlan,
    opts: &MsOptions,
    outcomes: &[(u64, TrialOutcome)],
) {
    let tf = outcomes.len() as f64;
    let tau = plan.tau;
    let max_stop = outcomes
        .iter()
        .filter_map(|(_, o)| o.stage)
        .max()
        .unwrap_or(tau);
    let horizon = opts.trace_to.min(plan.last_stage()).max(tau);
    let last = max_stop.max(horizon);
    s.trace_horizon = Some(horizon);

    let mut hist = vec![0u64; last];
    let mut risk = vec![0u64; last];
    for (_, o) in outcomes {
        if let Some(l) = o.stage {
            hist[l - 1] += 1;
            risk[l - 1] += 1;
        }
    }
    s.risk_bound = Some(
        risk.iter()
            .enumerate()
            .filter(|(i, _)| *i + 1 >= tau)
            .map(|(i, &c)| plan.delta(i + 1).min(c as f64 / tf))
            .sum(),
    );
    s.stage_hist = hist;

    let mut table = Vec::new();
    for l in tau..=last {
        let beyond = outcomes
            .iter()
            .filter(|(_, o)| {
                o.stage.is_some_and(|st| st > l) || (o.truncated && o.stage == Some(l))
            })
            .count();
        let mut cont = 0usize;
        let mut complete = true;
        for (_, o) in outcomes {
            match lookup(o, l) {
                Some(r) => cont += (!r.decision) as usize,
                None => {
                    complete = false;
                    cont += 1;
                }
            }
        }
        table.push(StageRow {
            stage: l,
            n: plan.size(l),
            p_beyond: beyond as f64 / tf,
            p_continue: cont as f64 / tf,
            complete,
        });
    }
    let mut stair = plan.size(tau) as f64;
    for row in &table {
        if row.stage < plan.last_stage() {
            stair += (plan.size(row.stage + 1) - row.n) as f64 * row.p_continue;
        }
    }
    s.staircase_bound = Some(stair);
    s.stage_table = table;

    let mut agg = StageAggregate {
        trials: outcomes.len() as u64,
        tau,
        stages: Vec::new(),
    };
    for l in tau..=horizon {
        let mut c = StageCounts::default();
        for (_, o) in outcomes {
            let Some(r) = lookup(o, l) else { continue };
            let prev_zero = l == tau || lookup(o, l - 1).is_none_or(|p| !p.decision);
            let miss = r.covered == Some(false);
            c.miss += miss as u64;
            c.prev_continue += prev_zero as u64;
            c.stop += r.decision as u64;
            if prev_zero && r.decision {
                if miss {
                    c.miss_switch += 1;
                } else {
                    c.cover_switch += 1;
                }
            }
        }
        agg.stages.push(c);
    }
    s.miss_bounds = pbar_pund_q(&agg).ok();
}

fn lookup(o: &TrialOutcome, l: usize) -> Option<&StageRecord> {
    o.trace.iter().find(|r| r.stage == l)
}

/// Convergence scores across a sweep: for each consecutive pair of rows the
/// deviation should not grow.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendScores {
    /// `|E[n]/N - 1|` per row.
    pub ratio_dev: Vec<f64>,
    /// `|coverage - (1 - delta)|` per row.
    pub coverage_dev: Vec<f64>,
    /// Per pair: the deviation did not increase.
    pub ratio_strict: Vec<bool>,
    pub coverage_strict: Vec<bool>,
    /// Per pair: the deviation did not increase beyond two standard errors.
    pub ratio_slack: Vec<bool>,
    pub coverage_slack: Vec<bool>,
}

impl TrendScores {
    fn fraction(v: &[bool]) -> f64 {
        v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
    }

    pub fn ratio_score(&self) -> f64 {
        Self::fraction(&self.ratio_strict)
    }

    pub fn coverage_score(&self) -> f64 {
        Self::fraction(&self.coverage_strict)
    }

    pub fn ratio_ok(&self) -> bool {
        self.ratio_slack.iter().all(|&b| b)
    }

    pub fn coverage_ok(&self) -> bool {
        self.coverage_slack.iter().all(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SimSummary>,
    pub trend: Option<TrendScores>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "epsilon,trials,coverage,coverage_lo,coverage_hi,mean_n,ratio_EnN,risk_bound,miss_rate,trunc_rate,jm,pred_coverage,pred_ratio,ratio_dev,coverage_dev,ratio_trend_ok,coverage_trend_ok";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let (rd, cd, rt, ct) = match &self.trend {
                Some(t) if i > 0 => (
                    t.ratio_dev[i].to_string(),
                    t.coverage_dev[i].to_string(),
                    (t.ratio_slack[i - 1] as u8).to_string(),
                    (t.coverage_slack[i - 1] as u8).to_string(),
                ),
                Some(t) => (
                    t.ratio_dev[i].to_string(),
                    t.coverage_dev[i].to_string(),
                    String::new(),
                    String::new(),
                ),
                None => Default::default(),
            };
            let _ = writeln!(s, "{},{rd},{cd},{rt},{ct}", row.to_csv_row());
        }
        s
    }
}

pub fn trend_scores(rows: &[SimSummary]) -> Option<TrendScores> {
    if rows.len() < 2 {
        return None;
    }
    let ratio_dev: Vec<f64> = rows.iter().map(|r| (r.ratio - 1.0).abs()).collect();
    let coverage_dev: Vec<f64> = rows
        .iter()
        .map(|r| (r.coverage - (1.0 - r.delta)).abs())
        .collect();
    let pairs = |dev: &[f64], se: &dyn Fn(&SimSummary) -> f64| -> (Vec<bool>, Vec<bool>) {
        (0..rows.len() - 1)
            .map(|i| {
                let slack = 2.0 * (se(&rows[i]).powi(2) + se(&rows[i + 1]).powi(2)).sqrt();
                (dev[i + 1] <= dev[i], dev[i + 1] <= dev[i] + slack)
            })
            .unzip()
    };
    let (ratio_strict, ratio_slack) = pairs(&ratio_dev, &|r| r.ratio_se());
    let (coverage_strict, coverage_slack) = pairs(&coverage_dev, &|r| r.coverage_se());
    Some(TrendScores {
        ratio_dev,
        coverage_dev,
        ratio_strict,
        coverage_strict,
        ratio_slack,
        coverage_slack,
    })
}

/// One row per value of `cfg.epsilons` (or `cfg.epsilon` when the list is
/// empty), all with the same master seed.
pub fn sweep(cfg: &SimConfig) -> Result<SweepResult> {
    cfg.ensure_valid()?;
    let eps_list = if cfg.epsilons.is_empty() {
        vec![cfg.epsilon]
    } else {
        cfg.epsilons.clone()
    };
    let rows = eps_list
        .iter()
        .map(|&e| run_at(cfg, e))
        .collect::<Result<Vec<_>>>()?;
    let trend = trend_scores(&rows);
    Ok(SweepResult { rows, trend })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCheck {
    pub pass: bool,
    pub bound: f64,
    pub miss_rate: f64,
    pub se: f64,
    /// `bound + 3 se - miss_rate`.
    pub slack: f64,
}

/// Empirical miss rate against the risk bound plus three standard errors.
pub fn risk_bound_check(summary: &SimSummary, miss_rate: f64) -> Result<RiskCheck> {
    if !summary.monotone {
        return Err(Error::InapplicableModel(
            "the risk bound assumes a monotone-likelihood model".into(),
        ));
    }
    let bound = summary
        .risk_bound
        .ok_or_else(|| Error::InapplicableModel("run has no risk bound".into()))?;
    let se = (miss_rate * (1.0 - miss_rate) / summary.trials as f64).sqrt();
    let slack = bound + 3.0 * se - miss_rate;
    Ok(RiskCheck {
        pass: slack >= 0.0,
        bound,
        miss_rate,
        se,
        slack,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertyRow {
    pub stage: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub ok: bool,
}

/// `Pr{l > stage} <= Pr{D_stage = 0} + 3 se` for every table stage.
pub fn stage_miss_check(summary: &SimSummary) -> Vec<PropertyRow> {
    let t = summary.trials as f64;
    summary
        .stage_table
        .iter()
        .map(|r| {
            let se = (r.p_beyond * (1.0 - r.p_beyond) / t
                + r.p_continue * (1.0 - r.p_continue) / t)
                .sqrt();
            PropertyRow {
                stage: r.stage,
                lhs: r.p_beyond,
                rhs: r.p_continue,
                se,
                ok: r.p_beyond <= r.p_continue + 3.0 * se,
            }
        })
        .collect()
}

/// Mean sample size against the staircase bound plus three standard errors.
pub fn staircase_check(summary: &SimSummary) -> Option<PropertyRow> {
    let bound = summary.staircase_bound?;
    let se = summary.sd_n / (summary.trials as f64).sqrt();
    Some(PropertyRow {
        stage: summary.stage_table.last().map_or(0, |r| r.stage),
        lhs: summary.mean_n,
        rhs: bound,
        se,
        ok: summary.mean_n <= bound + 3.0 * se,
    })
}

/// Acceptance-style checks a config may request.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assertions {
    pub min_coverage: Option<f64>,
    pub max_ratio_dev: Option<f64>,
    pub max_trunc_rate: Option<f64>,
    pub risk_bound: bool,
    pub properties: bool,
    /// Sweeps only: deviations must not grow beyond two standard errors.
    pub trends: bool,
}

impl Assertions {
    pub fn is_empty(&self) -> bool {
        *self == Assertions::default()
    }

    /// Failure messages for one summary.
    pub fn check(&self, s: &SimSummary) -> Vec<String> {
        let mut f = Vec::new();
        let tag = format!("eps = {}", s.epsilon);
        if let Some(m) = self.min_coverage {
            if s.coverage < m {
                f.push(format!("{tag}: coverage {} below {m}", s.coverage));
            }
        }
        if let Some(m) = self.max_ratio_dev {
            if (s.ratio - 1.0).abs() > m {
                f.push(format!(
                    "{tag}: |E[n]/N - 1| = {} above {m}",
                    (s.ratio - 1.0).abs()
                ));
            }
        }
        if let Some(m) = self.max_trunc_rate {
            if s.trunc_rate > m {
                f.push(format!("{tag}: truncation rate {} above {m}", s.trunc_rate));
            }
        }
        if self.risk_bound {
            match risk_bound_check(s, s.miss_rate) {
                Ok(c) if !c.pass => f.push(format!(
                    "{tag}: miss rate {} exceeds risk bound {} + 3 se",
                    c.miss_rate, c.bound
                )),
                Err(e) => f.push(format!("{tag}: {e}")),
                _ => {}
            }
        }
        if self.properties && s.mode == RunMode::Multistage {
            for r in stage_miss_check(s).iter().filter(|r| !r.ok) {
                f.push(format!(
                    "{tag}: Pr{{l > {}}} = {} exceeds Pr{{D = 0}} = {}",
                    r.stage, r.lhs, r.rhs
                ));
            }
            if let Some(r) = staircase_check(s).filter(|r| !r.ok) {
                f.push(format!(
                    "{tag}: mean n {} exceeds staircase bound {}",
                    r.lhs, r.rhs
                ));
            }
        }
        f
    }

    pub fn check_sweep(&self, sw: &SweepResult) -> Vec<String> {
        let mut f: Vec<String> = sw.rows.iter().flat_map(|r| self.check(r)).collect();
        if self.trends {
            if let Some(t) = &sw.trend {
                if !t.ratio_ok() {
                    f.push("|E[n]/N - 1| grows across the sweep".into());
                }
                if !t.coverage_ok() {
                    f.push("|coverage - (1 - delta)| grows across the sweep".into());
                }
            }
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::RuleFamily;
    use approx::assert_abs_diff_eq;

    fn df_cfg(trials: u64) -> SimConfig {
        let mut c = SimConfig::new(
            MeanModel::bernoulli(),
            0.5,
            RuleKind::DistributionFree { rho: 0.5 },
        );
        c.trials = trials;
        c.seed = 42;
        c
    }

    /// `Pr{|Bin(n, 1/2)/n - 1/2| < eps}` by exact summation in log space.
    fn binom_half_within(n: u64, eps: f64) -> f64 {
        let mut log_c = 0.0f64;
        let mut total = 0.0;
        for k in 0..=n {
            if k > 0 {
                log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
            }
            // integer comparison: |2k - n| < 2 n eps
            if ((2 * k) as f64 - n as f64).abs() < 2.0 * n as f64 * eps {
                total += (log_c - n as f64 * 2f64.ln()).exp();
            }
        }
        total
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s: Vec<u64> = (0..1000).map(|i| trial_seed(7, i)).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 1000);
        assert_eq!(trial_seed(7, 3), s[3]);
        assert_ne!(trial_seed(8, 3), s[3]);
    }

    #[test]
    fn wilson_matches_formula() {
        let (lo, hi) = wilson(950, 1000);
        assert_abs_diff_eq!(lo, 0.934_686_179_755_749, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 0.961_869_737_607_251, epsilon = 1e-12);
        let (lo, hi) = wilson(1000, 1000);
        assert!(lo < 1.0 && hi == 1.0);
    }

    #[test]
    fn single_trial_summary() {
        let mut c = df_cfg(1);
        c.per_trial = true;
        let s = run_trials(&c).unwrap();
        assert_eq!(s.trials, 1);
        assert_eq!(s.records.len(), 1);
        assert_eq!(s.mean_n, s.records[0].n as f64);
        assert_eq!(s.coverage, s.records[0].covered as u8 as f64);
        assert!(s.n_quantiles.iter().all(|&(_, n)| n == s.records[0].n));
    }

    #[test]
    fn fixed_mode_matches_exact_binomial() {
        let mut c = df_cfg(10_000);
        c.mode = RunMode::Fixed;
        c.epsilon = 0.05;
        assert_abs_diff_eq!(
            c.fixed_size(0.05).unwrap(),
            384.145_882_069_412_4,
            epsilon = 1e-9
        );
        let s = run_trials(&c).unwrap();
        assert_eq!(s.mean_n, 385.0);
        // the event is 174 <= S <= 211
        let exact = binom_half_within(385, 0.05);
        assert_abs_diff_eq!(exact, 0.947_354_247_505_226_3, epsilon = 1e-12);
        assert!(s.coverage_lo <= exact && exact <= s.coverage_hi, "{s:?}");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut c = df_cfg(300);
        c.per_trial = true;
        let a = run_trials(&c).unwrap();
        c.workers = 4;
        let b = run_trials(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_trial_csv(), b.per_trial_csv());

        let mut m = df_cfg(200);
        m.mode = RunMode::Multistage;
        let a = run_trials(&m).unwrap();
        m.workers = 3;
        assert_eq!(a, run_trials(&m).unwrap());
    }

    #[test]
    fn multistage_summary_tables() {
        let mut c = SimConfig::new(
            MeanModel::normal(4.0).unwrap(),
            0.0,
            RuleKind::DistributionFree { rho: 0.5 },
        );
        c.mode = RunMode::Multistage;
        c.trials = 400;
        c.epsilon = 0.2;
        let s = run_trials(&c).unwrap();
        assert_eq!(s.jm, Some(4));
        assert_eq!(s.stage_hist.iter().sum::<u64>(), 400);
        assert_eq!(s.trace_horizon, Some(6));
        assert!(stage_miss_check(&s).iter().all(|r| r.ok));
        assert!(staircase_check(&s).unwrap().ok);
        let m = s.miss_bounds.unwrap();
        assert!(m.p_upper <= m.q + 1e-12 || m.q >= 0.0);
        assert!((0.0..=1.0).contains(&m.p_lower));
        // the table stages 1..=horizon are complete
        assert!(s
            .stage_table
            .iter()
            .filter(|r| r.stage <= 6)
            .all(|r| r.complete));
    }

    #[test]
    fn risk_check_cases() {
        let mut c = df_cfg(50);
        c.rule = RuleKind::Cdf;
        let s = run_trials(&c).unwrap();
        let r = risk_bound_check(&s, 0.0).unwrap();
        assert!(r.pass);
        assert_abs_diff_eq!(r.slack, s.risk_bound.unwrap(), epsilon = 1e-15);
        let r = risk_bound_check(&s, s.risk_bound.unwrap() + 0.5).unwrap();
        assert!(!r.pass);

        let mut o = SimConfig::new(
            MeanModel::uniform_mixture(),
            1.0,
            RuleKind::DistributionFree { rho: 0.5 },
        );
        o.trials = 10;
        let s = run_trials(&o).unwrap();
        assert!(matches!(
            risk_bound_check(&s, 0.0),
            Err(Error::InapplicableModel(_))
        ));
    }

    #[test]
    fn sweep_rows_and_trends() {
        let mut c = df_cfg(200);
        c.epsilons = vec![0.2, 0.1];
        let sw = sweep(&c).unwrap();
        assert_eq!(sw.rows.len(), 2);
        let t = sw.trend.as_ref().unwrap();
        assert_eq!(t.ratio_strict.len(), 1);
        assert_eq!(sw.to_csv().lines().count(), 3);
        c.epsilons = vec![0.1];
        let sw = sweep(&c).unwrap();
        assert!(sw.trend.is_none());
        c.epsilons = vec![0.1, 0.2];
        assert!(sweep(&c).is_err());
    }

    #[test]
    fn validation_messages() {
        let mut c = df_cfg(0);
        c.shape = MarginShape::Relative;
        c.epsilon = 1.5;
        let v = c.validate();
        assert!(v.iter().any(|m| m.contains("trial count")));
        assert!(v.len() >= 2);
        let mut c = df_cfg(10);
        c.mode = RunMode::Multistage;
        c.c_ratio = 1.0;
        assert!(c
            .validate()
            .iter()
            .any(|m| m.contains("C-schedule ratio must exceed 1")));
        let mut c = df_cfg(10);
        c.rule = RuleKind::Cdf;
        c.model = MeanModel::uniform_mixture();
        assert!(!c.validate().is_empty());
        assert_eq!(c.stage_schedule().family, RuleFamily::Cdf);
    }

    #[test]
    fn assertions_report_failures() {
        let s = run_trials(&df_cfg(100)).unwrap();
        let a = Assertions {
            min_coverage: Some(1.1),
            ..Default::default()
        };
        assert_eq!(a.check(&s).len(), 1);
        assert!(Assertions::default().check(&s).is_empty());
        assert!(Assertions::default().is_empty());
    }
}
