//! Stopping rules built on the inclusion principle, and the sequential and
//! multistage drivers that apply them to a stream of observations.
//!
//! Every rule compares a confidence bound implied by the current sample with
//! the target interval `(L(Y, eps), U(Y, eps))`:
//!
//! * CDF: `F(Y; U) <= delta/2` and `G(Y; L) <= delta/2`, where `F`, `G` are the
//!   lower and upper tail probabilities of the sample mean at a given mean.
//! * LD: `M(Y, U) <= ln(delta/2) / n` and the same at `L`.
//! * NAL: `V(Y + rho (U - Y)) <= n (U - Y)^2 / ln(1/delta)` and the same at `L`.
//! * DF: `V_n + rho/n <= n / ln(1/delta) * min((U - Y)^2, (L - Y)^2)`.
//!
//! A target endpoint outside the mean domain makes the CDF and LD side hold
//! trivially, and makes the NAL side fail.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::margins::MarginShape;
use crate::models::{MeanModel, SampleState, Sampler};
use crate::rate_fn::rate;
use crate::schedules::{RuleFamily, SeqSchedule, StagePlan, StageSchedule};
use crate::Interval;

pub const DEFAULT_DF_RHO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuleKind {
    Cdf,
    LargeDeviation,
    /// `rho` in `[0, 1]` places the variance evaluation between `Y` and the margin.
    NormalApprox {
        rho: f64,
    },
    /// `rho` in `(0, 1]` sequentially, `rho >= 0` for multistage use.
    DistributionFree {
        rho: f64,
    },
}

impl RuleKind {
    pub fn family(&self) -> RuleFamily {
        match self {
            RuleKind::Cdf => RuleFamily::Cdf,
            RuleKind::LargeDeviation => RuleFamily::LargeDeviation,
            RuleKind::NormalApprox { .. } => RuleFamily::NormalApprox,
            RuleKind::DistributionFree { .. } => RuleFamily::DistributionFree,
        }
    }

    pub fn name(&self) -> &'static str {
        self.family().name()
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            RuleKind::NormalApprox { rho } | RuleKind::DistributionFree { rho } => Some(*rho),
            _ => None,
        }
    }

    /// Builds a rule from its short name; `rho` falls back to 0 (NAL) or 0.5 (DF).
    pub fn from_name(name: &str, rho: Option<f64>) -> Result<Self> {
        Ok(match RuleFamily::parse(name)? {
            RuleFamily::Cdf => RuleKind::Cdf,
            RuleFamily::LargeDeviation => RuleKind::LargeDeviation,
            RuleFamily::NormalApprox => RuleKind::NormalApprox {
                rho: rho.unwrap_or(0.0),
            },
            RuleFamily::DistributionFree => RuleKind::DistributionFree {
                rho: rho.unwrap_or(DEFAULT_DF_RHO),
            },
        })
    }

    pub fn validate(&self, multistage: bool) -> Result<()> {
        match *self {
            RuleKind::NormalApprox { rho } if !(0.0..=1.0).contains(&rho) => Err(Error::Config(
                format!("NAL rho must lie in [0, 1], got {rho}"),
            )),
            RuleKind::DistributionFree { rho }
                if multistage && !(rho >= 0.0 && rho.is_finite()) =>
            {
                Err(Error::Config(format!(
                    "multistage DF rho must be >= 0, got {rho}"
                )))
            }
            RuleKind::DistributionFree { rho } if !multistage && !(rho > 0.0 && rho <= 1.0) => Err(
                Error::Config(format!("sequential DF rho must lie in (0, 1], got {rho}")),
            ),
            _ => Ok(()),
        }
    }

    /// Whether the rule needs the parametric model (all but DF).
    pub fn needs_model(&self) -> bool {
        !matches!(self, RuleKind::DistributionFree { .. })
    }
}

/// Stopping margins at `y`, or `None` when `y` lies outside the shape's domain.
fn target(shape: &MarginShape, y: f64, eps: f64) -> Result<Option<(f64, f64)>> {
    shape.check_eps(eps)?;
    match (shape.lower(y, eps), shape.upper(y, eps)) {
        (Ok(l), Ok(u)) => Ok(Some((l, u))),
        _ => Ok(None),
    }
}

fn require_sample(state: &SampleState) -> Result<()> {
    if state.n == 0 {
        Err(Error::domain("decision needs at least one observation"))
    } else {
        Ok(())
    }
}

pub fn decide_cdf(
    model: &MeanModel,
    state: &SampleState,
    shape: &MarginShape,
    eps: f64,
    delta: f64,
) -> Result<bool> {
    require_sample(state)?;
    let y = state.mean();
    let Some((l, u)) = target(shape, y, eps)? else {
        return Ok(false);
    };
    let half = 0.5 * delta;
    let (f_at_u, _) = model.mean_cdf(state.n, y, u)?;
    if f_at_u > half {
        return Ok(false);
    }
    let (_, g_at_l) = model.mean_cdf(state.n, y, l)?;
    Ok(g_at_l <= half)
}

pub fn decide_ld(
    model: &MeanModel,
    state: &SampleState,
    shape: &MarginShape,
    eps: f64,
    delta: f64,
) -> Result<bool> {
    require_sample(state)?;
    let y = state.mean();
    let Some((l, u)) = target(shape, y, eps)? else {
        return Ok(false);
    };
    let threshold = (0.5 * delta).ln() / state.n as f64;
    Ok(rate(model, y, u)? <= threshold && rate(model, y, l)? <= threshold)
}

pub fn decide_nal(
    model: &MeanModel,
    state: &SampleState,
    shape: &MarginShape,
    eps: f64,
    delta: f64,
    rho: f64,
) -> Result<bool> {
    require_sample(state)?;
    if model.is_opaque() {
        return Err(Error::Unsupported(
            "NAL rule needs a variance function".into(),
        ));
    }
    let y = state.mean();
    let Some((l, u)) = target(shape, y, eps)? else {
        return Ok(false);
    };
    let n = state.n as f64;
    let log_inv = (1.0 / delta).ln();
    let side = |m: f64| -> Result<bool> {
        let p = y + rho * (m - y);
        if !model.domain().contains(p) {
            return Ok(false);
        }
        Ok(model.variance(p)? <= n * (m - y) * (m - y) / log_inv)
    };
    Ok(side(u)? && side(l)?)
}

pub fn decide_df(
    state: &SampleState,
    shape: &MarginShape,
    eps: f64,
    delta: f64,
    rho: f64,
) -> Result<bool> {
    require_sample(state)?;
    let y = state.mean();
    let Some((l, u)) = target(shape, y, eps)? else {
        return Ok(false);
    };
    let n = state.n as f64;
    let gap = (u - y).powi(2).min((l - y).powi(2));
    Ok(state.variance() + rho / n <= n / (1.0 / delta).ln() * gap)
}

pub fn decide(
    rule: &RuleKind,
    model: &MeanModel,
    state: &SampleState,
    shape: &MarginShape,
    eps: f64,
    delta: f64,
) -> Result<bool> {
    match *rule {
        RuleKind::Cdf => decide_cdf(model, state, shape, eps, delta),
        RuleKind::LargeDeviation => decide_ld(model, state, shape, eps, delta),
        RuleKind::NormalApprox { rho } => decide_nal(model, state, shape, eps, delta, rho),
        RuleKind::DistributionFree { rho } => decide_df(state, shape, eps, delta, rho),
    }
}

/// A source of i.i.d. observations.
pub trait SampleSource {
    /// The next observation, or `None` when the source is exhausted.
    fn next_sample(&mut self) -> Option<f64>;
}

/// An endless seeded stream from a model at a fixed mean. The first `k` draws
/// equal `model.sample(mu, k, seed)`.
#[derive(Debug, Clone)]
pub struct ModelStream {
    sampler: Sampler,
    rng: ChaCha8Rng,
}

impl ModelStream {
    pub fn new(model: &MeanModel, mu: f64, seed: u64) -> Result<Self> {
        Ok(ModelStream {
            sampler: model.sampler(mu)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl SampleSource for ModelStream {
    #[inline]
    fn next_sample(&mut self) -> Option<f64> {
        Some(self.sampler.draw(&mut self.rng))
    }
}

/// Replays a fixed sample.
#[derive(Debug, Clone)]
pub struct Replay<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> Replay<'a> {
    pub fn new(data: &'a [f64]) -> Self {
        Replay { data, pos: 0 }
    }
}

impl SampleSource for Replay<'_> {
    fn next_sample(&mut self) -> Option<f64> {
        let x = self.data.get(self.pos).copied();
        self.pos += 1;
        x
    }
}

/// Memoized decisions for lattice models, keyed by `(n, n * Y_n)`.
///
/// A cache belongs to one configuration (rule, model, shape, `eps`,
/// schedule, driver); the drivers clear it when handed a cache built for a
/// different configuration.
#[derive(Debug, Default)]
pub struct DecisionCache {
    context: Option<u64>,
    map: HashMap<(u64, u64), bool>,
}

impl DecisionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn bind(&mut self, context: u64) {
        if self.context != Some(context) {
            self.map.clear();
            self.context = Some(context);
        }
    }
}

fn fingerprint(parts: &str) -> u64 {
    let mut h = DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

struct Decider<'a> {
    rule: &'a RuleKind,
    model: &'a MeanModel,
    shape: &'a MarginShape,
    eps: f64,
    cache: Option<&'a mut DecisionCache>,
}

impl<'a> Decider<'a> {
    fn new(
        rule: &'a RuleKind,
        model: &'a MeanModel,
        shape: &'a MarginShape,
        eps: f64,
        cache: Option<&'a mut DecisionCache>,
        schedule_tag: &str,
    ) -> Self {
        let cacheable = model.is_lattice() && rule.needs_model();
        let mut cache = cache.filter(|_| cacheable);
        if let Some(c) = cache.as_deref_mut() {
            c.bind(fingerprint(&format!(
                "{rule:?}|{model:?}|{shape:?}|{eps:e}|{schedule_tag}"
            )));
        }
        Decider {
            rule,
            model,
            shape,
            eps,
            cache,
        }
    }

    fn decide(&mut self, state: &SampleState, delta: f64) -> Result<bool> {
        match self.cache.as_deref_mut() {
            Some(c) => {
                let key = (state.n, state.sum.to_bits());
                if let Some(&d) = c.map.get(&key) {
                    return Ok(d);
                }
                let d = decide(self.rule, self.model, state, self.shape, self.eps, delta)?;
                c.map.insert(key, d);
                Ok(d)
            }
            None => decide(self.rule, self.model, state, self.shape, self.eps, delta),
        }
    }
}

/// One evaluated stage of a multistage run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub n: u64,
    pub estimate: f64,
    /// `D_l`.
    pub decision: bool,
    /// Whether the true mean lies in the stage's reporting interval.
    pub covered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub n: u64,
    /// Stopping index (multistage only).
    pub stage: Option<usize>,
    pub estimate: f64,
    /// `(L(est), U(est))`; `None` when the estimate is outside the shape's domain.
    pub stop_interval: Option<Interval>,
    pub report_interval: Option<Interval>,
    /// True mean inside the reporting interval, when the truth is known.
    pub covered: Option<bool>,
    /// True mean inside the stopping interval, when the truth is known.
    pub stop_covered: Option<bool>,
    /// The rule did not fire before the cap (or the source ran dry).
    pub truncated: bool,
    /// Multistage decisions, continued past the stopping stage to the trace
    /// horizon when one is requested.
    pub trace: Vec<StageRecord>,
}

fn report(shape: &MarginShape, y: f64, eps: f64) -> Option<Interval> {
    match (shape.report_lower(y, eps), shape.report_upper(y, eps)) {
        (Ok(l), Ok(u)) => Some(Interval::new(l, u)),
        _ => None,
    }
}

fn stop_interval(shape: &MarginShape, y: f64, eps: f64) -> Option<Interval> {
    match (shape.lower(y, eps), shape.upper(y, eps)) {
        (Ok(l), Ok(u)) => Some(Interval::new(l, u)),
        _ => None,
    }
}

fn covers(iv: Option<Interval>, truth: Option<f64>) -> Option<bool> {
    truth.map(|mu| iv.is_some_and(|i| i.contains(mu)))
}

fn finish(
    state: &SampleState,
    shape: &MarginShape,
    eps: f64,
    truth: Option<f64>,
    stage: Option<usize>,
    truncated: bool,
    trace: Vec<StageRecord>,
) -> TrialOutcome {
    let y = state.mean();
    let stop = stop_interval(shape, y, eps);
    let rep = report(shape, y, eps);
    TrialOutcome {
        n: state.n,
        stage,
        estimate: y,
        stop_interval: stop,
        report_interval: rep,
        covered: covers(rep, truth),
        stop_covered: covers(stop, truth),
        truncated,
        trace,
    }
}

fn check_setup(
    rule: &RuleKind,
    model: &MeanModel,
    shape: &MarginShape,
    eps: f64,
    multistage: bool,
) -> Result<()> {
    rule.validate(multistage)?;
    shape.check_eps(eps)?;
    if rule.needs_model() && model.is_opaque() {
        return Err(Error::InapplicableModel(format!(
            "the {} rule needs a parametric model; {} is opaque",
            rule.name(),
            model.name()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqOptions {
    /// Largest sample size; reaching it without stopping flags truncation.
    pub cap: u64,
    /// Evaluate the rule every `stride` observations (1 follows the rule exactly).
    pub stride: u64,
    pub truth: Option<f64>,
}

impl SeqOptions {
    pub fn new(cap: u64) -> Self {
        SeqOptions {
            cap,
            stride: 1,
            truth: None,
        }
    }

    pub fn with_truth(mut self, mu: f64) -> Self {
        self.truth = Some(mu);
        self
    }
}

/// Samples one observation at a time from `m_eps` on and stops at the first
/// `n` whose decision holds.
#[allow(clippy::too_many_arguments)]
pub fn run_sequential(
    src: &mut dyn SampleSource,
    rule: &RuleKind,
    model: &MeanModel,
    shape: &MarginShape,
    eps: f64,
    sched: &SeqSchedule,
    opts: &SeqOptions,
    cache: Option<&mut DecisionCache>,
) -> Result<TrialOutcome> {
    check_setup(rule, model, shape, eps, false)?;
    if rule.family() != sched.family {
        return Err(Error::Config(format!(
            "{} rule paired with a {} confidence sequence",
            rule.name(),
            sched.family
        )));
    }
    let m = sched.start_n(eps);
    if opts.cap < m {
        return Err(Error::Config(format!(
            "cap {} below the starting size {m}",
            opts.cap
        )));
    }
    if opts.stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut decider = Decider::new(
        rule,
        model,
        shape,
        eps,
        cache,
        &format!("seq|{sched:?}|{}", opts.stride),
    );
    let mut state = SampleState::new();
    let mut next_eval = m;
    loop {
        while state.n < next_eval {
            match src.next_sample() {
                Some(x) => state.push(x),
                None => {
                    if state.n == 0 {
                        return Err(Error::domain("empty sample source"));
                    }
                    return Ok(finish(
                        &state,
                        shape,
                        eps,
                        opts.truth,
                        None,
                        true,
                        Vec::new(),
                    ));
                }
            }
        }
        if decider.decide(&state, sched.delta_n(state.n))? {
            return Ok(finish(
                &state,
                shape,
                eps,
                opts.truth,
                None,
                false,
                Vec::new(),
            ));
        }
        if state.n >= opts.cap {
            return Ok(finish(
                &state,
                shape,
                eps,
                opts.truth,
                None,
                true,
                Vec::new(),
            ));
        }
        next_eval = (state.n + opts.stride).min(opts.cap);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsOptions {
    /// Last stage at which stopping is allowed.
    pub l_cap: usize,
    /// Stage up to which decisions keep being recorded after stopping; 0
    /// records only up to the stopping stage.
    pub trace_to: usize,
    pub truth: Option<f64>,
}

impl MsOptions {
    pub fn new(l_cap: usize) -> Self {
        MsOptions {
            l_cap,
            trace_to: 0,
            truth: None,
        }
    }

    pub fn with_truth(mut self, mu: f64) -> Self {
        self.truth = Some(mu);
        self
    }

    pub fn with_trace_to(mut self, stage: usize) -> Self {
        self.trace_to = stage;
        self
    }
}

/// Multistage driver on the geometric schedule's plan.
#[allow(clippy::too_many_arguments)]
pub fn run_multistage(
    src: &mut dyn SampleSource,
    rule: &RuleKind,
    model: &MeanModel,
    shape: &MarginShape,
    eps: f64,
    sched: &StageSchedule,
    opts: &MsOptions,
    cache: Option<&mut DecisionCache>,
) -> Result<TrialOutcome> {
    if rule.family() != sched.family {
        return Err(Error::Config(format!(
            "{} rule paired with a {} stage schedule",
            rule.name(),
            sched.family
        )));
    }
    let plan = sched.plan(eps, opts.l_cap.max(opts.trace_to))?;
    run_multistage_plan(src, rule, model, shape, eps, &plan, opts, cache)
}

/// Multistage driver on an explicit plan. Samples accumulate across stages;
/// at each stage `l >= tau` the sample is extended to `n_l` and `D_l` is
/// evaluated with `delta_l`.
#[allow(clippy::too_many_arguments)]
pub fn run_multistage_plan(
    src: &mut dyn SampleSource,
    rule: &RuleKind,
    model: &MeanModel,
    shape: &MarginShape,
    eps: f64,
    plan: &StagePlan,
    opts: &MsOptions,
    cache: Option<&mut DecisionCache>,
) -> Result<TrialOutcome> {
    check_setup(rule, model, shape, eps, true)?;
    if opts.l_cap < plan.tau {
        return Err(Error::Config(format!(
            "stage cap {} below the first decision stage {}",
            opts.l_cap, plan.tau
        )));
    }
    let mut decider = Decider::new(rule, model, shape, eps, cache, &format!("ms|{plan:?}"));
    let last = plan.last_stage();
    let stop_limit = opts.l_cap.min(last);
    let trace_limit = opts.trace_to.min(last);
    let mut state = SampleState::new();
    let mut trace = Vec::new();
    let mut stopped: Option<(SampleState, usize)> = None;
    let mut exhausted = false;
    for l in plan.tau..=last {
        if stopped.is_some() && l > trace_limit {
            break;
        }
        if stopped.is_none() && l > stop_limit {
            break;
        }
        let target_n = plan.size(l);
        while state.n < target_n {
            match src.next_sample() {
                Some(x) => state.push(x),
                None => {
                    exhausted = true;
                    break;
                }
            }
        }
        if exhausted {
            break;
        }
        let d = decider.decide(&state, plan.delta(l))?;
        let y = state.mean();
        trace.push(StageRecord {
            stage: l,
            n: state.n,
            estimate: y,
            decision: d,
            covered: covers(report(shape, y, eps), opts.truth),
        });
        if d && stopped.is_none() {
            stopped = Some((state, l));
        }
    }
    Ok(match stopped {
        Some((s, l)) => finish(&s, shape, eps, opts.truth, Some(l), false, trace),
        None => {
            if state.n == 0 {
                return Err(Error::domain("empty sample source"));
            }
            let l = trace.last().map(|r| r.stage);
            finish(&state, shape, eps, opts.truth, l, true, trace)
        }
    })
}
