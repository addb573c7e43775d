//! Confidence sequences for the fully sequential rules and stage schedules for
//! the multistage rules.
//!
//! Sequential rules use `delta_n` ramping to a family-specific limit and
//! start at `m_eps = ceil(1/eps)`. Multistage rules use stage sizes
//! `n_l = ceil(C_l Upsilon_l / eps^2)` with geometric `C_l = c1 r^(l-1)` and
//! `Upsilon_l` derived from `delta_l`.

use std::fmt;

use crate::asymptotics::{normal_cdf, z_two_sided};
use crate::error::{Error, Result};

/// Which confidence sequence backs a rule; fixes the limit of `delta_n` and
/// the form of `Upsilon_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleFamily {
    Cdf,
    LargeDeviation,
    NormalApprox,
    DistributionFree,
}

impl RuleFamily {
    pub fn name(self) -> &'static str {
        match self {
            RuleFamily::Cdf => "cdf",
            RuleFamily::LargeDeviation => "ld",
            RuleFamily::NormalApprox => "nal",
            RuleFamily::DistributionFree => "df",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cdf" => Ok(RuleFamily::Cdf),
            "ld" | "large_deviation" | "large-deviation" => Ok(RuleFamily::LargeDeviation),
            "nal" | "normal_approx" | "normal-approx" => Ok(RuleFamily::NormalApprox),
            "df" | "distribution_free" | "distribution-free" => Ok(RuleFamily::DistributionFree),
            other => Err(Error::Config(format!("unknown rule family {other:?}"))),
        }
    }

    /// `Upsilon` for a given `delta`: `Z(delta)^2`, `2 ln(2/delta)` or
    /// `ln(1/delta)`.
    pub fn upsilon(self, delta: f64) -> f64 {
        match self {
            RuleFamily::Cdf => {
                let z = z_two_sided(delta).unwrap_or(f64::NAN);
                z * z
            }
            RuleFamily::LargeDeviation => 2.0 * (2.0 / delta).ln(),
            RuleFamily::NormalApprox | RuleFamily::DistributionFree => (1.0 / delta).ln(),
        }
    }
}

impl fmt::Display for RuleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `ceil(x)` ignoring rounding noise just above an integer.
fn ceil_snapped(x: f64) -> f64 {
    (x - 1e-9 * x.abs().max(1.0)).ceil()
}

#[derive(Debug, Clone, Copy)]
pub enum StartRule {
    /// `m_eps = ceil(1/eps)`.
    InverseEps,
    Custom(fn(f64) -> u64),
}

#[derive(Debug, Clone)]
pub struct SeqSchedule {
    pub family: RuleFamily,
    pub delta: f64,
    /// `delta_n = delta_inf * n / (n + ramp)`; 0 gives the constant limit.
    pub ramp: f64,
    pub start: StartRule,
}

impl SeqSchedule {
    pub fn new(family: RuleFamily, delta: f64) -> Self {
        SeqSchedule {
            family,
            delta,
            ramp: 1.0,
            start: StartRule::InverseEps,
        }
    }

    /// Limit of `delta_n`: `delta` (CDF), `2 exp(-Z^2/2)` (LD), `exp(-Z^2)`
    /// (NAL, DF), so that the implied critical values tend to `Z`.
    pub fn limit(&self) -> f64 {
        let z = z_two_sided(self.delta).unwrap_or(f64::NAN);
        match self.family {
            RuleFamily::Cdf => self.delta,
            RuleFamily::LargeDeviation => 2.0 * (-0.5 * z * z).exp(),
            RuleFamily::NormalApprox | RuleFamily::DistributionFree => (-z * z).exp(),
        }
    }

    pub fn delta_n(&self, n: u64) -> f64 {
        let nf = n.max(1) as f64;
        self.limit() * nf / (nf + self.ramp)
    }

    pub fn start_n(&self, eps: f64) -> u64 {
        match self.start {
            StartRule::InverseEps => (ceil_snapped(1.0 / eps) as u64).max(1),
            StartRule::Custom(f) => f(eps).max(1),
        }
    }

    /// The critical value implied by `delta_n`, which must tend to `Z`.
    fn implied_critical(&self, n: u64) -> f64 {
        let d = self.delta_n(n);
        match self.family {
            RuleFamily::Cdf => z_two_sided(d).unwrap_or(f64::NAN),
            RuleFamily::LargeDeviation => (2.0 * (2.0 / d).ln()).sqrt(),
            RuleFamily::NormalApprox | RuleFamily::DistributionFree => (1.0 / d).ln().sqrt(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.delta > 0.0 && self.delta < 1.0) {
            v.push(format!("delta must lie in (0, 1), got {}", self.delta));
            return v;
        }
        if !(self.ramp >= 0.0 && self.ramp.is_finite()) {
            v.push(format!(
                "delta_n ramp must be non-negative, got {}",
                self.ramp
            ));
            return v;
        }
        for n in [1u64, 10, 1000] {
            let d = self.delta_n(n);
            if !(d > 0.0 && d < 1.0) {
                v.push(format!("delta_n must lie in (0, 1); delta_{n} = {d}"));
            }
        }
        let target = 1.0 - 0.5 * self.delta;
        let reached = normal_cdf(self.implied_critical(1_000_000_000_000));
        if (reached - target).abs() > 1e-9 {
            v.push(format!(
                "confidence sequence limit {reached} does not reach 1 - delta/2 = {target}"
            ));
        }
        for eps in [1e-3, 1e-5, 1e-7] {
            let m = self.start_n(eps) as f64;
            if eps * eps * m > 10.0 * eps {
                v.push(format!(
                    "eps^2 m_eps must vanish; got {} at eps = {eps}",
                    eps * eps * m
                ));
                break;
            }
        }
        if self.start_n(1e-7) < 1000 {
            v.push("m_eps must grow without bound as eps -> 0".into());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMode {
    /// `delta_l = delta`.
    Constant,
    /// `delta_l = delta / l` for `l >= 1`, `delta` for `l < 1`.
    Harmonic,
}

impl DeltaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(DeltaMode::Constant),
            "harmonic" => Ok(DeltaMode::Harmonic),
            other => Err(Error::Config(format!("unknown delta_ell_mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TauRule {
    One,
    Custom(fn(f64) -> usize),
}

#[derive(Debug, Clone)]
pub struct StageSchedule {
    pub family: RuleFamily,
    pub delta: f64,
    pub c1: f64,
    pub ratio: f64,
    pub delta_mode: DeltaMode,
    pub tau: TauRule,
    /// Largest admissible stage size.
    pub cap_n: u64,
    /// Stage from which `delta_l (C_l Upsilon_l)^2` must increase (CDF family).
    pub cdf_growth_from: usize,
}

/// Stages `1..=sizes.len()` with their sizes and confidence parameters, and
/// the first stage `tau` at which decisions are taken.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub tau: usize,
    pub sizes: Vec<u64>,
    pub deltas: Vec<f64>,
}

impl StagePlan {
    /// A plan from explicit sizes (stage `l` at index `l - 1`).
    pub fn explicit(tau: usize, sizes: Vec<u64>, deltas: Vec<f64>) -> Result<Self> {
        if sizes.len() != deltas.len() || sizes.is_empty() {
            return Err(Error::Config(
                "stage sizes and deltas must be non-empty and equal in length".into(),
            ));
        }
        if tau < 1 || tau > sizes.len() {
            return Err(Error::Config(format!(
                "tau = {tau} outside 1..={}",
                sizes.len()
            )));
        }
        if sizes[0] == 0 || sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "stage sizes must be positive and strictly increasing".into(),
            ));
        }
        Ok(StagePlan { tau, sizes, deltas })
    }

    pub fn size(&self, l: usize) -> u64 {
        self.sizes[l - 1]
    }

    pub fn delta(&self, l: usize) -> f64 {
        self.deltas[l - 1]
    }

    pub fn last_stage(&self) -> usize {
        self.sizes.len()
    }
}

impl StageSchedule {
    pub fn geometric(family: RuleFamily, delta: f64, ratio: f64) -> Self {
        StageSchedule {
            family,
            delta,
            c1: 1.0,
            ratio,
            delta_mode: DeltaMode::Constant,
            tau: TauRule::One,
            cap_n: 1 << 40,
            cdf_growth_from: 1,
        }
    }

    pub fn with_delta_mode(mut self, mode: DeltaMode) -> Self {
        self.delta_mode = mode;
        self
    }

    pub fn with_c1(mut self, c1: f64) -> Self {
        self.c1 = c1;
        self
    }

    pub fn with_cap(mut self, cap_n: u64) -> Self {
        self.cap_n = cap_n;
        self
    }

    pub fn with_tau(mut self, tau: TauRule) -> Self {
        self.tau = tau;
        self
    }

    /// `C_l = c1 r^(l-1)`, any integer `l`.
    pub fn c(&self, l: i64) -> f64 {
        self.c1 * self.ratio.powi((l - 1) as i32)
    }

    pub fn delta_l(&self, l: i64) -> f64 {
        match self.delta_mode {
            DeltaMode::Constant => self.delta,
            DeltaMode::Harmonic => self.delta / l.max(1) as f64,
        }
    }

    pub fn upsilon(&self, l: i64) -> f64 {
        self.family.upsilon(self.delta_l(l))
    }

    pub fn tau(&self, eps: f64) -> usize {
        match self.tau {
            TauRule::One => 1,
            TauRule::Custom(f) => f(eps).max(1),
        }
    }

    /// `n_l = ceil(C_l Upsilon_l / eps^2)` for `l = 1..=l_max`.
    pub fn stage_sizes(&self, eps: f64, l_max: usize) -> Result<Vec<u64>> {
        if !(eps > 0.0) {
            return Err(Error::domain(format!("eps must be positive, got {eps}")));
        }
        if l_max == 0 {
            return Err(Error::domain("need at least one stage"));
        }
        let mut out = Vec::with_capacity(l_max);
        for l in 1..=l_max as i64 {
            let x = ceil_snapped(self.c(l) * self.upsilon(l) / (eps * eps));
            if !(x.is_finite() && x <= self.cap_n as f64) {
                return Err(Error::Overflow {
                    requested: if x.is_finite() { x as u64 } else { u64::MAX },
                    cap: self.cap_n,
                });
            }
            let n = (x as u64).max(1);
            if let Some(&prev) = out.last() {
                if n <= prev {
                    return Err(Error::Config(format!(
                        "stage sizes not increasing at stage {l}: {prev} then {n}"
                    )));
                }
            }
            out.push(n);
        }
        Ok(out)
    }

    /// Stages up to `l_cap`, truncated at the last stage that fits under the
    /// size cap.
    pub fn plan(&self, eps: f64, l_cap: usize) -> Result<StagePlan> {
        let tau = self.tau(eps);
        let mut l_max = l_cap.max(tau);
        let sizes = loop {
            match self.stage_sizes(eps, l_max) {
                Ok(s) => break s,
                Err(Error::Overflow { .. }) if l_max > tau => l_max -= 1,
                Err(e) => return Err(e),
            }
        };
        let deltas = (1..=sizes.len() as i64).map(|l| self.delta_l(l)).collect();
        StagePlan::explicit(tau, sizes, deltas)
    }

    /// Checks every growth and limit condition on a 64-stage horizon.
    pub fn validate(&self) -> Vec<String> {
        const HORIZON: i64 = 64;
        let mut v = Vec::new();
        if !(self.delta > 0.0 && self.delta < 1.0) {
            v.push(format!("delta must lie in (0, 1), got {}", self.delta));
            return v;
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            v.push(format!("C_1 must be positive, got {}", self.c1));
        }
        if !(self.ratio > 1.0) {
            v.push(format!(
                "C-schedule ratio must exceed 1, got {}",
                self.ratio
            ));
            return v;
        }
        if self.ratio > 8.0 {
            v.push(format!(
                "C-schedule ratio must not exceed 8, got {}",
                self.ratio
            ));
        }
        for l in 1..HORIZON {
            let r = self.c(l + 1) / self.c(l);
            if !(r > 1.0 + 1e-6 && r < 1e6) {
                v.push(format!("C_{}/C_{l} = {r} outside (1 + 1e-6, 1e6)", l + 1));
                break;
            }
            let (d0, d1) = (self.delta_l(l), self.delta_l(l + 1));
            if d1 > d0 || !(d1 > 0.0 && d1 < 1.0) {
                v.push(format!(
                    "delta_l must be non-increasing in (0, 1); stage {}",
                    l + 1
                ));
                break;
            }
            let u = self.upsilon(l + 1) / self.upsilon(l);
            if !(1.0 - 1e-12..1e6).contains(&u) {
                v.push(format!(
                    "Upsilon_{}/Upsilon_{l} = {u} outside [1, 1e6)",
                    l + 1
                ));
                break;
            }
        }
        if self.family == RuleFamily::Cdf {
            let g = |l: i64| self.delta_l(l) * (self.c(l) * self.upsilon(l)).powi(2);
            let from = self.cdf_growth_from.max(1) as i64;
            if (from..HORIZON).any(|l| g(l + 1) <= g(l)) {
                v.push("delta_l (C_l Upsilon_l)^2 must increase without bound".into());
            }
        }
        for eps in [1e-4, 1e-6, 1e-8] {
            if self.tau(eps) != 1 {
                v.push(format!(
                    "starting index must tend to 1; tau = {} at eps = {eps}",
                    self.tau(eps)
                ));
                break;
            }
        }
        v
    }
}
