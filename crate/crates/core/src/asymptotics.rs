//! Closed-form predictions for the stopping rules as `eps -> 0`: the
//! fixed-size benchmark `N`, the stage diagnostics `Lambda_l`, `jm`, `xi_l`,
//! the predicted coverage and efficiency, concentration bounds used as test
//! oracles, and the standard normal distribution function and its inverse.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};
use std::fmt::Write as _;

use libm::erfc;

use crate::error::{Error, Result};
use crate::margins::MarginShape;
use crate::schedules::StageSchedule;

/// Tolerance for treating `Lambda_{jm-1}` as exactly 1.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Default absolute constant in the non-uniform Berry-Esseen bound.
pub const DEFAULT_BE_CONSTANT: f64 = 30.0;

/// Standard normal distribution function, via `erfc` so that both tails keep
/// full relative precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse of [`normal_cdf`] on `(0, 1)`.
///
/// Acklam's rational approximation followed by two Halley corrections
/// against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "normal_quantile needs 0 < p < 1, got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    for _ in 0..2 {
        // work in the smaller tail to keep the residual accurate
        let e = if x < 0.0 {
            normal_cdf(x) - p
        } else {
            (1.0 - p) - 0.5 * erfc(x / SQRT_2)
        };
        let u = e * sqrt_2pi * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// `Z = Phi^{-1}(1 - delta/2)`.
pub fn z_two_sided(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    normal_quantile(1.0 - 0.5 * delta)
}

/// Fixed sample size `N = nu Z^2 / (kappa(mu) eps)^2`.
pub fn fixed_size(eps: f64, delta: f64, mu: f64, nu: f64, shape: &MarginShape) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::domain(format!("eps must be positive, got {eps}")));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::domain(format!(
            "variance must be positive, got {nu}"
        )));
    }
    let z = z_two_sided(delta)?;
    let k = shape.kappa(mu)?;
    Ok(nu * z * z / (k * eps).powi(2))
}

/// `Lambda_l = kappa^2 C_l / nu` for `l = 1..=l_max`.
pub fn lambda_table(kappa: f64, nu: f64, sched: &StageSchedule, l_max: usize) -> Vec<f64> {
    (1..=l_max as i64)
        .map(|l| kappa * kappa * sched.c(l) / nu)
        .collect()
}

/// `jm = min{l >= 1 : Lambda_l > 1}`.
pub fn critical_index(kappa: f64, nu: f64, sched: &StageSchedule, l_max: usize) -> Result<usize> {
    lambda_table(kappa, nu, sched, l_max)
        .iter()
        .position(|&lam| lam > 1.0)
        .map(|i| i + 1)
        .ok_or_else(|| Error::NotFound(format!("no stage with Lambda > 1 within {l_max} stages")))
}

/// `xi_l = kappa sqrt(C_l Upsilon_l / nu)`; defined for every integer `l`.
pub fn xi(kappa: f64, nu: f64, sched: &StageSchedule, l: i64) -> f64 {
    kappa * (sched.c(l) * sched.upsilon(l) / nu).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticReport {
    pub n_fixed: f64,
    pub z: f64,
    pub lambdas: Vec<f64>,
    pub jm: usize,
    pub xi_prev: f64,
    pub xi_jm: f64,
    /// `jm = 1` or `Lambda_{jm-1} < 1`.
    pub regular: bool,
    /// `2 Phi(xi_jm) - 1`, only when regular.
    pub coverage_point: Option<f64>,
    /// `2 [Phi(xi_{jm-1}) + Phi(xi_jm)] - 3`.
    pub coverage_lower: f64,
    /// `(xi_jm / Z)^2`, only when regular.
    pub ratio_point: Option<f64>,
    /// `[(xi_{jm-1}/Z)^2, (xi_jm/Z)^2]`.
    pub ratio_interval: (f64, f64),
}

impl AsymptoticReport {
    /// Point coverage when available, else the lower bound; clipped to [0, 1].
    pub fn coverage_for_reporting(&self) -> f64 {
        self.coverage_point
            .unwrap_or(self.coverage_lower)
            .clamp(0.0, 1.0)
    }

    pub fn ratio_for_reporting(&self) -> f64 {
        self.ratio_point.unwrap_or(self.ratio_interval.1)
    }

    /// Flat `key = value` block.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "N = {}", self.n_fixed);
        let _ = writeln!(s, "Z = {}", self.z);
        for (i, lam) in self.lambdas.iter().enumerate() {
            let _ = writeln!(s, "Lambda_{} = {}", i + 1, lam);
        }
        let _ = writeln!(s, "jm = {}", self.jm);
        let _ = writeln!(s, "xi_jm_minus_1 = {}", self.xi_prev);
        let _ = writeln!(s, "xi_jm = {}", self.xi_jm);
        let _ = writeln!(
            s,
            "regime = {}",
            if self.regular { "regular" } else { "boundary" }
        );
        match self.coverage_point {
            Some(c) => {
                let _ = writeln!(s, "pred_coverage = {c}");
            }
            None => {
                let _ = writeln!(s, "pred_coverage_lower = {}", self.coverage_lower);
            }
        }
        match self.ratio_point {
            Some(r) => {
                let _ = writeln!(s, "pred_ratio = {r}");
            }
            None => {
                let _ = writeln!(s, "pred_ratio_lower = {}", self.ratio_interval.0);
                let _ = writeln!(s, "pred_ratio_upper = {}", self.ratio_interval.1);
            }
        }
        s
    }

    pub const CSV_HEADER: &'static str =
        "N,Z,jm,xi_jm_minus_1,xi_jm,regular,pred_coverage,pred_coverage_lower,pred_ratio,pred_ratio_lower,pred_ratio_upper";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.n_fixed,
            self.z,
            self.jm,
            self.xi_prev,
            self.xi_jm,
            self.regular,
            opt(self.coverage_point),
            self.coverage_lower,
            opt(self.ratio_point),
            self.ratio_interval.0,
            self.ratio_interval.1
        )
    }
}

/// Asymptotic report for a multistage schedule at true mean `mu` and variance
/// `nu`. Stage tables extend to `l_max`.
pub fn predict(
    eps: f64,
    delta: f64,
    mu: f64,
    nu: f64,
    shape: &MarginShape,
    sched: &StageSchedule,
    l_max: usize,
) -> Result<AsymptoticReport> {
    let n_fixed = fixed_size(eps, delta, mu, nu, shape)?;
    let z = z_two_sided(delta)?;
    let kappa = shape.kappa(mu)?;
    let lambdas = lambda_table(kappa, nu, sched, l_max);
    let jm = critical_index(kappa, nu, sched, l_max)?;
    let xi_prev = xi(kappa, nu, sched, jm as i64 - 1);
    let xi_jm = xi(kappa, nu, sched, jm as i64);
    let regular = jm == 1 || lambdas[jm - 2] < 1.0 - BOUNDARY_TOL;
    let coverage_lower = 2.0 * (normal_cdf(xi_prev) + normal_cdf(xi_jm)) - 3.0;
    let ratio_interval = ((xi_prev / z).powi(2), (xi_jm / z).powi(2));
    Ok(AsymptoticReport {
        n_fixed,
        z,
        lambdas,
        jm,
        xi_prev,
        xi_jm,
        regular,
        coverage_point: regular.then(|| 2.0 * normal_cdf(xi_jm) - 1.0),
        coverage_lower,
        ratio_point: regular.then_some(ratio_interval.1),
        ratio_interval,
    })
}

/// Bound on `Pr{|Y_n - mu| >= gamma}`:
/// `exp(-n gamma^2 / (2 nu)) + 2 C W / (n^2 gamma^3)`, clipped to [0, 1].
pub fn be_tail_bound(n: u64, gamma: f64, nu: f64, abs_third: f64, c_be: f64) -> f64 {
    let nf = n as f64;
    let b = (-nf * gamma * gamma / (2.0 * nu)).exp()
        + 2.0 * c_be * abs_third / (nf * nf * gamma.powi(3));
    b.clamp(0.0, 1.0)
}

/// Bound on `Pr{|V_n - nu| >= eta}`:
/// `exp(-n eta/(4 nu)) + exp(-n eta^2/(8 varpi))
///  + 4 C (sqrt(2) W eta^{3/2} + 4 V3) / (n^2 eta^3)`, clipped to [0, 1].
pub fn var_tail_bound(
    n: u64,
    eta: f64,
    nu: f64,
    abs_third: f64,
    sq_dev_var: f64,
    sq_dev_third: f64,
    c_be: f64,
) -> f64 {
    let nf = n as f64;
    let b = (-nf * eta / (4.0 * nu)).exp()
        + (-nf * eta * eta / (8.0 * sq_dev_var)).exp()
        + 4.0 * c_be * (SQRT_2 * abs_third * eta.powf(1.5) + 4.0 * sq_dev_third)
            / (nf * nf * eta.powi(3));
    b.clamp(0.0, 1.0)
}

/// Per-stage event counts over simulated multistage trials, where each trial
/// records `D_l` for every stage up to a common horizon.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageAggregate {
    pub trials: u64,
    /// First stage index `tau`.
    pub tau: usize,
    pub stages: Vec<StageCounts>,
}

/// Counts for one stage `l`; `D_{tau-1}` is taken as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageCounts {
    /// `#{mu not in I_l}`.
    pub miss: u64,
    /// `#{D_{l-1} = 0}`.
    pub prev_continue: u64,
    /// `#{D_l = 1}`.
    pub stop: u64,
    /// `#{mu not in I_l, D_{l-1} = 0, D_l = 1}`.
    pub miss_switch: u64,
    /// `#{mu in I_l, D_{l-1} = 0, D_l = 1}`.
    pub cover_switch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissBounds {
    pub p_upper: f64,
    pub p_lower: f64,
    pub q: f64,
}

/// Plug-in estimates of the upper, lower and `Q` bounds on the miss
/// probability of the reporting interval.
pub fn pbar_pund_q(agg: &StageAggregate) -> Result<MissBounds> {
    if agg.trials == 0 || agg.stages.is_empty() {
        return Err(Error::EmptyAggregate);
    }
    let t = agg.trials as f64;
    let mut p_upper = 0.0;
    let mut covered = 0.0;
    let mut q = 0.0;
    for s in &agg.stages {
        p_upper += s.miss_switch as f64 / t;
        covered += s.cover_switch as f64 / t;
        q += (s.miss as f64 / t)
            .min(s.prev_continue as f64 / t)
            .min(s.stop as f64 / t);
    }
    Ok(MissBounds {
        p_upper,
        p_lower: 1.0 - covered,
        q,
    })
}
