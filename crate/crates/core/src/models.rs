//! One-parameter distribution families keyed by their mean, plus an opaque
//! location-family sampler used by the distribution-free rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::asymptotics::normal_cdf;
use crate::error::{Error, Result};
use crate::Interval;

/// E|E - 1|^3 for a unit exponential: 12/e - 2.
const EXP_ABS_THIRD: f64 = 2.414_553_294_057_308;
/// E|E(E - 2)|^3 for a unit exponential.
const EXP_SQ_DEV_THIRD: f64 = 240.710_926_056_448_28;
/// E|Z|^3 for a standard normal: 2 sqrt(2/pi).
const NORMAL_ABS_THIRD: f64 = 1.595_769_121_605_730_7;
/// E|Z^2 - 1|^3 for a standard normal.
const NORMAL_SQ_DEV_THIRD: f64 = 8.691_562_902_725_506;

/// Mixture of uniforms `sum w_i U(lo_i, hi_i)`, shifted so that its mean
/// equals the requested `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformMixture {
    pub components: Vec<(f64, f64, f64)>,
}

impl UniformMixture {
    /// 0.7 U(0, 1) + 0.3 U(1, 2): skewed, bounded, variance 0.29333...
    pub fn preset() -> Self {
        UniformMixture {
            components: vec![(0.7, 0.0, 1.0), (0.3, 1.0, 2.0)],
        }
    }

    fn base_mean(&self) -> f64 {
        self.components
            .iter()
            .map(|&(w, lo, hi)| w * 0.5 * (lo + hi))
            .sum()
    }

    fn variance(&self) -> f64 {
        let m = self.base_mean();
        let second: f64 = self
            .components
            .iter()
            .map(|&(w, lo, hi)| w * (lo * lo + lo * hi + hi * hi) / 3.0)
            .sum();
        second - m * m
    }

    fn validate(&self) -> Result<()> {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        if self.components.is_empty()
            || (total - 1.0).abs() > 1e-12
            || self
                .components
                .iter()
                .any(|&(w, lo, hi)| w <= 0.0 || hi <= lo)
        {
            return Err(Error::Config(
                "uniform mixture needs positive weights summing to 1 and lo < hi".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpaqueKind {
    UniformMixture(UniformMixture),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Bernoulli,
    Poisson,
    Exponential,
    NormalKnownVar {
        sigma2: f64,
    },
    /// Known only through a sampler; the true variance is kept for scoring.
    Opaque(OpaqueKind),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    /// Variance.
    pub var: f64,
    /// E|X - mu|^3.
    pub abs_third: f64,
    /// abs_third / var^{3/2}.
    pub be_ratio: f64,
    /// E|(X - mu)^2 - var|^2.
    pub sq_dev_var: f64,
    /// E|(X - mu)^2 - var|^3.
    pub sq_dev_third: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanModel {
    pub family: Family,
}

impl MeanModel {
    pub fn new(family: Family) -> Result<Self> {
        match &family {
            Family::NormalKnownVar { sigma2 } if !(*sigma2 > 0.0 && sigma2.is_finite()) => {
                return Err(Error::Config(format!(
                    "sigma2 must be positive, got {sigma2}"
                )))
            }
            Family::Opaque(OpaqueKind::UniformMixture(m)) => m.validate()?,
            _ => {}
        }
        Ok(MeanModel { family })
    }

    pub fn bernoulli() -> Self {
        MeanModel {
            family: Family::Bernoulli,
        }
    }

    pub fn poisson() -> Self {
        MeanModel {
            family: Family::Poisson,
        }
    }

    pub fn exponential() -> Self {
        MeanModel {
            family: Family::Exponential,
        }
    }

    pub fn normal(sigma2: f64) -> Result<Self> {
        Self::new(Family::NormalKnownVar { sigma2 })
    }

    pub fn uniform_mixture() -> Self {
        MeanModel {
            family: Family::Opaque(OpaqueKind::UniformMixture(UniformMixture::preset())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
            Family::Exponential => "exponential",
            Family::NormalKnownVar { .. } => "normal",
            Family::Opaque(_) => "opaque",
        }
    }

    /// Open interval of admissible means.
    pub fn domain(&self) -> Interval {
        match self.family {
            Family::Bernoulli => Interval::UNIT,
            Family::Poisson | Family::Exponential => Interval::POSITIVE,
            Family::NormalKnownVar { .. } | Family::Opaque(_) => Interval::REAL_LINE,
        }
    }

    pub fn is_opaque(&self) -> bool {
        matches!(self.family, Family::Opaque(_))
    }

    /// Whether `Pr{Y_n <= z}` is non-increasing in the mean for every `n`, `z`.
    /// All parametric families here have monotone likelihood ratio in `Y_n`.
    pub fn is_monotone(&self) -> bool {
        !self.is_opaque()
    }

    /// Observations live on the integers, so `(n, sum)` determines `Y_n`
    /// exactly and decisions that depend on `Y_n` alone can be memoized.
    pub fn is_lattice(&self) -> bool {
        matches!(self.family, Family::Bernoulli | Family::Poisson)
    }

    /// E|X|^6 < infinity. Holds analytically for every built-in family and for
    /// bounded opaque mixtures.
    pub fn finite_sixth_moment(&self) -> bool {
        true
    }

    pub(crate) fn check_mean(&self, mu: f64) -> Result<()> {
        if self.domain().contains(mu) {
            Ok(())
        } else {
            let d = self.domain();
            Err(Error::domain(format!(
                "mean {mu} outside ({}, {}) for {}",
                d.lo,
                d.hi,
                self.name()
            )))
        }
    }

    /// The variance function `V(mu)`. For opaque models this is the true
    /// variance, available for scoring only.
    pub fn variance(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(match &self.family {
            Family::Bernoulli => mu * (1.0 - mu),
            Family::Poisson => mu,
            Family::Exponential => mu * mu,
            Family::NormalKnownVar { sigma2 } => *sigma2,
            Family::Opaque(OpaqueKind::UniformMixture(m)) => m.variance(),
        })
    }

    pub fn moments(&self, mu: f64) -> Result<Moments> {
        self.check_mean(mu)?;
        let (var, abs_third, sq_dev_var, sq_dev_third) = match &self.family {
            Family::Bernoulli => {
                let q = 1.0 - mu;
                let v = mu * q;
                // (X - mu)^2 takes q^2 w.p. mu and mu^2 w.p. q
                let (d1, d0) = (q * q - v, mu * mu - v);
                (
                    v,
                    v * (mu * mu + q * q),
                    mu * d1 * d1 + q * d0 * d0,
                    mu * d1.abs().powi(3) + q * d0.abs().powi(3),
                )
            }
            Family::Poisson => {
                let (w, v3) = poisson_abs_moments(mu);
                (mu, w, mu + 2.0 * mu * mu, v3)
            }
            Family::Exponential => {
                let m2 = mu * mu;
                (
                    m2,
                    EXP_ABS_THIRD * m2 * mu,
                    8.0 * m2 * m2,
                    EXP_SQ_DEV_THIRD * m2 * m2 * m2,
                )
            }
            Family::NormalKnownVar { sigma2 } => {
                let s2 = *sigma2;
                (
                    s2,
                    NORMAL_ABS_THIRD * s2 * s2.sqrt(),
                    2.0 * s2 * s2,
                    NORMAL_SQ_DEV_THIRD * s2 * s2 * s2,
                )
            }
            Family::Opaque(_) => {
                return Err(Error::Unsupported("moments of an opaque model".into()))
            }
        };
        Ok(Moments {
            var,
            abs_third,
            be_ratio: abs_third / var.powf(1.5),
            sq_dev_var,
            sq_dev_third,
        })
    }

    /// `(Pr{Y_n <= z}, Pr{Y_n >= z})` when the mean is `theta`; `(0, 0)` when
    /// `theta` is outside the mean domain.
    pub fn mean_cdf(&self, n: u64, z: f64, theta: f64) -> Result<(f64, f64)> {
        if self.is_opaque() {
            return Err(Error::Unsupported("mean_cdf of an opaque model".into()));
        }
        if n == 0 {
            return Err(Error::domain("mean_cdf needs n >= 1"));
        }
        if z.is_nan() {
            return Err(Error::domain("mean_cdf at NaN"));
        }
        if !self.domain().contains(theta) {
            return Ok((0.0, 0.0));
        }
        if z == f64::INFINITY {
            return Ok((1.0, 0.0));
        }
        if z == f64::NEG_INFINITY {
            return Ok((0.0, 1.0));
        }
        let nf = n as f64;
        Ok(match &self.family {
            Family::Bernoulli => {
                let (k_le, k_ge) = lattice_bounds(nf * z);
                // Pr{S <= k} = I_{1-theta}(n - k, k + 1)
                let f = if k_le < 0.0 {
                    0.0
                } else if k_le >= nf {
                    1.0
                } else {
                    beta_reg(nf - k_le, k_le + 1.0, 1.0 - theta)
                };
                // Pr{S >= j} = I_theta(j, n - j + 1)
                let g = if k_ge <= 0.0 {
                    1.0
                } else if k_ge > nf {
                    0.0
                } else {
                    beta_reg(k_ge, nf - k_ge + 1.0, theta)
                };
                (f, g)
            }
            Family::Poisson => {
                let lambda = nf * theta;
                let (k_le, k_ge) = lattice_bounds(nf * z);
                let f = if k_le < 0.0 {
                    0.0
                } else {
                    gamma_ur(k_le + 1.0, lambda)
                };
                let g = if k_ge <= 0.0 {
                    1.0
                } else {
                    gamma_lr(k_ge, lambda)
                };
                (f, g)
            }
            Family::Exponential => {
                if z <= 0.0 {
                    (0.0, 1.0)
                } else {
                    let x = nf * z / theta;
                    (gamma_lr(nf, x), gamma_ur(nf, x))
                }
            }
            Family::NormalKnownVar { sigma2 } => {
                let t = nf.sqrt() * (z - theta) / sigma2.sqrt();
                (normal_cdf(t), normal_cdf(-t))
            }
            Family::Opaque(_) => unreachable!(),
        })
    }

    /// `(a(mu), b(mu))`, the open interval of `s` where the cumulant is finite.
    pub fn cumulant_domain(&self, mu: f64) -> Result<(f64, f64)> {
        self.check_mean(mu)?;
        match self.family {
            Family::Exponential => Ok((f64::NEG_INFINITY, 1.0 / mu)),
            Family::Opaque(_) => Err(Error::Unsupported("cumulant of an opaque model".into())),
            _ => Ok((f64::NEG_INFINITY, f64::INFINITY)),
        }
    }

    /// `psi(s, mu) = ln E[exp(s (X - mu))]`.
    pub fn cumulant(&self, s: f64, mu: f64) -> Result<f64> {
        let (a, b) = self.cumulant_domain(mu)?;
        if !(s > a && s < b) {
            return Err(Error::domain(format!("s = {s} outside ({a}, {b})")));
        }
        Ok(self.cumulant_unchecked(s, mu))
    }

    /// Cumulant without domain checks; callers guarantee `a(mu) < s < b(mu)`.
    pub(crate) fn cumulant_unchecked(&self, s: f64, mu: f64) -> f64 {
        match &self.family {
            Family::Bernoulli => {
                // ln(1 - mu + mu e^s) - s mu, arranged to avoid overflow
                if s > 0.0 {
                    s * (1.0 - mu) + ((1.0 - mu) * (-s).exp() + mu).ln()
                } else {
                    (mu * s.exp_m1()).ln_1p() - s * mu
                }
            }
            Family::Poisson => mu * (s.exp_m1() - s),
            Family::Exponential => -(-s * mu).ln_1p() - s * mu,
            Family::NormalKnownVar { sigma2 } => 0.5 * sigma2 * s * s,
            Family::Opaque(_) => f64::NAN,
        }
    }

    pub fn sampler(&self, mu: f64) -> Result<Sampler> {
        self.check_mean(mu)?;
        let dist = match &self.family {
            Family::Bernoulli => SamplerKind::Bernoulli(mu),
            Family::Poisson => {
                SamplerKind::Poisson(Poisson::new(mu).map_err(|e| Error::domain(e.to_string()))?)
            }
            Family::Exponential => {
                SamplerKind::Exp(Exp::new(1.0 / mu).map_err(|e| Error::domain(e.to_string()))?)
            }
            Family::NormalKnownVar { sigma2 } => SamplerKind::Normal(
                Normal::new(mu, sigma2.sqrt()).map_err(|e| Error::domain(e.to_string()))?,
            ),
            Family::Opaque(OpaqueKind::UniformMixture(m)) => {
                let shift = mu - m.base_mean();
                let mut acc = 0.0;
                let comps = m
                    .components
                    .iter()
                    .map(|&(w, lo, hi)| {
                        acc += w;
                        (acc, lo + shift, hi - lo)
                    })
                    .collect();
                SamplerKind::Mixture(comps)
            }
        };
        Ok(Sampler { dist })
    }

    /// `n` i.i.d. draws at mean `mu`, deterministic in `seed`.
    pub fn sample(&self, mu: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
        let sampler = self.sampler(mu)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| sampler.draw(&mut rng)).collect())
    }
}

/// Largest integer `<= x` and smallest integer `>= x`, snapping `x` to an
/// integer when it is within rounding noise of one (`n * Y_n` recovered from
/// a floating mean).
fn lattice_bounds(x: f64) -> (f64, f64) {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        (r, r)
    } else {
        (x.floor(), x.ceil())
    }
}

/// `(E|X - mu|^3, E|(X - mu)^2 - mu|^3)` for a Poisson(mu) by summing the pmf
/// until the tail is negligible.
fn poisson_abs_moments(mu: f64) -> (f64, f64) {
    let mut w = 0.0;
    let mut v3 = 0.0;
    let mut log_p = -mu;
    let upper = (mu + 40.0 * mu.sqrt() + 40.0).ceil() as u64;
    for k in 0..=upper {
        if k > 0 {
            log_p += mu.ln() - (k as f64).ln();
        }
        let p = log_p.exp();
        let d = k as f64 - mu;
        w += p * d.abs().powi(3);
        v3 += p * (d * d - mu).abs().powi(3);
    }
    (w, v3)
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Bernoulli(f64),
    Poisson(Poisson<f64>),
    Exp(Exp<f64>),
    Normal(Normal<f64>),
    /// (cumulative weight, lower end, width)
    Mixture(Vec<(f64, f64, f64)>),
}

/// Draws observations at a fixed mean from a caller-owned RNG.
#[derive(Debug, Clone)]
pub struct Sampler {
    dist: SamplerKind,
}

impl Sampler {
    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.dist {
            SamplerKind::Bernoulli(p) => {
                if rng.random::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            SamplerKind::Poisson(d) => d.sample(rng),
            SamplerKind::Exp(d) => d.sample(rng),
            SamplerKind::Normal(d) => d.sample(rng),
            SamplerKind::Mixture(comps) => {
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                let &(_, lo, width) = comps
                    .iter()
                    .find(|c| u < c.0)
                    .unwrap_or_else(|| comps.last().unwrap());
                lo + width * v
            }
        }
    }
}

/// Running count, sum and centred sum of squares of a sample.
///
/// `sum` is kept separately from the centred statistic so that integer-valued
/// data keeps an exact `n * Y_n`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleState {
    pub n: u64,
    pub sum: f64,
    /// `sum (X_i - Y_n)^2`.
    pub m2: f64,
}

impl SampleState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut s = Self::new();
        for &x in xs {
            s.push(x);
        }
        s
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        let old_mean = if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        };
        self.n += 1;
        self.sum += x;
        let new_mean = self.sum / self.n as f64;
        self.m2 += (x - old_mean) * (x - new_mean);
        if self.m2 < 0.0 {
            self.m2 = 0.0;
        }
    }

    /// Combines two disjoint samples.
    pub fn merge(&self, other: &SampleState) -> SampleState {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let delta = other.sum / nb - self.sum / na;
        SampleState {
            n: self.n + other.n,
            sum: self.sum + other.sum,
            m2: self.m2 + other.m2 + delta * delta * na * nb / (na + nb),
        }
    }

    /// `Y_n`; NaN for an empty sample.
    #[inline]
    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// `V_n = sum (X_i - Y_n)^2 / n`.
    #[inline]
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.m2 / self.n as f64).max(0.0)
        }
    }
}
