//! Margin shapes: the maps `(z, eps) -> L(z, eps), U(z, eps)` defining the
//! target interval around an estimate, their reporting counterparts, and the
//! common limit slope `kappa(mu)`.
//!
//! Built-in shapes cover absolute error `|z - mu| < eps`, relative error
//! `|z - mu| < eps |mu|`, the mixed criterion (absolute `rho eps` or relative
//! `eps`), and the multiplicative interval `(1 - eps) z < mu < (1 + eps) z`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::Interval;

pub type MarginFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type SlopeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A user-supplied shape. Reporting margins default to the stopping margins
/// when left as `None`.
#[derive(Clone)]
pub struct CustomShape {
    pub name: String,
    pub lower: MarginFn,
    pub upper: MarginFn,
    pub report_lower: Option<MarginFn>,
    pub report_upper: Option<MarginFn>,
    pub kappa: SlopeFn,
    pub domain: Interval,
}

impl fmt::Debug for CustomShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomShape")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum MarginShape {
    Absolute,
    /// Positive means only; requires `eps < 1`.
    Relative,
    /// Union of the absolute `rho * eps` and relative `eps` events.
    Mixed {
        rho: f64,
    },
    /// Positive means only; requires `eps < 1`.
    Multiplicative,
    Custom(Arc<CustomShape>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Absolute,
    Relative,
    Mixed,
    Multiplicative,
    Custom,
}

impl MarginShape {
    pub fn mixed(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::domain(format!(
                "mixed rho must be positive, got {rho}"
            )));
        }
        Ok(MarginShape::Mixed { rho })
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            MarginShape::Absolute => ShapeKind::Absolute,
            MarginShape::Relative => ShapeKind::Relative,
            MarginShape::Mixed { .. } => ShapeKind::Mixed,
            MarginShape::Multiplicative => ShapeKind::Multiplicative,
            MarginShape::Custom(_) => ShapeKind::Custom,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            MarginShape::Absolute => "absolute",
            MarginShape::Relative => "relative",
            MarginShape::Mixed { .. } => "mixed",
            MarginShape::Multiplicative => "multiplicative",
            MarginShape::Custom(c) => &c.name,
        }
    }

    /// Means for which the shape is meaningful.
    pub fn domain(&self) -> Interval {
        match self {
            MarginShape::Absolute | MarginShape::Mixed { .. } => Interval::REAL_LINE,
            MarginShape::Relative | MarginShape::Multiplicative => Interval::POSITIVE,
            MarginShape::Custom(c) => c.domain,
        }
    }

    /// Checks `eps` alone; shapes built on interval inversion need `eps < 1`.
    pub fn check_eps(&self, eps: f64) -> Result<()> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::domain(format!("eps must be positive, got {eps}")));
        }
        match self {
            MarginShape::Relative | MarginShape::Multiplicative | MarginShape::Mixed { .. }
                if eps >= 1.0 =>
            {
                Err(Error::domain(format!(
                    "{} shape requires eps < 1, got {eps}",
                    self.name()
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn lower(&self, z: f64, eps: f64) -> Result<f64> {
        self.check_eps(eps)?;
        match self {
            MarginShape::Absolute => Ok(z - eps),
            MarginShape::Relative => {
                positive_z(self, z)?;
                Ok(z / (1.0 + eps))
            }
            MarginShape::Mixed { rho } => Ok(mixed_bounds(*rho, z, eps).0),
            MarginShape::Multiplicative => {
                nonnegative_z(self, z)?;
                Ok((1.0 - eps) * z)
            }
            MarginShape::Custom(c) => Ok((c.lower)(z, eps)),
        }
    }

    pub fn upper(&self, z: f64, eps: f64) -> Result<f64> {
        self.check_eps(eps)?;
        match self {
            MarginShape::Absolute => Ok(z + eps),
            MarginShape::Relative => {
                positive_z(self, z)?;
                Ok(z / (1.0 - eps))
            }
            MarginShape::Mixed { rho } => Ok(mixed_bounds(*rho, z, eps).1),
            MarginShape::Multiplicative => {
                nonnegative_z(self, z)?;
                Ok((1.0 + eps) * z)
            }
            MarginShape::Custom(c) => Ok((c.upper)(z, eps)),
        }
    }

    pub fn report_lower(&self, z: f64, eps: f64) -> Result<f64> {
        match self {
            MarginShape::Custom(c) => match &c.report_lower {
                Some(f) => {
                    self.check_eps(eps)?;
                    Ok(f(z, eps))
                }
                None => self.lower(z, eps),
            },
            _ => self.lower(z, eps),
        }
    }

    pub fn report_upper(&self, z: f64, eps: f64) -> Result<f64> {
        match self {
            MarginShape::Custom(c) => match &c.report_upper {
                Some(f) => {
                    self.check_eps(eps)?;
                    Ok(f(z, eps))
                }
                None => self.upper(z, eps),
            },
            _ => self.upper(z, eps),
        }
    }

    /// Limit of `(U(z, eps) - z) / eps` as `z -> mu`, `eps -> 0`.
    pub fn kappa(&self, mu: f64) -> Result<f64> {
        if !self.domain().contains(mu) {
            return Err(Error::domain(format!(
                "mu = {mu} outside the {} shape domain",
                self.name()
            )));
        }
        let k = match self {
            MarginShape::Absolute => 1.0,
            MarginShape::Relative | MarginShape::Multiplicative => mu,
            MarginShape::Mixed { rho } => rho.max(mu.abs()),
            MarginShape::Custom(c) => (c.kappa)(mu),
        };
        if k > 0.0 && k.is_finite() {
            Ok(k)
        } else {
            Err(Error::domain(format!("kappa({mu}) = {k} is not positive")))
        }
    }
}

fn positive_z(shape: &MarginShape, z: f64) -> Result<()> {
    if z > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "{} margins need z > 0, got {z}",
            shape.name()
        )))
    }
}

fn nonnegative_z(shape: &MarginShape, z: f64) -> Result<()> {
    if z >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "{} margins need z >= 0, got {z}",
            shape.name()
        )))
    }
}

/// Endpoints of `{mu : |z - mu| < rho eps} ∪ {mu : |z - mu| < eps |mu|}`.
/// Both sets contain `z` (the relative one is empty at `z = 0`), so the union
/// is an interval.
fn mixed_bounds(rho: f64, z: f64, eps: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (z - rho * eps, z + rho * eps);
    if z > 0.0 {
        lo = lo.min(z / (1.0 + eps));
        hi = hi.max(z / (1.0 - eps));
    } else if z < 0.0 {
        lo = lo.min(z / (1.0 - eps));
        hi = hi.max(z / (1.0 + eps));
    }
    (lo, hi)
}

/// One row of [`ShapeReport::slopes`].
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeRow {
    pub eps: f64,
    pub lower_slope: f64,
    pub upper_slope: f64,
    /// `max(|lower_slope - kappa|, |upper_slope - kappa|)`.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub kappa: Option<f64>,
    /// Largest amount by which `L <= z <= U` fails on the probe points, or
    /// by which `L(mu) < mu < U(mu)` fails to be strict (reported as 0 when
    /// the strict inequality holds).
    pub max_violation: f64,
    pub strict_at_mu: bool,
    pub slopes: Vec<SlopeRow>,
    pub problems: Vec<String>,
}

impl ShapeReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Numerically probes the ordering, strictness and slope-limit properties of
/// `shape` at `mu` along a decreasing `eps_grid`.
pub fn check_shape(shape: &MarginShape, mu: f64, eps_grid: &[f64]) -> ShapeReport {
    let mut problems = Vec::new();
    let mut max_violation: f64 = 0.0;
    let mut strict_at_mu = true;
    let kappa = match shape.kappa(mu) {
        Ok(k) => Some(k),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    };
    if eps_grid.is_empty() {
        problems.push("empty eps grid".into());
    }
    if eps_grid.windows(2).any(|w| w[1] >= w[0]) {
        problems.push("eps grid is not strictly decreasing".into());
    }

    let mut slopes = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let (lo, hi) = match (shape.lower(mu, eps), shape.upper(mu, eps)) {
            (Ok(lo), Ok(hi)) => (lo, hi),
            (Err(e), _) | (_, Err(e)) => {
                problems.push(e.to_string());
                continue;
            }
        };
        if !(lo < mu && mu < hi) {
            strict_at_mu = false;
            max_violation = max_violation.max((lo - mu).max(mu - hi).max(0.0));
        }
        let scale = mu.abs().max(1.0);
        for probe in [mu - 0.5 * scale, mu - eps, mu + eps, mu + 0.5 * scale] {
            if let (Ok(l), Ok(u)) = (shape.lower(probe, eps), shape.upper(probe, eps)) {
                max_violation = max_violation.max((l - probe).max(probe - u).max(0.0));
            }
        }
        let lower_slope = (mu - lo) / eps;
        let upper_slope = (hi - mu) / eps;
        let deviation = kappa
            .map(|k| (lower_slope - k).abs().max((upper_slope - k).abs()))
            .unwrap_or(f64::NAN);
        slopes.push(SlopeRow {
            eps,
            lower_slope,
            upper_slope,
            deviation,
        });
    }
    if !strict_at_mu {
        problems.push(format!("L(mu, eps) < mu < U(mu, eps) fails at mu = {mu}"));
    }
    if max_violation > 0.0 && strict_at_mu {
        problems.push(format!("L <= z <= U violated by {max_violation:e}"));
    }
    ShapeReport {
        kappa,
        max_violation,
        strict_at_mu,
        slopes,
        problems,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn absolute_margins() {
        let s = MarginShape::Absolute;
        assert_abs_diff_eq!(s.lower(0.3, 0.1).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.upper(0.3, 0.1).unwrap(), 0.4, epsilon = 1e-15);
        assert_eq!(s.kappa(0.5).unwrap(), 1.0);
    }

    /// Grid scan of `{mu : pred(mu)}` returning the smallest and largest
    /// member; used as an independent check of the interval inversions.
    fn scan(pred: impl Fn(f64) -> bool, lo: f64, hi: f64, steps: usize) -> (f64, f64) {
        let h = (hi - lo) / steps as f64;
        let members: Vec<f64> = (0..=steps)
            .map(|i| lo + i as f64 * h)
            .filter(|&m| pred(m))
            .collect();
        (members[0], *members.last().unwrap())
    }

    #[test]
    fn relative_margins_invert_the_coverage_event() {
        let s = MarginShape::Relative;
        let (lo, hi) = (s.lower(0.5, 0.1).unwrap(), s.upper(0.5, 0.1).unwrap());
        assert_abs_diff_eq!(lo, 0.5 / 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(hi, 0.5 / 0.9, epsilon = 1e-15);
        let (slo, shi) = scan(|m| (0.5 - m).abs() < 0.1 * m, 0.3, 0.7, 400_000);
        assert_abs_diff_eq!(lo, slo, epsilon = 2e-6);
        assert_abs_diff_eq!(hi, shi, epsilon = 2e-6);
    }

    #[test]
    fn multiplicative_margins() {
        let s = MarginShape::Multiplicative;
        assert_abs_diff_eq!(s.lower(0.5, 0.1).unwrap(), 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(s.upper(0.5, 0.1).unwrap(), 0.55, epsilon = 1e-15);
        assert_eq!(s.kappa(0.5).unwrap(), 0.5);
    }

    #[test]
    fn mixed_upper_is_union_endpoint() {
        let s = MarginShape::mixed(0.2).unwrap();
        let hi = s.upper(0.05, 0.1).unwrap();
        assert_abs_diff_eq!(hi, 0.07, epsilon = 1e-15);
        let (slo, shi) = scan(
            |m| (0.05 - m).abs() < 0.02 || (0.05 - m).abs() < 0.1 * m.abs(),
            -0.1,
            0.2,
            300_000,
        );
        assert_abs_diff_eq!(hi, shi, epsilon = 2e-6);
        assert_abs_diff_eq!(s.lower(0.05, 0.1).unwrap(), slo, epsilon = 2e-6);
    }

    #[test]
    fn mixed_kappa_matches_numeric_limit() {
        let s = MarginShape::mixed(0.2).unwrap();
        assert_abs_diff_eq!(s.kappa(0.05).unwrap(), 0.2);
        let eps = 1e-7;
        let slope = (s.upper(0.05, eps).unwrap() - 0.05) / eps;
        assert_abs_diff_eq!(slope, 0.2, epsilon = 1e-6);
        // past the crossover the relative part dominates
        assert_abs_diff_eq!(s.kappa(0.7).unwrap(), 0.7);
    }

    #[test]
    fn sign_restricted_shapes_reject_bad_input() {
        assert!(matches!(
            MarginShape::Relative.lower(-0.1, 0.1),
            Err(Error::Domain(_))
        ));
        assert!(MarginShape::Relative.upper(0.0, 0.1).is_err());
        assert!(MarginShape::Relative.upper(0.5, 1.5).is_err());
        assert!(MarginShape::Multiplicative.lower(0.5, 1.0).is_err());
        assert!(MarginShape::Multiplicative.lower(-1.0, 0.1).is_err());
        assert!(MarginShape::Relative.kappa(0.0).is_err());
        assert!(MarginShape::Absolute.lower(0.0, 0.0).is_err());
        assert!(MarginShape::mixed(0.0).is_err());
    }

    #[test]
    fn check_shape_absolute_has_zero_deviation() {
        let r = check_shape(&MarginShape::Absolute, 0.3, &[0.1, 0.01, 0.001]);
        assert!(r.is_ok(), "{:?}", r.problems);
        for row in &r.slopes {
            assert!(row.deviation < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn check_shape_relative_deviation_shrinks() {
        let r = check_shape(&MarginShape::Relative, 0.5, &[0.1, 0.01, 0.001]);
        assert!(r.is_ok());
        let devs: Vec<f64> = r.slopes.iter().map(|s| s.deviation).collect();
        assert!(devs.windows(2).all(|w| w[1] < w[0]), "{devs:?}");
        assert!(devs[2] < 1e-3);
    }

    #[test]
    fn check_shape_flags_non_strict_custom() {
        let shape = MarginShape::Custom(Arc::new(CustomShape {
            name: "flat-top".into(),
            lower: Arc::new(|z, e| z - e),
            upper: Arc::new(|z, _| z),
            report_lower: None,
            report_upper: None,
            kappa: Arc::new(|_| 1.0),
            domain: Interval::REAL_LINE,
        }));
        let r = check_shape(&shape, 0.3, &[0.1, 0.01]);
        assert!(!r.strict_at_mu);
        assert!(!r.is_ok());
    }

    #[test]
    fn custom_reporting_margins_are_used() {
        let shape = MarginShape::Custom(Arc::new(CustomShape {
            name: "wide-report".into(),
            lower: Arc::new(|z, e| z - e),
            upper: Arc::new(|z, e| z + e),
            report_lower: Some(Arc::new(|z, e| z - e - e * e)),
            report_upper: Some(Arc::new(|z, e| z + e + e * e)),
            kappa: Arc::new(|_| 1.0),
            domain: Interval::REAL_LINE,
        }));
        assert_abs_diff_eq!(shape.report_upper(0.0, 0.1).unwrap(), 0.11, epsilon = 1e-15);
        assert_abs_diff_eq!(shape.upper(0.0, 0.1).unwrap(), 0.1, epsilon = 1e-15);
    }

    fn builtin_positive() -> Vec<MarginShape> {
        vec![
            MarginShape::Absolute,
            MarginShape::Relative,
            MarginShape::Mixed { rho: 0.2 },
            MarginShape::Multiplicative,
        ]
    }

    proptest! {
        #[test]
        fn margins_bracket_z(z in 1e-6f64..100.0, eps in 1e-6f64..0.999) {
            for s in builtin_positive() {
                let lo = s.lower(z, eps).unwrap();
                let hi = s.upper(z, eps).unwrap();
                prop_assert!(lo <= z && z <= hi, "{} {lo} {z} {hi}", s.name());
                prop_assert!(lo < z && z < hi);
            }
        }

        #[test]
        fn absolute_is_symmetric(z in -1e3f64..1e3, eps in 1e-6f64..10.0) {
            let s = MarginShape::Absolute;
            let up = s.upper(z, eps).unwrap() - z;
            let down = z - s.lower(z, eps).unwrap();
            prop_assert!((up - down).abs() <= 1e-12 * z.abs().max(1.0));
        }

        #[test]
        fn mixed_brackets_negative_z(z in -100.0f64..100.0, eps in 1e-6f64..0.999) {
            let s = MarginShape::Mixed { rho: 0.3 };
            let lo = s.lower(z, eps).unwrap();
            let hi = s.upper(z, eps).unwrap();
            prop_assert!(lo < z && z < hi);
        }
    }

    /// Slope deviation is O(eps): the fitted constant `dev / eps` stays bounded
    /// across four decades.
    #[test]
    fn slope_convergence_is_linear_in_eps() {
        let grid = [1e-1, 1e-2, 1e-3, 1e-4];
        for (s, mu) in [
            (MarginShape::Absolute, 0.3),
            (MarginShape::Relative, 0.5),
            (MarginShape::Mixed { rho: 0.2 }, 0.05),
            (MarginShape::Mixed { rho: 0.2 }, 0.7),
            (MarginShape::Multiplicative, 0.5),
        ] {
            let r = check_shape(&s, mu, &grid);
            assert!(r.is_ok(), "{}: {:?}", s.name(), r.problems);
            for row in &r.slopes {
                assert!(row.deviation <= 1.2 * row.eps, "{} {row:?}", s.name());
            }
        }
    }
}
