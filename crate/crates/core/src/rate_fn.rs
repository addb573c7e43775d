//! The large-deviation rate function
//! `M(z, theta) = inf_s { s (theta - z) + psi(s, theta) }`, where `psi` is
//! the centered cumulant generating function. `M` is non-positive, zero only
//! at `z = theta`, and `-inf` when `theta` lies outside the mean domain.

use crate::error::{Error, Result};
use crate::models::{Family, MeanModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMethod {
    ClosedForm,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEval {
    /// `M(z, theta)`; `f64::NEG_INFINITY` stands for `-inf`.
    pub value: f64,
    pub minimizer: Option<f64>,
    pub method: RateMethod,
}

/// `t ln t - t + 1` for `t >= 0`, clipped at zero against rounding.
fn phi(t: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let u = t - 1.0;
    ((1.0 + u) * u.ln_1p() - u).max(0.0)
}

/// Closed-form rate with its minimizer (`None` when the infimum is not
/// attained).
pub fn rate_eval(model: &MeanModel, z: f64, theta: f64) -> Result<RateEval> {
    let closed = |value: f64, minimizer: Option<f64>| RateEval {
        value,
        minimizer,
        method: RateMethod::ClosedForm,
    };
    if model.is_opaque() {
        return Err(Error::Unsupported(
            "rate function of an opaque model".into(),
        ));
    }
    if !model.domain().contains(theta) || z.is_nan() {
        return Ok(closed(f64::NEG_INFINITY, None));
    }
    if z == theta {
        return Ok(closed(0.0, Some(0.0)));
    }
    Ok(match &model.family {
        Family::Bernoulli => {
            if !(0.0..=1.0).contains(&z) {
                closed(f64::NEG_INFINITY, None)
            } else {
                let kl = theta * phi(z / theta) + (1.0 - theta) * phi((1.0 - z) / (1.0 - theta));
                let s = if z > 0.0 && z < 1.0 {
                    Some((z * (1.0 - theta) / (theta * (1.0 - z))).ln())
                } else {
                    None
                };
                closed(-kl, s)
            }
        }
        Family::Poisson => {
            if z < 0.0 {
                closed(f64::NEG_INFINITY, None)
            } else {
                let s = if z > 0.0 {
                    Some((z / theta).ln())
                } else {
                    None
                };
                closed(-theta * phi(z / theta), s)
            }
        }
        Family::Exponential => {
            if z <= 0.0 {
                closed(f64::NEG_INFINITY, None)
            } else {
                let u = z / theta - 1.0;
                closed(-(u - u.ln_1p()).max(0.0), Some(1.0 / theta - 1.0 / z))
            }
        }
        Family::NormalKnownVar { sigma2 } => {
            let d = z - theta;
            closed(-d * d / (2.0 * sigma2), Some(d / sigma2))
        }
        Family::Opaque(_) => unreachable!(),
    })
}

/// `M(z, theta)` from the closed forms.
pub fn rate(model: &MeanModel, z: f64, theta: f64) -> Result<f64> {
    rate_eval(model, z, theta).map(|r| r.value)
}

const BRENT_MAX_ITER: usize = 500;
const BRACKET_S: f64 = 50.0;
const MAX_EXPANSIONS: usize = 40;

/// Brent's parabolic/golden minimizer on `[a, b]`; returns `(x, f(x))`.
fn brent_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, xtol: f64) -> Result<(f64, f64)> {
    const CGOLD: f64 = 0.381_966_011_250_105;
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..BRENT_MAX_ITER {
        let xm = 0.5 * (a + b);
        let tol1 = 1.5e-8 * x.abs() + xtol;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Ok((x, fx));
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv, w, fw, x, fx) = (w, fw, x, fx, u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv, w, fw) = (w, fw, u, fu);
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: BRENT_MAX_ITER,
    })
}

/// Minimizes `g(s) = s (theta - z) + psi(s, theta)` numerically. The bracket
/// starts at `[max(a + h, -50), min(b - h, 50)]` and grows (or moves toward a
/// finite end of the cumulant domain) while the minimizer sits on its edge.
pub fn rate_numeric(model: &MeanModel, z: f64, theta: f64, tol: f64) -> Result<RateEval> {
    if !(tol > 0.0) {
        return Err(Error::domain(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    model.check_mean(theta)?;
    let (a, b) = model.cumulant_domain(theta)?;
    if z == theta {
        return Ok(RateEval {
            value: 0.0,
            minimizer: Some(0.0),
            method: RateMethod::Numeric,
        });
    }
    let g = |s: f64| s * (theta - z) + model.cumulant_unchecked(s, theta);

    let mut span = BRACKET_S;
    let mut h = 1e-6;
    let edge = |end: f64, h: f64| end - h * end.abs().max(1.0);
    for _ in 0..MAX_EXPANSIONS {
        let lo = if a.is_finite() {
            (-edge(-a, h)).max(-span)
        } else {
            -span
        };
        let hi = if b.is_finite() {
            edge(b, h).min(span)
        } else {
            span
        };
        let xtol = 1e-12 * (hi - lo).max(1.0);
        let (s, val) = brent_min(g, lo, hi, xtol)?;
        let near = 1e-6 * (hi - lo);
        let at_lo = s - lo <= near;
        let at_hi = hi - s <= near;
        if !at_lo && !at_hi {
            // polish on a tight bracket so the value error stays well below tol
            let w = 1e-3 * (hi - lo);
            let (s2, v2) = brent_min(g, (s - w).max(lo), (s + w).min(hi), 1e-14)?;
            let (s, val) = if v2 <= val { (s2, v2) } else { (s, val) };
            return Ok(RateEval {
                value: val.min(0.0),
                minimizer: Some(if s.abs() < 1e-12 { 0.0 } else { s }),
                method: RateMethod::Numeric,
            });
        }
        let lo_pinned = at_lo && a.is_finite() && lo > -span;
        let hi_pinned = at_hi && b.is_finite() && hi < span;
        if lo_pinned || hi_pinned {
            h *= 1e-3;
        } else {
            span *= 4.0;
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_EXPANSIONS,
    })
}

/// `-2 V(theta) M(z, theta) / (theta - z)^2`, which tends to 1 as `z -> theta`.
pub fn quad_ratio(model: &MeanModel, z: f64, theta: f64) -> Result<f64> {
    let d = theta - z;
    if d.abs() <= 4.0 * f64::EPSILON * theta.abs().max(1.0) {
        return Err(Error::domain(format!(
            "z = {z} too close to theta = {theta} for the quadratic ratio"
        )));
    }
    let v = model.variance(theta)?;
    let m = rate(model, z, theta)?;
    Ok(-2.0 * v * m / (d * d))
}
