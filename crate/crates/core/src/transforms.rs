//! Cramér conjugation and the critical parameter θ* of a mechanism.
//!
//! Everything is built on closed-form κ, κ′, κ″ from [`crate::mechanisms`];
//! the solvers here only bracket, bisect and Newton-polish.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mechanisms::BranchingMechanism;

/// Bisection stops when the bracket is narrower than this (relative above 1).
pub const THETA_TOL: f64 = 1e-12;
/// Maximal admissible |θ*κ′(θ*) − κ(θ*)|.
pub const RESIDUAL_TOL: f64 = 1e-10;
const MAX_DOUBLINGS: u32 = 1_000_000;
const MAX_NEWTON: u32 = 50;

/// A convex log-Laplace function with closed-form derivatives.
pub trait LogLaplace {
    /// (κ(θ), κ′(θ), κ″(θ)) for θ > 0.
    fn cumulants(&self, theta: f64) -> (f64, f64, f64);
    /// lim_{θ→0⁺} κ(θ).
    fn kappa_at_zero(&self) -> f64;
    /// lim_{θ→0⁺} κ′(θ).
    fn slope_at_zero(&self) -> f64;
    /// lim_{θ→∞} κ′(θ).
    fn max_slope(&self) -> f64;
    /// lim_{θ→∞} [θ·max_slope − κ(θ)], i.e. −log of the intensity at the top
    /// of the support (+∞ when the top is not an atom).
    fn top_gap(&self) -> f64;
    fn theta_max(&self) -> f64 {
        f64::INFINITY
    }
}

impl LogLaplace for BranchingMechanism {
    fn cumulants(&self, theta: f64) -> (f64, f64, f64) {
        self.cumulants_unchecked(theta)
    }
    fn kappa_at_zero(&self) -> f64 {
        self.laplace_at_zero()
    }
    fn slope_at_zero(&self) -> f64 {
        BranchingMechanism::slope_at_zero(self)
    }
    fn max_slope(&self) -> f64 {
        BranchingMechanism::max_slope(self)
    }
    fn top_gap(&self) -> f64 {
        if self.max_slope().is_infinite() {
            f64::INFINITY
        } else {
            -self.mass_at_max().ln()
        }
    }
    fn theta_max(&self) -> f64 {
        BranchingMechanism::theta_max(self)
    }
}

/// Σ w_i κ_i: the log-Laplace function of a block of consecutive eras.
#[derive(Debug, Clone)]
pub struct WeightedSum<'a> {
    pub parts: Vec<(f64, &'a BranchingMechanism)>,
}

impl LogLaplace for WeightedSum<'_> {
    fn cumulants(&self, theta: f64) -> (f64, f64, f64) {
        self.parts.iter().fold((0.0, 0.0, 0.0), |acc, (w, m)| {
            let (k, d1, d2) = m.cumulants_unchecked(theta);
            (acc.0 + w * k, acc.1 + w * d1, acc.2 + w * d2)
        })
    }
    fn kappa_at_zero(&self) -> f64 {
        self.parts
            .iter()
            .map(|(w, m)| w * m.laplace_at_zero())
            .sum()
    }
    fn slope_at_zero(&self) -> f64 {
        self.parts.iter().map(|(w, m)| w * m.slope_at_zero()).sum()
    }
    fn max_slope(&self) -> f64 {
        self.parts.iter().map(|(w, m)| w * m.max_slope()).sum()
    }
    fn top_gap(&self) -> f64 {
        self.parts.iter().map(|(w, m)| w * m.top_gap()).sum()
    }
    fn theta_max(&self) -> f64 {
        self.parts
            .iter()
            .map(|(_, m)| m.theta_max())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Where the supremum defining κ*(a) is attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgTheta {
    Interior(f64),
    /// Supremum approached as θ → 0⁺ (a at or below the slope at zero).
    AtZero,
    /// Supremum approached as θ → ∞ (a at or above the top of the support).
    AtInfinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CramerValue {
    pub a: f64,
    /// κ*(a); `f64::INFINITY` exactly when a exceeds the essential supremum
    /// of the displacements.
    pub kstar: f64,
    pub argtheta: ArgTheta,
}

impl CramerValue {
    pub fn is_infinite(&self) -> bool {
        self.kstar == f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverDiagnostics {
    pub iterations: u32,
    pub residual: f64,
}

/// Critical quantities of one mechanism.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformProfile {
    #[serde(skip)]
    pub mech: BranchingMechanism,
    pub theta_star: f64,
    /// κ(θ*).
    pub kappa: f64,
    pub v: f64,
    pub sigma2: f64,
    pub diagnostics: SolverDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalPoint {
    pub theta: f64,
    pub kappa: f64,
    pub slope: f64,
    pub curvature: f64,
    pub diagnostics: SolverDiagnostics,
}

/// Bracketed bisection followed by Newton polish for an increasing `f`
/// with derivative `df`; the root must lie in (lo, hi).
fn bisect_newton(
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    mut iterations: u32,
) -> (f64, u32) {
    while hi - lo > THETA_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..MAX_NEWTON {
        let fx = f(x);
        let d = df(x);
        if fx == 0.0 || !(d > 0.0) {
            break;
        }
        let next = x - fx / d;
        iterations += 1;
        if !(next > lo && next < hi) {
            break;
        }
        if (next - x).abs() <= f64::EPSILON * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    (x, iterations)
}

/// Root of g(θ) = θκ′(θ) − κ(θ), the minimiser of κ(θ)/θ.
pub fn solve_critical<F: LogLaplace + ?Sized>(f: &F) -> Result<CriticalPoint> {
    let g = |t: f64| {
        let (k, d1, _) = f.cumulants(t);
        t * d1 - k
    };
    let dg = |t: f64| t * f.cumulants(t).2;
    if !(f.top_gap() > 0.0) {
        return Err(Error::NoRoot(format!(
            "theta*kappa'(theta) - kappa(theta) tends to {} <= 0 as theta grows",
            -f.top_gap()
        )));
    }
    let mut iterations = 0u32;
    let mut hi = 1.0_f64.min(f.theta_max());
    let mut doublings = 0u32;
    while !(g(hi) > 0.0) {
        hi *= 2.0;
        doublings += 1;
        iterations += 1;
        if doublings > MAX_DOUBLINGS || !hi.is_finite() || hi > f.theta_max() {
            return Err(Error::NoRoot(
                "bracket doubling found no sign change".into(),
            ));
        }
    }
    let mut lo = if doublings > 0 { hi / 2.0 } else { hi };
    while g(lo) > 0.0 {
        lo /= 2.0;
        iterations += 1;
        if lo < 1e-300 {
            return Err(Error::NoRoot("g stays positive towards zero".into()));
        }
    }
    let (theta, iterations) = bisect_newton(g, dg, lo, hi, iterations);
    let (kappa, slope, curvature) = f.cumulants(theta);
    let residual = (theta * slope - kappa).abs();
    if residual > RESIDUAL_TOL * kappa.abs().max(1.0) {
        return Err(Error::NoRoot(format!(
            "residual {residual} above tolerance at theta = {theta}"
        )));
    }
    Ok(CriticalPoint {
        theta,
        kappa,
        slope,
        curvature,
        diagnostics: SolverDiagnostics {
            iterations,
            residual,
        },
    })
}

/// θ*, v and σ² of a mechanism.
pub fn critical_theta(mech: &BranchingMechanism) -> Result<TransformProfile> {
    let cp = solve_critical(mech)?;
    if !(cp.curvature > 0.0) || !cp.curvature.is_finite() {
        return Err(Error::AssumptionViolated(format!(
            "sigma^2 = {} is not positive and finite",
            cp.curvature
        )));
    }
    Ok(TransformProfile {
        mech: mech.clone(),
        theta_star: cp.theta,
        kappa: cp.kappa,
        v: cp.slope,
        sigma2: cp.curvature,
        diagnostics: cp.diagnostics,
    })
}

/// κ*(a) = sup_{θ>0} [θa − κ(θ)].
pub fn cramer<F: LogLaplace + ?Sized>(f: &F, a: f64) -> Result<CramerValue> {
    if !a.is_finite() {
        return Err(Error::domain(format!("a = {a} is not finite")));
    }
    let top = f.max_slope();
    if a > top {
        return Ok(CramerValue {
            a,
            kstar: f64::INFINITY,
            argtheta: ArgTheta::AtInfinity,
        });
    }
    if a == top {
        return Ok(CramerValue {
            a,
            kstar: f.top_gap(),
            argtheta: ArgTheta::AtInfinity,
        });
    }
    if a <= f.slope_at_zero() {
        return Ok(CramerValue {
            a,
            kstar: -f.kappa_at_zero(),
            argtheta: ArgTheta::AtZero,
        });
    }
    let h = |t: f64| f.cumulants(t).1 - a;
    let dh = |t: f64| f.cumulants(t).2;
    let mut hi = 1.0_f64;
    while !(h(hi) > 0.0) {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::domain(format!("no theta with kappa'(theta) = {a}")));
        }
    }
    let mut lo = hi;
    while h(lo) > 0.0 {
        lo /= 2.0;
        if lo < 1e-300 {
            return Ok(CramerValue {
                a,
                kstar: -f.kappa_at_zero(),
                argtheta: ArgTheta::AtZero,
            });
        }
    }
    let (theta, _) = bisect_newton(h, dh, lo, hi, 0);
    let (k, _, _) = f.cumulants(theta);
    Ok(CramerValue {
        a,
        kstar: theta * a - k,
        argtheta: ArgTheta::Interior(theta),
    })
}
