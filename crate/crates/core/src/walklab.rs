//! The tilted random walk of the many-to-one lemma, an exact check of the
//! lemma on finite mechanisms, and estimators for the ballot-type
//! probabilities the log-correction rests on.
//!
//! Barrier events are evaluated either by Monte Carlo over keyed streams or
//! by an exact dynamic program over lattice positions.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{BranchingMechanism, DisplacementLaw, MechanismSpec};
use crate::regimes::EnvironmentSchedule;
use crate::rng::{derive_key, seed_stream, tag, KeyedStream};

/// Enumeration budget of the many-to-one check.
pub const ENUMERATION_LIMIT: f64 = 1e7;
/// Slack of every barrier and window comparison.
pub const BARRIER_EPS: f64 = 1e-9;
/// Monte Carlo estimates with fewer successes are reported as unresolved.
pub const MIN_SUCCESSES: u64 = 10;
const Z95: f64 = 1.959_963_984_540_054;
const MC_CHUNK: u64 = 4096;
const LATTICE_MAX_DENOMINATOR: i64 = 1000;
const CENTERED_TOL: f64 = 1e-9;

/// Neumaier-compensated sum.
#[derive(Debug, Default, Clone, Copy)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

/// One-step law of a random walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepLaw {
    Gaussian {
        mean: f64,
        var: f64,
    },
    /// Density proportional to e^{θx} on [lo, hi]; θ = 0 is the uniform law.
    TiltedUniform {
        lo: f64,
        hi: f64,
        theta: f64,
    },
    /// Finitely many atoms `(value, probability)`.
    Discrete {
        atoms: Vec<(f64, f64)>,
    },
}

/// Positions `offset + unit·K` with integer K of a discrete law.
#[derive(Debug, Clone, PartialEq)]
struct Lattice {
    offset: f64,
    unit: f64,
    /// `(K, probability)` of each atom.
    steps: Vec<(i64, f64)>,
}

fn rational_denominator(r: f64) -> Option<i64> {
    (1..=LATTICE_MAX_DENOMINATOR).find(|&q| {
        let x = r * q as f64;
        (x - x.round()).abs() <= 1e-9 * x.abs().max(1.0)
    })
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl StepLaw {
    /// The simple ±1 walk.
    pub fn simple() -> Self {
        StepLaw::Discrete {
            atoms: vec![(-1.0, 0.5), (1.0, 0.5)],
        }
    }

    pub fn standard_gaussian() -> Self {
        StepLaw::Gaussian {
            mean: 0.0,
            var: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StepLaw::Gaussian { mean, var } => {
                if !mean.is_finite() || !var.is_finite() || *var <= 0.0 {
                    return Err(Error::invalid(
                        "gaussian step: need finite mean and var > 0",
                    ));
                }
            }
            StepLaw::TiltedUniform { lo, hi, theta } => {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi || !theta.is_finite() {
                    return Err(Error::invalid(
                        "tilted_uniform step: need finite lo < hi and finite theta",
                    ));
                }
            }
            StepLaw::Discrete { atoms } => {
                if atoms
                    .iter()
                    .any(|(x, p)| !x.is_finite() || !p.is_finite() || *p < 0.0)
                {
                    return Err(Error::invalid(
                        "discrete step: atoms must be finite with p >= 0",
                    ));
                }
                let s: f64 = atoms.iter().map(|a| a.1).sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "discrete step: probabilities sum to {s}"
                    )));
                }
                if self.variance() <= 0.0 {
                    return Err(Error::invalid("discrete step: degenerate law"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            StepLaw::Gaussian { mean, .. } => *mean,
            StepLaw::TiltedUniform { lo, hi, theta } => {
                DisplacementLaw::Uniform { lo: *lo, hi: *hi }
                    .log_mgf_moments(*theta)
                    .1
            }
            StepLaw::Discrete { atoms } => {
                let mut s = Sum::default();
                atoms.iter().for_each(|(x, p)| s.add(x * p));
                s.value()
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            StepLaw::Gaussian { var, .. } => *var,
            StepLaw::TiltedUniform { lo, hi, theta } => {
                DisplacementLaw::Uniform { lo: *lo, hi: *hi }
                    .log_mgf_moments(*theta)
                    .2
            }
            StepLaw::Discrete { atoms } => {
                let m = self.mean();
                let mut s = Sum::default();
                atoms.iter().for_each(|(x, p)| s.add(p * (x - m) * (x - m)));
                s.value()
            }
        }
    }

    /// The same law translated by `-d`.
    pub fn shifted(&self, d: f64) -> Self {
        match self {
            StepLaw::Gaussian { mean, var } => StepLaw::Gaussian {
                mean: mean - d,
                var: *var,
            },
            StepLaw::TiltedUniform { lo, hi, theta } => StepLaw::TiltedUniform {
                lo: lo - d,
                hi: hi - d,
                theta: *theta,
            },
            StepLaw::Discrete { atoms } => StepLaw::Discrete {
                atoms: atoms.iter().map(|&(x, p)| (x - d, p)).collect(),
            },
        }
    }

    pub fn centered(&self) -> Self {
        self.shifted(self.mean())
    }

    fn is_centered(&self) -> bool {
        self.mean().abs() <= CENTERED_TOL * self.variance().sqrt().max(1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            StepLaw::Gaussian { mean, var } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + var.sqrt() * z
            }
            StepLaw::TiltedUniform { lo, hi, theta } => {
                let u: f64 = rng.random();
                let c = theta * (hi - lo);
                if c.abs() < 1e-12 {
                    lo + (hi - lo) * u
                } else if c > 0.0 {
                    // inverse cdf anchored at hi: no overflow for large c
                    (hi + (u + (1.0 - u) * (-c).exp()).ln() / theta).clamp(*lo, *hi)
                } else {
                    (lo + (1.0 - u + u * c.exp()).ln() / theta).clamp(*lo, *hi)
                }
            }
            StepLaw::Discrete { atoms } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for &(x, p) in atoms {
                    acc += p;
                    if u < acc {
                        return x;
                    }
                }
                atoms.iter().rev().find(|a| a.1 > 0.0).map(|a| a.0).unwrap()
            }
        }
    }

    fn lattice(&self) -> Option<Lattice> {
        let StepLaw::Discrete { atoms } = self else {
            return None;
        };
        let atoms: Vec<(f64, f64)> = atoms.iter().copied().filter(|a| a.1 > 0.0).collect();
        let offset = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
        let diffs: Vec<f64> = atoms
            .iter()
            .map(|a| a.0 - offset)
            .filter(|d| *d > 0.0)
            .collect();
        let base = diffs.iter().copied().fold(f64::INFINITY, f64::min);
        if !base.is_finite() {
            return None;
        }
        let mut denom = 1i64;
        for d in &diffs {
            let q = rational_denominator(d / base)?;
            denom = denom / gcd(denom, q) * q;
        }
        let fine = base / denom as f64;
        let ks: Vec<i64> = diffs.iter().map(|d| (d / fine).round() as i64).collect();
        let g = ks.iter().fold(0, |g, &k| gcd(g, k));
        let unit = fine * g as f64;
        let steps = atoms
            .iter()
            .map(|&(x, p)| (((x - offset) / unit).round() as i64, p))
            .collect();
        Some(Lattice {
            offset,
            unit,
            steps,
        })
    }
}

/// The tilted step law of one mechanism: mass e^{θℓ − κ(θ)} against the
/// intensity of ℒ.
pub fn tilted_step(mech: &BranchingMechanism, theta: f64) -> Result<StepLaw> {
    let kappa = mech.laplace(theta)?;
    Ok(match mech.spec() {
        MechanismSpec::ExplicitFinite { .. } => {
            let atoms = mech
                .intensity()
                .unwrap()
                .iter()
                .map(|&(l, m)| (l, m * (theta * l - kappa).exp()))
                .collect();
            StepLaw::Discrete { atoms }
        }
        _ => match mech.displacement().unwrap() {
            DisplacementLaw::Gaussian { mean, var } => StepLaw::Gaussian {
                mean: mean + theta * var,
                var: *var,
            },
            DisplacementLaw::Uniform { lo, hi } => StepLaw::TiltedUniform {
                lo: *lo,
                hi: *hi,
                theta,
            },
            d => {
                // the child count is independent of the displacements, so the
                // tilt only reweights the displacement law
                let (lg, _, _) = d.log_mgf_moments(theta);
                let atoms = d
                    .points()
                    .unwrap()
                    .iter()
                    .map(|&(x, p)| (x, p * (theta * x - lg).exp()))
                    .collect();
                StepLaw::Discrete { atoms }
            }
        },
    })
}

/// The walk S_n of the many-to-one lemma for a schedule and a tilt θ.
#[derive(Debug, Clone)]
pub struct TiltedWalk {
    schedule: EnvironmentSchedule,
    theta: f64,
    laws: Vec<StepLaw>,
    kappas: Vec<f64>,
}

impl TiltedWalk {
    pub fn new(schedule: EnvironmentSchedule, theta: f64) -> Result<Self> {
        let mut laws = Vec::new();
        let mut kappas = Vec::new();
        for mech in schedule.mechanisms() {
            laws.push(tilted_step(mech, theta)?);
            kappas.push(mech.laplace(theta)?);
        }
        Ok(Self {
            schedule,
            theta,
            laws,
            kappas,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn schedule(&self) -> &EnvironmentSchedule {
        &self.schedule
    }

    /// Step law of each era.
    pub fn era_laws(&self) -> &[StepLaw] {
        &self.laws
    }

    /// κ_i(θ) of each era.
    pub fn era_kappas(&self) -> &[f64] {
        &self.kappas
    }

    /// Law of X_k, 1 ≤ k ≤ n, in an n-step walk.
    pub fn step_law(&self, n: u64, k: u64) -> &StepLaw {
        &self.laws[self.schedule.era_of_step(n, k)]
    }

    /// K_1^k(θ) = Σ_{j ≤ k} κ_j(θ) in an n-step walk.
    pub fn kappa_sum(&self, n: u64, k: u64) -> f64 {
        let mut s = Sum::default();
        (1..=k).for_each(|j| s.add(self.kappas[self.schedule.era_of_step(n, j)]));
        s.value()
    }

    /// (S_1, …, S_n).
    pub fn sample_path<R: Rng + ?Sized>(&self, n: u64, rng: &mut R) -> Vec<f64> {
        let mut s = 0.0;
        (1..=n)
            .map(|k| {
                s += self.step_law(n, k).sample(rng);
                s
            })
            .collect()
    }
}

/// Path functionals with exact finite sums on both sides of the lemma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathFunctional {
    One,
    /// Π_j 1{lo_j ≤ s_j ≤ hi_j}; steps beyond `bounds` are unconstrained.
    ProductBox {
        bounds: Vec<(f64, f64)>,
    },
    /// e^{λ s_n}.
    ExpLast {
        lambda: f64,
    },
    /// 1{max_j s_j ≤ level}.
    MaxAtMost {
        level: f64,
    },
    /// 1{max_j s_j ≥ level}.
    MaxAtLeast {
        level: f64,
    },
}

impl PathFunctional {
    pub fn eval(&self, path: &[f64]) -> f64 {
        let mut aux = f64::NEG_INFINITY;
        for (j, &s) in path.iter().enumerate() {
            match self.advance(j, s, aux) {
                Some(a) => aux = a,
                None => return 0.0,
            }
        }
        self.finish(path.last().copied().unwrap_or(0.0), aux)
    }

    /// Running state after step j + 1 at position s; `None` kills the path.
    fn advance(&self, j: usize, s: f64, aux: f64) -> Option<f64> {
        match self {
            PathFunctional::ProductBox { bounds } => match bounds.get(j) {
                Some(&(lo, hi)) if s < lo || s > hi => None,
                _ => Some(aux),
            },
            PathFunctional::MaxAtMost { level } if s > *level => None,
            PathFunctional::MaxAtLeast { .. } => Some(aux.max(s)),
            _ => Some(aux),
        }
    }

    fn finish(&self, last: f64, aux: f64) -> f64 {
        match self {
            PathFunctional::ExpLast { lambda } => (lambda * last).exp(),
            PathFunctional::MaxAtLeast { level } if aux < *level => 0.0,
            _ => 1.0,
        }
    }

    /// A random member of the test family for n steps whose displacements
    /// lie in [-scale, scale].
    pub fn random<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Self {
        let mut u = || rng.random::<f64>();
        match (u() * 4.0) as u32 {
            0 => {
                let bounds = (1..=n)
                    .map(|j| {
                        let reach = j as f64 * scale;
                        let c = reach * (2.0 * u() - 1.0);
                        let w = reach * u();
                        (c - w, c + w)
                    })
                    .collect();
                PathFunctional::ProductBox { bounds }
            }
            1 => PathFunctional::ExpLast { lambda: u() - 0.5 },
            2 => PathFunctional::MaxAtMost {
                level: n as f64 * scale * (2.0 * u() - 1.0),
            },
            _ => PathFunctional::MaxAtLeast {
                level: n as f64 * scale * (2.0 * u() - 1.0),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ManyToOneReport {
    pub tree_value: f64,
    pub walk_value: f64,
    pub abs_diff: f64,
}

/// Both sides of the many-to-one lemma for an explicit finite mechanism.
pub fn many_to_one_check(
    mech: &BranchingMechanism,
    theta: f64,
    n: usize,
    f: &PathFunctional,
) -> Result<ManyToOneReport> {
    many_to_one_check_with(mech, theta, n, f, 0.0)
}

/// As [`many_to_one_check`], with the walk's step law built at θ + `tilt_offset`
/// while the weight keeps θ. A nonzero offset breaks the identity.
pub fn many_to_one_check_with(
    mech: &BranchingMechanism,
    theta: f64,
    n: usize,
    f: &PathFunctional,
    tilt_offset: f64,
) -> Result<ManyToOneReport> {
    let MechanismSpec::ExplicitFinite { outcomes } = mech.spec() else {
        return Err(Error::invalid(
            "many-to-one check needs an explicit_finite mechanism",
        ));
    };
    let branches: usize = outcomes.iter().map(|o| o.displacements.len()).sum();
    let terms = (branches as f64).powi(n as i32);
    if terms > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            terms,
            limit: ENUMERATION_LIMIT,
        });
    }
    let kappa = mech.laplace(theta)?;

    // tree side: every lineage of every outcome sequence, with multiplicity
    let mut tree = Sum::default();
    let mut path = Vec::with_capacity(n);
    enumerate_lineages(outcomes, n, 1.0, &mut path, &mut |p, w| {
        tree.add(w * f.eval(p))
    });

    // walk side: exact DP over (position, running state) with tilted steps
    let law = tilted_step(mech, theta + tilt_offset)?;
    let StepLaw::Discrete { atoms } = law else {
        unreachable!()
    };
    let mut states: HashMap<(u64, u64), (f64, f64, f64)> = HashMap::new();
    states.insert(
        (0f64.to_bits(), f64::NEG_INFINITY.to_bits()),
        (0.0, f64::NEG_INFINITY, 1.0),
    );
    for j in 0..n {
        let mut next: HashMap<(u64, u64), (f64, f64, f64)> = HashMap::new();
        for &(s, aux, w) in states.values() {
            for &(x, q) in &atoms {
                let s2 = s + x;
                if let Some(a2) = f.advance(j, s2, aux) {
                    next.entry((s2.to_bits(), a2.to_bits()))
                        .or_insert((s2, a2, 0.0))
                        .2 += w * q;
                }
            }
        }
        states = next;
    }
    let mut walk = Sum::default();
    let mut entries: Vec<_> = states.into_values().collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for (s, aux, w) in entries {
        walk.add(w * (-theta * s + n as f64 * kappa).exp() * f.finish(s, aux));
    }
    let (tree_value, walk_value) = (tree.value(), walk.value());
    Ok(ManyToOneReport {
        tree_value,
        walk_value,
        abs_diff: (tree_value - walk_value).abs(),
    })
}

fn enumerate_lineages(
    outcomes: &[crate::mechanisms::Outcome],
    n: usize,
    weight: f64,
    path: &mut Vec<f64>,
    visit: &mut dyn FnMut(&[f64], f64),
) {
    if path.len() == n {
        visit(path, weight);
        return;
    }
    let here = path.last().copied().unwrap_or(0.0);
    for o in outcomes {
        for &l in &o.displacements {
            path.push(here + l);
            enumerate_lineages(outcomes, n, weight * o.prob, path, visit);
            path.pop();
        }
    }
}

/// Largest |displacement| of an explicit finite mechanism.
fn displacement_scale(mech: &BranchingMechanism) -> f64 {
    mech.intensity().map_or(1.0, |pts| {
        pts.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1e-3)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManyToOneCase {
    pub theta: f64,
    pub n: usize,
    pub functional: PathFunctional,
    #[serde(flatten)]
    pub report: ManyToOneReport,
}

/// The lemma on every θ and n ≤ `n_max`, over `count` random functionals
/// plus f ≡ 1 for each pair.
pub fn many_to_one_suite(
    mech: &BranchingMechanism,
    thetas: &[f64],
    n_max: usize,
    count: usize,
    seed: u64,
    tilt_offset: f64,
) -> Result<Vec<ManyToOneCase>> {
    let scale = displacement_scale(mech);
    let mut out = Vec::new();
    for (ti, &theta) in thetas.iter().enumerate() {
        for n in 1..=n_max {
            let mut rng = KeyedStream::new(derive_key(
                seed_stream(seed, (ti * 64 + n) as u64),
                tag::FUNCTIONAL,
            ));
            let fs = std::iter::once(PathFunctional::One)
                .chain((0..count).map(|_| PathFunctional::random(n, scale, &mut rng)))
                .collect::<Vec<_>>();
            for functional in fs {
                let report = many_to_one_check_with(mech, theta, n, &functional, tilt_offset)?;
                out.push(ManyToOneCase {
                    theta,
                    n,
                    functional,
                    report,
                });
            }
        }
    }
    Ok(out)
}

/// Barrier families for walks started at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Barrier {
    /// T_j ≥ −y for j ≤ n.
    Constant { y: f64 },
    /// T_j ≥ −j^α − y for j ≤ n.
    PowerLaw { alpha: f64, y: f64 },
    /// W_j ≥ −φ_n(j) − y for j ≤ n and W_n ≤ −φ_n(n) − y + h, with
    /// φ_n(k) = A(log(n+1) − log(n−k+1)) and n = p + q + r.
    LogBridge {
        a: f64,
        p: u64,
        q: u64,
        r: u64,
        y: f64,
        h: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    pub barrier: Barrier,
    pub n: u64,
}

impl BarrierSpec {
    pub fn new(barrier: Barrier, n: u64) -> Result<Self> {
        let spec = Self { barrier, n };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.barrier {
            Barrier::Constant { y } if !(y >= 0.0 && y.is_finite()) => {
                Err(Error::invalid("barrier: need y >= 0"))
            }
            Barrier::PowerLaw { alpha, y } => {
                if !(alpha > 0.0 && alpha < 0.5) {
                    Err(Error::invalid(format!(
                        "power-law barrier: alpha = {alpha} outside (0, 1/2)"
                    )))
                } else if !(y >= 0.0 && y.is_finite()) {
                    Err(Error::invalid("barrier: need y >= 0"))
                } else {
                    Ok(())
                }
            }
            Barrier::LogBridge { a, p, q, r, y, h } => {
                if p + q + r != self.n {
                    Err(Error::invalid(format!(
                        "log bridge: p + q + r = {} but n = {}",
                        p + q + r,
                        self.n
                    )))
                } else if !(a.is_finite() && y >= 0.0 && y.is_finite() && h >= 0.0 && h.is_finite())
                {
                    Err(Error::invalid(
                        "log bridge: need finite A, y >= 0 and h >= 0",
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn event(&self) -> Event {
        let n = self.n;
        match self.barrier {
            Barrier::Constant { y } => Event {
                lower: Lower::Constant(y),
                window: None,
                scale: (n as f64).sqrt(),
            },
            Barrier::PowerLaw { alpha, y } => Event {
                lower: Lower::PowerLaw { alpha, y },
                window: None,
                scale: (n as f64).sqrt(),
            },
            Barrier::LogBridge { a, p, q, r, y, h } => {
                let end = -log_bridge_phi(a, n, n) - y;
                Event {
                    lower: Lower::LogBridge { a, n, y },
                    window: Some((f64::NEG_INFINITY, end + h)),
                    scale: (p as f64 * q as f64 * r as f64).sqrt(),
                }
            }
        }
    }
}

/// φ_n(k) = A(log(n+1) − log(n−k+1)).
pub fn log_bridge_phi(a: f64, n: u64, k: u64) -> f64 {
    a * (((n + 1) as f64).ln() - ((n - k + 1) as f64).ln())
}

#[derive(Debug, Clone, Copy)]
enum Lower {
    None,
    Constant(f64),
    PowerLaw { alpha: f64, y: f64 },
    LogBridge { a: f64, n: u64, y: f64 },
}

impl Lower {
    fn at(&self, j: u64) -> f64 {
        match *self {
            Lower::None => f64::NEG_INFINITY,
            Lower::Constant(y) => -y,
            Lower::PowerLaw { alpha, y } => -(j as f64).powf(alpha) - y,
            Lower::LogBridge { a, n, y } => -log_bridge_phi(a, n, j) - y,
        }
    }
}

/// {T_j ≥ lower(j), j ≤ n} ∩ {T_n ∈ window}.
#[derive(Debug, Clone, Copy)]
struct Event {
    lower: Lower,
    window: Option<(f64, f64)>,
    /// Normaliser of the scaled estimate.
    scale: f64,
}

/// Step laws of consecutive pieces of a walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseWalk {
    pub pieces: Vec<(StepLaw, u64)>,
}

impl PiecewiseWalk {
    pub fn homogeneous(law: StepLaw, n: u64) -> Self {
        Self {
            pieces: vec![(law, n)],
        }
    }

    /// The X, Y, Z walk run for p, q and r steps.
    pub fn three_piece(laws: [StepLaw; 3], p: u64, q: u64, r: u64) -> Self {
        let [x, y, z] = laws;
        Self {
            pieces: vec![(x, p), (y, q), (z, r)],
        }
    }

    pub fn len(&self) -> u64 {
        self.pieces.iter().map(|p| p.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        for (law, _) in &self.pieces {
            law.validate()?;
            if !law.is_centered() {
                return Err(Error::invalid(format!(
                    "walk steps must be centered; mean is {}",
                    law.mean()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    MonteCarlo { replicates: u64, seed: u64 },
    ExactDp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbabilityEstimate {
    pub n: u64,
    pub estimate: f64,
    pub stderr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// √n·P̂ for ballot and window events, √(pqr)·P̂ for bridges.
    pub scaled_estimate: f64,
    pub replicates: Option<u64>,
    pub successes: Option<u64>,
    /// False when a Monte Carlo estimate rests on fewer than
    /// [`MIN_SUCCESSES`] successes.
    pub resolved: bool,
    pub exact: bool,
}

fn estimate(walk: &PiecewiseWalk, event: Event, method: Method) -> Result<ProbabilityEstimate> {
    walk.validate()?;
    let n = walk.len();
    match method {
        Method::ExactDp => {
            let p = exact_dp(walk, event)?;
            Ok(ProbabilityEstimate {
                n,
                estimate: p,
                stderr: 0.0,
                ci_lo: p,
                ci_hi: p,
                scaled_estimate: event.scale * p,
                replicates: None,
                successes: None,
                resolved: true,
                exact: true,
            })
        }
        Method::MonteCarlo { replicates, seed } => {
            if replicates == 0 {
                return Err(Error::invalid("monte carlo needs at least one replicate"));
            }
            let hits = monte_carlo(walk, event, replicates, seed);
            let p = hits as f64 / replicates as f64;
            let se = (p * (1.0 - p) / replicates as f64).sqrt();
            Ok(ProbabilityEstimate {
                n,
                estimate: p,
                stderr: se,
                ci_lo: (p - Z95 * se).max(0.0),
                ci_hi: (p + Z95 * se).min(1.0),
                scaled_estimate: event.scale * p,
                replicates: Some(replicates),
                successes: Some(hits),
                resolved: hits >= MIN_SUCCESSES,
                exact: false,
            })
        }
    }
}

fn monte_carlo(walk: &PiecewiseWalk, event: Event, replicates: u64, seed: u64) -> u64 {
    let chunks = replicates.div_ceil(MC_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let hi = ((c + 1) * MC_CHUNK).min(replicates);
            (c * MC_CHUNK..hi)
                .filter(|&r| {
                    let mut rng = KeyedStream::new(derive_key(seed_stream(seed, r), tag::WALK));
                    simulate_event(walk, event, &mut rng)
                })
                .count() as u64
        })
        .sum()
}

fn simulate_event(walk: &PiecewiseWalk, event: Event, rng: &mut KeyedStream) -> bool {
    let mut s = 0.0;
    let mut j = 0u64;
    for (law, len) in &walk.pieces {
        match (event.lower, law) {
            // without a barrier a Gaussian piece is one Gaussian draw
            (Lower::None, StepLaw::Gaussian { mean, var }) => {
                let z: f64 = StandardNormal.sample(rng);
                s += *len as f64 * mean + (*len as f64 * var).sqrt() * z;
                j += len;
            }
            _ => {
                for _ in 0..*len {
                    s += law.sample(rng);
                    j += 1;
                    if s < event.lower.at(j) - BARRIER_EPS {
                        return false;
                    }
                }
            }
        }
    }
    event
        .window
        .is_none_or(|(lo, hi)| s >= lo - BARRIER_EPS && s <= hi + BARRIER_EPS)
}

/// Largest unit of which every lattice unit is an integer multiple.
fn common_unit(lattices: &[Lattice]) -> Option<f64> {
    let base = lattices[0].unit;
    let mut denom = 1i64;
    for l in lattices {
        let q = rational_denominator(l.unit / base)?;
        denom = denom / gcd(denom, q) * q;
    }
    let fine = base / denom as f64;
    let g = lattices
        .iter()
        .fold(0, |g, l| gcd(g, (l.unit / fine).round() as i64));
    Some(fine * g as f64)
}

/// Exact probability of the event for a walk on a common lattice; states
/// killed by the barrier are dropped each step.
fn exact_dp(walk: &PiecewiseWalk, event: Event) -> Result<f64> {
    let lattices = walk
        .pieces
        .iter()
        .map(|(law, _)| {
            law.lattice()
                .ok_or_else(|| Error::invalid("exact DP needs discrete lattice steps"))
        })
        .collect::<Result<Vec<_>>>()?;
    let unit = common_unit(&lattices)
        .ok_or_else(|| Error::invalid("exact DP needs steps on one common lattice"))?;
    let lattices: Vec<Lattice> = lattices
        .into_iter()
        .map(|l| {
            let m = (l.unit / unit).round() as i64;
            Lattice {
                steps: l.steps.iter().map(|&(k, p)| (k * m, p)).collect(),
                unit,
                ..l
            }
        })
        .collect();
    // position = origin + unit·K; `mass[K - lo]`
    let mut origin = 0.0;
    let mut lo = 0i64;
    let mut mass = vec![1.0];
    let mut j = 0u64;
    for ((_, len), lat) in walk.pieces.iter().zip(&lattices) {
        let kmax = lat.steps.iter().map(|s| s.0).max().unwrap();
        for _ in 0..*len {
            j += 1;
            origin += lat.offset;
            let mut next = vec![0.0; mass.len() + kmax as usize];
            for (i, &m) in mass.iter().enumerate() {
                if m != 0.0 {
                    for &(k, p) in &lat.steps {
                        next[i + k as usize] += m * p;
                    }
                }
            }
            let bound = event.lower.at(j) - BARRIER_EPS;
            let first = next
                .iter()
                .enumerate()
                .position(|(i, &m)| m != 0.0 && origin + unit * (lo + i as i64) as f64 >= bound);
            match first {
                Some(f) => {
                    next.drain(..f);
                    lo += f as i64;
                }
                None => return Ok(0.0),
            }
            while next.last() == Some(&0.0) {
                next.pop();
            }
            mass = next;
        }
    }
    let mut total = Sum::default();
    for (i, &m) in mass.iter().enumerate() {
        let x = origin + unit * (lo + i as i64) as f64;
        if event
            .window
            .is_none_or(|(a, b)| x >= a - BARRIER_EPS && x <= b + BARRIER_EPS)
        {
            total.add(m);
        }
    }
    Ok(total.value())
}

/// P(T_j ≥ −y, j ≤ n).
pub fn ballot_probability(
    law: &StepLaw,
    y: f64,
    n: u64,
    method: Method,
) -> Result<ProbabilityEstimate> {
    barrier_probability(
        &PiecewiseWalk::homogeneous(law.clone(), n),
        &BarrierSpec::new(Barrier::Constant { y }, n)?,
        method,
    )
}

/// P(T_j ≥ −j^α − y, j ≤ n).
pub fn ballot_powerlaw(
    law: &StepLaw,
    alpha: f64,
    y: f64,
    n: u64,
    method: Method,
) -> Result<ProbabilityEstimate> {
    let spec = BarrierSpec::new(Barrier::PowerLaw { alpha, y }, n)?;
    barrier_probability(&PiecewiseWalk::homogeneous(law.clone(), n), &spec, method)
}

/// The three-piece bridge event above −φ_n − y ending within h of the barrier.
#[allow(clippy::too_many_arguments)]
pub fn bridge_probability(
    laws: [StepLaw; 3],
    a: f64,
    p: u64,
    q: u64,
    r: u64,
    y: f64,
    h: f64,
    method: Method,
) -> Result<ProbabilityEstimate> {
    let spec = BarrierSpec::new(Barrier::LogBridge { a, p, q, r, y, h }, p + q + r)?;
    barrier_probability(&PiecewiseWalk::three_piece(laws, p, q, r), &spec, method)
}

/// Any barrier event for a walk of matching length.
pub fn barrier_probability(
    walk: &PiecewiseWalk,
    spec: &BarrierSpec,
    method: Method,
) -> Result<ProbabilityEstimate> {
    spec.validate()?;
    if walk.len() != spec.n {
        return Err(Error::invalid(format!(
            "walk has {} steps, barrier horizon is {}",
            walk.len(),
            spec.n
        )));
    }
    if let Barrier::LogBridge { p, q, r, .. } = spec.barrier {
        let lens: Vec<u64> = walk.pieces.iter().map(|x| x.1).collect();
        if lens != [p, q, r] {
            return Err(Error::invalid(
                "log bridge: walk pieces must have lengths p, q, r",
            ));
        }
    }
    estimate(walk, spec.event(), method)
}

/// P(T_n ∈ [r, r + h]).
pub fn stone_window(
    law: &StepLaw,
    n: u64,
    r: f64,
    h: f64,
    method: Method,
) -> Result<ProbabilityEstimate> {
    if !(h >= 0.0 && h.is_finite() && r.is_finite()) {
        return Err(Error::invalid("window: need finite r and h >= 0"));
    }
    let event = Event {
        lower: Lower::None,
        window: Some((r, r + h)),
        scale: (n as f64).sqrt(),
    };
    estimate(&PiecewiseWalk::homogeneous(law.clone(), n), event, method)
}

/// P(T_j ≥ −y, j ≤ k) for every k ≤ n in one pass of the exact DP.
pub fn ballot_exact_curve(law: &StepLaw, y: f64, n: u64) -> Result<Vec<f64>> {
    // the DP is cheap enough that running it per horizon keeps one code path
    let lat = law
        .lattice()
        .ok_or_else(|| Error::invalid("exact DP needs discrete lattice steps"))?;
    law.validate()?;
    let kmax = lat.steps.iter().map(|s| s.0).max().unwrap() as usize;
    let mut origin = 0.0;
    let mut lo = 0i64;
    let mut mass = vec![1.0];
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(1.0);
    for _ in 0..n {
        origin += lat.offset;
        let mut next = vec![0.0; mass.len() + kmax];
        for (i, &m) in mass.iter().enumerate() {
            for &(k, p) in &lat.steps {
                next[i + k as usize] += m * p;
            }
        }
        let bound = -y - BARRIER_EPS;
        let f = next
            .iter()
            .enumerate()
            .position(|(i, _)| origin + lat.unit * (lo + i as i64) as f64 >= bound)
            .unwrap_or(next.len());
        next.drain(..f);
        lo += f as i64;
        let mut s = Sum::default();
        next.iter().for_each(|&m| s.add(m));
        out.push(s.value());
        mass = next;
    }
    Ok(out)
}

/// OLS slope of log p against log n.
pub fn loglog_slope(points: &[(u64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::Outcome;

    fn pm1() -> BranchingMechanism {
        BranchingMechanism::explicit(&[(1.0, &[1.0, -1.0])]).unwrap()
    }

    fn three_outcome() -> BranchingMechanism {
        BranchingMechanism::explicit(&[
            (0.3, &[-1.0, 0.5]),
            (0.5, &[1.0]),
            (0.2, &[-0.5, 0.0, 2.0]),
        ])
        .unwrap()
    }

    #[test]
    fn tilted_gaussian_is_shifted_gaussian() {
        let mech = BranchingMechanism::binary_gaussian(0.3, 2.0).unwrap();
        let law = tilted_step(&mech, 0.7).unwrap();
        assert_eq!(
            law,
            StepLaw::Gaussian {
                mean: 0.3 + 0.7 * 2.0,
                var: 2.0
            }
        );
        let (d1, d2) = mech.laplace_derivatives(0.7).unwrap();
        assert!((law.mean() - d1).abs() < 1e-9 && (law.variance() - d2).abs() < 1e-9);
    }

    #[test]
    fn tilted_moments_match_derivatives() {
        let uni = BranchingMechanism::new(MechanismSpec::FixedCountIid {
            count: 2,
            displacement: DisplacementLaw::Uniform { lo: -1.0, hi: 2.0 },
        })
        .unwrap();
        let two = BranchingMechanism::new(MechanismSpec::RandomCountIid {
            count_probs: vec![0.5, 0.5],
            displacement: DisplacementLaw::TwoPoint {
                values: [-1.0, 1.5],
                probs: [0.4, 0.6],
            },
        })
        .unwrap();
        for mech in [uni, two, three_outcome()] {
            for theta in [0.2, 1.0, 3.0] {
                let law = tilted_step(&mech, theta).unwrap();
                let (d1, d2) = mech.laplace_derivatives(theta).unwrap();
                assert!((law.mean() - d1).abs() < 1e-9, "{law:?}");
                assert!((law.variance() - d2).abs() < 1e-9, "{law:?}");
            }
        }
    }

    #[test]
    fn tilted_uniform_sampling_matches_moments() {
        let law = StepLaw::TiltedUniform {
            lo: -1.0,
            hi: 2.0,
            theta: 1.5,
        };
        let mut rng = KeyedStream::new(9);
        let r = 100_000;
        let xs: Vec<f64> = (0..r).map(|_| law.sample(&mut rng)).collect();
        let m = xs.iter().sum::<f64>() / r as f64;
        assert!((m - law.mean()).abs() < 3.0 * (law.variance() / r as f64).sqrt());
        assert!(xs.iter().all(|x| (-1.0..=2.0).contains(x)));
    }

    #[test]
    fn lattice_detection() {
        let lat = StepLaw::simple().lattice().unwrap();
        assert_eq!((lat.offset, lat.unit), (-1.0, 2.0));
        let lat = StepLaw::Discrete {
            atoms: vec![(-1.0, 0.2), (0.5, 0.3), (2.0, 0.5)],
        }
        .lattice()
        .unwrap();
        assert_eq!(lat.unit, 1.5);
        let lat = StepLaw::Discrete {
            atoms: vec![(0.0, 0.5), (2.0, 0.25), (3.0, 0.25)],
        }
        .lattice()
        .unwrap();
        assert_eq!(lat.unit, 1.0);
        assert!(StepLaw::standard_gaussian().lattice().is_none());
    }

    #[test]
    fn many_to_one_examples() {
        let r = many_to_one_check(&pm1(), 1.0, 1, &PathFunctional::One).unwrap();
        assert!((r.tree_value - 2.0).abs() < 1e-14 && r.abs_diff < 1e-14);
        let both_up = PathFunctional::ProductBox {
            bounds: vec![(1.0, 1.0), (2.0, 2.0)],
        };
        let r = many_to_one_check(&pm1(), 0.5, 2, &both_up).unwrap();
        assert!(
            (r.tree_value - 1.0).abs() < 1e-14 && r.abs_diff < 1e-14,
            "{r:?}"
        );
    }

    #[test]
    fn tree_side_counts_expected_population() {
        let m = three_outcome();
        for n in 1..=4 {
            let r = many_to_one_check(&m, 1.0, n, &PathFunctional::One).unwrap();
            assert!((r.tree_value - m.mean_count().powi(n as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn functional_family_evaluates_paths() {
        let p = [1.0, 0.0, 2.0];
        assert_eq!(PathFunctional::MaxAtMost { level: 2.0 }.eval(&p), 1.0);
        assert_eq!(PathFunctional::MaxAtMost { level: 1.5 }.eval(&p), 0.0);
        assert_eq!(PathFunctional::MaxAtLeast { level: 2.0 }.eval(&p), 1.0);
        assert_eq!(PathFunctional::MaxAtLeast { level: 2.5 }.eval(&p), 0.0);
        assert_eq!(PathFunctional::ExpLast { lambda: 0.5 }.eval(&p), 1f64.exp());
        let b = PathFunctional::ProductBox {
            bounds: vec![(0.5, 1.0), (-1.0, 0.0)],
        };
        assert_eq!(b.eval(&p), 1.0);
        assert_eq!(b.eval(&[1.0, 0.5, 0.0]), 0.0);
    }

    #[test]
    fn enumeration_budget() {
        let err = many_to_one_check(&pm1(), 1.0, 24, &PathFunctional::One).unwrap_err();
        assert!(matches!(err, Error::TooLarge { .. }));
        let gauss = BranchingMechanism::binary_gaussian(0.0, 1.0).unwrap();
        assert!(matches!(
            many_to_one_check(&gauss, 1.0, 2, &PathFunctional::One),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn wrong_tilt_breaks_the_identity() {
        let f = PathFunctional::ExpLast { lambda: 0.3 };
        let r = many_to_one_check_with(&three_outcome(), 1.0, 3, &f, 0.1).unwrap();
        assert!(r.abs_diff > 1e-3, "{r:?}");
    }

    #[test]
    fn simple_walk_examples() {
        let e = ballot_probability(&StepLaw::simple(), 0.0, 2, Method::ExactDp).unwrap();
        assert_eq!(e.estimate, 0.5);
        let w = stone_window(&StepLaw::simple(), 10, 0.0, 0.0, Method::ExactDp).unwrap();
        assert!((w.estimate - 252.0 / 1024.0).abs() < 1e-15);
        let curve = ballot_exact_curve(&StepLaw::simple(), 0.0, 64).unwrap();
        for n in [1, 2, 7, 64] {
            let e = ballot_probability(&StepLaw::simple(), 0.0, n, Method::ExactDp).unwrap();
            assert!((curve[n as usize] - e.estimate).abs() < 1e-15);
        }
        // P(T_j ≥ 0, j ≤ 2m) = C(2m, m)/4^m
        assert!((curve[10] - 252.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_agrees_with_exact_dp() {
        let skew = StepLaw::Discrete {
            atoms: vec![(-1.0, 2.0 / 3.0), (2.0, 1.0 / 3.0)],
        };
        let mc = Method::MonteCarlo {
            replicates: 200_000,
            seed: 3,
        };
        let walk = PiecewiseWalk::homogeneous(skew.clone(), 30);
        let specs = [
            BarrierSpec::new(Barrier::Constant { y: 1.0 }, 30).unwrap(),
            BarrierSpec::new(
                Barrier::PowerLaw {
                    alpha: 1.0 / 3.0,
                    y: 0.0,
                },
                30,
            )
            .unwrap(),
        ];
        for spec in &specs {
            let exact = barrier_probability(&walk, spec, Method::ExactDp).unwrap();
            let est = barrier_probability(&walk, spec, mc).unwrap();
            assert!(
                (est.estimate - exact.estimate).abs() < 3.0 * est.stderr,
                "{spec:?} {exact:?} {est:?}"
            );
        }
        let laws = [StepLaw::simple(), skew.clone(), StepLaw::simple()];
        let exact =
            bridge_probability(laws.clone(), 1.5, 10, 10, 10, 1.0, 2.0, Method::ExactDp).unwrap();
        let est = bridge_probability(laws, 1.5, 10, 10, 10, 1.0, 2.0, mc).unwrap();
        assert!(
            (est.estimate - exact.estimate).abs() < 3.0 * est.stderr,
            "{exact:?} {est:?}"
        );
        let exact = stone_window(&skew, 30, -3.0, 4.0, Method::ExactDp).unwrap();
        let est = stone_window(&skew, 30, -3.0, 4.0, mc).unwrap();
        assert!((est.estimate - exact.estimate).abs() < 3.0 * est.stderr);
    }

    #[test]
    fn unresolved_estimates_are_flagged() {
        let e = ballot_probability(
            &StepLaw::simple(),
            0.0,
            400,
            Method::MonteCarlo {
                replicates: 50,
                seed: 1,
            },
        )
        .unwrap();
        assert!(!e.resolved);
        let e = ballot_probability(
            &StepLaw::simple(),
            0.0,
            4,
            Method::MonteCarlo {
                replicates: 1000,
                seed: 1,
            },
        )
        .unwrap();
        assert!(e.resolved && e.ci_lo <= e.estimate && e.estimate <= e.ci_hi);
    }

    #[test]
    fn rejects_bad_inputs() {
        let drift = StepLaw::Gaussian {
            mean: 0.5,
            var: 1.0,
        };
        assert!(ballot_probability(&drift, 0.0, 10, Method::ExactDp).is_err());
        assert!(
            ballot_probability(&StepLaw::standard_gaussian(), 0.0, 10, Method::ExactDp).is_err()
        );
        assert!(ballot_powerlaw(&StepLaw::simple(), 0.5, 0.0, 10, Method::ExactDp).is_err());
        let spec = BarrierSpec::new(
            Barrier::LogBridge {
                a: 1.5,
                p: 1,
                q: 2,
                r: 3,
                y: 0.0,
                h: 1.0,
            },
            7,
        );
        assert!(spec.is_err());
        let outcomes = vec![Outcome {
            prob: 1.0,
            displacements: vec![1.0, -1.0],
        }];
        assert!(BranchingMechanism::new(MechanismSpec::ExplicitFinite { outcomes }).is_ok());
    }

    #[test]
    fn tilted_walk_follows_the_schedule() {
        let a = BranchingMechanism::binary_gaussian(0.0, 1.0).unwrap();
        let b = BranchingMechanism::binary_gaussian(0.0, 2.0).unwrap();
        let walk = TiltedWalk::new(EnvironmentSchedule::two_era(a, b, 0.5).unwrap(), 1.0).unwrap();
        assert_eq!(
            walk.step_law(10, 5),
            &StepLaw::Gaussian {
                mean: 1.0,
                var: 1.0
            }
        );
        assert_eq!(
            walk.step_law(10, 6),
            &StepLaw::Gaussian {
                mean: 2.0,
                var: 2.0
            }
        );
        let k = walk.kappa_sum(10, 10);
        assert!((k - 5.0 * (2f64.ln() + 0.5) - 5.0 * (2f64.ln() + 1.0)).abs() < 1e-12);
        assert_eq!(walk.sample_path(10, &mut KeyedStream::new(1)).len(), 10);
    }
}
