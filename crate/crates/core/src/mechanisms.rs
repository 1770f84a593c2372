//! Branching mechanisms: the point process of children's displacements.
//!
//! A mechanism is validated once, on construction, and is immutable after
//! that. All log-Laplace quantities are closed forms; nothing here is
//! estimated by sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability vectors must sum to one within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-12;
/// Tolerance of the commensurability test used for lattice detection.
pub const LATTICE_TOL: f64 = 1e-12;
const UNIFORM_SERIES_CUTOFF: f64 = 1e-2;
const LATTICE_MAX_DENOMINATOR: i64 = 10_000;

/// Law of a single displacement in the i.i.d. families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisplacementLaw {
    Gaussian { mean: f64, var: f64 },
    TwoPoint { values: [f64; 2], probs: [f64; 2] },
    Uniform { lo: f64, hi: f64 },
    FiniteDiscrete { values: Vec<f64>, probs: Vec<f64> },
}

/// Unvalidated description of a mechanism, as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismSpec {
    /// Exactly `count` children with i.i.d. displacements.
    FixedCountIid {
        count: u32,
        displacement: DisplacementLaw,
    },
    /// `count_probs[i]` is the probability of `i + 1` children; displacements
    /// are i.i.d. and independent of the count.
    RandomCountIid {
        count_probs: Vec<f64>,
        displacement: DisplacementLaw,
    },
    /// Finitely many outcomes, each a multiset of displacements.
    ExplicitFinite { outcomes: Vec<Outcome> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcome {
    pub prob: f64,
    pub displacements: Vec<f64>,
}

/// A validated branching mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MechanismSpec", into = "MechanismSpec")]
pub struct BranchingMechanism {
    spec: MechanismSpec,
    /// κ is finite on (0, theta_max].
    theta_max: f64,
    lattice: bool,
    mean_count: f64,
    /// Aggregated intensity measure `(ℓ, E #{children at ℓ})` for finite
    /// mechanisms, sorted by ℓ.
    intensity: Vec<(f64, f64)>,
    count_cdf: Vec<f64>,
    disp_cdf: Vec<f64>,
}

fn check_probs(probs: &[f64], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid(format!("{what}: empty probability vector")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(format!(
            "{what}: probabilities must be finite and >= 0"
        )));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::invalid(format!(
            "{what}: probabilities sum to {s}, not 1"
        )));
    }
    Ok(())
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

#[inline]
fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// Log-sum-exp based moments of a finite weighted point set under the
/// exponential tilt `e^{θℓ}`: returns (log Σ m e^{θℓ}, tilted mean, tilted variance).
pub(crate) fn tilted_moments(
    points: impl Iterator<Item = (f64, f64)> + Clone,
    theta: f64,
) -> (f64, f64, f64) {
    let shift = points
        .clone()
        .filter(|(_, m)| *m > 0.0)
        .map(|(x, _)| theta * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    let mut s1 = 0.0;
    for (x, m) in points.clone() {
        if m > 0.0 {
            let w = m * (theta * x - shift).exp();
            s += w;
            s1 += w * x;
        }
    }
    let mean = s1 / s;
    let mut s2 = 0.0;
    for (x, m) in points {
        if m > 0.0 {
            let w = m * (theta * x - shift).exp();
            s2 += w * (x - mean) * (x - mean);
        }
    }
    (shift + s.ln(), mean, s2 / s)
}

/// Whether the finite point set lies on some lattice aℤ + b.
pub fn is_lattice_support(points: &[f64]) -> bool {
    let mut pts: Vec<f64> = points.to_vec();
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= LATTICE_TOL * (1.0 + b.abs()));
    if pts.len() <= 2 {
        return true;
    }
    let base = pts[1] - pts[0];
    pts[2..].iter().all(|&x| {
        let r = (x - pts[0]) / base;
        let (p, q) = best_rational(r, LATTICE_MAX_DENOMINATOR);
        (r - p as f64 / q as f64).abs() <= LATTICE_TOL * r.abs().max(1.0)
    })
}

/// Best rational approximation with bounded denominator (continued fractions).
fn best_rational(x: f64, max_den: i64) -> (i64, i64) {
    let (mut h0, mut h1) = (0i64, 1i64);
    let (mut k0, mut k1) = (1i64, 0i64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a.abs() > 1e15 {
            break;
        }
        let ai = a as i64;
        let k2 = ai.saturating_mul(k1).saturating_add(k0);
        if k2 > max_den {
            break;
        }
        let h2 = ai.saturating_mul(h1).saturating_add(h0);
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = r - a;
        if frac.abs() < 1e-15 {
            break;
        }
        r = 1.0 / frac;
    }
    if k1 == 0 {
        (x.round() as i64, 1)
    } else {
        (h1, k1)
    }
}

impl DisplacementLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            DisplacementLaw::Gaussian { mean, var } => {
                if !mean.is_finite() || !var.is_finite() || *var < 0.0 {
                    return Err(Error::invalid(
                        "gaussian: mean must be finite and var finite >= 0",
                    ));
                }
            }
            DisplacementLaw::TwoPoint { values, probs } => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("two_point: values must be finite"));
                }
                check_probs(probs, "two_point")?;
            }
            DisplacementLaw::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::invalid("uniform: need finite lo < hi"));
                }
            }
            DisplacementLaw::FiniteDiscrete { values, probs } => {
                if values.len() != probs.len() {
                    return Err(Error::invalid(
                        "finite_discrete: values and probs differ in length",
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("finite_discrete: values must be finite"));
                }
                check_probs(probs, "finite_discrete")?;
            }
        }
        Ok(())
    }

    pub(crate) fn points(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            DisplacementLaw::TwoPoint { values, probs } => {
                Some(values.iter().copied().zip(probs.iter().copied()).collect())
            }
            DisplacementLaw::FiniteDiscrete { values, probs } => {
                Some(values.iter().copied().zip(probs.iter().copied()).collect())
            }
            DisplacementLaw::Gaussian { mean, var } if *var == 0.0 => Some(vec![(*mean, 1.0)]),
            _ => None,
        }
    }

    pub fn is_lattice(&self) -> bool {
        match self.points() {
            Some(pts) => {
                let support: Vec<f64> = pts
                    .iter()
                    .filter(|(_, p)| *p > 0.0)
                    .map(|(x, _)| *x)
                    .collect();
                is_lattice_support(&support)
            }
            None => false,
        }
    }

    /// Has a density (Gaussian with positive variance, Uniform).
    pub fn is_continuous(&self) -> bool {
        match self {
            DisplacementLaw::Gaussian { var, .. } => *var > 0.0,
            DisplacementLaw::Uniform { .. } => true,
            _ => false,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            DisplacementLaw::Gaussian { mean, .. } => *mean,
            DisplacementLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            _ => self.points().unwrap().iter().map(|(x, p)| x * p).sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            DisplacementLaw::Gaussian { var, .. } => *var,
            DisplacementLaw::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
            _ => {
                let m = self.mean();
                self.points()
                    .unwrap()
                    .iter()
                    .map(|(x, p)| p * (x - m) * (x - m))
                    .sum()
            }
        }
    }

    /// Supremum of the support (+∞ for Gaussian with positive variance).
    pub fn sup(&self) -> f64 {
        match self {
            DisplacementLaw::Gaussian { mean, var } => {
                if *var > 0.0 {
                    f64::INFINITY
                } else {
                    *mean
                }
            }
            DisplacementLaw::Uniform { hi, .. } => *hi,
            _ => self
                .points()
                .unwrap()
                .iter()
                .filter(|(_, p)| *p > 0.0)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// (log E e^{θD}, E_θ D, Var_θ D) where E_θ is the e^{θD}-tilted law.
    pub fn log_mgf_moments(&self, theta: f64) -> (f64, f64, f64) {
        match self {
            DisplacementLaw::Gaussian { mean, var } => (
                mean * theta + 0.5 * var * theta * theta,
                mean + var * theta,
                *var,
            ),
            DisplacementLaw::Uniform { lo, hi } => {
                let w = hi - lo;
                let c = theta * w;
                if c.abs() < UNIFORM_SERIES_CUTOFF {
                    // series of log(expm1(c)/c), its derivative and second derivative
                    let c2 = c * c;
                    let lg = c / 2.0 + c2 / 24.0 - c2 * c2 / 2880.0 + c2 * c2 * c2 / 181_440.0;
                    let d1 = 0.5 + c / 12.0 - c * c2 / 720.0 + c * c2 * c2 / 30_240.0;
                    let d2 = 1.0 / 12.0 - c2 / 240.0 + c2 * c2 / 6048.0;
                    (theta * lo + lg, lo + w * d1, w * w * d2)
                } else if c > 0.0 {
                    // log((e^c − 1)/c), stable for large c
                    let lg = c + (-(-c).exp_m1()).ln() - c.ln();
                    let d1 = -1.0 / (-c).exp_m1() - 1.0 / c;
                    let s = (0.5 * c).sinh();
                    let d2 = 1.0 / (c * c) - 1.0 / (4.0 * s * s);
                    (theta * lo + lg, lo + w * d1, w * w * d2)
                } else {
                    // reflect: D = hi - (hi - D), the reflected law is uniform as well
                    let (l, m, v) =
                        DisplacementLaw::Uniform { lo: -hi, hi: -lo }.log_mgf_moments(-theta);
                    (l, -m, v)
                }
            }
            _ => {
                let pts = self.points().unwrap();
                tilted_moments(pts.iter().copied(), theta)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, cdf: &[f64], rng: &mut R) -> f64 {
        match self {
            DisplacementLaw::Gaussian { mean, var } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + var.sqrt() * z
            }
            DisplacementLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            DisplacementLaw::TwoPoint { values, .. } => values[pick(cdf, rng.random::<f64>())],
            DisplacementLaw::FiniteDiscrete { values, .. } => {
                values[pick(cdf, rng.random::<f64>())]
            }
        }
    }

    fn cdf_table(&self) -> Vec<f64> {
        match self {
            DisplacementLaw::TwoPoint { probs, .. } => cumulative(probs),
            DisplacementLaw::FiniteDiscrete { probs, .. } => cumulative(probs),
            _ => Vec::new(),
        }
    }
}

impl TryFrom<MechanismSpec> for BranchingMechanism {
    type Error = Error;

    fn try_from(spec: MechanismSpec) -> Result<Self> {
        BranchingMechanism::new(spec)
    }
}

impl From<BranchingMechanism> for MechanismSpec {
    fn from(m: BranchingMechanism) -> Self {
        m.spec
    }
}

impl BranchingMechanism {
    pub fn new(spec: MechanismSpec) -> Result<Self> {
        let mut intensity = Vec::new();
        let mut count_cdf = Vec::new();
        let mut disp_cdf = Vec::new();
        let (mean_count, lattice) = match &spec {
            MechanismSpec::FixedCountIid {
                count,
                displacement,
            } => {
                displacement.validate()?;
                if *count < 1 {
                    return Err(Error::invalid("fixed_count_iid: count must be >= 1"));
                }
                if *count == 1 {
                    return Err(Error::invalid(
                        "P(#L = 1) must be < 1: fixed count of one child",
                    ));
                }
                disp_cdf = displacement.cdf_table();
                (*count as f64, displacement.is_lattice())
            }
            MechanismSpec::RandomCountIid {
                count_probs,
                displacement,
            } => {
                displacement.validate()?;
                check_probs(count_probs, "random_count_iid count law")?;
                if count_probs[0] >= 1.0 {
                    return Err(Error::invalid("P(#L = 1) must be < 1"));
                }
                count_cdf = cumulative(count_probs);
                disp_cdf = displacement.cdf_table();
                let m = count_probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i + 1) as f64 * p)
                    .sum();
                (m, displacement.is_lattice())
            }
            MechanismSpec::ExplicitFinite { outcomes } => {
                if outcomes.is_empty() {
                    return Err(Error::invalid("explicit_finite: no outcomes"));
                }
                let probs: Vec<f64> = outcomes.iter().map(|o| o.prob).collect();
                check_probs(&probs, "explicit_finite")?;
                let mut p_single = 0.0;
                for o in outcomes {
                    if o.prob > 0.0 && o.displacements.is_empty() {
                        return Err(Error::invalid(
                            "P(L = empty) must be 0: outcome with no children",
                        ));
                    }
                    if o.displacements.iter().any(|x| !x.is_finite()) {
                        return Err(Error::invalid(
                            "explicit_finite: displacements must be finite",
                        ));
                    }
                    if o.displacements.len() == 1 {
                        p_single += o.prob;
                    }
                }
                if p_single >= 1.0 - PROB_SUM_TOL {
                    return Err(Error::invalid("P(#L = 1) must be < 1"));
                }
                let mut pts: Vec<(f64, f64)> = outcomes
                    .iter()
                    .flat_map(|o| o.displacements.iter().map(move |&x| (x, o.prob)))
                    .filter(|(_, p)| *p > 0.0)
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                for (x, m) in pts {
                    match intensity.last_mut() {
                        Some((y, acc)) if *y == x => *acc += m,
                        _ => intensity.push((x, m)),
                    }
                }
                count_cdf = cumulative(&probs);
                let mean = outcomes
                    .iter()
                    .map(|o| o.prob * o.displacements.len() as f64)
                    .sum();
                let support: Vec<f64> = intensity.iter().map(|(x, _)| *x).collect();
                (mean, is_lattice_support(&support))
            }
        };
        Ok(Self {
            spec,
            theta_max: f64::INFINITY,
            lattice,
            mean_count,
            intensity,
            count_cdf,
            disp_cdf,
        })
    }

    /// Binary branching with Gaussian displacements, the reference family.
    pub fn binary_gaussian(mean: f64, var: f64) -> Result<Self> {
        Self::new(MechanismSpec::FixedCountIid {
            count: 2,
            displacement: DisplacementLaw::Gaussian { mean, var },
        })
    }

    pub fn explicit(outcomes: &[(f64, &[f64])]) -> Result<Self> {
        Self::new(MechanismSpec::ExplicitFinite {
            outcomes: outcomes
                .iter()
                .map(|(p, d)| Outcome {
                    prob: *p,
                    displacements: d.to_vec(),
                })
                .collect(),
        })
    }

    pub fn spec(&self) -> &MechanismSpec {
        &self.spec
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// Support lies on a lattice; predictions still run but warn.
    pub fn is_lattice(&self) -> bool {
        self.lattice
    }

    /// E[#ℒ].
    pub fn mean_count(&self) -> f64 {
        self.mean_count
    }

    /// Aggregated intensity `(ℓ, E #{children at ℓ})` of a finite mechanism.
    pub fn intensity(&self) -> Option<&[(f64, f64)]> {
        match self.spec {
            MechanismSpec::ExplicitFinite { .. } => Some(&self.intensity),
            _ => None,
        }
    }

    /// The i.i.d. displacement law, for the i.i.d. families.
    pub fn displacement(&self) -> Option<&DisplacementLaw> {
        match &self.spec {
            MechanismSpec::FixedCountIid { displacement, .. }
            | MechanismSpec::RandomCountIid { displacement, .. } => Some(displacement),
            MechanismSpec::ExplicitFinite { .. } => None,
        }
    }

    /// Every displacement has a density, so the law of the maximum is continuous.
    pub fn has_continuous_displacements(&self) -> bool {
        self.displacement()
            .is_some_and(DisplacementLaw::is_continuous)
    }

    /// Probability generating function of the child count at `s`.
    pub fn count_pgf(&self, s: f64) -> f64 {
        match &self.spec {
            MechanismSpec::FixedCountIid { count, .. } => s.powi(*count as i32),
            MechanismSpec::RandomCountIid { count_probs, .. } => {
                // Horner in s: Σ p_j s^{j+1}
                let mut acc = 0.0;
                for p in count_probs.iter().rev() {
                    acc = acc * s + p;
                }
                acc * s
            }
            MechanismSpec::ExplicitFinite { .. } => {
                panic!("count_pgf is defined for i.i.d. families only")
            }
        }
    }

    /// Supremum of the slope κ′ as θ → ∞: the largest possible displacement.
    pub fn max_slope(&self) -> f64 {
        match &self.spec {
            MechanismSpec::ExplicitFinite { .. } => self.intensity.last().map(|p| p.0).unwrap(),
            _ => self.displacement().unwrap().sup(),
        }
    }

    /// E #{children at the maximal displacement}; zero when the sup is not an atom.
    pub fn mass_at_max(&self) -> f64 {
        match &self.spec {
            MechanismSpec::ExplicitFinite { .. } => self.intensity.last().map(|p| p.1).unwrap(),
            _ => {
                let d = self.displacement().unwrap();
                match d.points() {
                    Some(pts) => {
                        let top = d.sup();
                        self.mean_count
                            * pts
                                .iter()
                                .filter(|(x, _)| *x == top)
                                .map(|(_, p)| p)
                                .sum::<f64>()
                    }
                    None => 0.0,
                }
            }
        }
    }

    fn check_theta(&self, theta: f64) -> Result<()> {
        if !(theta > 0.0) || theta > self.theta_max || !theta.is_finite() {
            return Err(Error::domain(format!(
                "theta = {theta} outside (0, {}]",
                self.theta_max
            )));
        }
        Ok(())
    }

    /// (κ, κ′, κ″) at θ without domain checks; valid for any finite θ.
    pub(crate) fn cumulants_unchecked(&self, theta: f64) -> (f64, f64, f64) {
        match &self.spec {
            MechanismSpec::ExplicitFinite { .. } => {
                tilted_moments(self.intensity.iter().copied(), theta)
            }
            _ => {
                let (l, m, v) = self.displacement().unwrap().log_mgf_moments(theta);
                (self.mean_count.ln() + l, m, v)
            }
        }
    }

    /// κ(θ) = log E Σ_{ℓ∈ℒ} e^{θℓ}.
    pub fn laplace(&self, theta: f64) -> Result<f64> {
        self.check_theta(theta)?;
        Ok(self.cumulants_unchecked(theta).0)
    }

    /// (κ′(θ), κ″(θ)).
    pub fn laplace_derivatives(&self, theta: f64) -> Result<(f64, f64)> {
        self.check_theta(theta)?;
        let (_, d1, d2) = self.cumulants_unchecked(theta);
        Ok((d1, d2))
    }

    /// lim_{θ→0⁺} κ(θ) = log E[#ℒ].
    pub fn laplace_at_zero(&self) -> f64 {
        self.mean_count.ln()
    }

    /// lim_{θ→0⁺} κ′(θ): the mean displacement per unit of intensity.
    pub fn slope_at_zero(&self) -> f64 {
        self.cumulants_unchecked(0.0).1
    }

    /// Appends one realisation of ℒ to `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match &self.spec {
            MechanismSpec::FixedCountIid {
                count,
                displacement,
            } => {
                for _ in 0..*count {
                    out.push(displacement.sample(&self.disp_cdf, rng));
                }
            }
            MechanismSpec::RandomCountIid { displacement, .. } => {
                let k = pick(&self.count_cdf, rng.random::<f64>()) + 1;
                for _ in 0..k {
                    out.push(displacement.sample(&self.disp_cdf, rng));
                }
            }
            MechanismSpec::ExplicitFinite { outcomes } => {
                let o = &outcomes[pick(&self.count_cdf, rng.random::<f64>())];
                out.extend_from_slice(&o.displacements);
            }
        }
    }

    pub fn sample_offspring<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::new();
        self.sample_into(rng, &mut out);
        out
    }
}
