//! First-order speed and logarithmic correction of the front through
//! one or more interfaces.
//!
//! For weights w_i = α_i − α_{i−1}, the speed is
//!
//! ```text
//! v̂ = max { Σ w_i a_i : Σ_{i≤j} w_i κ*_i(a_i) ≤ 0 for every j }
//!   = min { Σ w_i κ_i(θ_i)/θ_i : θ_1 ≤ θ_2 ≤ … ≤ θ_K }
//! ```
//!
//! The second form is separable and convex in 1/θ_i, so pooling adjacent
//! violators solves it exactly: start from the unconstrained minimisers θ*_i
//! and merge neighbouring blocks whose parameters decrease, re-solving each
//! merged block for its common parameter φ. Blocks with equal φ form the
//! eras that enter the log coefficient
//!
//! ```text
//! L = Σ_p (1 + 1{κ*_{r_p}(a_{r_p}) = 0} + 1{κ*_{s_p}(a_{s_p}) = 0}) / (2 φ_p).
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::BranchingMechanism;
use crate::transforms::{
    critical_theta, solve_critical, LogLaplace, TransformProfile, WeightedSum,
};

/// Relative tolerance under which θ* = θ̃* is declared.
pub const THETA_EQ_TOL: f64 = 1e-9;
/// Absolute tolerance of the κ* = 0 indicators in L.
pub const KSTAR_ZERO_TOL: f64 = 1e-7;
/// κ* values between the two tolerances trigger a near-degeneracy warning.
pub const KSTAR_WARN_TOL: f64 = 1e-5;
/// Prefix constraints may be violated by at most this much.
pub const PREFIX_TOL: f64 = 1e-8;
/// Tolerance of t·κ*(a) + (1 − t)·κ̃*(b) = 0 in the fast regime.
pub const BALANCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSpec {
    breakpoints: Vec<f64>,
    mechanisms: Vec<BranchingMechanism>,
}

/// Interfaces 0 = α_0 < α_1 < … < α_K = 1 and the mechanism of each era.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct EnvironmentSchedule {
    breakpoints: Vec<f64>,
    mechanisms: Vec<BranchingMechanism>,
}

impl TryFrom<ScheduleSpec> for EnvironmentSchedule {
    type Error = Error;
    fn try_from(s: ScheduleSpec) -> Result<Self> {
        EnvironmentSchedule::new(s.breakpoints, s.mechanisms)
    }
}

impl From<EnvironmentSchedule> for ScheduleSpec {
    fn from(s: EnvironmentSchedule) -> Self {
        ScheduleSpec {
            breakpoints: s.breakpoints,
            mechanisms: s.mechanisms,
        }
    }
}

impl EnvironmentSchedule {
    pub fn new(breakpoints: Vec<f64>, mechanisms: Vec<BranchingMechanism>) -> Result<Self> {
        if mechanisms.is_empty() {
            return Err(Error::invalid("schedule needs at least one mechanism"));
        }
        if breakpoints.len() != mechanisms.len() + 1 {
            return Err(Error::invalid(format!(
                "{} mechanisms need {} breakpoints, got {}",
                mechanisms.len(),
                mechanisms.len() + 1,
                breakpoints.len()
            )));
        }
        if breakpoints[0] != 0.0 || *breakpoints.last().unwrap() != 1.0 {
            return Err(Error::invalid("breakpoints must start at 0 and end at 1"));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        Ok(Self {
            breakpoints,
            mechanisms,
        })
    }

    pub fn homogeneous(mech: BranchingMechanism) -> Self {
        Self {
            breakpoints: vec![0.0, 1.0],
            mechanisms: vec![mech],
        }
    }

    /// ℒ for the first ⌊nt⌋ generations, ℒ̃ afterwards.
    pub fn two_era(first: BranchingMechanism, second: BranchingMechanism, t: f64) -> Result<Self> {
        Self::new(vec![0.0, t, 1.0], vec![first, second])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn mechanisms(&self) -> &[BranchingMechanism] {
        &self.mechanisms
    }

    pub fn eras(&self) -> usize {
        self.mechanisms.len()
    }

    /// w_i = α_i − α_{i−1}.
    pub fn weights(&self) -> Vec<f64> {
        self.breakpoints.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// ⌊n·α_i⌋ for every breakpoint; era i covers steps b_i < k ≤ b_{i+1}.
    pub fn step_boundaries(&self, n: u64) -> Vec<u64> {
        self.breakpoints
            .iter()
            .map(|a| ((n as f64) * a).floor() as u64)
            .collect()
    }

    /// Era of reproduction step k ∈ 1..=n (the step producing generation k).
    pub fn era_of_step(&self, n: u64, k: u64) -> usize {
        let b = self.step_boundaries(n);
        (0..self.eras())
            .find(|&i| b[i] < k && k <= b[i + 1])
            .unwrap_or(self.eras() - 1)
    }

    /// Mechanism of every step 1..=n, in order.
    pub fn step_mechanisms(&self, n: u64) -> Vec<&BranchingMechanism> {
        let b = self.step_boundaries(n);
        let mut out = Vec::with_capacity(n as usize);
        for i in 0..self.eras() {
            for _ in b[i]..b[i + 1] {
                out.push(&self.mechanisms[i]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Homogeneous,
    Slow,
    Mean,
    Fast,
    MultiEra,
}

/// Optimal slope and parameter in one era of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EraParameters {
    pub weight: f64,
    pub a: f64,
    pub theta: f64,
    /// κ*_i(a_i).
    pub kstar: f64,
}

/// Maximal block of consecutive environments sharing one parameter φ.
/// `first` and `last` are 0-based environment indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Era {
    pub first: usize,
    pub last: usize,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    /// |θ*κ′(θ*) − κ(θ*)| per mechanism.
    pub critical: Vec<f64>,
    /// max_j Σ_{i≤j} w_i κ*_i(a_i); must be ≤ 1e−8.
    pub max_prefix: f64,
    /// |Σ_{i∈era} w_i κ*_i(a_i)| per era.
    pub era_balance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimePrediction {
    pub regime: Regime,
    pub v_hat: f64,
    #[serde(rename = "L")]
    pub log_coefficient: f64,
    pub breakpoints: Vec<f64>,
    pub per_era: Vec<EraParameters>,
    pub eras: Vec<Era>,
    pub profiles: Vec<TransformProfile>,
    pub residuals: Residuals,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedFront {
    pub n: u64,
    pub m_n: f64,
    pub regime: Regime,
}

fn equal_thetas(a: f64, b: f64) -> bool {
    (a - b).abs() <= THETA_EQ_TOL * a.max(b)
}

fn profiles_of(mechs: &[BranchingMechanism]) -> Result<Vec<TransformProfile>> {
    mechs.iter().map(critical_theta).collect()
}

fn lattice_warnings(mechs: &[BranchingMechanism]) -> Vec<String> {
    mechs
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_lattice())
        .map(|(i, _)| {
            format!("mechanism {i} has lattice support; the asymptotics assume non-lattice laws")
        })
        .collect()
}

fn era_parameters(mech: &BranchingMechanism, weight: f64, theta: f64) -> EraParameters {
    let (k, d1, _) = mech.cumulants(theta);
    EraParameters {
        weight,
        a: d1,
        theta,
        kstar: theta * d1 - k,
    }
}

/// L from an era decomposition, plus near-degeneracy warnings.
pub fn log_coefficient(per_era: &[EraParameters], eras: &[Era]) -> (f64, Vec<String>) {
    let mut warnings = Vec::new();
    let mut indicator = |i: usize| {
        let k = per_era[i].kstar.abs();
        if k > KSTAR_ZERO_TOL && k < KSTAR_WARN_TOL {
            warnings.push(format!(
                "kappa*_{i}(a_{i}) = {:e} is near the zero tolerance; L may be ill-determined",
                per_era[i].kstar
            ));
        }
        if k <= KSTAR_ZERO_TOL {
            1.0
        } else {
            0.0
        }
    };
    let mut l = 0.0;
    for era in eras {
        let count = 1.0 + indicator(era.first) + indicator(era.last);
        l += count / (2.0 * era.phi);
    }
    (l, warnings)
}

fn finish(
    regime: Regime,
    schedule: &EnvironmentSchedule,
    per_era: Vec<EraParameters>,
    eras: Vec<Era>,
    profiles: Vec<TransformProfile>,
    mut warnings: Vec<String>,
) -> Result<RegimePrediction> {
    let v_hat = per_era.iter().map(|p| p.weight * p.a).sum();
    let (l, w) = log_coefficient(&per_era, &eras);
    warnings.extend(w);
    let mut prefix = 0.0;
    let mut max_prefix = f64::NEG_INFINITY;
    for p in &per_era {
        prefix += p.weight * p.kstar;
        max_prefix = max_prefix.max(prefix);
    }
    let era_balance = eras
        .iter()
        .map(|e| {
            per_era[e.first..=e.last]
                .iter()
                .map(|p| p.weight * p.kstar)
                .sum::<f64>()
                .abs()
        })
        .collect();
    let residuals = Residuals {
        critical: profiles.iter().map(|p| p.diagnostics.residual).collect(),
        max_prefix,
        era_balance,
    };
    if max_prefix > PREFIX_TOL {
        return Err(Error::AssumptionViolated(format!(
            "prefix constraint violated by {max_prefix:e}"
        )));
    }
    if per_era
        .windows(2)
        .any(|w| w[0].theta > w[1].theta * (1.0 + THETA_EQ_TOL))
    {
        return Err(Error::AssumptionViolated(
            "optimal parameters are not non-decreasing".into(),
        ));
    }
    Ok(RegimePrediction {
        regime,
        v_hat,
        log_coefficient: l,
        breakpoints: schedule.breakpoints().to_vec(),
        per_era,
        eras,
        profiles,
        residuals,
        warnings,
    })
}

/// Slow / mean / fast classification of ℒ on [0, t) followed by ℒ̃.
pub fn classify_two_era(
    first: &BranchingMechanism,
    second: &BranchingMechanism,
    t: f64,
) -> Result<RegimePrediction> {
    let schedule = EnvironmentSchedule::two_era(first.clone(), second.clone(), t)?;
    let profiles = profiles_of(schedule.mechanisms())?;
    let (p1, p2) = (&profiles[0], &profiles[1]);
    let mut warnings = lattice_warnings(schedule.mechanisms());
    let (regime, per_era, eras) = if equal_thetas(p1.theta_star, p2.theta_star) {
        if p1.theta_star != p2.theta_star {
            warnings.push(format!(
                "theta* = {} and theta~* = {} agree within tolerance; classified as mean",
                p1.theta_star, p2.theta_star
            ));
        }
        let theta = p1.theta_star;
        let per = vec![
            era_parameters(first, t, p1.theta_star),
            era_parameters(second, 1.0 - t, p2.theta_star),
        ];
        (
            Regime::Mean,
            per,
            vec![Era {
                first: 0,
                last: 1,
                phi: theta,
            }],
        )
    } else if p1.theta_star < p2.theta_star {
        let per = vec![
            era_parameters(first, t, p1.theta_star),
            era_parameters(second, 1.0 - t, p2.theta_star),
        ];
        let eras = vec![
            Era {
                first: 0,
                last: 0,
                phi: p1.theta_star,
            },
            Era {
                first: 1,
                last: 1,
                phi: p2.theta_star,
            },
        ];
        (Regime::Slow, per, eras)
    } else {
        let mix = WeightedSum {
            parts: vec![(t, first), (1.0 - t, second)],
        };
        let cp = solve_critical(&mix)?;
        let per = vec![
            era_parameters(first, t, cp.theta),
            era_parameters(second, 1.0 - t, cp.theta),
        ];
        (
            Regime::Fast,
            per,
            vec![Era {
                first: 0,
                last: 1,
                phi: cp.theta,
            }],
        )
    };
    let pred = finish(regime, &schedule, per_era, eras, profiles, warnings)?;
    if regime == Regime::Fast {
        fast_consistency_check(&pred)?;
    }
    Ok(pred)
}

/// Consequences of the fast regime: θ̃* < θ < θ*, κ*(a) < 0 < κ̃*(b) and
/// t·κ*(a) + (1 − t)·κ̃*(b) = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastConsistency {
    pub theta_ordered: bool,
    pub signs_ok: bool,
    pub balance_residual: f64,
    pub pass: bool,
}

pub fn fast_consistency_check(pred: &RegimePrediction) -> Result<FastConsistency> {
    if pred.regime != Regime::Fast || pred.per_era.len() != 2 || pred.profiles.len() != 2 {
        return Err(Error::AssumptionViolated(format!(
            "fast consistency needs a two-era fast prediction, got {:?}",
            pred.regime
        )));
    }
    let theta = pred.eras[0].phi;
    let (e1, e2) = (pred.per_era[0], pred.per_era[1]);
    let theta_ordered = pred.profiles[1].theta_star < theta && theta < pred.profiles[0].theta_star;
    let signs_ok = e1.kstar < 0.0 && 0.0 < e2.kstar;
    let balance_residual = (e1.weight * e1.kstar + e2.weight * e2.kstar).abs();
    let report = FastConsistency {
        theta_ordered,
        signs_ok,
        balance_residual,
        pass: theta_ordered && signs_ok && balance_residual <= BALANCE_TOL,
    };
    if !report.pass {
        return Err(Error::AssumptionViolated(format!(
            "fast-regime consequences fail: {report:?}"
        )));
    }
    Ok(report)
}

struct Block {
    first: usize,
    last: usize,
    phi: f64,
}

fn pooled_phi(schedule: &EnvironmentSchedule, first: usize, last: usize) -> Result<f64> {
    let w = schedule.weights();
    let mix = WeightedSum {
        parts: (first..=last)
            .map(|i| (w[i], &schedule.mechanisms()[i]))
            .collect(),
    };
    Ok(solve_critical(&mix)?.theta)
}

/// v̂, optimal parameters and era decomposition of a K-era schedule.
pub fn solve_multi_era(schedule: &EnvironmentSchedule) -> Result<RegimePrediction> {
    let profiles = profiles_of(schedule.mechanisms())?;
    let weights = schedule.weights();
    let mut stack: Vec<Block> = Vec::with_capacity(schedule.eras());
    for (i, p) in profiles.iter().enumerate() {
        stack.push(Block {
            first: i,
            last: i,
            phi: p.theta_star,
        });
        while stack.len() >= 2 {
            let (l, r) = (&stack[stack.len() - 2], &stack[stack.len() - 1]);
            if l.phi <= r.phi {
                break;
            }
            let (first, last) = (l.first, r.last);
            stack.truncate(stack.len() - 2);
            stack.push(Block {
                first,
                last,
                phi: pooled_phi(schedule, first, last)?,
            });
        }
    }
    // Blocks with equal parameters form one era.
    let mut eras: Vec<Era> = Vec::new();
    for b in stack {
        match eras.last_mut() {
            Some(e) if equal_thetas(e.phi, b.phi) => {
                e.last = b.last;
                e.phi = pooled_phi(schedule, e.first, e.last)?;
            }
            _ => eras.push(Era {
                first: b.first,
                last: b.last,
                phi: b.phi,
            }),
        }
    }
    let mut per_era = Vec::with_capacity(schedule.eras());
    for e in &eras {
        for i in e.first..=e.last {
            // singleton eras keep their own θ* so that κ*_i(a_i) = 0 to solver precision
            let theta = if e.first == e.last {
                profiles[i].theta_star
            } else {
                e.phi
            };
            per_era.push(era_parameters(&schedule.mechanisms()[i], weights[i], theta));
        }
    }
    let regime = match schedule.eras() {
        1 => Regime::Homogeneous,
        2 if eras.len() == 2 => Regime::Slow,
        2 if per_era[0].kstar.abs() <= KSTAR_ZERO_TOL => Regime::Mean,
        2 => Regime::Fast,
        _ => Regime::MultiEra,
    };
    let warnings = lattice_warnings(schedule.mechanisms());
    finish(regime, schedule, per_era, eras, profiles, warnings)
}

impl RegimePrediction {
    /// Recomputes L from the era decomposition.
    pub fn log_coefficient(&self) -> f64 {
        log_coefficient(&self.per_era, &self.eras).0
    }

    /// m_n = Σ_i a_i·(⌊nα_i⌋ − ⌊nα_{i−1}⌋) − L·log n.
    pub fn predict_front(&self, n: u64) -> Result<PredictedFront> {
        predict_front(self, n)
    }
}

pub fn predict_front(pred: &RegimePrediction, n: u64) -> Result<PredictedFront> {
    if n < 2 {
        return Err(Error::domain(format!(
            "predict_front needs n >= 2, got {n}"
        )));
    }
    let bounds: Vec<u64> = pred
        .breakpoints
        .iter()
        .map(|a| ((n as f64) * a).floor() as u64)
        .collect();
    let linear: f64 = pred
        .per_era
        .iter()
        .enumerate()
        .map(|(i, p)| p.a * (bounds[i + 1] - bounds[i]) as f64)
        .sum();
    Ok(PredictedFront {
        n,
        m_n: linear - pred.log_coefficient * (n as f64).ln(),
        regime: pred.regime,
    })
}
