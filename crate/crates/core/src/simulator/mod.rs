//! Monte Carlo engine for the particle system.
//!
//! Every particle carries a key derived from its parent's key and its birth
//! order, and all of its randomness comes from streams keyed by it. A
//! particle therefore behaves identically whether it is simulated in an
//! exact run, a truncated run or on another thread, which gives paired-seed
//! comparisons between modes and thread-count independence.
//!
//! Window truncation drops particles more than `width` below the current
//! maximum, then the lowest ones above `cap`. With `tail_compensation`, each
//! dropped particle contributes the maximum of its would-be subtree, drawn
//! from the exact law of that maximum (see [`tail`]), so M_n keeps its law
//! whatever is dropped.

pub mod tail;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::BranchingMechanism;
use crate::regimes::{EnvironmentSchedule, Regime, RegimePrediction};
use crate::rng::{derive_key, seed_stream, tag, KeyedStream};

use self::tail::{tail_tables, TailTable, DEFAULT_GRID};

/// Exact runs may not exceed this many particles.
pub const EXACT_LIMIT: usize = 10_000_000;
pub const DEFAULT_WIDTH: f64 = 15.0;
pub const DEFAULT_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimMode {
    Exact,
    WindowTruncated {
        #[serde(default = "default_width")]
        width: f64,
        #[serde(default = "default_cap")]
        cap: usize,
        #[serde(default)]
        tail_compensation: bool,
    },
}

fn default_width() -> f64 {
    DEFAULT_WIDTH
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

impl Default for SimMode {
    fn default() -> Self {
        SimMode::WindowTruncated {
            width: DEFAULT_WIDTH,
            cap: DEFAULT_CAP,
            tail_compensation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub schedule: EnvironmentSchedule,
    pub n: u64,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_trajectory: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pos: f64,
    pub key: u64,
}

#[inline]
fn child_key(parent: u64, j: usize) -> u64 {
    derive_key(parent, ((j as u64) << 8) | tag::CHILD)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    pub width: f64,
    pub cap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    generation: u64,
    particles: Vec<Particle>,
    truncation_losses: u64,
    max: f64,
}

impl Population {
    /// One particle at the origin.
    pub fn root(key: u64) -> Self {
        Self::from_positions(&[0.0], key)
    }

    pub fn from_positions(positions: &[f64], key: u64) -> Self {
        let particles: Vec<Particle> = positions
            .iter()
            .enumerate()
            .map(|(j, &pos)| Particle {
                pos,
                key: child_key(key, j),
            })
            .collect();
        let max = positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            generation: 0,
            particles,
            truncation_losses: 0,
            max,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn positions(&self) -> impl Iterator<Item = f64> + '_ {
        self.particles.iter().map(|p| p.pos)
    }

    pub fn truncation_losses(&self) -> u64 {
        self.truncation_losses
    }

    /// Maximal position in the current generation.
    pub fn max(&self) -> f64 {
        self.max
    }

    /// Replaces every particle by its children, then truncates. Dropped
    /// particles are appended to `dropped`.
    pub fn step(
        &mut self,
        mech: &BranchingMechanism,
        truncation: Option<Truncation>,
        dropped: &mut Vec<Particle>,
    ) {
        let mut next =
            Vec::with_capacity((self.particles.len() as f64 * mech.mean_count()) as usize + 4);
        let mut buf = Vec::new();
        let mut max = f64::NEG_INFINITY;
        for p in &self.particles {
            let mut rng = KeyedStream::new(derive_key(p.key, tag::OFFSPRING));
            buf.clear();
            mech.sample_into(&mut rng, &mut buf);
            for (j, d) in buf.iter().enumerate() {
                let pos = p.pos + d;
                max = max.max(pos);
                next.push(Particle {
                    pos,
                    key: child_key(p.key, j),
                });
            }
        }
        self.particles = next;
        self.max = max;
        self.generation += 1;
        if let Some(t) = truncation {
            let before = self.particles.len();
            let floor = max - t.width;
            let mut j = 0;
            while j < self.particles.len() {
                if self.particles[j].pos < floor {
                    dropped.push(self.particles.swap_remove(j));
                } else {
                    j += 1;
                }
            }
            if self.particles.len() > t.cap {
                let excess = self.particles.len() - t.cap;
                self.particles
                    .select_nth_unstable_by(excess, |a, b| a.pos.total_cmp(&b.pos));
                dropped.extend(self.particles.drain(..excess));
            }
            self.truncation_losses += (before - self.particles.len()) as u64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub k: u64,
    pub max: f64,
    pub count: usize,
    pub losses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub replicate: u64,
    pub seed: u64,
    pub n: u64,
    #[serde(rename = "M_n")]
    pub m_n: f64,
    pub losses: u64,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
    pub wall_ms: f64,
}

/// A validated configuration with its precomputed tail laws.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    step_mechs: Vec<usize>,
    truncation: Option<Truncation>,
    tails: Option<Vec<TailTable>>,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        Self::with_grid(config, DEFAULT_GRID)
    }

    /// As [`Simulator::new`] with tail tables on the grid `h`ℤ.
    pub fn with_grid(config: SimConfig, h: f64) -> Result<Self> {
        let n = config.n;
        let bounds = config.schedule.step_boundaries(n);
        let mut step_mechs = Vec::with_capacity(n as usize);
        for i in 0..config.schedule.eras() {
            step_mechs.extend(std::iter::repeat_n(i, (bounds[i + 1] - bounds[i]) as usize));
        }
        let mechs = config.schedule.mechanisms();
        let (truncation, tails) = match config.mode {
            SimMode::Exact => {
                let expected: f64 = step_mechs
                    .iter()
                    .map(|&i| mechs[i].mean_count().ln())
                    .sum::<f64>()
                    .exp();
                if expected > EXACT_LIMIT as f64 {
                    return Err(Error::ExactBlowup {
                        size: expected.min(usize::MAX as f64) as usize,
                        limit: EXACT_LIMIT,
                    });
                }
                (None, None)
            }
            SimMode::WindowTruncated {
                width,
                cap,
                tail_compensation,
            } => {
                if !(width > 0.0) {
                    return Err(Error::invalid(format!(
                        "window width must be positive, got {width}"
                    )));
                }
                if cap == 0 {
                    return Err(Error::invalid("cap must be at least 1"));
                }
                let tails = if tail_compensation {
                    if let Some(i) = mechs.iter().position(|m| !m.has_continuous_displacements()) {
                        return Err(Error::invalid(format!(
                            "tail compensation needs i.i.d. Gaussian or uniform displacements (mechanism {i})"
                        )));
                    }
                    let steps: Vec<&BranchingMechanism> =
                        step_mechs.iter().map(|&i| &mechs[i]).collect();
                    Some(tail_tables(&steps, h)?)
                } else {
                    None
                };
                (Some(Truncation { width, cap }), tails)
            }
        };
        Ok(Self {
            config,
            step_mechs,
            truncation,
            tails,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// One run whose root particle has key `seed`.
    pub fn run_with_seed(&self, replicate: u64, seed: u64) -> Result<RunRecord> {
        let t0 = Instant::now();
        let n = self.config.n;
        let mechs = self.config.schedule.mechanisms();
        let mut pop = Population::root(seed);
        let mut dropped = Vec::new();
        let mut ghost = f64::NEG_INFINITY;
        let mut trajectory = self.config.record_trajectory.then(|| {
            let mut v = Vec::with_capacity(n as usize + 1);
            v.push(TrajectoryPoint {
                k: 0,
                max: 0.0,
                count: 1,
                losses: 0,
            });
            v
        });
        for (k, &i) in self.step_mechs.iter().enumerate() {
            let generation = k as u64 + 1;
            // nothing is dropped from the final generation
            let truncation = if generation < n {
                self.truncation
            } else {
                None
            };
            dropped.clear();
            pop.step(&mechs[i], truncation, &mut dropped);
            if self.truncation.is_none() && pop.len() > EXACT_LIMIT {
                return Err(Error::ExactBlowup {
                    size: pop.len(),
                    limit: EXACT_LIMIT,
                });
            }
            if let (Some(tables), false) = (&self.tails, dropped.is_empty()) {
                let table = &tables[generation as usize];
                for p in &dropped {
                    let u = KeyedStream::new(derive_key(p.key, tag::TAIL)).open01();
                    if u < table.survival(ghost - p.pos) {
                        ghost = p.pos + table.inverse_survival(u);
                    }
                }
            }
            if let Some(t) = trajectory.as_mut() {
                let max = if generation == n {
                    pop.max().max(ghost)
                } else {
                    pop.max()
                };
                t.push(TrajectoryPoint {
                    k: generation,
                    max,
                    count: pop.len(),
                    losses: pop.truncation_losses(),
                });
            }
        }
        Ok(RunRecord {
            replicate,
            seed,
            n,
            m_n: if n == 0 { 0.0 } else { pop.max().max(ghost) },
            losses: pop.truncation_losses(),
            trajectory,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn run_replicate(&self, replicate: u64) -> Result<RunRecord> {
        self.run_with_seed(replicate, seed_stream(self.config.seed, replicate))
            .map_err(|e| Error::Replicate {
                replicate,
                source: Box::new(e),
            })
    }

    /// Replicates 0..R on `jobs` threads (0 means all cores), in replicate order.
    pub fn run_ensemble(&self, replicates: u64, jobs: usize) -> Result<Vec<RunRecord>> {
        if replicates == 0 {
            return Err(Error::invalid("an ensemble needs at least one replicate"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..replicates)
                .into_par_iter()
                .map(|r| self.run_replicate(r))
                .collect()
        })
    }
}

/// A single run with the root key `config.seed`.
pub fn run(config: &SimConfig) -> Result<RunRecord> {
    Simulator::new(config.clone())?.run_with_seed(0, config.seed)
}

pub fn run_ensemble(config: &SimConfig, replicates: u64, jobs: usize) -> Result<Vec<RunRecord>> {
    Simulator::new(config.clone())?.run_ensemble(replicates, jobs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierExceedance {
    pub y: f64,
    pub probability: f64,
    pub hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    pub replicates: u64,
    pub theta_star: f64,
    pub exceedances: Vec<BarrierExceedance>,
    /// Least-squares slope of log P̂ against y over the levels with P̂ > 0.
    pub log_slope: Option<f64>,
    /// log_slope ≤ −θ*/2, the decay implied by C(1 + y)e^{−θ* y}.
    pub consistent: bool,
}

/// Frequency of some particle reaching φ_n(k) + y at some generation k, with
/// φ_n(k) = vk − (3/(2θ*))(log(n + 1) − log(n − k + 1)).
pub fn diagnostics_barrier(
    records: &[RunRecord],
    prediction: &RegimePrediction,
    ys: &[f64],
) -> Result<BarrierReport> {
    if records.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "barrier diagnostics need 100 replicates, got {}",
            records.len()
        )));
    }
    if prediction.regime != Regime::Homogeneous {
        return Err(Error::AssumptionViolated(
            "barrier diagnostics are defined for homogeneous schedules".into(),
        ));
    }
    let theta = prediction.profiles[0].theta_star;
    let v = prediction.profiles[0].v;
    let mut exceedances = Vec::with_capacity(ys.len());
    for &y in ys {
        let mut hits = 0u64;
        for rec in records {
            let traj = rec
                .trajectory
                .as_ref()
                .ok_or_else(|| Error::invalid("barrier diagnostics need recorded trajectories"))?;
            let n = rec.n as f64;
            let hit = traj.iter().any(|p| {
                let k = p.k as f64;
                let phi = v * k - 1.5 / theta * ((n + 1.0).ln() - (n - k + 1.0).ln());
                p.max >= phi + y
            });
            hits += hit as u64;
        }
        exceedances.push(BarrierExceedance {
            y,
            probability: hits as f64 / records.len() as f64,
            hits,
        });
    }
    let pts: Vec<(f64, f64)> = exceedances
        .iter()
        .filter(|e| e.probability > 0.0)
        .map(|e| (e.y, e.probability.ln()))
        .collect();
    let log_slope = (pts.len() >= 2).then(|| {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    Ok(BarrierReport {
        replicates: records.len() as u64,
        theta_star: theta,
        exceedances,
        log_slope,
        consistent: log_slope.is_some_and(|s| s <= -theta / 2.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regimes::solve_multi_era;

    fn gauss(var: f64) -> BranchingMechanism {
        BranchingMechanism::binary_gaussian(0.0, var).unwrap()
    }

    fn pm1() -> BranchingMechanism {
        BranchingMechanism::explicit(&[(1.0, &[1.0, -1.0])]).unwrap()
    }

    fn config(mech: BranchingMechanism, n: u64, mode: SimMode) -> SimConfig {
        SimConfig {
            schedule: EnvironmentSchedule::homogeneous(mech),
            n,
            mode,
            seed: 7,
            record_trajectory: false,
        }
    }

    fn window(width: f64, cap: usize, tail_compensation: bool) -> SimMode {
        SimMode::WindowTruncated {
            width,
            cap,
            tail_compensation,
        }
    }

    #[test]
    fn deterministic_step() {
        let mut pop = Population::root(1);
        pop.step(&pm1(), None, &mut Vec::new());
        let mut pos: Vec<f64> = pop.positions().collect();
        pos.sort_by(f64::total_cmp);
        assert_eq!(pos, vec![-1.0, 1.0]);
        assert_eq!(pop.generation(), 1);
    }

    #[test]
    fn exact_mode_conserves_counts() {
        let m = BranchingMechanism::new(crate::MechanismSpec::RandomCountIid {
            count_probs: vec![0.3, 0.4, 0.3],
            displacement: crate::DisplacementLaw::Gaussian {
                mean: 0.0,
                var: 1.0,
            },
        })
        .unwrap();
        let mut pop = Population::root(5);
        for _ in 0..6 {
            let expected: usize = pop
                .particles()
                .iter()
                .map(|p| {
                    m.sample_offspring(&mut KeyedStream::new(derive_key(p.key, tag::OFFSPRING)))
                        .len()
                })
                .sum();
            pop.step(&m, None, &mut Vec::new());
            assert_eq!(pop.len(), expected);
            assert_eq!(pop.truncation_losses(), 0);
        }
    }

    #[test]
    fn truncation_postconditions() {
        let positions: Vec<f64> = (0..1_000_000).map(|i| i as f64 / 1e6).collect();
        let mut pop = Population::from_positions(&positions, 3);
        let mut dropped = Vec::new();
        pop.step(
            &gauss(1.0),
            Some(Truncation {
                width: 10.0,
                cap: 1_000_000,
            }),
            &mut dropped,
        );
        assert!(pop.len() <= 1_000_000);
        let min = pop.positions().fold(f64::INFINITY, f64::min);
        assert!(min >= pop.max() - 10.0);
        assert_eq!(pop.positions().fold(f64::NEG_INFINITY, f64::max), pop.max());
        assert_eq!(pop.truncation_losses() as usize, dropped.len());
        assert_eq!(dropped.len() + pop.len(), 2_000_000);
    }

    #[test]
    fn run_edge_cases() {
        assert_eq!(
            run(&config(gauss(1.0), 0, SimMode::Exact)).unwrap().m_n,
            0.0
        );
        assert_eq!(run(&config(pm1(), 5, SimMode::Exact)).unwrap().m_n, 5.0);
        assert!(matches!(
            run(&config(gauss(1.0), 30, SimMode::Exact)),
            Err(Error::ExactBlowup { .. })
        ));
        assert!(matches!(
            run(&config(gauss(1.0), 10, window(0.0, 10, false))),
            Err(Error::Invalid(_))
        ));
        assert!(matches!(
            run(&config(pm1(), 10, window(5.0, 10, true))),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn trajectory_ends_at_m_n() {
        let mut c = config(gauss(1.0), 40, window(15.0, 200, true));
        c.record_trajectory = true;
        let r = run(&c).unwrap();
        let t = r.trajectory.unwrap();
        assert_eq!(t.len(), 41);
        assert_eq!(t.last().unwrap().max, r.m_n);
    }

    #[test]
    fn ensembles_are_ordered_and_thread_independent() {
        let c = config(gauss(1.0), 60, window(15.0, 300, true));
        let a = run_ensemble(&c, 6, 1).unwrap();
        let b = run_ensemble(&c, 6, 4).unwrap();
        let strip = |v: &[RunRecord]| {
            v.iter()
                .map(|r| (r.replicate, r.seed, r.m_n, r.losses))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(
            a.iter().map(|r| r.replicate).collect::<Vec<_>>(),
            (0..6).collect::<Vec<_>>()
        );
        assert_ne!(a[0].seed, a[1].seed);
        assert_ne!(a[0].m_n, a[1].m_n);
    }

    #[test]
    fn truncation_matches_exact_on_paired_seeds() {
        // n = 20 keeps 2^20 particles within the exact-mode limit
        let exact = Simulator::new(config(gauss(1.0), 20, SimMode::Exact)).unwrap();
        let trunc =
            Simulator::new(config(gauss(1.0), 20, window(15.0, DEFAULT_CAP, false))).unwrap();
        let mut equal = 0;
        for r in 0..20 {
            let a = exact.run_replicate(r).unwrap().m_n;
            let b = trunc.run_replicate(r).unwrap().m_n;
            assert!(b <= a);
            equal += (a == b) as u32;
        }
        assert!(equal >= 19, "{equal}");
    }

    #[test]
    fn compensated_law_matches_exact_runs() {
        // M_12 under a harsh cap against exact runs, by two-sample Kolmogorov–Smirnov
        let n = 12;
        let r = 1500;
        let exact = run_ensemble(&config(gauss(1.0), n, SimMode::Exact), r, 0).unwrap();
        let mut comp_cfg = config(gauss(1.0), n, window(3.0, 8, true));
        comp_cfg.seed = 99;
        let comp = run_ensemble(&comp_cfg, r, 0).unwrap();
        let mut a: Vec<f64> = exact.iter().map(|x| x.m_n).collect();
        let mut b: Vec<f64> = comp.iter().map(|x| x.m_n).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for &x in a.iter().chain(&b) {
            let fa = a.partition_point(|&y| y <= x) as f64 / r as f64;
            let fb = b.partition_point(|&y| y <= x) as f64 / r as f64;
            d = d.max((fa - fb).abs());
        }
        // 1% critical value is 1.63·√(2/R) ≈ 0.060
        assert!(d < 0.06, "KS distance {d}");
        assert!(comp.iter().all(|x| x.losses > 0));
    }

    #[test]
    fn barrier_diagnostics() {
        let mut c = config(gauss(1.0), 50, window(15.0, 300, false));
        c.record_trajectory = true;
        let recs = run_ensemble(&c, 400, 0).unwrap();
        let pred = solve_multi_era(&c.schedule).unwrap();
        let rep = diagnostics_barrier(&recs, &pred, &[2.0, 4.0, 6.0, 10.0]).unwrap();
        assert!(rep.exceedances[3].probability < 0.05);
        assert!(rep.log_slope.unwrap() < 0.0);
        assert!(matches!(
            diagnostics_barrier(&[], &pred, &[2.0]),
            Err(Error::InsufficientData(_))
        ));
    }
}
