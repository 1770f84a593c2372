//! The five subcommands.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use brwi::regimes::{solve_multi_era, EnvironmentSchedule};
use brwi::simulator::{SimConfig, Simulator};
use brwi::stats::{fit_front, tightness, Ensemble};
use brwi::walklab::{
    ballot_exact_curve, ballot_probability, barrier_probability, loglog_slope, many_to_one_suite,
    stone_window, Barrier, BarrierSpec, ManyToOneCase, Method, PiecewiseWalk, ProbabilityEstimate,
    StepLaw,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{BallotEvent, ExperimentConfig};
use crate::output::{csv_bytes, float, json_bytes, write_file, FileEntry};
use crate::Failure;

/// Many-to-one gate: |tree − walk| below this in every case.
pub const MANY_TO_ONE_TOL: f64 = 1e-12;
/// Ballot gate: exact simple-walk survival slope within this of −1/2.
pub const BALLOT_SLOPE_TOL: f64 = 0.05;

pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub out: Option<&'a Path>,
    pub jobs: usize,
}

impl Context<'_> {
    /// Writes the resolved config next to the outputs, or to stderr.
    pub fn echo_config(&self) -> Result<(), Failure> {
        match self.out {
            Some(dir) => {
                write_file(dir, "resolved_config.json", &json_bytes(self.config)).map(|_| ())
            }
            None => {
                eprintln!(
                    "resolved config: {}",
                    serde_json::to_string(self.config).expect("serialisable config")
                );
                Ok(())
            }
        }
    }

    fn schedule(&self) -> Result<&EnvironmentSchedule, Failure> {
        self.config
            .schedule
            .as_ref()
            .ok_or_else(|| Failure::Config("config has no schedule".into()))
    }

    /// Writes `bytes` to the output directory if there is one, else to stdout.
    fn emit(&self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        match self.out {
            Some(dir) => write_file(dir, name, bytes).map(|_| ()),
            None => {
                print!("{}", String::from_utf8_lossy(bytes));
                Ok(())
            }
        }
    }
}

pub fn predict(ctx: &Context) -> Result<(), Failure> {
    let prediction = solve_multi_era(ctx.schedule()?)?;
    let bytes = json_bytes(&prediction);
    if let Some(dir) = ctx.out {
        write_file(dir, "prediction.json", &bytes)?;
    }
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

#[derive(Serialize)]
struct LadderTiming {
    n: u64,
    wall_ms: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    resolved_config: &'a ExperimentConfig,
    files: Vec<FileEntry>,
    ladder: Vec<LadderTiming>,
    wall_ms: f64,
}

pub fn simulate(ctx: &Context) -> Result<(), Failure> {
    let schedule = ctx.schedule()?;
    let sim = ctx
        .config
        .sim
        .as_ref()
        .ok_or_else(|| Failure::Config("config has no sim block".into()))?;
    let out = ctx
        .out
        .ok_or_else(|| Failure::Config("simulate needs --out".into()))?;
    if sim.n_ladder.is_empty() || sim.replicates == 0 {
        return Err(Failure::Config(
            "sim: need a non-empty n_ladder and replicates >= 1".into(),
        ));
    }
    let start = Instant::now();
    let mut files = Vec::new();
    let mut ladder = Vec::new();
    for &n in &sim.n_ladder {
        let t = Instant::now();
        let simulator = Simulator::new(SimConfig {
            schedule: schedule.clone(),
            n,
            mode: sim.mode,
            seed: sim.seed,
            record_trajectory: sim.record_trajectory,
        })?;
        let records = simulator.run_ensemble(sim.replicates, ctx.jobs)?;
        let rows = records.iter().map(|r| {
            let wall = if sim.timing {
                float(r.wall_ms)
            } else {
                String::new()
            };
            vec![
                r.replicate.to_string(),
                r.seed.to_string(),
                r.n.to_string(),
                float(r.m_n),
                r.losses.to_string(),
                wall,
            ]
        });
        let body = csv_bytes(
            &["replicate", "seed", "n", "M_n", "losses", "wall_ms"],
            rows,
        );
        files.push(write_file(out, &format!("ensemble_n{n}.csv"), &body)?);
        if sim.record_trajectory {
            let rows = records.iter().flat_map(|r| {
                r.trajectory.iter().flatten().map(move |p| {
                    vec![
                        r.replicate.to_string(),
                        p.k.to_string(),
                        float(p.max),
                        p.count.to_string(),
                        p.losses.to_string(),
                    ]
                })
            });
            let body = csv_bytes(&["replicate", "k", "max", "count", "losses"], rows);
            files.push(write_file(out, &format!("trajectory_n{n}.csv"), &body)?);
        }
        ladder.push(LadderTiming {
            n,
            wall_ms: t.elapsed().as_secs_f64() * 1e3,
        });
    }
    let manifest = Manifest {
        command: "simulate",
        version: env!("CARGO_PKG_VERSION"),
        resolved_config: ctx.config,
        files,
        ladder,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    write_file(out, "manifest.json", &json_bytes(&manifest))?;
    Ok(())
}

fn read_ensembles(paths: &[std::path::PathBuf]) -> Result<Vec<Ensemble>, Failure> {
    let mut by_n: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for path in paths {
        let bad = |e: &dyn std::fmt::Display| Failure::Config(format!("{}: {e}", path.display()));
        let mut reader = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
        let headers = reader.headers().map_err(|e| bad(&e))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| bad(&format!("no {name} column")))
        };
        let (cn, cm) = (col("n")?, col("M_n")?);
        for row in reader.records() {
            let row = row.map_err(|e| bad(&e))?;
            let n: u64 = row[cn].parse().map_err(|e| bad(&e))?;
            let m: f64 = row[cm].parse().map_err(|e| bad(&e))?;
            by_n.entry(n).or_default().push(m);
        }
    }
    Ok(by_n
        .into_iter()
        .map(|(n, values)| Ensemble { n, values })
        .collect())
}

pub fn fit(ctx: &Context) -> Result<(), Failure> {
    let block = ctx
        .config
        .fit
        .as_ref()
        .ok_or_else(|| Failure::Config("config has no fit block".into()))?;
    let ensembles = read_ensembles(&block.inputs)?;
    let fit = fit_front(&ensembles, block.seed)?;
    let report = match &ctx.config.schedule {
        Some(schedule) => {
            let prediction = solve_multi_era(schedule)?;
            json!({ "fit": fit, "tightness": tightness(&ensembles, &prediction)? })
        }
        None => json!({ "fit": fit }),
    };
    ctx.emit("fit.json", &json_bytes(&report))
}

fn estimate_row(e: &ProbabilityEstimate) -> Vec<String> {
    vec![
        e.n.to_string(),
        float(e.estimate),
        float(e.ci_lo),
        float(e.ci_hi),
        float(e.scaled_estimate),
        e.resolved.to_string(),
    ]
}

pub fn ballot(ctx: &Context) -> Result<(), Failure> {
    let block = ctx
        .config
        .ballot
        .as_ref()
        .ok_or_else(|| Failure::Config("config has no ballot block".into()))?;
    let one_law = || match block.steps.as_slice() {
        [law] => Ok(law.clone()),
        _ => Err(Failure::Config(
            "ballot: this event needs exactly one step law".into(),
        )),
    };
    let ladder = || {
        if block.n_ladder.is_empty() {
            Err(Failure::Config("ballot: empty n_ladder".into()))
        } else {
            Ok(block.n_ladder.clone())
        }
    };
    let mut estimates = Vec::new();
    match &block.event {
        BallotEvent::Constant { y } => {
            let law = one_law()?;
            for n in ladder()? {
                estimates.push(ballot_probability(&law, *y, n, block.method)?);
            }
        }
        BallotEvent::PowerLaw { alpha, y } => {
            let law = one_law()?;
            for n in ladder()? {
                let spec = BarrierSpec::new(
                    Barrier::PowerLaw {
                        alpha: *alpha,
                        y: *y,
                    },
                    n,
                )?;
                estimates.push(barrier_probability(
                    &PiecewiseWalk::homogeneous(law.clone(), n),
                    &spec,
                    block.method,
                )?);
            }
        }
        BallotEvent::Window { r, h } => {
            let law = one_law()?;
            for n in ladder()? {
                estimates.push(stone_window(&law, n, *r, *h, block.method)?);
            }
        }
        BallotEvent::LogBridge { a, y, h, splits } => {
            let [x, yl, z]: [StepLaw; 3] = block.steps.clone().try_into().map_err(|_| {
                Failure::Config("ballot: a log bridge needs three step laws".into())
            })?;
            for &[p, q, r] in splits {
                let spec = BarrierSpec::new(
                    Barrier::LogBridge {
                        a: *a,
                        p,
                        q,
                        r,
                        y: *y,
                        h: *h,
                    },
                    p + q + r,
                )?;
                let walk = PiecewiseWalk::three_piece([x.clone(), yl.clone(), z.clone()], p, q, r);
                estimates.push(barrier_probability(&walk, &spec, block.method)?);
            }
        }
    }
    let body = csv_bytes(
        &[
            "n",
            "estimate",
            "ci_lo",
            "ci_hi",
            "scaled_estimate",
            "resolved",
        ],
        estimates.iter().map(estimate_row),
    );
    ctx.emit("ballot.csv", &body)
}

#[derive(Serialize)]
struct MechanismReport {
    cases: usize,
    max_abs_diff: f64,
    failures: Vec<ManyToOneCase>,
}

#[derive(Serialize)]
struct BallotGate {
    two_step: f64,
    central_window_n10: f64,
    slope: f64,
    pass: bool,
}

pub fn verify(ctx: &Context) -> Result<(), Failure> {
    let block = ctx
        .config
        .verify
        .as_ref()
        .expect("verify block is filled in by the loader");
    let mut pass = true;
    let mut mechanisms = Vec::new();
    for mech in &block.mechanisms {
        let cases = many_to_one_suite(
            mech,
            &block.thetas,
            block.n_max,
            block.functionals,
            block.seed,
            block.tilt_offset,
        )?;
        let max_abs_diff = cases.iter().map(|c| c.report.abs_diff).fold(0.0, f64::max);
        let failures: Vec<ManyToOneCase> = cases
            .iter()
            .filter(|c| !(c.report.abs_diff < MANY_TO_ONE_TOL))
            .cloned()
            .collect();
        pass &= failures.is_empty();
        mechanisms.push(MechanismReport {
            cases: cases.len(),
            max_abs_diff,
            failures,
        });
    }
    let ballot = if block.ballot {
        let simple = StepLaw::simple();
        let two_step = ballot_probability(&simple, 0.0, 2, Method::ExactDp)?.estimate;
        let window = stone_window(&simple, 10, 0.0, 0.0, Method::ExactDp)?.estimate;
        let curve = ballot_exact_curve(&simple, 0.0, 2048)?;
        let slope = loglog_slope(
            &(6..=11)
                .map(|e| (1u64 << e, curve[1 << e]))
                .collect::<Vec<_>>(),
        );
        let ok = two_step == 0.5
            && (window - 252.0 / 1024.0).abs() < 1e-15
            && (slope + 0.5).abs() < BALLOT_SLOPE_TOL;
        pass &= ok;
        Some(BallotGate {
            two_step,
            central_window_n10: window,
            slope,
            pass: ok,
        })
    } else {
        None
    };
    let report = json!({ "pass": pass, "many_to_one": mechanisms, "ballot": ballot });
    ctx.emit("verify.json", &json_bytes(&report))?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Verification("an exact gate failed".into()))
    }
}
