//! Ensemble-level behaviour of the particle simulator.

use brwi::regimes::{solve_multi_era, EnvironmentSchedule};
use brwi::simulator::{diagnostics_barrier, run_ensemble, SimConfig, SimMode, Simulator};
use brwi::BranchingMechanism;

fn gauss(var: f64) -> BranchingMechanism {
    BranchingMechanism::binary_gaussian(0.0, var).unwrap()
}

fn config(schedule: EnvironmentSchedule, n: u64, mode: SimMode) -> SimConfig {
    SimConfig {
        schedule,
        n,
        mode,
        seed: 2024,
        record_trajectory: false,
    }
}

fn compensated(cap: usize) -> SimMode {
    SimMode::WindowTruncated {
        width: 15.0,
        cap,
        tail_compensation: true,
    }
}

#[test]
fn window_truncation_keeps_the_maximum_on_paired_seeds() {
    let schedule = EnvironmentSchedule::homogeneous(gauss(1.0));
    let exact = Simulator::new(config(schedule.clone(), 20, SimMode::Exact)).unwrap();
    let trunc = Simulator::new(config(schedule, 20, SimMode::default())).unwrap();
    let mut equal = 0;
    for r in 0..100 {
        let a = exact.run_replicate(r).unwrap().m_n;
        let b = trunc.run_replicate(r).unwrap().m_n;
        assert!(b <= a);
        equal += (a == b) as u32;
    }
    assert!(equal >= 99, "{equal}");
}

#[test]
fn mean_front_at_n_50_matches_prediction() {
    let schedule = EnvironmentSchedule::homogeneous(gauss(1.0));
    let pred = solve_multi_era(&schedule).unwrap();
    let n = 50;
    let recs = run_ensemble(&config(schedule, n, compensated(300)), 1000, 0).unwrap();
    let mean = recs.iter().map(|r| r.m_n).sum::<f64>() / recs.len() as f64;
    let m_n = pred.predict_front(n).unwrap().m_n;
    assert!((mean / m_n - 1.0).abs() < 0.05, "{mean} vs {m_n}");
}

#[test]
fn faster_second_era_gives_faster_front() {
    let n = 100;
    let means: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&var| {
            let schedule = EnvironmentSchedule::two_era(gauss(1.0), gauss(var), 0.5).unwrap();
            let recs = run_ensemble(&config(schedule, n, compensated(300)), 500, 0).unwrap();
            recs.iter().map(|r| r.m_n).sum::<f64>() / (recs.len() as f64 * n as f64)
        })
        .collect();
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
}

#[test]
fn far_barrier_is_rarely_crossed() {
    let schedule = EnvironmentSchedule::homogeneous(gauss(1.0));
    let pred = solve_multi_era(&schedule).unwrap();
    let mut c = config(
        schedule,
        50,
        SimMode::WindowTruncated {
            width: 15.0,
            cap: 300,
            tail_compensation: false,
        },
    );
    c.record_trajectory = true;
    let recs = run_ensemble(&c, 10_000, 0).unwrap();
    let rep = diagnostics_barrier(&recs, &pred, &[2.0, 4.0, 6.0, 10.0]).unwrap();
    assert!(rep.exceedances[3].probability < 0.05, "{rep:?}");
    let three = diagnostics_barrier(&recs, &pred, &[2.0, 4.0, 6.0]).unwrap();
    assert!(three.log_slope.unwrap() < 0.0);
}
