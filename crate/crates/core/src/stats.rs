//! Speed and log-correction estimates from ensembles of M_n over a ladder
//! of n, and tightness of M_n − m_n.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regimes::RegimePrediction;
use crate::rng::{derive_key, seed_stream, tag, KeyedStream};

pub const MIN_REPLICATES: usize = 100;
pub const MIN_LADDER: usize = 4;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Non-tightness is flagged when q90 − q10 grows by more than this factor
/// across a decade of n.
pub const SPREAD_GROWTH_LIMIT: f64 = 1.5;

/// Samples of M_n at one n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub n: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub n: u64,
    pub replicates: usize,
    pub median: f64,
    pub median_stderr: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub v_hat_emp: Estimate,
    /// Coefficient of log n; the prediction is −L.
    pub c_log_emp: Estimate,
    pub intercept: Estimate,
    pub rms_weighted_residual: f64,
    pub ladder: Vec<LadderPoint>,
    pub n_ladder: Vec<u64>,
    pub bootstrap_resamples: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    quantile_sorted(values, 0.5)
}

fn check_ladder(ensembles: &[Ensemble]) -> Result<()> {
    if ensembles.is_empty() {
        return Err(Error::InsufficientData("empty ladder".into()));
    }
    if let Some(e) = ensembles.iter().find(|e| e.values.len() < MIN_REPLICATES) {
        return Err(Error::InsufficientData(format!(
            "n = {} has {} replicates, need {MIN_REPLICATES}",
            e.n,
            e.values.len()
        )));
    }
    let mut ns: Vec<u64> = ensembles.iter().map(|e| e.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() != ensembles.len() {
        return Err(Error::invalid("ladder contains a repeated n"));
    }
    if ns.len() < MIN_LADDER {
        return Err(Error::InsufficientData(format!(
            "ladder has {} values of n, need {MIN_LADDER}",
            ns.len()
        )));
    }
    if ns[0] < 2 || (*ns.last().unwrap() as f64) < 10.0 * ns[0] as f64 {
        return Err(Error::InsufficientData(
            "ladder must span a decade of n >= 2".into(),
        ));
    }
    Ok(())
}

/// Weighted least squares of y on (n, log n, 1).
fn wls(ns: &[u64], y: &[f64], w: &[f64]) -> [f64; 3] {
    let m = ns.len();
    let x = DMatrix::from_fn(m, 3, |i, j| {
        let n = ns[i] as f64;
        let s = w[i].sqrt();
        s * match j {
            0 => n,
            1 => n.ln(),
            _ => 1.0,
        }
    });
    let b = DVector::from_fn(m, |i, _| w[i].sqrt() * y[i]);
    let beta = x
        .svd(true, true)
        .solve(&b, 1e-14)
        .expect("svd with both factors");
    [beta[0], beta[1], beta[2]]
}

fn stderr_floor(value: f64) -> f64 {
    1e-9 * (1.0 + value.abs())
}

/// Weighted least squares of median(M_n) on (n, log n, 1) with weights from
/// bootstrap variances of the medians, and bootstrap standard errors.
pub fn fit_front(ensembles: &[Ensemble], seed: u64) -> Result<FitResult> {
    check_ladder(ensembles)?;
    let mut ens: Vec<&Ensemble> = ensembles.iter().collect();
    ens.sort_by_key(|e| e.n);
    let ns: Vec<u64> = ens.iter().map(|e| e.n).collect();
    let medians: Vec<f64> = ens.iter().map(|e| median(&mut e.values.clone())).collect();

    // boot[b][i]: median of resample b at ladder point i
    let mut boot = vec![vec![0.0; ens.len()]; BOOTSTRAP_RESAMPLES];
    let mut scratch = Vec::new();
    for (b, row) in boot.iter_mut().enumerate() {
        for (i, e) in ens.iter().enumerate() {
            let mut rng = KeyedStream::new(derive_key(
                derive_key(seed_stream(seed, b as u64), tag::BOOTSTRAP),
                e.n,
            ));
            scratch.clear();
            scratch
                .extend((0..e.values.len()).map(|_| e.values[rng.random_range(0..e.values.len())]));
            row[i] = median(&mut scratch);
        }
    }
    let vars: Vec<f64> = (0..ens.len())
        .map(|i| {
            let mean = boot.iter().map(|r| r[i]).sum::<f64>() / BOOTSTRAP_RESAMPLES as f64;
            boot.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>()
                / (BOOTSTRAP_RESAMPLES - 1) as f64
        })
        .collect();
    let mean_var = vars.iter().sum::<f64>() / vars.len() as f64;
    let floor = 1e-12 + 1e-6 * mean_var;
    let weights: Vec<f64> = vars.iter().map(|v| 1.0 / v.max(floor)).collect();

    let beta = wls(&ns, &medians, &weights);
    let fits: Vec<[f64; 3]> = boot.iter().map(|row| wls(&ns, row, &weights)).collect();
    let est = |j: usize| {
        let mean = fits.iter().map(|f| f[j]).sum::<f64>() / fits.len() as f64;
        let sd = (fits.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>()
            / (fits.len() - 1) as f64)
            .sqrt();
        Estimate {
            value: beta[j],
            stderr: sd.max(stderr_floor(beta[j])),
        }
    };

    let ladder: Vec<LadderPoint> = ens
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let n = e.n as f64;
            LadderPoint {
                n: e.n,
                replicates: e.values.len(),
                median: medians[i],
                median_stderr: vars[i].sqrt(),
                residual: medians[i] - (beta[0] * n + beta[1] * n.ln() + beta[2]),
            }
        })
        .collect();
    let rms = (ladder
        .iter()
        .zip(&weights)
        .map(|(p, w)| w * p.residual * p.residual)
        .sum::<f64>()
        / ladder.len() as f64)
        .sqrt();
    Ok(FitResult {
        v_hat_emp: est(0),
        c_log_emp: est(1),
        intercept: est(2),
        rms_weighted_residual: rms,
        ladder,
        n_ladder: ns,
        bootstrap_resamples: BOOTSTRAP_RESAMPLES,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub n: u64,
    pub m_n: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    /// q90 − q10.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub rows: Vec<TightnessRow>,
    pub max_spread: f64,
    /// Largest ratio spread(n′)/spread(n) over pairs with n′ ≥ 10n.
    pub spread_growth: f64,
    pub tight: bool,
    /// Least-squares slope of q50 against log n.
    pub median_log_slope: f64,
}

impl TightnessReport {
    /// A log-n trend in the medians larger than half the coefficient error
    /// `delta_l` of the centering.
    pub fn drift_detected(&self, delta_l: f64) -> bool {
        self.median_log_slope.abs() > 0.5 * delta_l.abs()
    }
}

/// Quantiles of M_n − m_n per n, with m_n from `prediction`.
pub fn tightness(ensembles: &[Ensemble], prediction: &RegimePrediction) -> Result<TightnessReport> {
    check_ladder(ensembles)?;
    let mut ens: Vec<&Ensemble> = ensembles.iter().collect();
    ens.sort_by_key(|e| e.n);
    let mut rows = Vec::with_capacity(ens.len());
    for e in ens {
        let m_n = prediction.predict_front(e.n)?.m_n;
        let mut d: Vec<f64> = e.values.iter().map(|x| x - m_n).collect();
        d.sort_by(f64::total_cmp);
        let (q10, q50, q90) = (
            quantile_sorted(&d, 0.1),
            quantile_sorted(&d, 0.5),
            quantile_sorted(&d, 0.9),
        );
        rows.push(TightnessRow {
            n: e.n,
            m_n,
            q10,
            q50,
            q90,
            spread: q90 - q10,
        });
    }
    let mut growth: f64 = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            if b.n >= 10 * a.n {
                growth = growth.max(b.spread / a.spread);
            }
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = rows.iter().map(|r| r.q50).sum::<f64>() / rows.len() as f64;
    let sxy: f64 = xs
        .iter()
        .zip(&rows)
        .map(|(x, r)| (x - mx) * (r.q50 - my))
        .sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(TightnessReport {
        max_spread: rows.iter().map(|r| r.spread).fold(0.0, f64::max),
        spread_growth: growth,
        tight: growth < SPREAD_GROWTH_LIMIT,
        median_log_slope: sxy / sxx,
        rows,
    })
}
