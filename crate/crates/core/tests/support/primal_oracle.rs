//! Brute-force search of the primal speed problem
//! max Σ w_i a_i subject to Σ_{i≤j} w_i κ*_i(a_i) ≤ 0, for Gaussian
//! mechanisms where κ*(a) = (a − μ)²/(2s²) − log c on a ≥ μ.

use brwi::regimes::EnvironmentSchedule;
use brwi::rng::{seed_stream, KeyedStream};
use brwi::{BranchingMechanism, DisplacementLaw, MechanismSpec};

#[derive(Clone, Copy, Debug)]
pub struct Env {
    pub mu: f64,
    pub var: f64,
    pub count: u32,
    pub w: f64,
}

impl Env {
    fn kstar(&self, a: f64) -> f64 {
        let d = (a - self.mu).max(0.0);
        d * d / (2.0 * self.var) - (self.count as f64).ln()
    }

    /// Largest a with w·κ*(a) ≤ slack.
    fn max_a(&self, slack: f64) -> f64 {
        self.mu + (2.0 * self.var * ((self.count as f64).ln() + slack / self.w)).sqrt()
    }

    pub fn mechanism(&self) -> BranchingMechanism {
        BranchingMechanism::new(MechanismSpec::FixedCountIid {
            count: self.count,
            displacement: DisplacementLaw::Gaussian {
                mean: self.mu,
                var: self.var,
            },
        })
        .unwrap()
    }
}

/// Slopes from box coordinates: a_j = μ_j + f_j·(largest feasible a_j − μ_j),
/// so every f ∈ [0, 1]^K is feasible and the last coordinate is f_K = 1.
fn slopes(envs: &[Env], f: &[f64]) -> Vec<f64> {
    let mut slack = 0.0_f64;
    let mut out = Vec::with_capacity(envs.len());
    for (j, e) in envs.iter().enumerate() {
        let fj = f.get(j).copied().unwrap_or(1.0);
        let a = e.mu + fj * (e.max_a(slack.max(0.0)) - e.mu);
        slack -= e.w * e.kstar(a);
        out.push(a);
    }
    out
}

fn objective(envs: &[Env], f: &[f64]) -> f64 {
    envs.iter().zip(slopes(envs, f)).map(|(e, a)| e.w * a).sum()
}

pub fn brute_force(envs: &[Env]) -> (f64, Vec<f64>) {
    let k = envs.len() - 1;
    let m = 3000usize;
    let mut best = (f64::NEG_INFINITY, vec![1.0; k]);
    for code in 0..(m + 1).pow(k as u32) {
        let mut c = code;
        let f: Vec<f64> = (0..k)
            .map(|_| {
                let x = (c % (m + 1)) as f64 / m as f64;
                c /= m + 1;
                x
            })
            .collect();
        let v = objective(envs, &f);
        if v > best.0 {
            best = (v, f);
        }
    }
    // pattern search refinement inside the box
    let (mut val, mut x) = best;
    let mut step = 1.0 / m as f64;
    while step > 1e-10 {
        let mut moved = false;
        for code in 0..3usize.pow(k as u32) {
            let mut y = x.clone();
            let mut c = code;
            for yi in y.iter_mut() {
                *yi = (*yi + (c % 3) as f64 * step - step).clamp(0.0, 1.0);
                c /= 3;
            }
            let v = objective(envs, &y);
            if v > val + 1e-15 {
                (val, x, moved) = (v, y, true);
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    (val, slopes(envs, &x))
}

pub fn random_schedule(r: u64) -> Vec<Env> {
    let mut s = KeyedStream::new(seed_stream(2024, r));
    let k = 1 + (r % 3) as usize;
    let mut cuts: Vec<f64> = (0..k - 1).map(|_| 0.1 + 0.8 * s.open01()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut bps = vec![0.0];
    bps.extend(cuts);
    bps.push(1.0);
    (0..k)
        .map(|i| Env {
            mu: 2.0 * s.open01() - 1.0,
            var: 0.25 + 3.75 * s.open01(),
            count: if s.open01() < 0.5 { 2 } else { 3 },
            w: bps[i + 1] - bps[i],
        })
        .collect()
}

/// The schedule of `envs`, with breakpoints at the cumulative weights.
pub fn schedule(envs: &[Env]) -> EnvironmentSchedule {
    let mut bps = vec![0.0];
    for e in envs {
        bps.push(bps.last().unwrap() + e.w);
    }
    *bps.last_mut().unwrap() = 1.0;
    EnvironmentSchedule::new(bps, envs.iter().map(Env::mechanism).collect()).unwrap()
}
