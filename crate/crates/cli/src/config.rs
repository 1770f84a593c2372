//! Experiment configuration: one JSON document with an optional block per
//! subcommand. Unknown keys are rejected and every default is written back
//! out in the resolved echo.

use std::path::PathBuf;

use brwi::regimes::EnvironmentSchedule;
use brwi::simulator::SimMode;
use brwi::walklab::{Method, StepLaw};
use brwi::BranchingMechanism;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<EnvironmentSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ballot: Option<BallotBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub n_ladder: Vec<u64>,
    pub replicates: u64,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_trajectory: bool,
    /// Fill the wall_ms column; off by default so outputs are reproducible.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBlock {
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BallotEvent {
    /// T_j ≥ −y for j ≤ n, over `n_ladder`.
    Constant { y: f64 },
    /// T_j ≥ −j^α − y for j ≤ n, over `n_ladder`.
    PowerLaw { alpha: f64, y: f64 },
    /// Three-piece bridge for each (p, q, r) in `splits`.
    LogBridge {
        a: f64,
        y: f64,
        h: f64,
        splits: Vec<[u64; 3]>,
    },
    /// T_n ∈ [r, r + h], over `n_ladder`.
    Window { r: f64, h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallotBlock {
    /// One law, or three for a bridge.
    pub steps: Vec<StepLaw>,
    pub event: BallotEvent,
    #[serde(default)]
    pub n_ladder: Vec<u64>,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default = "default_mechanisms")]
    pub mechanisms: Vec<BranchingMechanism>,
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_functionals")]
    pub functionals: usize,
    #[serde(default)]
    pub seed: u64,
    /// Builds the walk at θ + offset while weighting at θ; for mutation checks.
    #[serde(default)]
    pub tilt_offset: f64,
    #[serde(default = "default_true")]
    pub ballot: bool,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self {
            mechanisms: default_mechanisms(),
            thetas: default_thetas(),
            n_max: default_n_max(),
            functionals: default_functionals(),
            seed: 0,
            tilt_offset: 0.0,
            ballot: true,
        }
    }
}

fn default_mechanisms() -> Vec<BranchingMechanism> {
    vec![BranchingMechanism::explicit(&[(1.0, &[1.0, -1.0])]).unwrap()]
}

fn default_thetas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

fn default_n_max() -> usize {
    4
}

fn default_functionals() -> usize {
    50
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Applies a command-line seed to every block that has one.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(s) = &mut self.sim {
            s.seed = seed;
        }
        if let Some(f) = &mut self.fit {
            f.seed = seed;
        }
        if let Some(b) = &mut self.ballot {
            if let Method::MonteCarlo { seed: s, .. } = &mut b.method {
                *s = seed;
            }
        }
        if let Some(v) = &mut self.verify {
            v.seed = seed;
        }
    }
}
