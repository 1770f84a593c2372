//! Laws of the log-Laplace transform and its conjugate over random mechanisms.

use brwi::mechanisms::Outcome;
use brwi::rng::KeyedStream;
use brwi::transforms::{cramer, critical_theta, ArgTheta};
use brwi::walklab::tilted_step;
use brwi::{BranchingMechanism, DisplacementLaw, MechanismSpec};
use proptest::prelude::*;

fn displacement() -> impl Strategy<Value = DisplacementLaw> {
    prop_oneof![
        (-1.0..1.0f64, 0.2..3.0f64).prop_map(|(mean, var)| DisplacementLaw::Gaussian { mean, var }),
        (-2.0..0.0f64, 0.1..2.0f64).prop_map(|(lo, w)| DisplacementLaw::Uniform { lo, hi: lo + w }),
        (-2.0..0.0f64, 0.1..2.0f64, 0.05..0.95f64).prop_map(|(a, w, p)| {
            DisplacementLaw::TwoPoint {
                values: [a, a + w],
                probs: [1.0 - p, p],
            }
        }),
    ]
}

fn mechanism() -> impl Strategy<Value = BranchingMechanism> {
    prop_oneof![
        (2u32..4, displacement()).prop_map(|(count, displacement)| MechanismSpec::FixedCountIid {
            count,
            displacement
        }),
        (0.1..0.9f64, displacement()).prop_map(|(p, displacement)| MechanismSpec::RandomCountIid {
            count_probs: vec![p, 1.0 - p],
            displacement,
        }),
        prop::collection::vec(
            (0.1..1.0f64, prop::collection::vec(-2.0..2.0f64, 1..4)),
            2..4
        )
        .prop_map(|outs| {
            let total: f64 = outs.iter().map(|o| o.0).sum();
            let mut outcomes: Vec<Outcome> = outs
                .into_iter()
                .map(|(p, displacements)| Outcome {
                    prob: p / total,
                    displacements,
                })
                .collect();
            // two children in the first outcome keeps the population supercritical
            outcomes[0].displacements.push(0.5);
            let s: f64 = outcomes.iter().map(|o| o.prob).sum();
            outcomes[0].prob += 1.0 - s;
            MechanismSpec::ExplicitFinite { outcomes }
        }),
    ]
    .prop_filter_map("valid mechanism", |spec| BranchingMechanism::new(spec).ok())
}

fn scaled(mech: &BranchingMechanism, c: f64) -> BranchingMechanism {
    let scale = |d: &DisplacementLaw| match d {
        DisplacementLaw::Gaussian { mean, var } => DisplacementLaw::Gaussian {
            mean: c * mean,
            var: c * c * var,
        },
        DisplacementLaw::Uniform { lo, hi } => DisplacementLaw::Uniform {
            lo: c * lo,
            hi: c * hi,
        },
        DisplacementLaw::TwoPoint { values, probs } => DisplacementLaw::TwoPoint {
            values: [c * values[0], c * values[1]],
            probs: *probs,
        },
        DisplacementLaw::FiniteDiscrete { values, probs } => DisplacementLaw::FiniteDiscrete {
            values: values.iter().map(|x| c * x).collect(),
            probs: probs.clone(),
        },
    };
    let spec = match mech.spec() {
        MechanismSpec::FixedCountIid {
            count,
            displacement,
        } => MechanismSpec::FixedCountIid {
            count: *count,
            displacement: scale(displacement),
        },
        MechanismSpec::RandomCountIid {
            count_probs,
            displacement,
        } => MechanismSpec::RandomCountIid {
            count_probs: count_probs.clone(),
            displacement: scale(displacement),
        },
        MechanismSpec::ExplicitFinite { outcomes } => MechanismSpec::ExplicitFinite {
            outcomes: outcomes
                .iter()
                .map(|o| Outcome {
                    prob: o.prob,
                    displacements: o.displacements.iter().map(|x| c * x).collect(),
                })
                .collect(),
        },
    };
    BranchingMechanism::new(spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn laplace_is_midpoint_convex(mech in mechanism(), t1 in 0.01..4.0f64, d1 in 0.01..2.0f64, d2 in 0.01..2.0f64) {
        let (t2, t3) = (t1 + d1, t1 + d1 + d2);
        let k = |t: f64| mech.laplace(t).unwrap();
        for (a, b) in [(t1, t2), (t2, t3), (t1, t3)] {
            let mid = k(0.5 * (a + b));
            prop_assert!(mid <= 0.5 * (k(a) + k(b)) + 1e-12 * mid.abs().max(1.0));
        }
    }

    #[test]
    fn cramer_envelope_duality(mech in mechanism(), theta in 0.05..4.0f64) {
        let (a, _) = mech.laplace_derivatives(theta).unwrap();
        let c = cramer(&mech, a).unwrap();
        let ArgTheta::Interior(t) = c.argtheta else {
            return Err(TestCaseError::fail(format!("boundary argtheta at a = {a}")));
        };
        prop_assert!((c.kstar + mech.laplace(t).unwrap() - t * a).abs() < 1e-9);
        prop_assert!((t - theta).abs() < 1e-6 * theta.max(1.0));
        for s in [0.5 * t, 2.0 * t] {
            prop_assert!(c.kstar >= s * a - mech.laplace(s).unwrap() - 1e-12);
        }
    }

    #[test]
    fn critical_profile_identities(mech in mechanism()) {
        let Ok(p) = critical_theta(&mech) else { return Ok(()); };
        let (d1, d2) = mech.laplace_derivatives(p.theta_star).unwrap();
        prop_assert!(p.diagnostics.residual <= 1e-10);
        prop_assert!((p.v - p.kappa / p.theta_star).abs() < 1e-9);
        prop_assert!((p.v - d1).abs() < 1e-9);
        prop_assert!(p.sigma2 > 0.0 && p.sigma2.is_finite());
        prop_assert!((tilted_step(&mech, p.theta_star).unwrap().variance() - d2).abs() < 1e-9);
        prop_assert!(cramer(&mech, p.v).unwrap().kstar.abs() < 1e-9);
        prop_assert!(cramer(&mech, p.v - 0.1).unwrap().kstar < 0.0);
    }

    #[test]
    fn critical_point_scales_with_displacements(mech in mechanism()) {
        let Ok(p) = critical_theta(&mech) else { return Ok(()); };
        for c in [0.5, 2.0] {
            let q = critical_theta(&scaled(&mech, c)).unwrap();
            prop_assert!((q.theta_star - p.theta_star / c).abs() < 1e-9 * p.theta_star.max(1.0));
            prop_assert!((q.v - c * p.v).abs() < 1e-9 * p.v.abs().max(1.0));
        }
    }
}

#[test]
fn monte_carlo_laplace_matches_closed_form() {
    let mechs = [
        BranchingMechanism::binary_gaussian(0.0, 1.0).unwrap(),
        BranchingMechanism::new(MechanismSpec::RandomCountIid {
            count_probs: vec![0.5, 0.5],
            displacement: DisplacementLaw::TwoPoint {
                values: [0.0, 1.0],
                probs: [0.5, 0.5],
            },
        })
        .unwrap(),
        BranchingMechanism::new(MechanismSpec::FixedCountIid {
            count: 3,
            displacement: DisplacementLaw::Uniform { lo: -1.0, hi: 0.5 },
        })
        .unwrap(),
        BranchingMechanism::explicit(&[
            (0.3, &[-1.0, 0.5]),
            (0.5, &[1.0]),
            (0.2, &[-0.5, 0.0, 2.0]),
        ])
        .unwrap(),
    ];
    let r = 100_000;
    for (i, mech) in mechs.iter().enumerate() {
        for theta in [0.3, 1.0] {
            let mut rng = KeyedStream::new(1000 + i as u64);
            let xs: Vec<f64> = (0..r)
                .map(|_| {
                    mech.sample_offspring(&mut rng)
                        .iter()
                        .map(|l| (theta * l).exp())
                        .sum()
                })
                .collect();
            let m = xs.iter().sum::<f64>() / r as f64;
            let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r - 1) as f64).sqrt();
            let exact = mech.laplace(theta).unwrap().exp();
            assert!(
                (m - exact).abs() < 3.0 * sd / (r as f64).sqrt(),
                "mech {i} θ = {theta}: {m} vs {exact}"
            );
        }
    }
}

#[test]
fn random_count_mean() {
    let mech = BranchingMechanism::new(MechanismSpec::RandomCountIid {
        count_probs: vec![0.5, 0.5],
        displacement: DisplacementLaw::TwoPoint {
            values: [0.0, 1.0],
            probs: [0.5, 0.5],
        },
    })
    .unwrap();
    let mut rng = KeyedStream::new(4);
    let r = 100_000;
    let total: usize = (0..r).map(|_| mech.sample_offspring(&mut rng).len()).sum();
    assert!((total as f64 / r as f64 - 1.5).abs() < 0.01);
}
