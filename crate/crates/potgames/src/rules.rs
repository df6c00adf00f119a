//! Degenerate active-set handling.
//!
//! A solved equilibrium is degenerate when some inequality row is tight with
//! a zero dual (`W = Z ∩ Y ≠ ∅`): the active-set KKT system is singular and
//! the implicit gradient is undefined. Two disambiguation rules apply:
//!
//! - **Rule 1** ([`rule1_partition`]): uniformly split `W` — each element
//!   independently leaves `Z` or leaves `Y` with probability ½ — and evaluate
//!   the gradient on the resulting non-overlapping sets.
//! - **Rule 2** ([`rule2_perturb`]): evaluate the gradient at a point `θ̃`
//!   drawn uniformly from the Euclidean ball `B_ε(θ)`, resampling while the
//!   perturbed point remains degenerate and falling back to Rule 1 after
//!   `max_tries` draws.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{project_theta, RationalityVector};
use crate::{Error, Result};

/// Default radius scale for Rule 2: the ball radius is `scale · (1 + ‖θ‖)`.
pub const DEFAULT_EPSILON_SCALE: f64 = 1e-3;
/// Default resampling budget before Rule 2 falls back to Rule 1.
pub const DEFAULT_MAX_TRIES: usize = 8;

/// Which disambiguation rule the learner applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Rule1,
    Rule2,
}

/// Outcome of a Rule 1 split.
#[derive(Debug, Clone)]
pub struct Rule1Partition {
    /// `Z' = Z \ W₁`.
    pub active: BTreeSet<usize>,
    /// `Y' = Y \ W₂`.
    pub inactive: BTreeSet<usize>,
    /// `W₂`: degenerate rows kept active (removed from `Y`).
    pub kept_active: Vec<usize>,
    /// `W₁`: degenerate rows kept inactive (removed from `Z`).
    pub kept_inactive: Vec<usize>,
}

/// Randomly and uniformly partitions the degenerate rows: each element of
/// `W = Z ∩ Y` stays on exactly one side, chosen by an independent fair coin.
pub fn rule1_partition(
    z: &BTreeSet<usize>,
    y: &BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Rule1Partition> {
    let w: Vec<usize> = z.intersection(y).copied().collect();
    if w.is_empty() {
        return Err(Error::EmptyDegenerateSet);
    }
    let mut active = z.clone();
    let mut inactive = y.clone();
    let mut kept_active = Vec::new();
    let mut kept_inactive = Vec::new();
    for row in w {
        if rng.gen_bool(0.5) {
            // W₁: leaves the active set.
            active.remove(&row);
            kept_inactive.push(row);
        } else {
            // W₂: leaves the inactive set.
            inactive.remove(&row);
            kept_active.push(row);
        }
    }
    Ok(Rule1Partition {
        active,
        inactive,
        kept_active,
        kept_inactive,
    })
}

/// A point uniform on the Euclidean ball of radius `epsilon` around `theta`:
/// isotropic direction with radius `ε · U^{1/p}`.
pub fn sample_ball(theta: &DVector<f64>, epsilon: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let p = theta.len();
    let mut dir = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm > 0.0 {
        dir /= norm;
    }
    let u: f64 = rng.gen_range(0.0..1.0);
    let radius = epsilon * u.powf(1.0 / p as f64);
    theta + dir * radius
}

/// Result of a Rule 2 attempt.
#[derive(Debug, Clone)]
pub enum Rule2Outcome {
    /// A non-degenerate perturbation was found; evaluate the gradient there.
    Perturbed {
        theta: RationalityVector,
        tries: usize,
        /// Whether projecting onto the box moved the sample.
        projected: bool,
    },
    /// Every draw stayed degenerate; the caller should apply Rule 1.
    FellBack { tries: usize },
}

/// Draws `θ̃` uniformly on `B_ε(θ)` (projected onto the box when one is set),
/// resampling while `still_degenerate(θ̃)` holds, up to `max_tries` draws.
pub fn rule2_perturb<F>(
    theta: &RationalityVector,
    epsilon: f64,
    max_tries: usize,
    rng: &mut ChaCha8Rng,
    mut still_degenerate: F,
) -> Result<Rule2Outcome>
where
    F: FnMut(&RationalityVector) -> Result<bool>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidProblem(
            "rule 2 needs a positive radius".into(),
        ));
    }
    for tries in 1..=max_tries.max(1) {
        let raw = sample_ball(&theta.theta, epsilon, rng);
        let candidate = project_theta(&RationalityVector {
            theta: raw.clone(),
            bounds: theta.bounds.clone(),
        });
        let projected = candidate.theta != raw;
        if !still_degenerate(&candidate)? {
            return Ok(Rule2Outcome::Perturbed {
                theta: candidate,
                tries,
                projected,
            });
        }
    }
    Ok(Rule2Outcome::FellBack {
        tries: max_tries.max(1),
    })
}

/// One degeneracy event, recorded in the run log.
#[derive(Debug, Clone)]
pub struct DegeneracyEvent {
    pub iteration: usize,
    pub datapoint: usize,
    /// The degenerate rows `W` that triggered the rule.
    pub degenerate: BTreeSet<usize>,
    pub rule_used: RuleKind,
    pub record: RuleRecord,
}

/// What the rule actually did.
#[derive(Debug, Clone)]
pub enum RuleRecord {
    Partition {
        kept_active: Vec<usize>,
        kept_inactive: Vec<usize>,
    },
    Perturbation {
        theta_tilde: DVector<f64>,
        tries: usize,
        projected: bool,
        fell_back: bool,
    },
    /// Every resampled partition left the fixed-set system singular; the
    /// update was skipped for this sample.
    SkippedSingular { tries: usize },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sets(z: &[usize], y: &[usize]) -> (BTreeSet<usize>, BTreeSet<usize>) {
        (z.iter().copied().collect(), y.iter().copied().collect())
    }

    #[test]
    fn empty_degenerate_set_is_an_error() {
        let (z, y) = sets(&[0], &[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            rule1_partition(&z, &y, &mut rng),
            Err(Error::EmptyDegenerateSet)
        ));
    }

    #[test]
    fn singleton_split_hits_both_outcomes() {
        let (z, y) = sets(&[0, 3], &[1, 3]);
        let mut removed_from_z = 0;
        let mut removed_from_y = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let part = rule1_partition(&z, &y, &mut rng).unwrap();
            assert!(part.active.intersection(&part.inactive).next().is_none());
            let union: BTreeSet<usize> = part.active.union(&part.inactive).copied().collect();
            assert_eq!(union, z.union(&y).copied().collect());
            if part.active.contains(&3) {
                removed_from_y += 1;
                assert!(!part.inactive.contains(&3));
            } else {
                removed_from_z += 1;
                assert!(part.inactive.contains(&3));
            }
        }
        assert!(removed_from_z > 50 && removed_from_y > 50);
    }

    #[test]
    fn two_element_split_passes_chi_square_at_one_percent() {
        let (z, y) = sets(&[1, 2], &[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            let part = rule1_partition(&z, &y, &mut rng).unwrap();
            let b0 = part.active.contains(&1) as usize;
            let b1 = part.active.contains(&2) as usize;
            counts[b0 * 2 + b1] += 1;
        }
        let expected = trials as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| {
                let d = *c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 1% critical value of χ² with 3 degrees of freedom.
        assert!(
            chi2 < 11.345,
            "chi-square statistic {chi2}, counts {counts:?}"
        );
    }

    #[test]
    fn partition_is_reproducible_for_a_fixed_seed() {
        let (z, y) = sets(&[0, 1, 2, 5], &[1, 2, 4]);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rule1_partition(&z, &y, &mut rng).unwrap();
            (p.active, p.inactive)
        };
        assert_eq!(run(123), run(123));
    }

    #[test]
    fn ball_sample_shrinks_with_epsilon() {
        let theta = DVector::from_row_slice(&[0.3, -0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = sample_ball(&theta, 1e-9, &mut rng);
            assert!((s - &theta).norm() <= 1e-9);
        }
    }

    #[test]
    fn one_dimensional_ball_is_uniform_interval() {
        let theta = DVector::from_element(1, 2.0);
        let eps = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let trials = 10_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let s = sample_ball(&theta, eps, &mut rng);
            assert!((s[0] - 2.0).abs() <= eps + 1e-12);
            sum += s[0];
        }
        let mean = sum / trials as f64;
        // Uniform on [θ−ε, θ+ε]: sd of the mean is (ε/√3)/√N.
        let sd = eps / 3.0_f64.sqrt() / (trials as f64).sqrt();
        assert!((mean - 2.0).abs() <= 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn two_dimensional_radius_cdf_passes_ks_at_one_percent() {
        let theta = DVector::zeros(2);
        let eps = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mut radii: Vec<f64> = (0..n)
            .map(|_| sample_ball(&theta, eps, &mut rng).norm())
            .collect();
        radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Planar uniform ball: CDF of the radius is (r/ε)².
        let mut d = 0.0_f64;
        for (i, r) in radii.iter().enumerate() {
            let f = (r / eps).powi(2);
            d = d.max((f - i as f64 / n as f64).abs());
            d = d.max(((i + 1) as f64 / n as f64 - f).abs());
        }
        // 1% Kolmogorov–Smirnov critical value 1.628/√n.
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d}, critical {crit}");
    }

    #[test]
    fn rule2_falls_back_after_budget() {
        let theta = RationalityVector::new(DVector::zeros(2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut calls = 0;
        let outcome = rule2_perturb(&theta, 1e-3, 4, &mut rng, |_| {
            calls += 1;
            Ok(true)
        })
        .unwrap();
        assert!(matches!(outcome, Rule2Outcome::FellBack { tries: 4 }));
        assert_eq!(calls, 4);
    }

    #[test]
    fn rule2_projects_onto_the_box_and_flags_it() {
        use crate::model::ThetaBounds;
        // θ pinned at the lower-left corner: every ball sample projects.
        let theta = RationalityVector::with_bounds(
            DVector::from_row_slice(&[0.0, 0.0]),
            ThetaBounds {
                lower: DVector::from_row_slice(&[0.0, 0.0]),
                upper: DVector::from_row_slice(&[0.0, 0.0]),
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let outcome = rule2_perturb(&theta, 1e-2, 3, &mut rng, |_| Ok(false)).unwrap();
        match outcome {
            Rule2Outcome::Perturbed {
                theta: t,
                projected,
                tries,
            } => {
                assert_eq!(t.theta, DVector::from_row_slice(&[0.0, 0.0]));
                assert!(projected);
                assert_eq!(tries, 1);
            }
            Rule2Outcome::FellBack { .. } => panic!("should accept the first draw"),
        }
    }
}
