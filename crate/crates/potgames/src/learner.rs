//! Stochastic active-set training loop.
//!
//! Each iteration draws one datapoint uniformly, solves its exact equilibrium
//! at the current `θ`, extracts the active sets, applies a degeneracy rule if
//! needed, evaluates the implicit gradient of the squared equilibrium
//! mismatch, and takes a projected step `θ ← Π_Θ(θ − η_t·g)`. Because every
//! gradient comes from an exactly solved equilibrium, the iterate can be used
//! at any time: intermediate estimates always induce exact Nash equilibria.
//!
//! Runs are deterministic: a fixed `(form, dataset, config)` triple, seed
//! included, produces a bit-identical [`RunLog`]. Per-iteration wall times
//! are only recorded when [`TrainConfig::measure_timing`] is set, so the
//! metrics CSV stays byte-reproducible by default.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffgrad::grad_theta;
use crate::games::{Datapoint, Dataset};
use crate::model::{project_theta, AffineGameForm, RationalityVector};
use crate::qp::{extract_active_sets, solve_potential, solve_potential_warm};
use crate::rules::{
    rule1_partition, rule2_perturb, DegeneracyEvent, Rule2Outcome, RuleKind, RuleRecord,
};
use crate::{Error, Result};

/// Step-size schedule `η_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSchedule {
    /// `η_t = η₀`.
    Constant,
    /// `η_t = η₀ / √(t+1)` (default).
    InvSqrt,
    /// `η_t = η₀ / (t+1)`.
    Inv,
}

/// Initial iterate choice.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaInit {
    /// Modulus of a standard normal draw, projected onto the box. Matches
    /// the distribution family the experiment generators use for the true
    /// parameters; plain signed draws frequently start in the region where
    /// every observed equilibrium is fully constrained and the gradient
    /// vanishes identically.
    Random,
    /// User-provided vector, projected onto the box.
    Given(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Iteration budget `T`.
    pub iterations: usize,
    pub eta0: f64,
    pub schedule: StepSchedule,
    pub seed: u64,
    pub kkt_tol: f64,
    pub act_tol: f64,
    pub rule: RuleKind,
    /// Rule-2 ball radius scale: the radius is `epsilon_scale · (1 + ‖θ‖)`.
    pub epsilon_scale: f64,
    pub max_perturb_tries: usize,
    /// Test error is evaluated and a CSV record written every `eval_every`
    /// iterations (plus the final iteration).
    pub eval_every: usize,
    pub theta_init: ThetaInit,
    pub batch_size: usize,
    /// Gradient 2-norm clip; survives near-singular systems early on.
    pub grad_clip: f64,
    /// Record per-iteration wall time in the CSV. Off by default: timing is
    /// inherently nondeterministic and would break byte-identical reruns.
    pub measure_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            eta0: 0.1,
            schedule: StepSchedule::InvSqrt,
            seed: 0,
            kkt_tol: crate::qp::DEFAULT_KKT_TOL,
            act_tol: crate::qp::DEFAULT_ACT_TOL,
            rule: RuleKind::Rule1,
            epsilon_scale: crate::rules::DEFAULT_EPSILON_SCALE,
            max_perturb_tries: crate::rules::DEFAULT_MAX_TRIES,
            eval_every: 50,
            theta_init: ThetaInit::Random,
            batch_size: 1,
            grad_clip: 1e3,
            measure_timing: false,
        }
    }
}

/// Step size at iteration `t` under the configured schedule.
pub fn step_size(t: usize, config: &TrainConfig) -> f64 {
    match config.schedule {
        StepSchedule::Constant => config.eta0,
        StepSchedule::InvSqrt => config.eta0 / ((t + 1) as f64).sqrt(),
        StepSchedule::Inv => config.eta0 / (t + 1) as f64,
    }
}

/// One CSV record, written at every logged iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// Squared equilibrium mismatch of the sampled batch at `θ^(t)`.
    pub train_loss: f64,
    /// Test error at `θ^(t)`.
    pub test_error: f64,
    pub step_size: f64,
    pub grad_norm: f64,
    pub degenerate: bool,
    pub clipped: bool,
    pub wall_ms: f64,
}

/// The iterate and sampled datapoint of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub iter: usize,
    /// `θ^(t)` before the update.
    pub theta: DVector<f64>,
    /// Index of the sampled datapoint within the training split.
    pub datapoint: usize,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub records: Vec<IterRecord>,
    pub events: Vec<DegeneracyEvent>,
    /// Full iterate trajectory (`θ^(t)` and the sampled datapoint per step).
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_theta: DVector<f64>,
    pub grad_clips: usize,
    /// Updates where the box projection actually moved the iterate.
    pub projection_clips: usize,
    pub total_wall_ms: f64,
    pub seed: u64,
}

impl RunLog {
    pub const CSV_HEADER: &'static str =
        "iter,train_loss,test_error,step_size,grad_norm,degenerate,clip,wall_ms";

    /// Frozen metrics CSV. Byte-identical across reruns with the same seed
    /// (wall_ms is 0 unless timing was requested).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                r.train_loss,
                r.test_error,
                r.step_size,
                r.grad_norm,
                r.degenerate as u8,
                r.clipped as u8,
                r.wall_ms
            );
        }
        out
    }
}

/// Mean squared distance between induced equilibria and observations,
/// evaluated with full solves (no training-time active sets).
pub fn evaluate_loss(
    form: &AffineGameForm,
    theta: &RationalityVector,
    points: &[&Datapoint],
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyData("loss over an empty point set".into()));
    }
    let mut total = 0.0;
    for point in points {
        let problem = form.assemble(theta, &point.mu)?;
        let sol = solve_potential(&problem, crate::qp::DEFAULT_KKT_TOL)?;
        total += (&sol.x - &point.x_obs).norm_squared();
    }
    Ok(total / points.len() as f64)
}

/// Root-mean-squared equilibrium distance on a test set.
pub fn evaluate_test_error(
    form: &AffineGameForm,
    theta: &RationalityVector,
    testset: &[&Datapoint],
) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::EmptyData("empty test split".into()));
    }
    Ok(evaluate_loss(form, theta, testset)?.sqrt())
}

/// Runs the stochastic active-set loop for `config.iterations` iterations.
pub fn train(
    form: &AffineGameForm,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(RationalityVector, RunLog)> {
    if config.iterations == 0 {
        return Err(Error::InvalidProblem("iteration budget must be ≥ 1".into()));
    }
    if config.eta0 <= 0.0 {
        return Err(Error::InvalidProblem("eta0 must be positive".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidProblem("batch size must be ≥ 1".into()));
    }
    form.validate()?;
    let train_points = dataset.train_points();
    if train_points.is_empty() {
        return Err(Error::EmptyData("dataset has no training points".into()));
    }
    let test_points = dataset.test_points();

    // Well-posedness gate over a sample of training contexts.
    let probe: Vec<_> = train_points.iter().take(8).map(|p| p.mu.clone()).collect();
    let report = form.check_assumptions(&probe, 1e-9);
    if !report.passes() {
        return Err(Error::Assumptions(report.to_string()));
    }

    let p = form.theta_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let raw = match &config.theta_init {
        ThetaInit::Random => DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal).abs()),
        ThetaInit::Given(v) => {
            if v.len() != p {
                return Err(Error::Dimension {
                    field: "theta_init",
                    expected: p.to_string(),
                    actual: v.len().to_string(),
                });
            }
            v.clone()
        }
    };
    let mut theta = project_theta(&form.rationality(raw));

    let mut log = RunLog {
        records: Vec::new(),
        events: Vec::new(),
        trajectory: Vec::with_capacity(config.iterations),
        final_theta: theta.theta.clone(),
        grad_clips: 0,
        projection_clips: 0,
        total_wall_ms: 0.0,
        seed: config.seed,
    };
    let mut warm: HashMap<usize, std::collections::BTreeSet<usize>> = HashMap::new();
    let run_start = Instant::now();

    for t in 0..config.iterations {
        let iter_start = Instant::now();
        let mut grad_acc = DVector::zeros(p);
        let mut loss_acc = 0.0;
        let mut degenerate_iter = false;
        let mut first_datapoint = 0usize;

        for b in 0..config.batch_size {
            let k = rng.gen_range(0..train_points.len());
            if b == 0 {
                first_datapoint = k;
            }
            let point = train_points[k];
            let wrap = |e: Error| Error::Training {
                iteration: t,
                datapoint: k,
                source: Box::new(e),
                dump: None,
            };

            let problem = form.assemble(&theta, &point.mu).map_err(wrap)?;
            let sol =
                solve_potential_warm(&problem, config.kkt_tol, warm.get(&k)).map_err(|e| {
                    Error::Training {
                        iteration: t,
                        datapoint: k,
                        source: Box::new(e),
                        dump: Some(crate::fileio::write_problem_dump(&problem)),
                    }
                })?;
            warm.insert(k, sol.working_set.clone());
            let (z, y, w) = extract_active_sets(&problem, &sol.x, &sol.lambda, config.act_tol);
            loss_acc += (&sol.x - &point.x_obs).norm_squared();

            let grad = if w.is_empty() {
                grad_theta(form, &theta, &z, point).map_err(wrap)?
            } else {
                degenerate_iter = true;
                gradient_with_rules(
                    form,
                    &theta,
                    point,
                    &z,
                    &y,
                    &w,
                    config,
                    &mut rng,
                    t,
                    k,
                    &mut log.events,
                )
                .map_err(wrap)?
            };
            grad_acc += grad;
        }

        let mut grad = grad_acc / config.batch_size as f64;
        let train_loss = loss_acc / config.batch_size as f64;
        let grad_norm = grad.norm();
        let mut clipped = false;
        if grad_norm > config.grad_clip {
            grad *= config.grad_clip / grad_norm;
            clipped = true;
            log.grad_clips += 1;
            log::debug!("iteration {t}: gradient norm {grad_norm:e} clipped");
        }

        log.trajectory.push(TrajectoryPoint {
            iter: t,
            theta: theta.theta.clone(),
            datapoint: first_datapoint,
        });

        let eta = step_size(t, config);
        if t % config.eval_every == 0 || t + 1 == config.iterations {
            let test_error = if test_points.is_empty() {
                f64::NAN
            } else {
                evaluate_test_error(form, &theta, &test_points).map_err(|e| Error::Training {
                    iteration: t,
                    datapoint: first_datapoint,
                    source: Box::new(e),
                    dump: None,
                })?
            };
            let wall_ms = if config.measure_timing {
                iter_start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            log.records.push(IterRecord {
                iter: t,
                train_loss,
                test_error,
                step_size: eta,
                grad_norm,
                degenerate: degenerate_iter,
                clipped,
                wall_ms,
            });
        }

        let stepped = RationalityVector {
            theta: &theta.theta - &grad * eta,
            bounds: theta.bounds.clone(),
        };
        let next = project_theta(&stepped);
        if next.theta != stepped.theta {
            log.projection_clips += 1;
        }
        theta = next;
    }

    log.final_theta = theta.theta.clone();
    log.total_wall_ms = run_start.elapsed().as_secs_f64() * 1e3;
    Ok((theta, log))
}

/// Applies Rule 1 repeatedly until the fixed-set system is nonsingular,
/// pushing one event per accepted partition. Exhausting the budget skips the
/// update (zero gradient) — the remaining singularity means every split of
/// the degenerate rows leaves dependent active rows.
#[allow(clippy::too_many_arguments)]
fn rule1_gradient(
    form: &AffineGameForm,
    theta: &RationalityVector,
    point: &Datapoint,
    z: &std::collections::BTreeSet<usize>,
    y: &std::collections::BTreeSet<usize>,
    w: &std::collections::BTreeSet<usize>,
    rule_used: RuleKind,
    max_tries: usize,
    rng: &mut ChaCha8Rng,
    iteration: usize,
    datapoint: usize,
    events: &mut Vec<DegeneracyEvent>,
) -> Result<DVector<f64>> {
    let budget = max_tries.max(1);
    for attempt in 1..=budget {
        let part = rule1_partition(z, y, rng)?;
        let outcome = match grad_theta(form, theta, &part.active, point) {
            Err(Error::SingularSystem { .. }) => {
                // Dependent tight rows leave the pinned system singular for
                // any partition; reduce to a maximal independent subset,
                // which defines the same local equilibrium map.
                let problem = form.assemble(theta, &point.mu)?;
                let reduced = crate::diffgrad::independent_active_subset(&problem, &part.active);
                grad_theta(form, theta, &reduced, point)
            }
            other => other,
        };
        match outcome {
            Ok(grad) => {
                events.push(DegeneracyEvent {
                    iteration,
                    datapoint,
                    degenerate: w.clone(),
                    rule_used,
                    record: RuleRecord::Partition {
                        kept_active: part.kept_active,
                        kept_inactive: part.kept_inactive,
                    },
                });
                return Ok(grad);
            }
            Err(Error::SingularSystem { .. }) if attempt < budget => continue,
            Err(Error::SingularSystem { .. }) => {
                log::warn!(
                    "iteration {iteration}: every partition left a singular system; skipping"
                );
                events.push(DegeneracyEvent {
                    iteration,
                    datapoint,
                    degenerate: w.clone(),
                    rule_used,
                    record: RuleRecord::SkippedSingular { tries: budget },
                });
                return Ok(DVector::zeros(form.theta_dim()));
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop returns within the budget")
}

/// Degeneracy dispatch for one sampled datapoint.
#[allow(clippy::too_many_arguments)]
fn gradient_with_rules(
    form: &AffineGameForm,
    theta: &RationalityVector,
    point: &Datapoint,
    z: &std::collections::BTreeSet<usize>,
    y: &std::collections::BTreeSet<usize>,
    w: &std::collections::BTreeSet<usize>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    iteration: usize,
    datapoint: usize,
    events: &mut Vec<DegeneracyEvent>,
) -> Result<DVector<f64>> {
    match config.rule {
        RuleKind::Rule1 => rule1_gradient(
            form,
            theta,
            point,
            z,
            y,
            w,
            RuleKind::Rule1,
            config.max_perturb_tries,
            rng,
            iteration,
            datapoint,
            events,
        ),
        RuleKind::Rule2 => {
            let eps = config.epsilon_scale * (1.0 + theta.theta.norm());
            let outcome = rule2_perturb(theta, eps, config.max_perturb_tries, rng, |candidate| {
                let prob = form.assemble(candidate, &point.mu)?;
                let s = solve_potential(&prob, config.kkt_tol)?;
                Ok(s.is_degenerate())
            })?;
            match outcome {
                Rule2Outcome::Perturbed {
                    theta: tilde,
                    tries,
                    projected,
                } => {
                    let prob_t = form.assemble(&tilde, &point.mu)?;
                    let sol_t = solve_potential(&prob_t, config.kkt_tol)?;
                    let (zt, _, _) =
                        extract_active_sets(&prob_t, &sol_t.x, &sol_t.lambda, config.act_tol);
                    let outcome = match grad_theta(form, &tilde, &zt, point) {
                        Err(Error::SingularSystem { .. }) => {
                            let reduced = crate::diffgrad::independent_active_subset(&prob_t, &zt);
                            grad_theta(form, &tilde, &reduced, point)
                        }
                        other => other,
                    };
                    match outcome {
                        Ok(grad) => {
                            events.push(DegeneracyEvent {
                                iteration,
                                datapoint,
                                degenerate: w.clone(),
                                rule_used: RuleKind::Rule2,
                                record: RuleRecord::Perturbation {
                                    theta_tilde: tilde.theta.clone(),
                                    tries,
                                    projected,
                                    fell_back: false,
                                },
                            });
                            Ok(grad)
                        }
                        // The perturbed point can still carry dependent
                        // active rows; hand over to Rule 1.
                        Err(Error::SingularSystem { .. }) => rule1_gradient(
                            form,
                            theta,
                            point,
                            z,
                            y,
                            w,
                            RuleKind::Rule2,
                            config.max_perturb_tries,
                            rng,
                            iteration,
                            datapoint,
                            events,
                        ),
                        Err(e) => Err(e),
                    }
                }
                Rule2Outcome::FellBack { .. } => rule1_gradient(
                    form,
                    theta,
                    point,
                    z,
                    y,
                    w,
                    RuleKind::Rule2,
                    config.max_perturb_tries,
                    rng,
                    iteration,
                    datapoint,
                    events,
                ),
            }
        }
    }
}
