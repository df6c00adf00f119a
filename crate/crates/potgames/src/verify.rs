//! Independent oracles for validating the main computation paths.
//!
//! Nothing here touches the adjoint gradient machinery: finite differences
//! and grid search go through full equilibrium solves, and the brute-force
//! reference QP solver enumerates candidate active sets directly. The only
//! shared dependency with the rest of the crate is the potential solver
//! itself.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::games::Datapoint;
use crate::learner::evaluate_loss;
use crate::linalg::LuFactor;
use crate::model::{
    project_theta, select_rows, AffineGameForm, QuadraticPotentialProblem, RationalityVector,
};
use crate::qp::{
    extract_active_sets, solve_potential, EquilibriumSolution, KktResiduals, DEFAULT_ACT_TOL,
    DEFAULT_KKT_TOL,
};
use crate::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// One finite-difference gradient component with its stability screen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdComponent {
    /// Central difference of the full-equilibrium loss.
    pub value: f64,
    /// Whether both probe points produced the same active and degenerate
    /// sets. Unstable components cross an active-set boundary, where the
    /// loss is only one-sidedly differentiable, and must not be compared
    /// against the implicit gradient. A degenerate set that persists on both
    /// sides is fine: the equilibrium map stays smooth along that face.
    pub stable: bool,
}

/// Central finite differences of the single-datapoint loss
/// `‖x*(θ; μ̄) − x̄‖²`, computed with full equilibrium solves.
pub fn finite_diff_grad(
    form: &AffineGameForm,
    theta: &RationalityVector,
    point: &Datapoint,
    h: f64,
) -> Result<Vec<FdComponent>> {
    if h <= 0.0 {
        return Err(Error::InvalidProblem(
            "finite-difference step must be positive".into(),
        ));
    }
    let p = form.theta_dim();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let probe = |sign: f64| -> Result<(f64, BTreeSet<usize>, BTreeSet<usize>)> {
            let mut t = theta.theta.clone();
            t[j] += sign * h;
            let shifted = RationalityVector {
                theta: t,
                bounds: theta.bounds.clone(),
            };
            let problem = form.assemble(&shifted, &point.mu)?;
            let sol = solve_potential(&problem, DEFAULT_KKT_TOL)?;
            let loss = (&sol.x - &point.x_obs).norm_squared();
            Ok((loss, sol.active, sol.degenerate))
        };
        let (lp, zp, wp) = probe(1.0)?;
        let (lm, zm, wm) = probe(-1.0)?;
        out.push(FdComponent {
            value: (lp - lm) / (2.0 * h),
            stable: zp == zm && wp == wm,
        });
    }
    Ok(out)
}

/// Reference QP solver: enumerates every candidate active set over the
/// inequality rows (at most 12), solves the corresponding equality system,
/// keeps the primal- and dual-feasible candidates, and returns the
/// potential-minimizing one.
pub fn enumerate_active_sets_qp(
    problem: &QuadraticPotentialProblem,
) -> Result<EquilibriumSolution> {
    let ineq: Vec<usize> = problem.inequality_rows().collect();
    if ineq.len() > 12 {
        return Err(Error::InvalidProblem(format!(
            "enumeration over {} inequality rows is unreasonable",
            ineq.len()
        )));
    }
    let eq: Vec<usize> = problem.eq_rows.iter().copied().collect();
    let nv = problem.num_vars();
    let tol = 1e-8;
    type Candidate = (f64, DVector<f64>, DVector<f64>, BTreeSet<usize>);
    let mut best: Option<Candidate> = None;

    for mask in 0u32..(1u32 << ineq.len()) {
        let mut active: Vec<usize> = eq.clone();
        for (bit, row) in ineq.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                active.push(*row);
            }
        }
        active.sort_unstable();
        if active.len() > nv {
            continue;
        }
        let na = active.len();
        let dim = nv + na;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (nv, nv)).copy_from(&problem.r);
        if na > 0 {
            let a_act = select_rows(&problem.a, &active);
            k.view_mut((0, nv), (nv, na)).copy_from(&a_act.transpose());
            k.view_mut((nv, 0), (na, nv)).copy_from(&a_act);
        }
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, nv).copy_from(&(-&problem.c));
        for (i, row) in active.iter().enumerate() {
            rhs[nv + i] = problem.b[*row];
        }
        let Some(factor) = LuFactor::factor(&k) else {
            continue;
        };
        let v = factor.solve(&rhs);
        if (&k * &v - &rhs).amax() > 1e-7 * (1.0 + rhs.amax() + k.amax() * v.amax()) {
            continue;
        }
        let x = v.rows(0, nv).into_owned();
        let mut lambda = DVector::zeros(problem.num_rows());
        let mut dual_ok = true;
        for (i, row) in active.iter().enumerate() {
            lambda[*row] = v[nv + i];
            if !problem.is_eq(*row) && v[nv + i] < -tol {
                dual_ok = false;
            }
        }
        if !dual_ok || !problem.is_feasible(&x, tol) {
            continue;
        }
        let value = problem.potential(&x);
        if best.as_ref().is_none_or(|(bv, ..)| value < *bv) {
            best = Some((value, x, lambda, active.into_iter().collect()));
        }
    }

    let (_, x, lambda, working) = best.ok_or_else(|| {
        Error::Infeasible("no candidate active set is primal- and dual-feasible".into())
    })?;
    let residuals = KktResiduals::compute(problem, &x, &lambda);
    let (active, inactive, degenerate) = extract_active_sets(problem, &x, &lambda, DEFAULT_ACT_TOL);
    Ok(EquilibriumSolution {
        x,
        lambda,
        residuals,
        active,
        inactive,
        degenerate,
        working_set: working,
    })
}

/// Search grid for the baseline θ search.
#[derive(Debug, Clone)]
pub enum GridSpec {
    /// Dense Cartesian grid; only reasonable for `p ≤ 3`.
    Dense {
        lower: DVector<f64>,
        upper: DVector<f64>,
        points_per_dim: usize,
    },
    /// Uniform random search within a box.
    Random {
        lower: DVector<f64>,
        upper: DVector<f64>,
        budget: usize,
        seed: u64,
    },
}

/// Baseline: best full-equilibrium training loss over a grid of θ values.
/// Grid points are projected onto the form's box before evaluation; points
/// where the solver fails are skipped.
pub fn grid_search_theta(
    form: &AffineGameForm,
    train_points: &[&Datapoint],
    grid: &GridSpec,
) -> Result<(DVector<f64>, f64)> {
    if train_points.is_empty() {
        return Err(Error::EmptyData("grid search over an empty set".into()));
    }
    let p = form.theta_dim();
    let candidates: Vec<DVector<f64>> = match grid {
        GridSpec::Dense {
            lower,
            upper,
            points_per_dim,
        } => {
            if p > 3 {
                return Err(Error::InvalidProblem(
                    "dense grids beyond three parameters are unreasonable; use Random".into(),
                ));
            }
            if lower.len() != p || upper.len() != p || *points_per_dim == 0 {
                return Err(Error::InvalidProblem("malformed grid spec".into()));
            }
            let steps = *points_per_dim;
            let mut out = Vec::with_capacity(steps.pow(p as u32));
            let mut idx = vec![0usize; p];
            loop {
                let mut t = DVector::zeros(p);
                for d in 0..p {
                    let frac = if steps == 1 {
                        0.0
                    } else {
                        idx[d] as f64 / (steps - 1) as f64
                    };
                    t[d] = lower[d] + frac * (upper[d] - lower[d]);
                }
                out.push(t);
                let mut d = 0;
                loop {
                    if d == p {
                        break;
                    }
                    idx[d] += 1;
                    if idx[d] < steps {
                        break;
                    }
                    idx[d] = 0;
                    d += 1;
                }
                if d == p {
                    break;
                }
            }
            out
        }
        GridSpec::Random {
            lower,
            upper,
            budget,
            seed,
        } => {
            if lower.len() != p || upper.len() != p || *budget == 0 {
                return Err(Error::InvalidProblem("malformed grid spec".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*budget)
                .map(|_| DVector::from_fn(p, |d, _| rng.gen_range(lower[d]..=upper[d])))
                .collect()
        }
    };

    let mut best: Option<(f64, DVector<f64>)> = None;
    for raw in candidates {
        let theta = project_theta(&form.rationality(raw));
        match evaluate_loss(form, &theta, train_points) {
            Ok(loss) => {
                if best.as_ref().is_none_or(|(bl, _)| loss < *bl) {
                    best = Some((loss, theta.theta));
                }
            }
            Err(_) => continue,
        }
    }
    let (loss, theta) =
        best.ok_or_else(|| Error::IllConditioned("every grid point failed to solve".into()))?;
    Ok((theta, loss))
}
