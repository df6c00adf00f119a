//! Active-set KKT systems and implicit differentiation of the loss.
//!
//! Fixing an active set `Z` (with complement `Y` over the inequality rows)
//! turns the equilibrium conditions into the square linear system
//!
//! ```text
//!     [ R      Aᵀ  ]             [ −c   ]
//!     [ −A_Z   0   ] · (x, λ)  = [ −b_Z ]
//!     [ 0      I_Y ]             [  0   ]
//! ```
//!
//! whose solution reproduces stationarity, tightness on `Z`, and `λ_Y = 0`.
//! Equality rows always sit in the `Z` block with free duals. The equilibrium
//! `x_Z(θ)` defined this way is differentiable in `θ` wherever the system is
//! nonsingular, and the loss gradient comes out of one adjoint solve per
//! datapoint: with `w = S⁻ᵀ·(2(x − x̄), 0)`, component `j` is
//! `−wᵀ·(∂θⱼS·(x, λ) − ∂θⱼrhs)`, where `∂θⱼS` carries `Rⱼ(μ)` in its top-left
//! block and `∂θⱼrhs` carries `−C(μ)·eⱼ` on top.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

pub use crate::model::independent_active_subset;

use crate::games::Datapoint;
use crate::linalg::LuFactor;
use crate::model::{AffineGameForm, QuadraticPotentialProblem, RationalityVector};
use crate::{Error, Result};

/// Reciprocal-condition threshold below which the system is treated as
/// singular; doubles as the degeneracy detector of last resort.
pub const SINGULARITY_RCOND: f64 = 1e-12;

/// The square active-set KKT system for one datapoint.
#[derive(Debug, Clone)]
pub struct AdjointSystem {
    pub s: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Active rows in the `Z` block, equality rows included.
    pub active: BTreeSet<usize>,
    /// Inactive rows pinned to `λ = 0`.
    pub inactive: BTreeSet<usize>,
    pub num_vars: usize,
    pub num_rows: usize,
}

/// Assembles the system for active set `z` and inactive set `y`.
///
/// Equality rows are placed in the `Z` block regardless of `z`. The
/// inequality rows must be covered exactly once between `z` and `y`.
pub fn build_s(
    problem: &QuadraticPotentialProblem,
    z: &BTreeSet<usize>,
    y: &BTreeSet<usize>,
) -> Result<AdjointSystem> {
    let nm = problem.num_vars();
    let rows = problem.num_rows();
    let mut z_block: Vec<usize> = Vec::new();
    let mut y_block: Vec<usize> = Vec::new();
    for r in 0..rows {
        if problem.is_eq(r) {
            if y.contains(&r) {
                return Err(Error::ActiveSets(format!(
                    "equality row {r} cannot be inactive"
                )));
            }
            z_block.push(r);
            continue;
        }
        match (z.contains(&r), y.contains(&r)) {
            (true, true) => {
                return Err(Error::ActiveSets(format!(
                    "row {r} in both active and inactive sets"
                )))
            }
            (false, false) => {
                return Err(Error::ActiveSets(format!(
                    "row {r} in neither active nor inactive set"
                )))
            }
            (true, false) => z_block.push(r),
            (false, true) => y_block.push(r),
        }
    }
    if let Some(r) = z.iter().chain(y.iter()).find(|r| **r >= rows) {
        return Err(Error::ActiveSets(format!("row index {r} out of range")));
    }

    let dim = nm + rows;
    let mut s = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    s.view_mut((0, 0), (nm, nm)).copy_from(&problem.r);
    s.view_mut((0, nm), (nm, rows))
        .copy_from(&problem.a.transpose());
    for i in 0..nm {
        rhs[i] = -problem.c[i];
    }
    let mut row_cursor = nm;
    for z_row in &z_block {
        for col in 0..nm {
            s[(row_cursor, col)] = -problem.a[(*z_row, col)];
        }
        rhs[row_cursor] = -problem.b[*z_row];
        row_cursor += 1;
    }
    for y_row in &y_block {
        s[(row_cursor, nm + y_row)] = 1.0;
        row_cursor += 1;
    }
    Ok(AdjointSystem {
        s,
        rhs,
        active: z_block.into_iter().collect(),
        inactive: y_block.into_iter().collect(),
        num_vars: nm,
        num_rows: rows,
    })
}

fn factor_system(system: &AdjointSystem) -> Result<LuFactor> {
    let factor = LuFactor::factor(&system.s).ok_or(Error::SingularSystem { datapoint: None })?;
    if factor.rcond() < SINGULARITY_RCOND {
        return Err(Error::SingularSystem { datapoint: None });
    }
    Ok(factor)
}

/// Solves the system, returning the equilibrium `x` and the full dual vector.
pub fn solve_given_z(system: &AdjointSystem) -> Result<(DVector<f64>, DVector<f64>)> {
    let factor = factor_system(system)?;
    let v = factor.solve(&system.rhs);
    let resid = (&system.s * &v - &system.rhs).amax();
    if resid > 1e-10 * (1.0 + system.rhs.amax() + system.s.amax() * v.amax()) {
        return Err(Error::SingularSystem { datapoint: None });
    }
    let x = v.rows(0, system.num_vars).into_owned();
    let lambda = v.rows(system.num_vars, system.num_rows).into_owned();
    Ok((x, lambda))
}

fn inactive_complement(
    problem: &QuadraticPotentialProblem,
    z: &BTreeSet<usize>,
) -> BTreeSet<usize> {
    problem
        .inequality_rows()
        .filter(|r| !z.contains(r))
        .collect()
}

/// Mean squared equilibrium mismatch over a batch with per-point active sets.
pub fn loss(
    form: &AffineGameForm,
    theta: &RationalityVector,
    z_choices: &[BTreeSet<usize>],
    batch: &[&Datapoint],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyData("loss over an empty batch".into()));
    }
    if z_choices.len() != batch.len() {
        return Err(Error::ActiveSets(format!(
            "{} active sets for {} datapoints",
            z_choices.len(),
            batch.len()
        )));
    }
    let mut total = 0.0;
    for (k, (point, z)) in batch.iter().zip(z_choices).enumerate() {
        let problem = form.assemble(theta, &point.mu)?;
        let y = inactive_complement(&problem, z);
        let system = build_s(&problem, z, &y)?;
        let (x, _) = solve_given_z(&system).map_err(|e| match e {
            Error::SingularSystem { .. } => Error::SingularSystem { datapoint: Some(k) },
            other => other,
        })?;
        total += (&x - &point.x_obs).norm_squared();
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of `‖x_Z(θ) − x̄‖²` for one datapoint via the adjoint solve.
pub fn grad_theta(
    form: &AffineGameForm,
    theta: &RationalityVector,
    z: &BTreeSet<usize>,
    point: &Datapoint,
) -> Result<DVector<f64>> {
    let problem = form.assemble(theta, &point.mu)?;
    let y = inactive_complement(&problem, z);
    let system = build_s(&problem, z, &y)?;
    let factor = factor_system(&system)?;
    let v = factor.solve(&system.rhs);
    let x = v.rows(0, system.num_vars).into_owned();

    let mut g = DVector::zeros(system.s.nrows());
    for i in 0..system.num_vars {
        g[i] = 2.0 * (x[i] - point.x_obs[i]);
    }
    let w = factor.solve_t(&g);
    let w_top = w.rows(0, system.num_vars);

    let p = form.theta_dim();
    let mut grad = DVector::zeros(p);
    for j in 0..p {
        // ∂θⱼ of the system touches only the stationarity block:
        // ∂S has Rⱼ(μ) top-left, ∂rhs has −C(μ)·eⱼ on top.
        let (dr, dc) = form.partials(j, &point.mu)?;
        let top = &dr * &x + &dc;
        grad[j] = -w_top.dot(&top);
    }
    Ok(grad)
}
