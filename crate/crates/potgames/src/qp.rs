//! Primal active-set solver for the convex quadratic potential problem.
//!
//! The solver maintains a feasible iterate and a working set of tight rows
//! (always containing the equality rows). Each iteration solves the
//! equality-constrained subproblem on the working set; if the subproblem
//! optimum is reachable it moves there, otherwise a ratio test adds the
//! blocking row. At a subproblem optimum, dual pricing either certifies KKT
//! optimality or drops the smallest-index row with a negative multiplier
//! (Bland-style; ratio-test ties also resolve to the smallest index).
//!
//! Active sets come out crisp: duals are exactly zero off the final working
//! set and working rows are tight to factorization accuracy, which is what
//! the downstream implicit differentiation needs.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::linalg::LuFactor;
use crate::model::{
    select_rows, AffineGameForm, ContextVector, QuadraticPotentialProblem, RationalityVector,
};
use crate::{Error, Result};

/// Default KKT residual tolerance.
pub const DEFAULT_KKT_TOL: f64 = 1e-8;
/// Default activity tolerance for active-set extraction.
pub const DEFAULT_ACT_TOL: f64 = 1e-7;

const FEAS_TOL: f64 = 1e-9;
const PHASE1_REG: f64 = 1e-10;

/// Infinity-norm KKT residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn compute(
        problem: &QuadraticPotentialProblem,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> Self {
        let stat = (&problem.r * x + &problem.c + problem.a.transpose() * lambda).amax();
        let slack = problem.slack(x);
        let mut primal = 0.0_f64;
        let mut dual = 0.0_f64;
        let mut comp = 0.0_f64;
        for i in 0..problem.num_rows() {
            if problem.is_eq(i) {
                primal = primal.max(slack[i].abs());
            } else {
                primal = primal.max(-slack[i]);
                dual = dual.max(-lambda[i]);
                comp += lambda[i] * slack[i];
            }
        }
        Self {
            stationarity: stat,
            primal: primal.max(0.0),
            dual: dual.max(0.0),
            complementarity: comp.abs(),
        }
    }

    /// Whether the residuals meet the KKT invariants at tolerance `tol`
    /// (complementarity scaled by `1 + ‖λ‖`).
    pub fn satisfied(&self, tol: f64, lambda_norm: f64) -> bool {
        self.stationarity <= tol
            && self.primal <= tol
            && self.dual <= tol
            && self.complementarity <= tol * (1.0 + lambda_norm)
    }
}

/// Primal-dual equilibrium with certified residuals and index sets.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    /// Strategy profile (potential minimizer).
    pub x: DVector<f64>,
    /// Duals, one per constraint row; free on equality rows, zero off the
    /// final working set.
    pub lambda: DVector<f64>,
    pub residuals: KktResiduals,
    /// Active set `Z`: tight rows (equality rows always included).
    pub active: BTreeSet<usize>,
    /// Inactive set `Y`: inequality rows with (near-)zero duals.
    pub inactive: BTreeSet<usize>,
    /// Degenerate set `W = Z ∩ Y`, inequality rows only.
    pub degenerate: BTreeSet<usize>,
    /// Final working set; useful as a warm start for nearby problems.
    pub working_set: BTreeSet<usize>,
}

impl EquilibriumSolution {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate.is_empty()
    }
}

/// Solves the potential problem to KKT tolerance `tol`.
pub fn solve_potential(
    problem: &QuadraticPotentialProblem,
    tol: f64,
) -> Result<EquilibriumSolution> {
    solve_potential_warm(problem, tol, None)
}

/// [`solve_potential`] with an initial working-set guess, typically the final
/// working set of the same datapoint at the previous iterate.
pub fn solve_potential_warm(
    problem: &QuadraticPotentialProblem,
    tol: f64,
    warm: Option<&BTreeSet<usize>>,
) -> Result<EquilibriumSolution> {
    validate(problem)?;
    let mut solver = ActiveSet::new(problem);
    solver.initial_point(warm)?;
    solver.adopt_tight_rows();
    let (x, lambda, working) = solver.run()?;
    let residuals = KktResiduals::compute(problem, &x, &lambda);
    if !residuals.satisfied(tol, lambda.amax()) {
        return Err(Error::IllConditioned(format!(
            "KKT residuals above tolerance {tol:e}: stationarity {:e}, primal {:e}, dual {:e}, complementarity {:e}",
            residuals.stationarity, residuals.primal, residuals.dual, residuals.complementarity
        )));
    }
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

fn validate(problem: &QuadraticPotentialProblem) -> Result<()> {
    let nv = problem.num_vars();
    if problem.r.nrows() != nv || problem.r.ncols() != nv {
        return Err(Error::Dimension {
            field: "r",
            expected: format!("{nv}x{nv}"),
            actual: format!("{}x{}", problem.r.nrows(), problem.r.ncols()),
        });
    }
    if problem.a.ncols() != nv || problem.b.len() != problem.a.nrows() || problem.c.len() != nv {
        return Err(Error::Dimension {
            field: "a/b/c",
            expected: format!("cols {nv}"),
            actual: format!(
                "a {}x{}, b {}, c {}",
                problem.a.nrows(),
                problem.a.ncols(),
                problem.b.len(),
                problem.c.len()
            ),
        });
    }
    let scale = 1.0 + problem.r.amax();
    if (&problem.r - problem.r.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidProblem("R is not symmetric".into()));
    }
    Ok(())
}

/// Classifies rows of a solved problem into active / inactive / degenerate
/// sets. A row is active when its relative slack is within `act_tol`,
/// inactive when its dual is below `act_tol`; equality rows are always active
/// and never inactive or degenerate.
pub fn extract_active_sets(
    problem: &QuadraticPotentialProblem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    act_tol: f64,
) -> (BTreeSet<usize>, BTreeSet<usize>, BTreeSet<usize>) {
    let slack = problem.slack(x);
    let mut active = BTreeSet::new();
    let mut inactive = BTreeSet::new();
    for i in 0..problem.num_rows() {
        if problem.is_eq(i) {
            active.insert(i);
            continue;
        }
        let tight = slack[i].abs() <= act_tol * (1.0 + problem.b[i].abs());
        let small_dual = lambda[i] <= act_tol;
        match (tight, small_dual) {
            (true, _) => {
                active.insert(i);
                if small_dual {
                    inactive.insert(i);
                }
            }
            (false, true) => {
                inactive.insert(i);
            }
            (false, false) => {
                // Complementarity violated beyond the tolerances; assign the
                // nearer side so the sets still cover every row.
                if slack[i] / (1.0 + problem.b[i].abs()) <= lambda[i] {
                    active.insert(i);
                } else {
                    inactive.insert(i);
                }
            }
        }
    }
    let degenerate: BTreeSet<usize> = active
        .intersection(&inactive)
        .copied()
        .filter(|r| !problem.is_eq(*r))
        .collect();
    (active, inactive, degenerate)
}

/// Per-agent best-response gaps at profile `x`.
///
/// Agent `i` solves its own quadratic subproblem with the other agents fixed;
/// the gap is the improvement available to `i`. At a Nash equilibrium every
/// gap is zero up to solver tolerance.
pub fn best_response_gap(
    form: &AffineGameForm,
    theta: &RationalityVector,
    mu: &ContextVector,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let problem = form.assemble(theta, mu)?;
    if x.len() != problem.num_vars() {
        return Err(Error::Dimension {
            field: "x",
            expected: problem.num_vars().to_string(),
            actual: x.len().to_string(),
        });
    }
    if !problem.is_feasible(x, 1e-6) {
        return Err(Error::InvalidProblem(
            "best_response_gap requires a feasible profile".into(),
        ));
    }
    let n = problem.agents;
    let m = problem.vars_per_agent;
    let rows_per = problem.rows_per_agent();
    let mut gaps = DVector::zeros(n);
    for agent in 0..n {
        let cols = agent * m..(agent + 1) * m;
        let rows = agent * rows_per..(agent + 1) * rows_per;

        // Quadratic model of this agent's objective in its own block:
        // q(y) = ½ yᵀ R_ii y + yᵀ (c_i + R_i,other · x_other). Constant terms
        // cancel in the gap.
        let r_ii = problem
            .r
            .view((cols.start, cols.start), (m, m))
            .into_owned();
        let mut h = DVector::zeros(m);
        for (li, gi) in cols.clone().enumerate() {
            let mut acc = problem.c[gi];
            for j in 0..problem.num_vars() {
                if !(cols.start..cols.end).contains(&j) {
                    acc += problem.r[(gi, j)] * x[j];
                }
            }
            h[li] = acc;
        }

        // This agent's rows, with the other agents' contribution in the rhs.
        let mut a_sub = DMatrix::zeros(rows_per, m);
        let mut b_sub = DVector::zeros(rows_per);
        let mut eq_sub = BTreeSet::new();
        for (lr, gr) in rows.clone().enumerate() {
            let mut rhs = problem.b[gr];
            for j in 0..problem.num_vars() {
                if (cols.start..cols.end).contains(&j) {
                    a_sub[(lr, j - cols.start)] = problem.a[(gr, j)];
                } else {
                    rhs -= problem.a[(gr, j)] * x[j];
                }
            }
            b_sub[lr] = rhs;
            if problem.is_eq(gr) {
                eq_sub.insert(lr);
            }
        }

        let sub = QuadraticPotentialProblem {
            r: r_ii.clone(),
            c: h.clone(),
            a: a_sub,
            b: b_sub,
            eq_rows: eq_sub,
            agents: 1,
            vars_per_agent: m,
        };
        let best = solve_potential(&sub, DEFAULT_KKT_TOL)?;
        let xi = DVector::from_column_slice(&x.as_slice()[cols.clone()]);
        let q_cur = 0.5 * (&r_ii * &xi).dot(&xi) + h.dot(&xi);
        let q_best = 0.5 * (&r_ii * &best.x).dot(&best.x) + h.dot(&best.x);
        gaps[agent] = q_cur - q_best;
    }
    Ok(gaps)
}

struct ActiveSet<'a> {
    problem: &'a QuadraticPotentialProblem,
    x: DVector<f64>,
    working: BTreeSet<usize>,
    banned: BTreeSet<usize>,
    last_added: Option<usize>,
}

impl<'a> ActiveSet<'a> {
    fn new(problem: &'a QuadraticPotentialProblem) -> Self {
        Self {
            problem,
            x: DVector::zeros(problem.num_vars()),
            working: problem.eq_rows.clone(),
            banned: BTreeSet::new(),
            last_added: None,
        }
    }

    fn eqp_solve(&self, working: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
        let nv = self.problem.num_vars();
        let nw = working.len();
        let dim = nv + nw;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (nv, nv)).copy_from(&self.problem.r);
        if nw > 0 {
            let a_w = select_rows(&self.problem.a, working);
            k.view_mut((0, nv), (nv, nw)).copy_from(&a_w.transpose());
            k.view_mut((nv, 0), (nw, nv)).copy_from(&a_w);
        }
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, nv).copy_from(&(-&self.problem.c));
        for (i, row) in working.iter().enumerate() {
            rhs[nv + i] = self.problem.b[*row];
        }
        let factor = LuFactor::factor(&k)?;
        let v = factor.solve(&rhs);
        let resid = (&k * &v - &rhs).amax();
        let scale = 1.0 + rhs.amax() + k.amax() * v.amax();
        if !v.iter().all(|t| t.is_finite()) || resid > 1e-6 * scale {
            return None;
        }
        let xhat = v.rows(0, nv).into_owned();
        let lam_w = v.rows(nv, nw).into_owned();
        Some((xhat, lam_w))
    }

    fn feasible(&self, x: &DVector<f64>) -> bool {
        self.problem.is_feasible(x, FEAS_TOL)
    }

    /// Seeds the working set with a maximal independent subset of the rows
    /// tight at the current iterate; cuts the row-by-row buildup that
    /// otherwise dominates cold solves on equality-heavy problems.
    fn adopt_tight_rows(&mut self) {
        let slack = self.problem.slack(&self.x);
        // Preference order: equality rows, the rows already in the working
        // set (a warm set is dual-feasible and must survive intact), then
        // the remaining tight rows.
        let mut order: Vec<usize> = self.problem.eq_rows.iter().copied().collect();
        order.extend(
            self.working
                .iter()
                .copied()
                .filter(|r| !self.problem.is_eq(*r)),
        );
        for z in self.problem.inequality_rows() {
            if !self.working.contains(&z)
                && slack[z].abs() <= FEAS_TOL * (1.0 + self.problem.b[z].abs())
            {
                order.push(z);
            }
        }
        self.working = crate::model::independent_rows_in_order(
            &self.problem.a,
            &order,
            self.problem.num_vars(),
        );
        // Equality rows stay in the working set unconditionally.
        self.working.extend(self.problem.eq_rows.iter().copied());
    }

    /// Picks a feasible starting point: warm working set, the
    /// equality-constrained optimum, the origin, then a phase-1 subproblem.
    fn initial_point(&mut self, warm: Option<&BTreeSet<usize>>) -> Result<()> {
        let eq: Vec<usize> = self.problem.eq_rows.iter().copied().collect();
        if let Some(ws) = warm {
            let mut wvec = eq.clone();
            wvec.extend(
                ws.iter()
                    .copied()
                    .filter(|r| !self.problem.is_eq(*r) && *r < self.problem.num_rows()),
            );
            wvec.sort_unstable();
            wvec.dedup();
            if wvec.len() <= self.problem.num_vars() {
                if let Some((xhat, _)) = self.eqp_solve(&wvec) {
                    if self.feasible(&xhat) {
                        self.x = xhat;
                        self.working = wvec.into_iter().collect();
                        return Ok(());
                    }
                }
            }
        }
        if let Some((xhat, _)) = self.eqp_solve(&eq) {
            if self.feasible(&xhat) {
                self.x = xhat;
                self.working = self.problem.eq_rows.clone();
                return Ok(());
            }
        }
        let zero = DVector::zeros(self.problem.num_vars());
        if self.feasible(&zero) {
            self.x = zero;
            self.working = self.problem.eq_rows.clone();
            return Ok(());
        }
        self.phase1()
    }

    /// Phase-1: minimizes slack violations of the inequality rows subject to
    /// the equality rows, via a lifted strictly convex subproblem.
    fn phase1(&mut self) -> Result<()> {
        let nv = self.problem.num_vars();
        let nr = self.problem.num_rows();
        let eq: Vec<usize> = self.problem.eq_rows.iter().copied().collect();

        // Exact least-squares point for the equality rows.
        let x_eq = if eq.is_empty() {
            DVector::zeros(nv)
        } else {
            let a_eq = select_rows(&self.problem.a, &eq);
            let b_eq = DVector::from_iterator(eq.len(), eq.iter().map(|r| self.problem.b[*r]));
            let svd = a_eq.clone().svd(true, true);
            let x = svd
                .solve(&b_eq, 1e-12)
                .map_err(|e| Error::IllConditioned(format!("equality least squares: {e}")))?;
            let resid = (&a_eq * &x - &b_eq).amax();
            if resid > 1e-8 * (1.0 + b_eq.amax()) {
                return Err(Error::Infeasible(format!(
                    "equality rows inconsistent (residual {resid:e})"
                )));
            }
            x
        };

        let slack = self.problem.slack(&x_eq);
        let violated: Vec<usize> = self
            .problem
            .inequality_rows()
            .filter(|i| slack[*i] < -FEAS_TOL * (1.0 + self.problem.b[*i].abs()))
            .collect();
        if violated.is_empty() {
            self.x = x_eq;
            self.working = self.problem.eq_rows.clone();
            return Ok(());
        }

        // Lifted problem over (x, s): minimize ½·reg·‖x − x_eq‖² + ½‖s‖²
        // subject to the original rows, with aᵢᵀx − sₖ ≤ bᵢ on violated rows.
        let q = violated.len();
        let dim = nv + q;
        let mut r2 = DMatrix::zeros(dim, dim);
        for i in 0..nv {
            r2[(i, i)] = PHASE1_REG;
        }
        for k in 0..q {
            r2[(nv + k, nv + k)] = 1.0;
        }
        let mut c2 = DVector::zeros(dim);
        for i in 0..nv {
            c2[i] = -PHASE1_REG * x_eq[i];
        }
        let mut a2 = DMatrix::zeros(nr, dim);
        a2.view_mut((0, 0), (nr, nv)).copy_from(&self.problem.a);
        for (k, row) in violated.iter().enumerate() {
            a2[(*row, nv + k)] = -1.0;
        }
        let lifted = QuadraticPotentialProblem {
            r: r2,
            c: c2,
            a: a2,
            b: self.problem.b.clone(),
            eq_rows: self.problem.eq_rows.clone(),
            agents: 1,
            vars_per_agent: dim,
        };
        let mut start = DVector::zeros(dim);
        start.rows_mut(0, nv).copy_from(&x_eq);
        for (k, row) in violated.iter().enumerate() {
            start[nv + k] = -slack[*row];
        }
        let mut inner = ActiveSet::new(&lifted);
        inner.x = start;
        inner.adopt_tight_rows();
        let (sol, _, _) = inner.run()?;
        let x1 = sol.rows(0, nv).into_owned();
        let worst = self
            .problem
            .inequality_rows()
            .map(|i| {
                let s = self.problem.b[i] - self.problem.a.row(i).transpose().dot(&x1);
                -s / (1.0 + self.problem.b[i].abs())
            })
            .fold(0.0_f64, f64::max);
        if worst > 2e-9 {
            return Err(Error::Infeasible(format!(
                "phase-1 could not remove inequality violation {worst:e}"
            )));
        }
        self.x = x1;
        self.working = self.problem.eq_rows.clone();
        Ok(())
    }

    fn run(&mut self) -> Result<(DVector<f64>, DVector<f64>, BTreeSet<usize>)> {
        let nv = self.problem.num_vars();
        let nr = self.problem.num_rows();
        let max_iters = 50 * (nv + nr) + 100;
        let mut stall = 0usize;

        for _ in 0..max_iters {
            let wvec: Vec<usize> = self.working.iter().copied().collect();
            let Some((xhat, lam_w)) = self.eqp_solve(&wvec) else {
                // Rank-deficient working set: back out the most recent
                // addition and skip it until the set changes again.
                if let Some(last) = self.last_added.take() {
                    self.working.remove(&last);
                    self.banned.insert(last);
                    continue;
                }
                return Err(Error::IllConditioned("singular working-set system".into()));
            };

            let step = &xhat - &self.x;
            if step.amax() <= 1e-12 * (1.0 + self.x.amax()) {
                // At the subproblem optimum; price the inequality duals.
                let dual_tol = 1e-10 * (1.0 + lam_w.amax());
                let mut drop_row = None;
                for (i, row) in wvec.iter().enumerate() {
                    if !self.problem.is_eq(*row) && lam_w[i] < -dual_tol {
                        drop_row = Some(*row);
                        break; // smallest index: wvec is sorted
                    }
                }
                match drop_row {
                    None => {
                        let mut lambda = DVector::zeros(nr);
                        for (i, row) in wvec.iter().enumerate() {
                            lambda[*row] = lam_w[i];
                        }
                        self.x = xhat;
                        return Ok((self.x.clone(), lambda, self.working.clone()));
                    }
                    Some(row) => {
                        self.working.remove(&row);
                        self.banned.clear();
                        self.last_added = None;
                        stall = 0;
                    }
                }
                continue;
            }

            // Ratio test toward the subproblem optimum.
            let mut alpha = 1.0_f64;
            let mut blocker = None;
            for z in self.problem.inequality_rows() {
                if self.working.contains(&z) || self.banned.contains(&z) {
                    continue;
                }
                let a_z = self.problem.a.row(z).transpose();
                let d = a_z.dot(&step);
                let d_tol = 1e-12 * (1.0 + a_z.amax()) * (1.0 + step.amax());
                if d <= d_tol {
                    continue;
                }
                let s = self.problem.b[z] - a_z.dot(&self.x);
                let ratio = (s / d).max(0.0);
                if ratio < alpha - 1e-15 {
                    alpha = ratio;
                    blocker = Some(z);
                }
            }

            match blocker {
                None => {
                    self.x = xhat;
                    self.banned.clear();
                    self.last_added = None;
                    stall = 0;
                }
                Some(z) => {
                    self.x += &step * alpha;
                    self.working.insert(z);
                    self.last_added = Some(z);
                    if alpha <= 1e-14 {
                        stall += 1;
                        if stall > nr + nv + 8 {
                            return Err(Error::IllConditioned(
                                "ratio-test stall: repeated zero-length steps".into(),
                            ));
                        }
                    } else {
                        self.banned.clear();
                        stall = 0;
                    }
                }
            }
        }
        Err(Error::IllConditioned(format!(
            "active-set iteration limit {max_iters} reached"
        )))
    }
}
