//! Parametrized potential-game forms.
//!
//! An [`AffineGameForm`] describes the family of quadratic potential problems
//!
//! ```text
//!     minimize   ½ xᵀ R(θ,μ) x + c(θ,μ)ᵀ x
//!     subject to A(μ) x ≤ b(μ)        (rows in `eq_rows` hold with equality)
//! ```
//!
//! where `R(θ,μ) = R0(μ) + Σᵢ θᵢ·Rᵢ(μ)` and `c(θ,μ) = c0(μ) + C(μ)·θ`. The
//! constraint data never depends on `θ`; every map is affine in the context
//! vector `μ`. [`AffineGameForm::assemble`] instantiates the concrete
//! [`QuadraticPotentialProblem`] for a given `(θ, μ)`.
//!
//! Variable layout: the strategy profile stacks the agents' blocks, so agent
//! `i` owns variables `i·m .. (i+1)·m`. Constraint rows are grouped the same
//! way: agent `i` owns rows `i·ℓ .. (i+1)·ℓ` with `ℓ = rows / n`.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Rationality parameter vector `θ` with an optional box `Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalityVector {
    pub theta: DVector<f64>,
    pub bounds: Option<ThetaBounds>,
}

/// Per-coordinate box bounds; `±∞` marks an unbounded side.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl RationalityVector {
    pub fn new(theta: DVector<f64>) -> Self {
        Self {
            theta,
            bounds: None,
        }
    }

    pub fn with_bounds(theta: DVector<f64>, bounds: ThetaBounds) -> Self {
        Self {
            theta,
            bounds: Some(bounds),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Context parameter vector `μ`. The coordinate layout is game-specific and
/// documented by each generator in [`crate::games`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    pub mu: DVector<f64>,
}

impl ContextVector {
    pub fn new(mu: DVector<f64>) -> Self {
        Self { mu }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Matrix-valued affine map of the context: `base + Σ terms[k].1 · μ[terms[k].0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtxMatrix {
    pub base: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl CtxMatrix {
    pub fn constant(base: DMatrix<f64>) -> Self {
        Self {
            base,
            terms: Vec::new(),
        }
    }

    pub fn eval(&self, mu: &ContextVector) -> DMatrix<f64> {
        let mut out = self.base.clone();
        for (k, term) in &self.terms {
            out += term * mu.mu[*k];
        }
        out
    }

    pub fn nrows(&self) -> usize {
        self.base.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.base.ncols()
    }
}

/// Vector-valued affine map of the context: `base + coeff · μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtxVector {
    pub base: DVector<f64>,
    pub coeff: Option<DMatrix<f64>>,
}

impl CtxVector {
    pub fn constant(base: DVector<f64>) -> Self {
        Self { base, coeff: None }
    }

    pub fn eval(&self, mu: &ContextVector) -> DVector<f64> {
        match &self.coeff {
            Some(coeff) => &self.base + coeff * &mu.mu,
            None => self.base.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.len() == 0
    }
}

/// The `(R, c, A, b)` parameter maps of a potential game, affine in `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGameForm {
    /// Free-form game tag carried into the file formats (`cournot`, ...).
    pub game: String,
    /// Agent count `n`.
    pub agents: usize,
    /// Variables per agent `m`.
    pub vars_per_agent: usize,
    /// Context dimension `k`.
    pub ctx_dim: usize,
    /// `R0(μ)`, `nm × nm`.
    pub r0: CtxMatrix,
    /// `Rᵢ(μ)` for each parameter, `nm × nm` each; length `p`.
    pub r_theta: Vec<CtxMatrix>,
    /// Affine offset `c0(μ)`, length `nm`.
    pub c0: CtxVector,
    /// `C(μ)`, `nm × p`, so that `c = c0 + C·θ`.
    pub c_theta: CtxMatrix,
    /// Constraint matrix `A(μ)`, `rows × nm`.
    pub a: CtxMatrix,
    /// Constraint right-hand side `b(μ)`, length `rows`.
    pub b: CtxVector,
    /// Rows treated as equalities: free duals, excluded from complementarity.
    pub eq_rows: BTreeSet<usize>,
    /// Lower bounds of `Θ` (`-∞` where unbounded).
    pub theta_lower: DVector<f64>,
    /// Upper bounds of `Θ` (`+∞` where unbounded).
    pub theta_upper: DVector<f64>,
}

impl AffineGameForm {
    pub fn theta_dim(&self) -> usize {
        self.r_theta.len()
    }

    pub fn num_vars(&self) -> usize {
        self.agents * self.vars_per_agent
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn bounds(&self) -> ThetaBounds {
        ThetaBounds {
            lower: self.theta_lower.clone(),
            upper: self.theta_upper.clone(),
        }
    }

    /// A `θ` carrying this form's box.
    pub fn rationality(&self, theta: DVector<f64>) -> RationalityVector {
        RationalityVector::with_bounds(theta, self.bounds())
    }

    /// Checks mutual dimension consistency of every map, naming the offending
    /// field on failure.
    pub fn validate(&self) -> Result<()> {
        let nm = self.num_vars();
        let rows = self.num_rows();
        let p = self.theta_dim();
        if self.agents == 0 || self.vars_per_agent == 0 {
            return Err(Error::InvalidProblem(
                "agents and vars_per_agent must be positive".into(),
            ));
        }
        if p == 0 {
            return Err(Error::InvalidProblem("theta_dim must be at least 1".into()));
        }
        if !rows.is_multiple_of(self.agents) {
            return Err(Error::InvalidProblem(format!(
                "constraint rows ({rows}) must split evenly across {} agents",
                self.agents
            )));
        }
        check_mat("r0", &self.r0, nm, nm)?;
        for (i, ri) in self.r_theta.iter().enumerate() {
            check_mat("r_theta", ri, nm, nm)?;
            check_symmetric(&format!("r_theta[{i}]"), &ri.base)?;
            for (_, t) in &ri.terms {
                check_symmetric(&format!("r_theta[{i}] context term"), t)?;
            }
        }
        check_symmetric("r0", &self.r0.base)?;
        for (_, t) in &self.r0.terms {
            check_symmetric("r0 context term", t)?;
        }
        check_vec("c0", &self.c0, nm, self.ctx_dim)?;
        check_mat("c_theta", &self.c_theta, nm, p)?;
        check_mat("a", &self.a, rows, nm)?;
        check_vec("b", &self.b, rows, self.ctx_dim)?;
        for (k, _) in self
            .r0
            .terms
            .iter()
            .chain(self.r_theta.iter().flat_map(|m| m.terms.iter()))
            .chain(self.c_theta.terms.iter())
            .chain(self.a.terms.iter())
        {
            if *k >= self.ctx_dim {
                return Err(Error::Dimension {
                    field: "context term index",
                    expected: format!("< {}", self.ctx_dim),
                    actual: k.to_string(),
                });
            }
        }
        if let Some(row) = self.eq_rows.iter().find(|r| **r >= rows) {
            return Err(Error::Dimension {
                field: "eq_rows",
                expected: format!("< {rows}"),
                actual: row.to_string(),
            });
        }
        if self.theta_lower.len() != p || self.theta_upper.len() != p {
            return Err(Error::Dimension {
                field: "theta bounds",
                expected: p.to_string(),
                actual: format!("{}/{}", self.theta_lower.len(), self.theta_upper.len()),
            });
        }
        Ok(())
    }

    /// Instantiates the concrete quadratic potential problem at `(θ, μ)`.
    ///
    /// `θ` is expected to lie in `Θ`; the box is the caller's responsibility
    /// (the training loop projects every iterate).
    pub fn assemble(
        &self,
        theta: &RationalityVector,
        mu: &ContextVector,
    ) -> Result<QuadraticPotentialProblem> {
        self.validate()?;
        if theta.dim() != self.theta_dim() {
            return Err(Error::Dimension {
                field: "theta",
                expected: self.theta_dim().to_string(),
                actual: theta.dim().to_string(),
            });
        }
        if mu.dim() != self.ctx_dim {
            return Err(Error::Dimension {
                field: "mu",
                expected: self.ctx_dim.to_string(),
                actual: mu.dim().to_string(),
            });
        }
        let mut r = self.r0.eval(mu);
        for (ri, ti) in self.r_theta.iter().zip(theta.theta.iter()) {
            r += ri.eval(mu) * *ti;
        }
        let c = self.c0.eval(mu) + self.c_theta.eval(mu) * &theta.theta;
        Ok(QuadraticPotentialProblem {
            r,
            c,
            a: self.a.eval(mu),
            b: self.b.eval(mu),
            eq_rows: self.eq_rows.clone(),
            agents: self.agents,
            vars_per_agent: self.vars_per_agent,
        })
    }

    /// Partial derivatives of `(R, c)` with respect to `θ_j`; the constraint
    /// data has no `θ` dependence by construction.
    pub fn partials(&self, j: usize, mu: &ContextVector) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if j >= self.theta_dim() {
            return Err(Error::ParamIndex {
                index: j,
                dim: self.theta_dim(),
            });
        }
        let dr = self.r_theta[j].eval(mu);
        let dc = DVector::from_column_slice(self.c_theta.eval(mu).column(j).as_slice());
        Ok((dr, dc))
    }

    /// Diagnostic report on the well-posedness assumptions: positive
    /// definiteness of `R0`, positive semidefiniteness of each `Rᵢ`, convexity
    /// of the potential over the whole `Θ` box, a linear-independence spot
    /// check on constraint rows, and a boundedness heuristic.
    pub fn check_assumptions(&self, mus: &[ContextVector], tol: f64) -> AssumptionReport {
        let mut report = AssumptionReport {
            tol,
            r0_positive_definite: true,
            ri_positive_semidefinite: true,
            convex_over_box: true,
            licq_ok: true,
            bounded: true,
            per_context: Vec::new(),
            notes: Vec::new(),
        };
        if let Err(e) = self.validate() {
            report.notes.push(format!("invalid form: {e}"));
            report.r0_positive_definite = false;
            report.convex_over_box = false;
            report.licq_ok = false;
            return report;
        }
        if mus.is_empty() {
            report.notes.push("no contexts supplied".into());
        }
        for (ctx_idx, mu) in mus.iter().enumerate() {
            let r0 = self.r0.eval(mu);
            let r0_min = min_eig(&r0);
            if r0_min <= tol {
                report.r0_positive_definite = false;
                if ctx_idx == 0 {
                    report.notes.push("R0 not positive definite".into());
                }
            }
            let mut ri_mins = Vec::with_capacity(self.theta_dim());
            for (i, ri) in self.r_theta.iter().enumerate() {
                let m = ri.eval(mu);
                let e = min_eig(&m);
                if e < -tol {
                    report.ri_positive_semidefinite = false;
                    report
                        .notes
                        .push(format!("R_theta[{i}] indefinite at context {ctx_idx}"));
                }
                ri_mins.push(e);
            }
            // Convexity over the whole box: R(θ) ⪰ R0 + Σ lowerᵢ·Rᵢ whenever
            // Rᵢ ⪰ 0 and θᵢ ≥ lowerᵢ, so a definite lower envelope certifies
            // R(θ) ≻ 0 on all of Θ.
            let mut envelope = Some(r0.clone());
            for (i, ri) in self.r_theta.iter().enumerate() {
                let lo = self.theta_lower[i];
                let m = ri.eval(mu);
                if lo.is_finite() {
                    if let Some(env) = envelope.as_mut() {
                        *env += m * lo;
                    }
                } else if !m.iter().all(|v| v.abs() <= tol) {
                    envelope = None;
                    report.notes.push(format!(
                        "theta[{i}] unbounded below with nonzero R_theta[{i}]: cannot certify convexity"
                    ));
                }
            }
            let box_min = envelope.map(|env| min_eig(&env));
            if box_min.is_none_or(|e| e <= tol) {
                report.convex_over_box = false;
            }
            report.per_context.push(ContextReport {
                r0_min_eig: r0_min,
                ri_min_eigs: ri_mins,
                box_min_eig: box_min,
            });
        }
        let probe = mus
            .first()
            .cloned()
            .unwrap_or_else(|| ContextVector::new(DVector::zeros(self.ctx_dim)));
        self.licq_spot_check(&probe, tol, &mut report);
        self.boundedness_heuristic(&probe, &mut report);
        report
    }

    /// Spot check for linearly independent active rows: equality rank, a scan
    /// for (anti)parallel row pairs, and the rank of the strictly active rows
    /// at equilibria solved for a few random box points (random feasible
    /// points of the constraint set). Weakly active rows (tight with zero
    /// dual) are the degeneracy rules' business, not a structural defect.
    fn licq_spot_check(&self, mu: &ContextVector, tol: f64, report: &mut AssumptionReport) {
        let a = self.a.eval(mu);
        let rows = a.nrows();
        if rows == 0 {
            return;
        }
        let eq: Vec<usize> = self.eq_rows.iter().copied().collect();
        if !eq.is_empty() {
            let sub = select_rows(&a, &eq);
            if rank(&sub, tol.max(1e-12)) < eq.len() {
                report.licq_ok = false;
                report.notes.push("equality rows linearly dependent".into());
            }
        }
        // Normalized duplicate / parallel row detection.
        let normed: Vec<Option<DVector<f64>>> = (0..rows)
            .map(|i| {
                let row = a.row(i).transpose();
                let n = row.norm();
                (n > tol).then(|| row / n)
            })
            .collect();
        'outer: for i in 0..rows {
            for j in (i + 1)..rows {
                if let (Some(ri), Some(rj)) = (&normed[i], &normed[j]) {
                    if (ri - rj).amax() < 1e-12 || (ri + rj).amax() < 1e-12 {
                        report.licq_ok = false;
                        report
                            .notes
                            .push(format!("constraint rows {i} and {j} are parallel"));
                        break 'outer;
                    }
                }
            }
        }
        // Solve at a few random box points and check the strictly active rows.
        let p = self.theta_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(0x11CC);
        for _ in 0..4 {
            let draw = DVector::from_fn(p, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal).abs()
            });
            let theta = project_theta(&self.rationality(draw));
            let Ok(problem) = self.assemble(&theta, mu) else {
                continue;
            };
            let Ok(sol) = crate::qp::solve_potential(&problem, crate::qp::DEFAULT_KKT_TOL) else {
                report
                    .notes
                    .push("spot-check solve failed at a sampled theta".into());
                continue;
            };
            let strict: Vec<usize> = (0..rows)
                .filter(|r| {
                    self.eq_rows.contains(r)
                        || (sol.active.contains(r) && !sol.degenerate.contains(r))
                })
                .collect();
            if strict.is_empty() {
                continue;
            }
            let sub = select_rows(&a, &strict);
            if rank(&sub, tol.max(1e-12)) < strict.len() {
                report.licq_ok = false;
                report.notes.push(format!(
                    "strictly active rows {strict:?} are rank deficient at a sampled point"
                ));
                return;
            }
        }
    }

    /// Warns when some variable has no constraint row bounding it above or
    /// below. Informational only: with `R ≻ 0` the potential problem stays
    /// well-posed on unbounded feasible sets.
    fn boundedness_heuristic(&self, mu: &ContextVector, report: &mut AssumptionReport) {
        let a = self.a.eval(mu);
        for j in 0..a.ncols() {
            let mut above = false;
            let mut below = false;
            for i in 0..a.nrows() {
                let v = a[(i, j)];
                let eq = self.eq_rows.contains(&i);
                if v > 0.0 || (eq && v != 0.0) {
                    above = true;
                }
                if v < 0.0 || (eq && v != 0.0) {
                    below = true;
                }
            }
            if !(above && below) {
                report.bounded = false;
                report.notes.push(format!(
                    "variable {j} not bounded {} by any constraint row",
                    if above { "below" } else { "above" }
                ));
                return;
            }
        }
    }
}

fn check_mat(field: &'static str, m: &CtxMatrix, nr: usize, nc: usize) -> Result<()> {
    if m.nrows() != nr || m.ncols() != nc {
        return Err(Error::Dimension {
            field,
            expected: format!("{nr}x{nc}"),
            actual: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    for (_, t) in &m.terms {
        if t.nrows() != nr || t.ncols() != nc {
            return Err(Error::Dimension {
                field,
                expected: format!("{nr}x{nc}"),
                actual: format!("{}x{} (context term)", t.nrows(), t.ncols()),
            });
        }
    }
    Ok(())
}

fn check_vec(field: &'static str, v: &CtxVector, len: usize, ctx_dim: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Dimension {
            field,
            expected: len.to_string(),
            actual: v.len().to_string(),
        });
    }
    if let Some(coeff) = &v.coeff {
        if coeff.nrows() != len || coeff.ncols() != ctx_dim {
            return Err(Error::Dimension {
                field,
                expected: format!("{len}x{ctx_dim}"),
                actual: format!("{}x{} (context coefficient)", coeff.nrows(), coeff.ncols()),
            });
        }
    }
    Ok(())
}

fn check_symmetric(field: &str, m: &DMatrix<f64>) -> Result<()> {
    let scale = 1.0 + m.amax();
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidProblem(format!("{field} is not symmetric")));
    }
    Ok(())
}

pub(crate) fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn select_rows(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), a.ncols());
    for (i, r) in rows.iter().enumerate() {
        out.set_row(i, &a.row(*r));
    }
    out
}

pub(crate) fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let cutoff = sv.max() * tol.max(f64::EPSILON * m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|s| **s > cutoff).count()
}

/// Maximal linearly independent subset of the active rows `z` (equality rows
/// first, then ascending index), via greedy Gram–Schmidt on the rows of `A`.
///
/// Because the constraint data does not depend on `θ`, a tight row that is a
/// linear combination of other tight rows stays tight under any `θ`
/// variation: its right-hand side is the same combination of their
/// right-hand sides. Pinning only an independent subset therefore defines
/// the same implicit equilibrium map while keeping the system invertible.
pub fn independent_active_subset(
    problem: &QuadraticPotentialProblem,
    z: &BTreeSet<usize>,
) -> BTreeSet<usize> {
    let mut order: Vec<usize> = z.iter().copied().filter(|r| problem.is_eq(*r)).collect();
    order.extend(z.iter().copied().filter(|r| !problem.is_eq(*r)));
    independent_rows_in_order(&problem.a, &order, problem.num_vars())
}

/// Greedy Gram–Schmidt row selection in the given preference order, keeping
/// at most `cap` rows.
pub(crate) fn independent_rows_in_order(
    a: &DMatrix<f64>,
    order: &[usize],
    cap: usize,
) -> BTreeSet<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = BTreeSet::new();
    for row in order {
        if basis.len() == cap {
            break;
        }
        if kept.contains(row) {
            continue;
        }
        let mut v: DVector<f64> = a.row(*row).transpose();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for b in &basis {
            let coeff = v.dot(b);
            v -= b * coeff;
        }
        // One re-orthogonalization pass keeps the test numerically sharp.
        for b in &basis {
            let coeff = v.dot(b);
            v -= b * coeff;
        }
        let norm = v.norm();
        if norm > 1e-10 * norm0 {
            basis.push(v / norm);
            kept.insert(*row);
        }
    }
    kept
}

/// Coordinate-wise clamp of `θ` onto its box; identity when no box is set.
pub fn project_theta(theta: &RationalityVector) -> RationalityVector {
    match &theta.bounds {
        None => theta.clone(),
        Some(bounds) => {
            let mut out = theta.theta.clone();
            for i in 0..out.len() {
                out[i] = out[i].clamp(bounds.lower[i], bounds.upper[i]);
            }
            RationalityVector {
                theta: out,
                bounds: theta.bounds.clone(),
            }
        }
    }
}

/// Result of [`AffineGameForm::check_assumptions`]: a report, not an error.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub tol: f64,
    /// Strict condition of the well-posedness proposition: `R0(μ) ≻ 0`.
    pub r0_positive_definite: bool,
    /// `Rᵢ(μ) ⪰ 0` for every parameter and context.
    pub ri_positive_semidefinite: bool,
    /// `R(θ,μ) ≻ 0` certified over the entire `Θ` box.
    pub convex_over_box: bool,
    pub licq_ok: bool,
    /// Boundedness heuristic; informational, not gating.
    pub bounded: bool,
    pub per_context: Vec<ContextReport>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ContextReport {
    pub r0_min_eig: f64,
    pub ri_min_eigs: Vec<f64>,
    /// Minimum eigenvalue of the lower envelope `R0 + Σ lowerᵢ·Rᵢ`, when a
    /// finite envelope exists.
    pub box_min_eig: Option<f64>,
}

impl AssumptionReport {
    /// Whether training may proceed: the potential must be strictly convex
    /// (either `R0 ≻ 0` outright or certified over the `Θ` box) with the
    /// independence spot check clean. Boundedness is reported but does not
    /// gate: strictly convex potentials are well-posed regardless.
    pub fn passes(&self) -> bool {
        (self.r0_positive_definite || self.convex_over_box)
            && self.ri_positive_semidefinite
            && self.licq_ok
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "assumption report (tol = {:e})", self.tol)?;
        writeln!(f, "  r0 positive definite: {}", self.r0_positive_definite)?;
        writeln!(
            f,
            "  r_theta positive semidefinite: {}",
            self.ri_positive_semidefinite
        )?;
        writeln!(f, "  convex over theta box: {}", self.convex_over_box)?;
        writeln!(f, "  licq spot check: {}", self.licq_ok)?;
        writeln!(f, "  bounded (heuristic): {}", self.bounded)?;
        writeln!(f, "  passes: {}", self.passes())?;
        for note in &self.notes {
            writeln!(f, "  note: {note}")?;
        }
        Ok(())
    }
}

/// Concrete quadratic potential problem at a fixed `(θ, μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPotentialProblem {
    pub r: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub eq_rows: BTreeSet<usize>,
    pub agents: usize,
    pub vars_per_agent: usize,
}

impl QuadraticPotentialProblem {
    pub fn num_vars(&self) -> usize {
        self.r.nrows()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn rows_per_agent(&self) -> usize {
        self.num_rows().checked_div(self.agents).unwrap_or(0)
    }

    pub fn is_eq(&self, row: usize) -> bool {
        self.eq_rows.contains(&row)
    }

    pub fn inequality_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_rows()).filter(move |r| !self.is_eq(*r))
    }

    /// Potential value `½xᵀRx + cᵀx`.
    pub fn potential(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.r * x).dot(x) + self.c.dot(x)
    }

    /// Constraint slack `b − Ax` (zero on satisfied equality rows).
    pub fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * x
    }

    /// Whether `x` satisfies all constraints within `tol` (scaled by `1+|b|`).
    pub fn is_feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        let s = self.slack(x);
        (0..self.num_rows()).all(|i| {
            let scale = 1.0 + self.b[i].abs();
            if self.is_eq(i) {
                s[i].abs() <= tol * scale
            } else {
                s[i] >= -tol * scale
            }
        })
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Unconstrained scalar game ½x² − θx: equilibrium x(θ) = θ.
    pub(crate) fn scalar_game() -> AffineGameForm {
        AffineGameForm {
            game: "scalar".into(),
            agents: 1,
            vars_per_agent: 1,
            ctx_dim: 1,
            r0: CtxMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            r_theta: vec![CtxMatrix::constant(DMatrix::zeros(1, 1))],
            c0: CtxVector::constant(DVector::zeros(1)),
            c_theta: CtxMatrix::constant(DMatrix::from_element(1, 1, -1.0)),
            a: CtxMatrix::constant(DMatrix::zeros(0, 1)),
            b: CtxVector::constant(DVector::zeros(0)),
            eq_rows: BTreeSet::new(),
            theta_lower: DVector::from_element(1, f64::NEG_INFINITY),
            theta_upper: DVector::from_element(1, f64::INFINITY),
        }
    }

    /// Cournot-style two-agent form: R = b(I+J), c = μ − a·1, x ≥ 0.
    pub(crate) fn tiny_cournot() -> AffineGameForm {
        let n = 2;
        let zero = DMatrix::zeros(n, n);
        let iplusj = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        AffineGameForm {
            game: "cournot".into(),
            agents: n,
            vars_per_agent: 1,
            ctx_dim: n,
            r0: CtxMatrix::constant(zero.clone()),
            r_theta: vec![CtxMatrix::constant(zero), CtxMatrix::constant(iplusj)],
            c0: CtxVector {
                base: DVector::zeros(n),
                coeff: Some(DMatrix::identity(n, n)),
            },
            c_theta: CtxMatrix::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -1.0, 0.0])),
            a: CtxMatrix::constant(-DMatrix::<f64>::identity(n, n)),
            b: CtxVector::constant(DVector::zeros(n)),
            eq_rows: BTreeSet::new(),
            theta_lower: DVector::from_row_slice(&[f64::NEG_INFINITY, 1e-3]),
            theta_upper: DVector::from_row_slice(&[f64::INFINITY, f64::INFINITY]),
        }
    }
}


/// Test-support: rank of selected rows (used by integration probes).
#[doc(hidden)]
pub fn rank_probe(a: &DMatrix<f64>, rows: &[usize]) -> (usize, usize) {
    (rank(&select_rows(a, rows), 1e-9), rows.len())
}
