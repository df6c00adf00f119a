//! Dense LU factorization helpers shared by the QP solver and the adjoint
//! gradient path: plain and transposed solves with one step of iterative
//! refinement, plus a Hager-style reciprocal condition estimate in the 1-norm.

use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn};

pub(crate) struct LuFactor {
    a: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    l: DMatrix<f64>,
    u: DMatrix<f64>,
    norm1: f64,
    n: usize,
}

impl LuFactor {
    /// Factors a square matrix. Returns `None` on non-finite entries or an
    /// exactly singular factor (zero pivot).
    pub(crate) fn factor(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        if n != a.ncols() || a.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let lu = LU::new(a.clone());
        let u = lu.u();
        if u.diagonal().iter().any(|d| *d == 0.0) {
            return None;
        }
        let l = lu.l();
        let norm1 = norm1(a);
        Some(Self {
            a: a.clone(),
            lu,
            l,
            u,
            norm1,
            n,
        })
    }

    fn solve_raw(&self, b: &DVector<f64>) -> DVector<f64> {
        // Pivots were checked nonzero at factor time.
        self.lu.solve(b).expect("nonsingular by construction")
    }

    fn solve_t_raw(&self, b: &DVector<f64>) -> DVector<f64> {
        // P·A = L·U, hence Aᵀ·y = Uᵀ·Lᵀ·P·y. Substitute w = P·y.
        let z = self
            .u
            .tr_solve_upper_triangular(b)
            .expect("nonsingular by construction");
        let mut w = self.l.tr_solve_lower_triangular(&z).expect("unit diagonal");
        self.lu.p().inv_permute_rows(&mut w);
        w
    }

    /// Solves `A·x = b` with one step of iterative refinement.
    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve_raw(b);
        let r = b - &self.a * &x;
        x += self.solve_raw(&r);
        x
    }

    /// Solves `Aᵀ·x = b` with one step of iterative refinement.
    pub(crate) fn solve_t(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve_t_raw(b);
        let r = b - self.a.transpose() * &x;
        x += self.solve_t_raw(&r);
        x
    }

    /// Reciprocal condition estimate in the 1-norm (Hager's method for
    /// `‖A⁻¹‖₁`, at most five solve pairs).
    pub(crate) fn rcond(&self) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        if self.norm1 == 0.0 {
            return 0.0;
        }
        let n = self.n;
        let mut x = DVector::from_element(n, 1.0 / n as f64);
        let mut est = 0.0_f64;
        for _ in 0..5 {
            let y = self.solve_raw(&x);
            est = y.iter().map(|v| v.abs()).sum();
            if !est.is_finite() {
                return 0.0;
            }
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let z = self.solve_t_raw(&xi);
            let (jmax, zmax) = z.iter().enumerate().fold((0, 0.0_f64), |(ja, va), (j, v)| {
                if v.abs() > va {
                    (j, v.abs())
                } else {
                    (ja, va)
                }
            });
            if zmax <= z.dot(&x) * (1.0 + 1e-12) {
                break;
            }
            x = DVector::zeros(n);
            x[jmax] = 1.0;
        }
        if est == 0.0 {
            return 0.0;
        }
        1.0 / (self.norm1 * est)
    }
}

/// Matrix 1-norm (maximum absolute column sum).
pub(crate) fn norm1(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
