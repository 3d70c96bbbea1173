//! Convex quadratic programs with sparse constraints.
//!
//! ```text
//! minimize    1/2 z' P z + q' z
//! subject to  A_eq z  = b_eq
//!             A_in z <= b_in
//!             z_i >= 0        for every i with nonneg[i]
//! ```
//!
//! Two backends share this interface: a primal-dual interior-point method
//! and an operator-splitting (ADMM) method. Both factor quasi-definite KKT
//! systems with a sparse LDL' decomposition.

mod admm;
mod ipm;
mod kkt;
mod scaling;

use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

pub use admm::{AdmmSettings, AdmmSolver};
pub use ipm::{InteriorPointSettings, InteriorPointSolver};

/// Sparse convex QP. Matrices are stored row-major.
#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric positive semidefinite Hessian, both triangles stored.
    pub quad: CsMat<f64>,
    pub lin: Vec<f64>,
    pub eq: CsMat<f64>,
    pub eq_rhs: Vec<f64>,
    pub ineq: CsMat<f64>,
    pub ineq_rhs: Vec<f64>,
    pub nonneg: Vec<bool>,
}

impl QpProblem {
    pub fn new(
        quad: CsMat<f64>,
        lin: Vec<f64>,
        eq: CsMat<f64>,
        eq_rhs: Vec<f64>,
        ineq: CsMat<f64>,
        ineq_rhs: Vec<f64>,
        nonneg: Vec<bool>,
    ) -> Result<Self> {
        let n = lin.len();
        let dim = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{what} is {got:?}, expected {want:?}")))
            }
        };
        dim("quadratic term", quad.shape(), (n, n))?;
        dim("equality matrix", eq.shape(), (eq_rhs.len(), n))?;
        dim("inequality matrix", ineq.shape(), (ineq_rhs.len(), n))?;
        if nonneg.len() != n {
            return Err(Error::Dimension(format!("nonneg mask has {} entries for {n} variables", nonneg.len())));
        }
        let all_finite = quad.data().iter().chain(eq.data()).chain(ineq.data()).chain(&lin).chain(&eq_rhs).all(|v| v.is_finite());
        if !all_finite || ineq_rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver("problem data contains non-finite values".into()));
        }
        let quad = quad.to_csr();
        let transposed = quad.transpose_view().to_csr();
        let asym = quad
            .iter()
            .map(|(v, (r, c))| (v - transposed.get(r, c).copied().unwrap_or(0.0)).abs())
            .fold(0.0, f64::max);
        let scale = quad.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if asym > 1e-10 * scale {
            return Err(Error::Solver(format!("quadratic term is not symmetric (max mismatch {asym:e})")));
        }
        Ok(Self { quad, lin, eq: eq.to_csr(), eq_rhs, ineq: ineq.to_csr(), ineq_rhs, nonneg })
    }

    pub fn num_vars(&self) -> usize {
        self.lin.len()
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let pz = spmv(&self.quad, z);
        0.5 * dot(z, &pz) + dot(&self.lin, z)
    }
}

/// Build a row-major matrix from `(row, col, value)` triplets; duplicates are summed.
pub fn csr_from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> CsMat<f64> {
    let mut t = TriMat::with_capacity((rows, cols), entries.len());
    for &(r, c, v) in entries {
        t.add_triplet(r, c, v);
    }
    t.to_csr()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    InfeasibleDetected,
}

/// Lagrange multipliers, with the sign convention
/// `P z + q + A_eq' y + A_in' lambda - mu = 0`, `lambda >= 0`, `mu >= 0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    /// One entry per variable; zero where the variable is free.
    pub bound: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub multipliers: Multipliers,
}

/// Primal-dual starting point for backends that can use one.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: Vec<f64>,
    pub multipliers: Multipliers,
}

impl From<&QpSolution> for WarmStart {
    fn from(s: &QpSolution) -> Self {
        Self { z: s.z.clone(), multipliers: s.multipliers.clone() }
    }
}

pub trait QpSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, problem: &QpProblem, warm: Option<&WarmStart>) -> Result<QpSolution>;
}

/// Infinity-norm optimality measures of a candidate primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    /// Most negative inequality or bound multiplier, as a positive number.
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal_feasibility).max(self.dual_feasibility).max(self.complementarity)
    }
}

pub fn kkt_residuals(problem: &QpProblem, z: &[f64], m: &Multipliers) -> KktResiduals {
    let mut grad = spmv(&problem.quad, z);
    for (g, q) in grad.iter_mut().zip(&problem.lin) {
        *g += q;
    }
    spmv_t_acc(&problem.eq, &m.eq, &mut grad);
    spmv_t_acc(&problem.ineq, &m.ineq, &mut grad);
    for (g, mu) in grad.iter_mut().zip(&m.bound) {
        *g -= mu;
    }
    let stationarity = inf_norm(&grad);

    let eq_res = spmv(&problem.eq, z);
    let in_val = spmv(&problem.ineq, z);
    let mut primal = 0.0f64;
    for (v, b) in eq_res.iter().zip(&problem.eq_rhs) {
        primal = primal.max((v - b).abs());
    }
    for (v, b) in in_val.iter().zip(&problem.ineq_rhs) {
        primal = primal.max(v - b);
    }
    for (zi, nn) in z.iter().zip(&problem.nonneg) {
        if *nn {
            primal = primal.max(-zi);
        }
    }

    let mut dual = 0.0f64;
    let mut comp = 0.0f64;
    for ((l, v), b) in m.ineq.iter().zip(&in_val).zip(&problem.ineq_rhs) {
        dual = dual.max(-l);
        comp = comp.max((l * (b - v)).abs());
    }
    for (i, mu) in m.bound.iter().enumerate() {
        if problem.nonneg[i] {
            dual = dual.max(-mu);
            comp = comp.max((mu * z[i]).abs());
        } else {
            dual = dual.max(mu.abs());
        }
    }
    KktResiduals { stationarity, primal_feasibility: primal.max(0.0), dual_feasibility: dual, complementarity: comp }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// y = M x for row-major M.
pub(crate) fn spmv(m: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m.rows()];
    for (r, row) in m.outer_iterator().enumerate() {
        y[r] = row.iter().map(|(c, v)| v * x[c]).sum();
    }
    y
}

/// y += M' x for row-major M.
pub(crate) fn spmv_t_acc(m: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    for (r, row) in m.outer_iterator().enumerate() {
        let xr = x[r];
        if xr != 0.0 {
            for (c, v) in row.iter() {
                y[c] += v * xr;
            }
        }
    }
}
