//! Fixed-pattern symmetric KKT matrices and their LDL' factorization.

use sprs::{CsMat, FillInReduction, SymmetryCheck};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};

/// Column-compressed pattern of a symmetric matrix with both triangles and
/// the full diagonal stored.
#[derive(Debug, Clone)]
pub(crate) struct SymPattern {
    pub dim: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl SymPattern {
    /// Pattern holding every `(row, col)` in `coords`, its mirror, and the diagonal.
    pub fn new(dim: usize, coords: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<Vec<usize>> = (0..dim).map(|i| vec![i]).collect();
        for (r, c) in coords {
            cols[c].push(r);
            cols[r].push(c);
        }
        let mut indptr = Vec::with_capacity(dim + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut col in cols {
            col.sort_unstable();
            col.dedup();
            indices.extend(col);
            indptr.push(indices.len());
        }
        Self { dim, indptr, indices }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Storage position of entry `(row, col)`.
    pub fn pos(&self, row: usize, col: usize) -> usize {
        let lo = self.indptr[col];
        let hi = self.indptr[col + 1];
        lo + self.indices[lo..hi].binary_search(&row).expect("entry is in the pattern")
    }

    pub fn matrix(&self, data: &[f64]) -> CsMat<f64> {
        CsMat::new_csc((self.dim, self.dim), self.indptr.clone(), self.indices.clone(), data.to_vec())
    }

    /// y = K x.
    pub fn matvec(&self, data: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for c in 0..self.dim {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.indptr[c]..self.indptr[c + 1] {
                y[self.indices[p]] += data[p] * xc;
            }
        }
        y
    }
}

/// LDL' factor of a quasi-definite matrix on a fixed pattern; the symbolic
/// analysis is done once and reused on every numeric refactorization.
pub(crate) struct KktFactor {
    pub pattern: SymPattern,
    ldl: Option<LdlNumeric<f64, usize>>,
    /// Pivot of a 1x1 system, which the sparse factorization does not accept.
    scalar: Option<f64>,
}

impl KktFactor {
    pub fn new(pattern: SymPattern) -> Self {
        Self { pattern, ldl: None, scalar: None }
    }

    pub fn factor(&mut self, data: &[f64]) -> Result<()> {
        if self.pattern.dim <= 1 {
            let pivot = data.first().copied().unwrap_or(1.0);
            if !(pivot.is_finite() && pivot != 0.0) {
                return Err(Error::Solver("KKT factorization produced a zero or non-finite pivot".into()));
            }
            self.scalar = Some(pivot);
            return Ok(());
        }
        let mat = self.pattern.matrix(data);
        let res = match self.ldl.as_mut() {
            Some(ldl) => ldl.update(mat.view()),
            None => Ldl::new()
                .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
                .check_symmetry(SymmetryCheck::DontCheckSymmetry)
                .numeric(mat.view())
                .map(|ldl| {
                    self.ldl = Some(ldl);
                }),
        };
        res.map_err(|e| Error::Solver(format!("KKT factorization failed: {e}")))?;
        let d = self.ldl.as_ref().expect("factored").d();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver("KKT factorization produced non-finite pivots".into()));
        }
        Ok(())
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        if let Some(pivot) = self.scalar {
            return rhs.iter().map(|b| b / pivot).collect();
        }
        self.ldl.as_ref().expect("factor before solve").solve(rhs)
    }

    /// Solve `K0 x = rhs` where the factored matrix is a regularized version of
    /// `K0`; `k0_data` holds the unregularized values on the same pattern.
    pub fn solve_refined(&self, k0_data: &[f64], rhs: &[f64], steps: usize) -> Vec<f64> {
        let mut x = self.solve(rhs);
        for _ in 0..steps {
            let kx = self.pattern.matvec(k0_data, &x);
            let r: Vec<f64> = rhs.iter().zip(&kx).map(|(b, k)| b - k).collect();
            let rn = super::inf_norm(&r);
            if rn <= 1e-13 * (1.0 + super::inf_norm(rhs)) {
                break;
            }
            let dx = self.solve(&r);
            for (xi, d) in x.iter_mut().zip(&dx) {
                *xi += d;
            }
        }
        if log::log_enabled!(log::Level::Trace) {
            let kx = self.pattern.matvec(k0_data, &x);
            let r: Vec<f64> = rhs.iter().zip(&kx).map(|(b, k)| b - k).collect();
            log::trace!("kkt residual {:.3e} rhs {:.3e}", super::inf_norm(&r), super::inf_norm(rhs));
        }
        x
    }
}
