//! Ruiz equilibration and the internal inequality form shared by the backends.
//!
//! Variable bounds become rows `-z_j <= 0` appended after the general
//! inequalities, so the backends only see `A z = b`, `G z <= h`.

use sprs::{CsMat, TriMat};

use super::{inf_norm, Multipliers, QpProblem};

#[derive(Debug, Clone)]
pub(crate) struct Scaled {
    pub p: CsMat<f64>,
    pub q: Vec<f64>,
    pub a: CsMat<f64>,
    pub b: Vec<f64>,
    pub g: CsMat<f64>,
    pub h: Vec<f64>,
    /// Variable scaling, z = d .* z_scaled.
    pub d: Vec<f64>,
    pub e_eq: Vec<f64>,
    pub e_in: Vec<f64>,
    pub cost: f64,
    /// Number of general inequality rows; the rest of `g` are bound rows.
    pub general_rows: usize,
    pub bound_vars: Vec<usize>,
}

fn col_row_norms(m: &CsMat<f64>, col: &mut [f64], row: &mut [f64]) {
    for (r, vec) in m.outer_iterator().enumerate() {
        for (c, v) in vec.iter() {
            let a = v.abs();
            col[c] = col[c].max(a);
            row[r] = row[r].max(a);
        }
    }
}

fn scale_rows_cols(m: &mut CsMat<f64>, row: &[f64], col: &[f64]) {
    for (r, mut vec) in m.outer_iterator_mut().enumerate() {
        for (c, v) in vec.iter_mut() {
            *v *= row[r] * col[c];
        }
    }
}

fn factor(norm: f64) -> f64 {
    if norm < 1e-8 {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(1e-4, 1e4)
    }
}

impl Scaled {
    pub fn new(problem: &QpProblem, ruiz_iterations: usize) -> Self {
        let n = problem.num_vars();
        let bound_vars: Vec<usize> = (0..n).filter(|&i| problem.nonneg[i]).collect();
        let general_rows = problem.ineq.rows();
        let mut g_tri = TriMat::with_capacity((general_rows + bound_vars.len(), n), problem.ineq.nnz() + bound_vars.len());
        for (v, (r, c)) in problem.ineq.iter() {
            g_tri.add_triplet(r, c, *v);
        }
        for (k, &j) in bound_vars.iter().enumerate() {
            g_tri.add_triplet(general_rows + k, j, -1.0);
        }
        let mut h = problem.ineq_rhs.clone();
        h.extend(std::iter::repeat_n(0.0, bound_vars.len()));

        let mut s = Self {
            p: problem.quad.clone(),
            q: problem.lin.clone(),
            a: problem.eq.clone(),
            b: problem.eq_rhs.clone(),
            g: g_tri.to_csr(),
            h,
            d: vec![1.0; n],
            e_eq: vec![1.0; problem.eq.rows()],
            e_in: vec![1.0; general_rows + bound_vars.len()],
            cost: 1.0,
            general_rows,
            bound_vars,
        };
        for _ in 0..ruiz_iterations {
            let mut col = vec![0.0; n];
            let mut row_eq = vec![0.0; s.a.rows()];
            let mut row_in = vec![0.0; s.g.rows()];
            let mut unused = vec![0.0; n];
            col_row_norms(&s.p, &mut col, &mut unused);
            col_row_norms(&s.a, &mut col, &mut row_eq);
            col_row_norms(&s.g, &mut col, &mut row_in);
            let dc: Vec<f64> = col.iter().map(|v| factor(*v)).collect();
            let de: Vec<f64> = row_eq.iter().map(|v| factor(*v)).collect();
            let di: Vec<f64> = row_in.iter().map(|v| factor(*v)).collect();
            scale_rows_cols(&mut s.p, &dc, &dc);
            scale_rows_cols(&mut s.a, &de, &dc);
            scale_rows_cols(&mut s.g, &di, &dc);
            for (v, f) in s.q.iter_mut().zip(&dc) {
                *v *= f;
            }
            for (v, f) in s.b.iter_mut().zip(&de) {
                *v *= f;
            }
            for (v, f) in s.h.iter_mut().zip(&di) {
                *v *= f;
            }
            for (v, f) in s.d.iter_mut().zip(&dc) {
                *v *= f;
            }
            for (v, f) in s.e_eq.iter_mut().zip(&de) {
                *v *= f;
            }
            for (v, f) in s.e_in.iter_mut().zip(&di) {
                *v *= f;
            }
        }
        if ruiz_iterations > 0 {
            let mut col = vec![0.0; n];
            let mut unused = vec![0.0; n];
            col_row_norms(&s.p, &mut col, &mut unused);
            let mean = if n > 0 { col.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let norm = mean.max(inf_norm(&s.q));
            let c = if norm < 1e-8 { 1.0 } else { (1.0 / norm).clamp(1e-4, 1e4) };
            s.p.map_inplace(|v| v * c);
            for v in s.q.iter_mut() {
                *v *= c;
            }
            s.cost = c;
        }
        s
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn unscale_primal(&self, zs: &[f64]) -> Vec<f64> {
        zs.iter().zip(&self.d).map(|(z, d)| z * d).collect()
    }

    pub fn scale_primal(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.d).map(|(z, d)| z / d).collect()
    }

    /// Multipliers of the original problem from the scaled ones.
    pub fn unscale_multipliers(&self, y: &[f64], lambda: &[f64]) -> Multipliers {
        let eq = y.iter().zip(&self.e_eq).map(|(v, e)| v * e / self.cost).collect();
        let full: Vec<f64> = lambda.iter().zip(&self.e_in).map(|(v, e)| v * e / self.cost).collect();
        let mut bound = vec![0.0; self.n()];
        for (k, &j) in self.bound_vars.iter().enumerate() {
            bound[j] = full[self.general_rows + k];
        }
        Multipliers { eq, ineq: full[..self.general_rows].to_vec(), bound }
    }

    /// Scaled multipliers `(y, lambda)` from original ones.
    pub fn scale_multipliers(&self, m: &Multipliers) -> (Vec<f64>, Vec<f64>) {
        let y = m.eq.iter().zip(&self.e_eq).map(|(v, e)| v * self.cost / e).collect();
        let mut lambda: Vec<f64> = m.ineq.iter().zip(&self.e_in).map(|(v, e)| v * self.cost / e).collect();
        for (k, &j) in self.bound_vars.iter().enumerate() {
            lambda.push(m.bound[j] * self.cost / self.e_in[self.general_rows + k]);
        }
        (y, lambda)
    }

    /// Infinity norm of an equality residual expressed in original units.
    pub fn eq_residual_norm(&self, r: &[f64]) -> f64 {
        r.iter().zip(&self.e_eq).fold(0.0f64, |m, (v, e)| m.max((v / e).abs()))
    }

    /// Largest positive inequality violation in original units.
    pub fn ineq_violation_norm(&self, r: &[f64]) -> f64 {
        r.iter().zip(&self.e_in).fold(0.0f64, |m, (v, e)| m.max(v / e))
    }

    /// Infinity norm of a dual (gradient-space) vector in original units.
    pub fn dual_norm(&self, r: &[f64]) -> f64 {
        r.iter().zip(&self.d).fold(0.0f64, |m, (v, d)| m.max((v / d).abs())) / self.cost
    }
}
