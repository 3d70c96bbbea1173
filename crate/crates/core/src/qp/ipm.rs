//! Mehrotra predictor-corrector interior-point method.
//!
//! The inequality slacks are eliminated, leaving the reduced quasi-definite
//! system
//!
//! ```text
//! [ P + G' W G + dI    A' ] [dz]   [r1]
//! [ A                 -dI ] [dy] = [r2]
//! ```
//!
//! with `W = diag(lambda / s)`, solved by LDL' with iterative refinement
//! against the unregularized matrix.

use log::debug;

use super::kkt::{KktFactor, SymPattern};
use super::scaling::Scaled;
use super::{dot, inf_norm, spmv, spmv_t_acc, QpProblem, QpSolution, QpSolver, SolveStatus, WarmStart};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorPointSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Threshold of the normalized Farkas test for primal infeasibility.
    pub eps_infeasible: f64,
    pub max_iterations: usize,
    pub ruiz_iterations: usize,
    pub regularization: f64,
    pub refinement_steps: usize,
}

impl Default for InteriorPointSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            eps_infeasible: 1e-8,
            max_iterations: 100,
            ruiz_iterations: 10,
            regularization: 1e-9,
            refinement_steps: 12,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPointSolver {
    pub settings: InteriorPointSettings,
}

impl InteriorPointSolver {
    pub fn new(settings: InteriorPointSettings) -> Self {
        Self { settings }
    }
}

/// Positions of every term of the reduced KKT matrix inside the pattern.
struct Layout {
    n: usize,
    factor: KktFactor,
    p_pos: Vec<(usize, f64)>,
    /// (inequality row, position, G_ra * G_rb)
    gwg: Vec<(usize, usize, f64)>,
    a_pos: Vec<(usize, f64)>,
}

impl Layout {
    fn new(s: &Scaled) -> Self {
        let n = s.n();
        let me = s.a.rows();
        let mut coords = Vec::new();
        for (_, (r, c)) in s.p.iter() {
            coords.push((r, c));
        }
        for row in s.g.outer_iterator() {
            for (a, _) in row.iter() {
                for (b, _) in row.iter() {
                    coords.push((a, b));
                }
            }
        }
        for (_, (r, c)) in s.a.iter() {
            coords.push((n + r, c));
        }
        let pattern = SymPattern::new(n + me, coords);
        let p_pos = s.p.iter().map(|(v, (r, c))| (pattern.pos(r, c), *v)).collect();
        let mut gwg = Vec::new();
        for (r, row) in s.g.outer_iterator().enumerate() {
            for (a, va) in row.iter() {
                for (b, vb) in row.iter() {
                    gwg.push((r, pattern.pos(a, b), va * vb));
                }
            }
        }
        let mut a_pos = Vec::new();
        for (v, (r, c)) in s.a.iter() {
            a_pos.push((pattern.pos(n + r, c), *v));
            a_pos.push((pattern.pos(c, n + r), *v));
        }
        Self { n, factor: KktFactor::new(pattern), p_pos, gwg, a_pos }
    }

    /// Unregularized and regularized values for weights `w`.
    fn values(&self, w: &[f64], reg: f64) -> (Vec<f64>, Vec<f64>) {
        let mut k0 = vec![0.0; self.factor.pattern.nnz()];
        for &(p, v) in &self.p_pos {
            k0[p] += v;
        }
        for &(r, p, v) in &self.gwg {
            k0[p] += w[r] * v;
        }
        for &(p, v) in &self.a_pos {
            k0[p] += v;
        }
        let mut kr = k0.clone();
        for i in 0..self.factor.pattern.dim {
            let p = self.factor.pattern.pos(i, i);
            kr[p] += if i < self.n { reg } else { -reg };
        }
        (k0, kr)
    }
}

/// Largest step in (0, 1] keeping `x + a dx >= 0`.
fn max_step(x: &[f64], dx: &[f64]) -> f64 {
    x.iter().zip(dx).fold(1.0f64, |a, (xi, di)| if *di < 0.0 { a.min(-xi / di) } else { a })
}

struct Direction {
    dz: Vec<f64>,
    dy: Vec<f64>,
    dl: Vec<f64>,
    ds: Vec<f64>,
}

impl InteriorPointSolver {
    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        s: &Scaled,
        layout: &Layout,
        k0: &[f64],
        slack: &[f64],
        lambda: &[f64],
        rd: &[f64],
        rp: &[f64],
        rg: &[f64],
        rc: &[f64],
    ) -> Direction {
        let n = s.n();
        let corr: Vec<f64> = (0..slack.len()).map(|i| (lambda[i] * rg[i] - rc[i]) / slack[i]).collect();
        let mut rhs = vec![0.0; n + rp.len()];
        for i in 0..n {
            rhs[i] = -rd[i];
        }
        let mut gc = vec![0.0; n];
        spmv_t_acc(&s.g, &corr, &mut gc);
        for i in 0..n {
            rhs[i] -= gc[i];
        }
        for (i, r) in rp.iter().enumerate() {
            rhs[n + i] = -r;
        }
        let sol = layout.factor.solve_refined(k0, &rhs, self.settings.refinement_steps);
        let dz = sol[..n].to_vec();
        let dy = sol[n..].to_vec();
        let gdz = spmv(&s.g, &dz);
        let dl: Vec<f64> = (0..slack.len()).map(|i| lambda[i] / slack[i] * gdz[i] + corr[i]).collect();
        let ds: Vec<f64> = (0..slack.len()).map(|i| -rg[i] - gdz[i]).collect();
        Direction { dz, dy, dl, ds }
    }
}

impl QpSolver for InteriorPointSolver {
    fn name(&self) -> &'static str {
        "interior_point"
    }

    fn solve(&self, problem: &QpProblem, _warm: Option<&WarmStart>) -> Result<QpSolution> {
        let set = &self.settings;
        let sc = Scaled::new(problem, set.ruiz_iterations);
        let n = sc.n();
        let me = sc.a.rows();
        let mi = sc.g.rows();
        let mut layout = Layout::new(&sc);

        // Start from the least-squares point of the relaxed equality system.
        let ones = vec![1.0; mi];
        let (k0, kr) = layout.values(&ones, set.regularization.max(1e-8));
        layout.factor.factor(&kr)?;
        let mut rhs = vec![0.0; n + me];
        for i in 0..n {
            rhs[i] = -sc.q[i];
        }
        let mut gth = vec![0.0; n];
        spmv_t_acc(&sc.g, &sc.h, &mut gth);
        for i in 0..n {
            rhs[i] += gth[i];
        }
        rhs[n..].copy_from_slice(&sc.b);
        let sol = layout.factor.solve_refined(&k0, &rhs, set.refinement_steps);
        let mut z = sol[..n].to_vec();
        let mut y = sol[n..].to_vec();
        let gz = spmv(&sc.g, &z);
        let mut slack: Vec<f64> = (0..mi).map(|i| sc.h[i] - gz[i]).collect();
        let mut lambda: Vec<f64> = slack.iter().map(|v| -v).collect();
        let shift = |v: &mut Vec<f64>| {
            let lo = v.iter().fold(f64::INFINITY, |m, x| m.min(*x));
            if lo < 1.0 {
                for x in v.iter_mut() {
                    *x += 1.0 - lo.min(0.0);
                    *x = x.max(1.0);
                }
            }
        };
        shift(&mut slack);
        shift(&mut lambda);

        let q_norm = sc.dual_norm(&sc.q);
        let b_norm = sc.eq_residual_norm(&sc.b).max(sc.ineq_violation_norm(&sc.h.iter().map(|v| v.abs()).collect::<Vec<_>>()));
        let mut status = SolveStatus::MaxIterations;
        let mut iterations = 0;
        let (mut pres, mut dres) = (f64::INFINITY, f64::INFINITY);
        for it in 0..=set.max_iterations {
            iterations = it;
            let mut rd = spmv(&sc.p, &z);
            for i in 0..n {
                rd[i] += sc.q[i];
            }
            spmv_t_acc(&sc.a, &y, &mut rd);
            spmv_t_acc(&sc.g, &lambda, &mut rd);
            let az = spmv(&sc.a, &z);
            let rp: Vec<f64> = az.iter().zip(&sc.b).map(|(a, b)| a - b).collect();
            let gz = spmv(&sc.g, &z);
            let rg: Vec<f64> = (0..mi).map(|i| gz[i] + slack[i] - sc.h[i]).collect();
            let gap = dot(&slack, &lambda);
            let mu = if mi > 0 { gap / mi as f64 } else { 0.0 };

            let gz_viol: Vec<f64> = (0..mi).map(|i| gz[i] - sc.h[i]).collect();
            pres = sc.eq_residual_norm(&rp).max(sc.ineq_violation_norm(&gz_viol));
            dres = sc.dual_norm(&rd);
            let pz = spmv(&sc.p, &z);
            let obj = (0.5 * dot(&z, &pz) + dot(&sc.q, &z)) / sc.cost;
            let primal_scale = sc
                .eq_residual_norm(&az)
                .max(sc.ineq_violation_norm(&gz.iter().map(|v| v.abs()).collect::<Vec<_>>()))
                .max(b_norm);
            let dual_scale_terms = {
                let mut aty = vec![0.0; n];
                spmv_t_acc(&sc.a, &y, &mut aty);
                let mut gtl = vec![0.0; n];
                spmv_t_acc(&sc.g, &lambda, &mut gtl);
                sc.dual_norm(&pz).max(sc.dual_norm(&aty)).max(sc.dual_norm(&gtl)).max(q_norm)
            };
            let gap_orig = gap / sc.cost;
            let primal_ok = pres <= set.eps_abs + set.eps_rel * primal_scale;
            let dual_ok = dres <= set.eps_abs + set.eps_rel * dual_scale_terms;
            let gap_ok = gap_orig <= set.eps_abs + set.eps_rel * obj.abs().max(1.0);
            debug!("ipm {it}: pres {pres:.3e} dres {dres:.3e} gap {gap_orig:.3e} mu {mu:.3e} pscale {primal_scale:.3e} dscale {dual_scale_terms:.3e} obj {obj:.6e}");
            if primal_ok && dual_ok && gap_ok {
                status = SolveStatus::Optimal;
                break;
            }
            // Farkas certificate: A'y + G'lambda ~ 0 with b'y + h'lambda < 0.
            let dual_scale = inf_norm(&lambda).max(inf_norm(&y));
            if dual_scale > 1e6 {
                let mut at = vec![0.0; n];
                spmv_t_acc(&sc.a, &y, &mut at);
                spmv_t_acc(&sc.g, &lambda, &mut at);
                let cert = (dot(&sc.b, &y) + dot(&sc.h, &lambda)) / dual_scale;
                if inf_norm(&at) / dual_scale < set.eps_infeasible.sqrt() && cert < -set.eps_infeasible.sqrt() {
                    status = SolveStatus::InfeasibleDetected;
                    break;
                }
            }
            if it == set.max_iterations {
                break;
            }

            let w: Vec<f64> = (0..mi).map(|i| lambda[i] / slack[i]).collect();
            let (k0, kr) = layout.values(&w, set.regularization);
            layout.factor.factor(&kr)?;

            let rc_aff: Vec<f64> = (0..mi).map(|i| slack[i] * lambda[i]).collect();
            let aff = self.direction(&sc, &layout, &k0, &slack, &lambda, &rd, &rp, &rg, &rc_aff);
            let a_aff = max_step(&slack, &aff.ds).min(max_step(&lambda, &aff.dl));
            let sigma = if mi > 0 {
                let mu_aff = (0..mi)
                    .map(|i| (slack[i] + a_aff * aff.ds[i]) * (lambda[i] + a_aff * aff.dl[i]))
                    .sum::<f64>()
                    / mi as f64;
                (mu_aff / mu).clamp(0.0, 1.0).powi(3)
            } else {
                0.0
            };
            let rc: Vec<f64> = (0..mi).map(|i| slack[i] * lambda[i] + aff.ds[i] * aff.dl[i] - sigma * mu).collect();
            let dir = self.direction(&sc, &layout, &k0, &slack, &lambda, &rd, &rp, &rg, &rc);
            let step = (0.99 * max_step(&slack, &dir.ds).min(max_step(&lambda, &dir.dl))).min(1.0);
            for i in 0..n {
                z[i] += step * dir.dz[i];
            }
            for i in 0..me {
                y[i] += step * dir.dy[i];
            }
            for i in 0..mi {
                slack[i] = (slack[i] + step * dir.ds[i]).max(1e-300);
                lambda[i] = (lambda[i] + step * dir.dl[i]).max(1e-300);
            }
            if !z.iter().all(|v| v.is_finite()) {
                break;
            }
        }
        let zu = sc.unscale_primal(&z);
        let multipliers = sc.unscale_multipliers(&y, &lambda);
        Ok(QpSolution {
            objective: problem.objective(&zu),
            z: zu,
            status,
            primal_residual: pres,
            dual_residual: dres,
            iterations,
            multipliers,
        })
    }
}
