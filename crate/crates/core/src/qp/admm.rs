//! Operator-splitting (ADMM) solver on the constraint form
//! `l <= C z <= u` with `C = [A_eq; G]`, followed by an active-set polish.

use log::debug;

use super::kkt::{KktFactor, SymPattern};
use super::scaling::Scaled;
use super::{inf_norm, spmv, QpProblem, QpSolution, QpSolver, SolveStatus, WarmStart};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iterations: usize,
    pub check_interval: usize,
    pub adaptive_interval: usize,
    pub ruiz_iterations: usize,
    pub polish: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-7,
            max_iterations: 20_000,
            check_interval: 5,
            adaptive_interval: 50,
            ruiz_iterations: 10,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdmmSolver {
    pub settings: AdmmSettings,
}

impl AdmmSolver {
    pub fn new(settings: AdmmSettings) -> Self {
        Self { settings }
    }
}

/// Stacked constraint matrix `C = [A; G]` as row lists.
struct Constraints {
    rows: Vec<Vec<(usize, f64)>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    num_eq: usize,
}

impl Constraints {
    fn new(s: &Scaled) -> Self {
        let mut rows = Vec::with_capacity(s.a.rows() + s.g.rows());
        for row in s.a.outer_iterator().chain(s.g.outer_iterator()) {
            rows.push(row.iter().map(|(c, v)| (c, *v)).collect());
        }
        let mut lower = s.b.clone();
        lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, s.g.rows()));
        let mut upper = s.b.clone();
        upper.extend_from_slice(&s.h);
        Self { rows, lower, upper, num_eq: s.a.rows() }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(c, v)| v * x[*c]).sum()).collect()
    }

    fn mul_t(&self, y: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (r, row) in self.rows.iter().enumerate() {
            if y[r] != 0.0 {
                for (c, v) in row {
                    out[*c] += v * y[r];
                }
            }
        }
        out
    }
}

struct AdmmKkt {
    factor: KktFactor,
    p_pos: Vec<(usize, f64)>,
    c_pos: Vec<(usize, f64)>,
    n: usize,
}

impl AdmmKkt {
    fn new(s: &Scaled, cons: &Constraints) -> Self {
        let n = s.n();
        let mut coords: Vec<(usize, usize)> = s.p.iter().map(|(_, rc)| rc).collect();
        for (r, row) in cons.rows.iter().enumerate() {
            for (c, _) in row {
                coords.push((n + r, *c));
            }
        }
        let pattern = SymPattern::new(n + cons.len(), coords);
        let p_pos = s.p.iter().map(|(v, (r, c))| (pattern.pos(r, c), *v)).collect();
        let mut c_pos = Vec::new();
        for (r, row) in cons.rows.iter().enumerate() {
            for (c, v) in row {
                c_pos.push((pattern.pos(n + r, *c), *v));
                c_pos.push((pattern.pos(*c, n + r), *v));
            }
        }
        Self { factor: KktFactor::new(pattern), p_pos, c_pos, n }
    }

    fn refactor(&mut self, sigma: f64, rho: &[f64]) -> Result<()> {
        let pattern = &self.factor.pattern;
        let mut data = vec![0.0; pattern.nnz()];
        for &(p, v) in self.p_pos.iter().chain(&self.c_pos) {
            data[p] += v;
        }
        for i in 0..self.n {
            data[pattern.pos(i, i)] += sigma;
        }
        for (r, rr) in rho.iter().enumerate() {
            data[pattern.pos(self.n + r, self.n + r)] -= 1.0 / rr;
        }
        self.factor.factor(&data)
    }
}

fn rho_vector(cons: &Constraints, rho: f64) -> Vec<f64> {
    (0..cons.len()).map(|r| if r < cons.num_eq { 1e3 * rho } else { rho }).collect()
}

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl AdmmSolver {
    /// Equality-constrained re-solve on the active set guessed from the duals.
    /// Degenerate sets can split a multiplier into entries of both signs; the
    /// most negative inequality row is then dropped and the solve repeated.
    fn polish(&self, s: &Scaled, cons: &Constraints, it: &Iterate) -> Result<Option<Iterate>> {
        // A row is guessed active when its multiplier exceeds its slack.
        let mut active: Vec<usize> = (0..cons.len())
            .filter(|&r| {
                let cx: f64 = cons.rows[r].iter().map(|(c, v)| v * it.x[*c]).sum();
                r < cons.num_eq || cons.upper[r] - cx < it.y[r]
            })
            .collect();
        loop {
            let Some(p) = self.solve_active(s, cons, &active)? else {
                return Ok(None);
            };
            let worst = active.iter().copied().filter(|&r| r >= cons.num_eq && p.y[r] < 0.0).min_by(|&a, &b| p.y[a].total_cmp(&p.y[b]));
            match worst {
                None => return Ok(Some(p)),
                Some(r) => {
                    debug!("admm polish: dropping row {r} with multiplier {:.3e}", p.y[r]);
                    active.retain(|&a| a != r);
                }
            }
        }
    }

    fn solve_active(&self, s: &Scaled, cons: &Constraints, active: &[usize]) -> Result<Option<Iterate>> {
        let n = s.n();
        let mut coords: Vec<(usize, usize)> = s.p.iter().map(|(_, rc)| rc).collect();
        for (k, &r) in active.iter().enumerate() {
            for (c, _) in &cons.rows[r] {
                coords.push((n + k, *c));
            }
        }
        let pattern = SymPattern::new(n + active.len(), coords);
        let mut k0 = vec![0.0; pattern.nnz()];
        for (v, (r, c)) in s.p.iter() {
            k0[pattern.pos(r, c)] += v;
        }
        for (k, &r) in active.iter().enumerate() {
            for (c, v) in &cons.rows[r] {
                k0[pattern.pos(n + k, *c)] += v;
                k0[pattern.pos(*c, n + k)] += v;
            }
        }
        let delta = 1e-9;
        let mut kr = k0.clone();
        for i in 0..pattern.dim {
            kr[pattern.pos(i, i)] += if i < n { delta } else { -delta };
        }
        let mut factor = KktFactor::new(pattern);
        if factor.factor(&kr).is_err() {
            return Ok(None);
        }
        let mut rhs: Vec<f64> = s.q.iter().map(|v| -v).collect();
        rhs.extend(active.iter().map(|&r| cons.upper[r]));
        let sol = factor.solve_refined(&k0, &rhs, 6);
        let x = sol[..n].to_vec();
        let mut y = vec![0.0; cons.len()];
        for (k, &r) in active.iter().enumerate() {
            y[r] = sol[n + k];
        }
        Ok(Some(Iterate { x, y }))
    }

    fn residuals(&self, s: &Scaled, cons: &Constraints, it: &Iterate) -> (f64, f64) {
        let n = s.n();
        let cx = cons.mul(&it.x);
        let mut viol_eq = vec![0.0; cons.num_eq];
        let mut viol_in = vec![0.0; cons.len() - cons.num_eq];
        for r in 0..cons.len() {
            if r < cons.num_eq {
                viol_eq[r] = cx[r] - cons.upper[r];
            } else {
                viol_in[r - cons.num_eq] = cx[r] - cons.upper[r];
            }
        }
        let mut rd = spmv(&s.p, &it.x);
        for i in 0..n {
            rd[i] += s.q[i];
        }
        let cty = cons.mul_t(&it.y, n);
        for i in 0..n {
            rd[i] += cty[i];
        }
        let neg_dual = it.y[cons.num_eq..].iter().zip(&s.e_in).fold(0.0f64, |m, (v, e)| m.max(-v * e / s.cost));
        (s.eq_residual_norm(&viol_eq).max(s.ineq_violation_norm(&viol_in)).max(0.0), s.dual_norm(&rd).max(neg_dual))
    }
}

impl QpSolver for AdmmSolver {
    fn name(&self) -> &'static str {
        "admm"
    }

    fn solve(&self, problem: &QpProblem, warm: Option<&WarmStart>) -> Result<QpSolution> {
        let set = &self.settings;
        let sc = Scaled::new(problem, set.ruiz_iterations);
        let n = sc.n();
        let cons = Constraints::new(&sc);
        let m = cons.len();
        let mut kkt = AdmmKkt::new(&sc, &cons);
        let mut rho_scalar = set.rho;
        let mut rho = rho_vector(&cons, rho_scalar);
        kkt.refactor(set.sigma, &rho)?;

        let (mut x, mut y) = match warm {
            Some(w) if w.z.len() == n => {
                let x = sc.scale_primal(&w.z);
                let y = if w.multipliers.eq.len() == cons.num_eq && w.multipliers.ineq.len() == sc.general_rows && w.multipliers.bound.len() == n {
                    let (ye, yi) = sc.scale_multipliers(&w.multipliers);
                    ye.into_iter().chain(yi).collect()
                } else {
                    vec![0.0; m]
                };
                (x, y)
            }
            _ => (vec![0.0; n], vec![0.0; m]),
        };
        let mut z: Vec<f64> = cons.mul(&x).iter().enumerate().map(|(r, v)| v.clamp(cons.lower[r], cons.upper[r])).collect();

        let mut status = SolveStatus::MaxIterations;
        let mut iterations = set.max_iterations;
        for it in 1..=set.max_iterations {
            let mut rhs = vec![0.0; n + m];
            for i in 0..n {
                rhs[i] = set.sigma * x[i] - sc.q[i];
            }
            for r in 0..m {
                rhs[n + r] = z[r] - y[r] / rho[r];
            }
            let sol = kkt.factor.solve(&rhs);
            let y_prev = y.clone();
            for i in 0..n {
                x[i] = set.alpha * sol[i] + (1.0 - set.alpha) * x[i];
            }
            for r in 0..m {
                let zt = z[r] + (sol[n + r] - y[r]) / rho[r];
                let zr = set.alpha * zt + (1.0 - set.alpha) * z[r];
                let zn = (zr + y[r] / rho[r]).clamp(cons.lower[r], cons.upper[r]);
                y[r] += rho[r] * (zr - zn);
                z[r] = zn;
            }

            if it % set.check_interval == 0 || it == set.max_iterations {
                let cx = cons.mul(&x);
                let rp: Vec<f64> = cx.iter().zip(&z).map(|(a, b)| a - b).collect();
                let px = spmv(&sc.p, &x);
                let cty = cons.mul_t(&y, n);
                let rd: Vec<f64> = (0..n).map(|i| px[i] + sc.q[i] + cty[i]).collect();
                let eps_p = set.eps_abs + set.eps_rel * inf_norm(&cx).max(inf_norm(&z));
                let eps_d = set.eps_abs + set.eps_rel * inf_norm(&px).max(inf_norm(&cty)).max(inf_norm(&sc.q));
                let (pn, dn) = (inf_norm(&rp), inf_norm(&rd));
                debug!("admm {it}: prim {pn:.3e} dual {dn:.3e} rho {rho_scalar:.3e}");
                if pn <= eps_p && dn <= eps_d {
                    status = SolveStatus::Optimal;
                    iterations = it;
                    break;
                }
                let dy: Vec<f64> = y.iter().zip(&y_prev).map(|(a, b)| a - b).collect();
                let dyn_ = inf_norm(&dy);
                if dyn_ > 0.0 {
                    let ctdy = inf_norm(&cons.mul_t(&dy, n));
                    let mut support = 0.0;
                    let mut sign_ok = true;
                    for r in 0..m {
                        if dy[r] > 0.0 {
                            support += cons.upper[r] * dy[r];
                        } else if cons.lower[r].is_finite() {
                            support += cons.lower[r] * dy[r];
                        } else if dy[r] < -set.eps_infeasible * dyn_ {
                            sign_ok = false;
                        }
                    }
                    if sign_ok && ctdy <= set.eps_infeasible * dyn_ && support < -set.eps_infeasible * dyn_ {
                        status = SolveStatus::InfeasibleDetected;
                        iterations = it;
                        break;
                    }
                }
                if it % set.adaptive_interval == 0 {
                    let prim_rel = pn / inf_norm(&cx).max(inf_norm(&z)).max(1e-12);
                    let dual_rel = dn / inf_norm(&px).max(inf_norm(&cty)).max(inf_norm(&sc.q)).max(1e-12);
                    let proposal = (rho_scalar * (prim_rel / dual_rel.max(1e-30)).sqrt()).clamp(1e-6, 1e6);
                    if proposal > 5.0 * rho_scalar || proposal < rho_scalar / 5.0 {
                        rho_scalar = proposal;
                        rho = rho_vector(&cons, rho_scalar);
                        kkt.refactor(set.sigma, &rho)?;
                    }
                }
            }
        }
        let mut best = Iterate { x, y };
        let (mut pres, mut dres) = self.residuals(&sc, &cons, &best);
        if set.polish && status == SolveStatus::Optimal {
            if let Some(p) = self.polish(&sc, &cons, &best)? {
                let (pp, pd) = self.residuals(&sc, &cons, &p);
                if pp.max(pd) <= pres.max(dres) {
                    best = p;
                    pres = pp;
                    dres = pd;
                }
            }
        }
        let zu = sc.unscale_primal(&best.x);
        let multipliers = sc.unscale_multipliers(&best.y[..cons.num_eq], &best.y[cons.num_eq..]);
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
