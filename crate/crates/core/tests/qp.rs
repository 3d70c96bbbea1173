use ctms::qp::{
    csr_from_triplets, kkt_residuals, AdmmSettings, AdmmSolver, InteriorPointSolver, QpProblem, QpSolver, SolveStatus, WarmStart,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Dense {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    nonneg: Vec<bool>,
}

fn to_sparse(m: &DMatrix<f64>) -> sprs::CsMat<f64> {
    let mut t = Vec::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if m[(r, c)] != 0.0 {
                t.push((r, c, m[(r, c)]));
            }
        }
    }
    csr_from_triplets(m.nrows(), m.ncols(), &t)
}

impl Dense {
    fn problem(&self) -> QpProblem {
        QpProblem::new(
            to_sparse(&self.p),
            self.q.iter().copied().collect(),
            to_sparse(&self.a),
            self.b.iter().copied().collect(),
            to_sparse(&self.g),
            self.h.iter().copied().collect(),
            self.nonneg.clone(),
        )
        .unwrap()
    }

    /// All inequality rows including the variable bounds, as (row, rhs).
    fn all_ineq(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.q.len();
        let bounds: Vec<usize> = (0..n).filter(|&i| self.nonneg[i]).collect();
        let m = self.g.nrows() + bounds.len();
        let mut g = DMatrix::zeros(m, n);
        let mut h = DVector::zeros(m);
        g.rows_mut(0, self.g.nrows()).copy_from(&self.g);
        h.rows_mut(0, self.g.nrows()).copy_from(&self.h);
        for (k, &j) in bounds.iter().enumerate() {
            g[(self.g.nrows() + k, j)] = -1.0;
        }
        (g, h)
    }
}

/// Enumerate working sets by increasing size; the first one whose
/// equality-constrained minimizer is primal feasible with nonnegative
/// multipliers is the unique optimum of a strictly convex program.
fn active_set_oracle(d: &Dense) -> DVector<f64> {
    let n = d.q.len();
    let (g, h) = d.all_ineq();
    let m = g.nrows();
    let me = d.a.nrows();
    for size in 0..=m.min(n) {
        for set in subsets(m, size) {
            let k = me + set.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            let mut rhs = DVector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&d.p);
            rhs.rows_mut(0, n).copy_from(&(-&d.q));
            for r in 0..me {
                for c in 0..n {
                    kkt[(n + r, c)] = d.a[(r, c)];
                    kkt[(c, n + r)] = d.a[(r, c)];
                }
                rhs[n + r] = d.b[r];
            }
            for (i, &r) in set.iter().enumerate() {
                for c in 0..n {
                    kkt[(n + me + i, c)] = g[(r, c)];
                    kkt[(c, n + me + i)] = g[(r, c)];
                }
                rhs[n + me + i] = h[r];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            if sol.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let z = sol.rows(0, n).into_owned();
            let feasible = (&g * &z - &h).iter().all(|v| *v <= 1e-9);
            let duals_ok = (0..set.len()).all(|i| sol[n + me + i] >= -1e-9);
            if feasible && duals_ok {
                return z;
            }
        }
    }
    panic!("oracle found no optimum");
}

fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

fn random_qp(rng: &mut ChaCha8Rng) -> Dense {
    let n = rng.random_range(2..=8);
    let me = rng.random_range(0..=2.min(n - 1));
    let mi = rng.random_range(1..=8);
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let nonneg: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let z0 = DVector::from_fn(n, |i, _| if nonneg[i] { rng.random_range(0.0..2.0) } else { rng.random_range(-2.0..2.0) });
    let a = DMatrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &z0;
    let g = DMatrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
    let slack = DVector::from_fn(mi, |_, _| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) });
    let h = &g * &z0 + slack;
    Dense { p, q, a, b, g, h, nonneg }
}

fn solvers() -> Vec<Box<dyn QpSolver>> {
    vec![Box::new(InteriorPointSolver::default()), Box::new(AdmmSolver::default())]
}

#[test]
fn random_strictly_convex_programs_match_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..60 {
        let d = random_qp(&mut rng);
        let expected = active_set_oracle(&d);
        let prob = d.problem();
        let f_star = prob.objective(expected.as_slice());
        for solver in solvers() {
            let sol = solver.solve(&prob, None).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal, "case {case} {}", solver.name());
            let err = sol.z.iter().zip(expected.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-4 * (1.0 + expected.amax()), "case {case} {}: error {err}", solver.name());
            assert!((sol.objective - f_star).abs() < 1e-6 * (1.0 + f_star.abs()), "case {case} {}", solver.name());
            let kkt = kkt_residuals(&prob, &sol.z, &sol.multipliers);
            assert!(kkt.max() < 1e-4, "case {case} {}: {kkt:?}", solver.name());
        }
    }
}

#[test]
fn small_linear_program() {
    // max x + y  s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0  ->  (1.6, 1.2)
    let prob = QpProblem::new(
        csr_from_triplets(2, 2, &[]),
        vec![-1.0, -1.0],
        csr_from_triplets(0, 2, &[]),
        vec![],
        csr_from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 1, 1.0)]),
        vec![4.0, 6.0],
        vec![true, true],
    )
    .unwrap();
    for solver in solvers() {
        let sol = solver.solve(&prob, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "{}", solver.name());
        assert!((sol.z[0] - 1.6).abs() < 1e-5 && (sol.z[1] - 1.2).abs() < 1e-5, "{} {:?}", solver.name(), sol.z);
        // duals: 1 = l1 + 3 l2, 1 = 2 l1 + l2  ->  l = (0.4, 0.2)
        assert!((sol.multipliers.ineq[0] - 0.4).abs() < 1e-4 && (sol.multipliers.ineq[1] - 0.2).abs() < 1e-4);
    }
}

#[test]
fn infeasible_program_is_detected() {
    // z >= 0 and z0 + z1 <= -1
    let prob = QpProblem::new(
        csr_from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 1.0)]),
        vec![0.0, 0.0],
        csr_from_triplets(0, 2, &[]),
        vec![],
        csr_from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]),
        vec![-1.0],
        vec![true, true],
    )
    .unwrap();
    for solver in solvers() {
        let sol = solver.solve(&prob, None).unwrap();
        assert_eq!(sol.status, SolveStatus::InfeasibleDetected, "{}", solver.name());
    }
}

#[test]
fn conflicting_equalities_are_infeasible() {
    let prob = QpProblem::new(
        csr_from_triplets(1, 1, &[(0, 0, 1.0)]),
        vec![0.0],
        csr_from_triplets(1, 1, &[(0, 0, 1.0)]),
        vec![-2.0],
        csr_from_triplets(0, 1, &[]),
        vec![],
        vec![true],
    )
    .unwrap();
    for solver in solvers() {
        assert_eq!(solver.solve(&prob, None).unwrap().status, SolveStatus::InfeasibleDetected, "{}", solver.name());
    }
}

#[test]
fn row_scaling_leaves_the_solution_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let d = random_qp(&mut rng);
        let mut scaled = Dense { p: d.p.clone(), q: d.q.clone(), a: d.a.clone(), b: d.b.clone(), g: d.g.clone(), h: d.h.clone(), nonneg: d.nonneg.clone() };
        for r in 0..scaled.g.nrows() {
            let f = 10f64.powi(rng.random_range(-3..=3));
            scaled.g.row_mut(r).scale_mut(f);
            scaled.h[r] *= f;
        }
        for solver in solvers() {
            let a = solver.solve(&d.problem(), None).unwrap();
            let b = solver.solve(&scaled.problem(), None).unwrap();
            let err = a.z.iter().zip(&b.z).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-4, "{}: {err}", solver.name());
        }
    }
}

/// A chain of coupled stages, similar in shape to a receding-horizon program.
fn chain_problem(len: usize, shift: f64) -> QpProblem {
    // x_{k+1} = x_k + u_k, x_0 = 1, |u_k| <= 0.3, minimize sum (x_k - target_k)^2 + 0.01 u_k^2
    let n = 2 * len + 1;
    let xi = |k: usize| k;
    let ui = |k: usize| len + 1 + k;
    let mut p = Vec::new();
    let mut q = vec![0.0; n];
    for k in 0..=len {
        p.push((xi(k), xi(k), 2.0));
        q[xi(k)] = -2.0 * ((k as f64 * 0.2).sin() + shift);
    }
    for k in 0..len {
        p.push((ui(k), ui(k), 0.02));
    }
    let mut eq = vec![(0, xi(0), 1.0)];
    let mut b = vec![1.0];
    for k in 0..len {
        let r = k + 1;
        eq.push((r, xi(k + 1), 1.0));
        eq.push((r, xi(k), -1.0));
        eq.push((r, ui(k), -1.0));
        b.push(0.0);
    }
    let mut g = Vec::new();
    let mut h = Vec::new();
    for k in 0..len {
        g.push((2 * k, ui(k), 1.0));
        g.push((2 * k + 1, ui(k), -1.0));
        h.push(0.3);
        h.push(0.3);
    }
    QpProblem::new(
        csr_from_triplets(n, n, &p),
        q,
        csr_from_triplets(len + 1, n, &eq),
        b,
        csr_from_triplets(2 * len, n, &g),
        h,
        vec![false; n],
    )
    .unwrap()
}

#[test]
fn backends_agree_on_a_staged_program() {
    let prob = chain_problem(60, 0.0);
    let a = InteriorPointSolver::default().solve(&prob, None).unwrap();
    let b = AdmmSolver::default().solve(&prob, None).unwrap();
    assert_eq!((a.status, b.status), (SolveStatus::Optimal, SolveStatus::Optimal));
    assert!((a.objective - b.objective).abs() < 1e-6 * (1.0 + a.objective.abs()));
    let err = a.z.iter().zip(&b.z).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn warm_start_reduces_admm_iterations() {
    let solver = AdmmSolver::new(AdmmSettings { polish: false, ..AdmmSettings::default() });
    let first = solver.solve(&chain_problem(60, 0.0), None).unwrap();
    let perturbed = chain_problem(60, 0.01);
    let cold = solver.solve(&perturbed, None).unwrap();
    let warm = solver.solve(&perturbed, Some(&WarmStart::from(&first))).unwrap();
    assert_eq!(cold.status, SolveStatus::Optimal);
    assert_eq!(warm.status, SolveStatus::Optimal);
    assert!(warm.iterations < cold.iterations, "warm {} cold {}", warm.iterations, cold.iterations);
}

#[test]
fn single_variable_program() {
    // min (x - 3)^2 / 2 subject to x <= 1, and the same without the row.
    let bounded = QpProblem::new(
        csr_from_triplets(1, 1, &[(0, 0, 1.0)]),
        vec![-3.0],
        csr_from_triplets(0, 1, &[]),
        vec![],
        csr_from_triplets(1, 1, &[(0, 0, 1.0)]),
        vec![1.0],
        vec![false],
    )
    .unwrap();
    let free = QpProblem::new(
        csr_from_triplets(1, 1, &[(0, 0, 1.0)]),
        vec![-3.0],
        csr_from_triplets(0, 1, &[]),
        vec![],
        csr_from_triplets(0, 1, &[]),
        vec![],
        vec![false],
    )
    .unwrap();
    for solver in solvers() {
        let sol = solver.solve(&bounded, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "{}", solver.name());
        assert!((sol.z[0] - 1.0).abs() < 1e-6, "{}: {}", solver.name(), sol.z[0]);
        let sol = solver.solve(&free, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "{}", solver.name());
        assert!((sol.z[0] - 3.0).abs() < 1e-6, "{}: {}", solver.name(), sol.z[0]);
    }
}
