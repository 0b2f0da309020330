//! Dense active-set solver for small strictly convex QPs of the form
//!
//! ```text
//! minimize   Σ_i h_i (w_i − c_i)²
//! subject to a_kᵀ w ≤ r_k
//! ```
//!
//! with a positive diagonal `h`. Candidate active sets are enumerated by
//! increasing size (lexicographically within a size); the first one whose
//! equality-constrained minimizer is primal feasible with non-negative
//! multipliers is the global optimum.

use nalgebra::{DMatrix, DVector};

use crate::certificates::ConstraintRow;
use crate::error::{Error, Result};

/// Largest accepted condition number of a reduced KKT matrix.
pub const MAX_KKT_CONDITION: f64 = 1e12;
const FEAS_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct QpRow {
    pub a: DVector<f64>,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian_diag: DVector<f64>,
    pub center: DVector<f64>,
    pub rows: Vec<QpRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub w: DVector<f64>,
    /// Indices of rows in the optimal active set.
    pub active_set: Vec<usize>,
    /// Multipliers per row (zero for inactive rows), for the cost as written.
    pub multipliers: DVector<f64>,
    /// Scaled stationarity residual.
    pub kkt_residual: f64,
}

impl QpProblem {
    pub fn new(hessian_diag: DVector<f64>, center: DVector<f64>) -> Self {
        Self {
            hessian_diag,
            center,
            rows: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn push(&mut self, a: DVector<f64>, r: f64) {
        self.rows.push(QpRow { a, r });
    }

    /// QP over `w = (u, δ)` with cost `‖u − center‖² + m‖δ‖²`.
    pub fn over_input_and_slack(center: &DVector<f64>, m: f64, rows: &[ConstraintRow]) -> Self {
        let n = center.len();
        let mut hessian_diag = DVector::from_element(2 * n, 1.0);
        hessian_diag.rows_mut(n, n).fill(m);
        let mut full_center = DVector::zeros(2 * n);
        full_center.rows_mut(0, n).copy_from(center);
        let mut qp = Self::new(hessian_diag, full_center);
        for row in rows {
            let mut a = DVector::zeros(2 * n);
            a.rows_mut(0, n).copy_from(&row.coeff_u);
            a.rows_mut(n, n).copy_from(&row.coeff_delta);
            qp.push(a, row.rhs);
        }
        qp
    }

    pub fn cost(&self, w: &DVector<f64>) -> f64 {
        (w - &self.center)
            .iter()
            .zip(self.hessian_diag.iter())
            .map(|(d, h)| h * d * d)
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.hessian_diag.len() != dim {
            return Err(Error::Dimension {
                what: "QP hessian",
                expected: dim,
                got: self.hessian_diag.len(),
            });
        }
        if self.hessian_diag.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::InvalidParams {
                field: "hessian_diag",
                reason: "weights must be finite and strictly positive".into(),
            });
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("QP center"));
        }
        for row in &self.rows {
            if row.a.len() != dim {
                return Err(Error::Dimension {
                    what: "QP row",
                    expected: dim,
                    got: row.a.len(),
                });
            }
            if row.a.iter().any(|v| !v.is_finite()) || !row.r.is_finite() {
                return Err(Error::NonFinite("QP row"));
            }
        }
        Ok(())
    }
}

/// Next lexicographic `k`-combination of `0..m` in place.
fn next_combination(idx: &mut [usize], m: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < m - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    problem.validate()?;
    let dim = problem.dim();
    let h_inv = problem.hessian_diag.map(|h| 1.0 / h);
    let c = &problem.center;

    // rows normalized to unit length; vanishing rows are checked once and dropped
    let mut rows: Vec<(usize, DVector<f64>, f64, f64)> = Vec::with_capacity(problem.rows.len());
    for (i, row) in problem.rows.iter().enumerate() {
        let norm = row.a.norm();
        if norm <= f64::MIN_POSITIVE.sqrt() {
            if row.r < -FEAS_TOL * (1.0 + row.r.abs()) {
                return Err(Error::QpInfeasible);
            }
            continue;
        }
        rows.push((i, &row.a / norm, row.r / norm, norm));
    }
    let m = rows.len();
    let w_scale = 1.0 + c.amax();
    let feasible = |w: &DVector<f64>| rows.iter().all(|(_, a, r, _)| a.dot(w) - r <= FEAS_TOL * (w_scale + r.abs()));

    let mut worst_condition: Option<f64> = None;
    for k in 0..=m.min(dim) {
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            if let Some(sol) = try_active_set(&idx, &rows, &h_inv, c, &mut worst_condition) {
                if feasible(&sol.0) {
                    return Ok(finish(problem, &rows, &idx, sol.0, sol.1, &h_inv));
                }
            }
            if k == 0 || !next_combination(&mut idx, m) {
                break;
            }
        }
    }
    match worst_condition {
        Some(cond) => Err(Error::QpIllConditioned(cond)),
        None => Err(Error::QpInfeasible),
    }
}

/// Minimizer with the rows in `idx` held as equalities; `None` if its
/// multipliers have the wrong sign or the reduced system is degenerate.
fn try_active_set(
    idx: &[usize],
    rows: &[(usize, DVector<f64>, f64, f64)],
    h_inv: &DVector<f64>,
    c: &DVector<f64>,
    worst_condition: &mut Option<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let k = idx.len();
    if k == 0 {
        return Some((c.clone(), DVector::zeros(0)));
    }
    let mut gram = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (p, &ip) in idx.iter().enumerate() {
        let ap = &rows[ip].1;
        rhs[p] = ap.dot(c) - rows[ip].2;
        for (q, &iq) in idx.iter().enumerate().skip(p) {
            let aq = &rows[iq].1;
            let v: f64 = ap.iter().zip(aq.iter()).zip(h_inv.iter()).map(|((x, y), h)| x * y * h).sum();
            gram[(p, q)] = v;
            gram[(q, p)] = v;
        }
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let cond = eig.max() / eig.min();
    if !(eig.min() > 0.0 && cond <= MAX_KKT_CONDITION) {
        // dependent rows: a smaller or different set covers the same face
        let c = if eig.min() > 0.0 { cond } else { f64::INFINITY };
        *worst_condition = Some(worst_condition.map_or(c, |w: f64| w.min(c)));
        return None;
    }
    // half the multipliers of the cost as written
    let mu = gram.cholesky()?.solve(&rhs);
    let mu_scale = 1.0 + mu.amax();
    if mu.iter().any(|&v| v < -DUAL_TOL * mu_scale) {
        return None;
    }
    let mut w = c.clone();
    for (p, &ip) in idx.iter().enumerate() {
        w -= rows[ip].1.component_mul(h_inv) * mu[p];
    }
    Some((w, mu))
}

fn finish(
    problem: &QpProblem,
    rows: &[(usize, DVector<f64>, f64, f64)],
    idx: &[usize],
    w: DVector<f64>,
    mu: DVector<f64>,
    _h_inv: &DVector<f64>,
) -> QpSolution {
    let mut multipliers = DVector::zeros(problem.rows.len());
    let grad = (&w - &problem.center).component_mul(&problem.hessian_diag) * 2.0;
    let mut stationarity = grad.clone();
    for (p, &ip) in idx.iter().enumerate() {
        let (orig, a, _, norm) = &rows[ip];
        let lam = 2.0 * mu[p].max(0.0);
        stationarity += a * lam;
        multipliers[*orig] = lam / norm;
    }
    let kkt_residual = stationarity.amax() / (1.0 + grad.amax());
    QpSolution {
        w,
        active_set: idx.iter().map(|&i| rows[i].0).collect(),
        multipliers,
        kkt_residual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unconstrained_returns_center() {
        let qp = QpProblem::new(DVector::from_vec(vec![1.0, 3.0]), DVector::from_vec(vec![2.0, -1.0]));
        let s = solve_qp(&qp).unwrap();
        assert_eq!(s.w, qp.center);
        assert!(s.active_set.is_empty());
        assert_eq!(s.kkt_residual, 0.0);
    }

    #[test]
    fn clamps_scalar() {
        let mut qp = QpProblem::new(DVector::from_element(1, 1.0), DVector::from_element(1, 2.0));
        qp.push(DVector::from_element(1, 1.0), 1.0);
        let s = solve_qp(&qp).unwrap();
        assert!((s.w[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.active_set, vec![0]);
        // d/dw (w−2)² + λ = 0 at w = 1
        assert!((s.multipliers[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let mut qp = QpProblem::new(DVector::from_element(1, 1.0), DVector::from_element(1, 0.0));
        qp.push(DVector::from_element(1, 1.0), -1.0);
        qp.push(DVector::from_element(1, -1.0), -1.0);
        assert!(matches!(solve_qp(&qp), Err(Error::QpInfeasible)));

        let mut qp = QpProblem::new(DVector::from_element(2, 1.0), DVector::zeros(2));
        qp.push(DVector::zeros(2), -1.0);
        assert!(matches!(solve_qp(&qp), Err(Error::QpInfeasible)));
    }

    #[test]
    fn degenerate_zero_row_is_ignored() {
        let mut qp = QpProblem::new(DVector::from_element(2, 1.0), DVector::from_vec(vec![1.0, 1.0]));
        qp.push(DVector::zeros(2), 0.0);
        qp.push(DVector::from_vec(vec![1.0, 0.0]), 0.5);
        let s = solve_qp(&qp).unwrap();
        assert_eq!(s.active_set, vec![1]);
        assert!((s.w[0] - 0.5).abs() < 1e-15 && s.w[1] == 1.0);
    }

    #[test]
    fn duplicate_rows_do_not_break_enumeration() {
        let mut qp = QpProblem::new(DVector::from_element(2, 1.0), DVector::from_vec(vec![3.0, 3.0]));
        for _ in 0..3 {
            qp.push(DVector::from_vec(vec![1.0, 1.0]), 2.0);
        }
        let s = solve_qp(&qp).unwrap();
        assert!((s.w[0] - 1.0).abs() < 1e-12 && (s.w[1] - 1.0).abs() < 1e-12);
        assert_eq!(s.active_set.len(), 1);
    }

    #[test]
    fn combinations_are_lexicographic() {
        let mut idx = vec![0, 1];
        let mut seen = vec![idx.clone()];
        while next_combination(&mut idx, 4) {
            seen.push(idx.clone());
        }
        assert_eq!(
            seen,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
    }

    fn random_problem(rng: &mut ChaCha8Rng) -> QpProblem {
        let dim = rng.random_range(1..=6);
        let rows = rng.random_range(0..=4);
        let h = DVector::from_fn(dim, |_, _| rng.random_range(0.2..5.0));
        let c = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        let w0 = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
        let mut qp = QpProblem::new(h, c);
        for _ in 0..rows {
            let a = DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0));
            let r = a.dot(&w0) + rng.random_range(0.0..2.0);
            qp.push(a, r);
        }
        qp
    }

    #[test]
    fn kkt_conditions_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let qp = random_problem(&mut rng);
            let s = solve_qp(&qp).unwrap();
            assert!(s.kkt_residual <= 1e-8);
            for (k, row) in qp.rows.iter().enumerate() {
                let slack = row.a.dot(&s.w) - row.r;
                assert!(slack <= 1e-9 * (1.0 + row.r.abs() + qp.center.amax()));
                assert!(s.multipliers[k] >= -1e-10);
                assert!((s.multipliers[k] * slack).abs() <= 1e-9 * (1.0 + s.multipliers[k]));
            }
        }
    }

    #[test]
    fn adding_a_row_never_lowers_the_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..300 {
            let mut qp = random_problem(&mut rng);
            let before = qp.cost(&solve_qp(&qp).unwrap().w);
            let dim = qp.dim();
            let w_feas = solve_qp(&qp).unwrap().w;
            let a = DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0));
            let r = a.dot(&w_feas) + rng.random_range(0.0..1.0);
            qp.push(a, r);
            let after = qp.cost(&solve_qp(&qp).unwrap().w);
            assert!(after >= before - 1e-12 * (1.0 + before));
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qp = random_problem(&mut rng);
        let a = solve_qp(&qp).unwrap();
        let b = solve_qp(&qp).unwrap();
        assert_eq!(a, b);
    }
}
