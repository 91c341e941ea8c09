//! Dense convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves `min ½ xᵀ(H + λI)x + fᵀx` subject to `gᵢ·x ≤ hᵢ`. The problem is
//! mapped through the Cholesky factor `H + λI = L Lᵀ` to an identity-Hessian
//! problem in `y = Lᵀx`, where the active-set projections reduce to small
//! least-squares solves.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Slack below which a constraint counts as violated.
const VIOLATION_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize)]
pub enum QpError {
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("iteration limit reached")]
    MaxIterations,
    #[error("Hessian is not positive definite")]
    NotConvex,
}

/// `g·x ≤ h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearConstraint {
    pub g: DVector<f64>,
    pub h: f64,
}

impl LinearConstraint {
    pub fn new(g: DVector<f64>, h: f64) -> Self {
        Self { g, h }
    }

    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        (self.g.dot(x) - self.h).max(0.0)
    }

    /// Same half-space with a unit-norm normal.
    pub fn normalized(&self) -> Self {
        let n = self.g.norm();
        if n > 0.0 {
            Self::new(&self.g / n, self.h / n)
        } else {
            self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    /// Ridge `λ` added to `h` by the solver.
    pub regularization: f64,
    pub constraints: Vec<LinearConstraint>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        Self { h, f, regularization: 0.0, constraints: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    /// `½xᵀHx + fᵀx` without the ridge term.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    pub fn regularized_hessian(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut g = 0.5 * (&self.h + self.h.transpose());
        for i in 0..n {
            g[(i, i)] += self.regularization;
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_violation: f64,
    pub complementarity: f64,
    pub min_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multiplier per constraint (zero for inactive ones).
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub kkt: KktReport,
}

pub fn kkt_report(p: &QpProblem, x: &DVector<f64>, mu: &DVector<f64>) -> KktReport {
    let mut grad = p.regularized_hessian() * x + &p.f;
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (c, m) in p.constraints.iter().zip(mu.iter()) {
        grad += &c.g * *m;
        let slack = c.g.dot(x) - c.h;
        primal = primal.max(slack.max(0.0));
        comp = comp.max((m * slack).abs());
    }
    KktReport {
        stationarity: grad.norm(),
        primal_violation: primal,
        complementarity: comp,
        min_multiplier: mu.iter().copied().fold(0.0, f64::min),
    }
}

/// Least-squares coefficients `r` with `N r ≈ v`, and the residual `v - N r`.
fn project_out(n: &DMatrix<f64>, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    if n.ncols() == 0 {
        return (DVector::zeros(0), v.clone());
    }
    let qr = n.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let rhs = q.transpose() * v;
    let coeffs = r.solve_upper_triangular(&rhs).unwrap_or_else(|| DVector::zeros(n.ncols()));
    let resid = v - n * &coeffs;
    (coeffs, resid)
}

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, QpError> {
    let dim = p.dim();
    let chol = p.regularized_hessian().cholesky().ok_or(QpError::NotConvex)?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or(QpError::NotConvex)?;

    // y-space: min ½|y|² + aᵀy  s.t.  nᵢᵀy ≥ bᵢ
    let a = &linv * &p.f;
    let normals: Vec<DVector<f64>> = p.constraints.iter().map(|c| -(&linv * &c.g)).collect();
    let bounds: Vec<f64> = p.constraints.iter().map(|c| -c.h).collect();
    let slack = |y: &DVector<f64>, i: usize| normals[i].dot(y) - bounds[i];

    let mut y = -a.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iters = 50 * (p.constraints.len() + dim) + 100;
    let mut iterations = 0;

    loop {
        // most violated constraint, measured in the original (unit-row) slack
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..normals.len() {
            if active.contains(&i) {
                continue;
            }
            let s = slack(&y, i);
            if s < -VIOLATION_TOL * (1.0 + bounds[i].abs()) && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((i, s));
            }
        }
        let Some((p_idx, _)) = pick else { break };
        let np = &normals[p_idx];
        let mut u_plus = u.clone();
        u_plus.push(0.0);

        loop {
            iterations += 1;
            if iterations > max_iters {
                return Err(QpError::MaxIterations);
            }
            let nmat = if active.is_empty() {
                DMatrix::zeros(dim, 0)
            } else {
                DMatrix::from_columns(&active.iter().map(|&i| normals[i].clone()).collect::<Vec<_>>())
            };
            let (r, z) = project_out(&nmat, np);

            // dual step length
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 1e-14 {
                    let t = u_plus[j] / rj;
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(j);
                    }
                }
            }
            // primal step length
            let zz = z.dot(np);
            let t2 = if z.norm() > 1e-12 * np.norm() && zz > 0.0 { -slack(&y, p_idx) / zz } else { f64::INFINITY };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_infinite() {
                // pure dual step, then drop the blocking constraint
                for (j, rj) in r.iter().enumerate() {
                    u_plus[j] -= t1 * rj;
                }
                *u_plus.last_mut().unwrap() += t1;
                let j = drop_at.unwrap();
                active.remove(j);
                u_plus.remove(j);
                continue;
            }
            let t = t1.min(t2);
            y += &z * t;
            for (j, rj) in r.iter().enumerate() {
                u_plus[j] -= t * rj;
            }
            *u_plus.last_mut().unwrap() += t;
            if t2 <= t1 {
                active.push(p_idx);
                u = u_plus;
                break;
            }
            let j = drop_at.unwrap();
            active.remove(j);
            u_plus.remove(j);
        }
    }

    let x = linv.transpose() * &y;
    let mut multipliers = DVector::zeros(p.constraints.len());
    for (&i, &m) in active.iter().zip(u.iter()) {
        multipliers[i] = m.max(0.0);
    }
    let kkt = kkt_report(p, &x, &multipliers);
    Ok(QpSolution { x, multipliers, active, iterations, kkt })
}
