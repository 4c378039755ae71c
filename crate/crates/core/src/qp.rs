//! Euclidean projection onto a polyhedron.
//!
//! Solves
//!
//! ```text
//!     minimize     1/2 ‖u − target‖²
//!     subject to   G u ≤ g
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani, specialised to an
//! identity Hessian. The method starts at the unconstrained minimiser and adds
//! violated constraints one at a time, keeping the active normals linearly
//! independent. When a violated constraint cannot be added because its normal
//! is a non-positive combination of the active normals, the problem is
//! infeasible and the combination is returned as a Farkas ray `y ≥ 0` with
//! `yᵀG = 0` and `yᵀg < 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Absolute feasibility tolerance, scaled by the magnitude of each row.
pub const FEASIBILITY_TOL: f64 = 1e-11;

const DEPENDENCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum QpOutcome {
    Optimal {
        u: DVector<f64>,
        /// One multiplier per row of `G`; zero for inactive rows.
        multipliers: DVector<f64>,
        iterations: usize,
    },
    Infeasible {
        /// Farkas ray over the rows of `G`.
        ray: DVector<f64>,
    },
}

impl QpOutcome {
    pub fn is_optimal(&self) -> bool {
        matches!(self, QpOutcome::Optimal { .. })
    }
}

fn row_tol(g: &DMatrix<f64>, rhs: &DVector<f64>, j: usize, u: &DVector<f64>) -> f64 {
    let scale = 1.0_f64.max(rhs[j].abs()).max(g.row(j).norm() * u.norm());
    FEASIBILITY_TOL * scale
}

fn slack(g: &DMatrix<f64>, rhs: &DVector<f64>, j: usize, u: &DVector<f64>) -> f64 {
    rhs[j] - g.row(j).transpose().dot(u)
}

/// Projects `target` onto `{u : G u ≤ g}`.
///
/// Returns [`Error::NotConverged`] only if the iteration cap is hit, which
/// for this method signals cycling from numerical degeneracy; infeasibility
/// is reported through [`QpOutcome::Infeasible`].
pub fn project(target: &DVector<f64>, g: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<QpOutcome> {
    let dim = target.len();
    let rows = g.nrows();
    if g.ncols() != dim || rhs.len() != rows {
        return Err(Error::Dimension(format!(
            "projection: target has {dim} entries, G is {}x{}, g has {}",
            rows,
            g.ncols(),
            rhs.len()
        )));
    }
    crate::error::ensure_finite(target.as_slice(), "projection target")?;
    crate::error::ensure_finite(g.as_slice(), "constraint matrix")?;
    crate::error::ensure_finite(rhs.as_slice(), "constraint bounds")?;

    let mut u = target.clone();
    let mut active: Vec<usize> = Vec::with_capacity(dim);
    let mut mult: Vec<f64> = Vec::with_capacity(dim);
    let cap = 50 * (rows + dim + 1);
    let mut iterations = 0;

    loop {
        // Most violated inactive constraint.
        let mut chosen: Option<(usize, f64)> = None;
        for j in 0..rows {
            if active.contains(&j) {
                continue;
            }
            let s = slack(g, rhs, j, &u);
            if s < -row_tol(g, rhs, j, &u) && chosen.is_none_or(|(_, best)| s < best) {
                chosen = Some((j, s));
            }
        }
        let Some((p, _)) = chosen else {
            let mut multipliers = DVector::zeros(rows);
            for (&j, &mu) in active.iter().zip(&mult) {
                multipliers[j] = mu;
            }
            return Ok(QpOutcome::Optimal { u, multipliers, iterations });
        };

        // Constraint p in `≥` form has normal n_p = −G_p.
        let normal_p: DVector<f64> = -g.row(p).transpose();
        let mut mult_p = 0.0;
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(Error::NotConverged(cap));
            }
            let (z, r) = step_directions(g, &active, &normal_p);

            // Largest dual step keeping the active multipliers nonnegative.
            let mut blocking: Option<(usize, f64)> = None;
            for (idx, (&r_j, &mu_j)) in r.iter().zip(&mult).enumerate() {
                if r_j > DEPENDENCE_TOL {
                    let ratio = mu_j / r_j;
                    if blocking.is_none_or(|(_, best)| ratio < best) {
                        blocking = Some((idx, ratio));
                    }
                }
            }

            if z.norm() <= DEPENDENCE_TOL * normal_p.norm().max(1.0) {
                let Some((l, t1)) = blocking else {
                    let mut ray = DVector::zeros(rows);
                    ray[p] = 1.0;
                    for (&j, &r_j) in active.iter().zip(r.iter()) {
                        ray[j] = (-r_j).max(0.0);
                    }
                    return Ok(QpOutcome::Infeasible { ray });
                };
                for (mu_j, r_j) in mult.iter_mut().zip(r.iter()) {
                    *mu_j -= t1 * r_j;
                }
                mult_p += t1;
                active.remove(l);
                mult.remove(l);
                continue;
            }

            // In `≥` form the slack n_pᵀu − b_p equals g_p − G_p u.
            let s_p = slack(g, rhs, p, &u);
            let t2 = -s_p / z.dot(&normal_p);
            let (t, full) = match blocking {
                Some((_, t1)) if t1 < t2 => (t1, false),
                _ => (t2, true),
            };
            u += &z * t;
            for (mu_j, r_j) in mult.iter_mut().zip(r.iter()) {
                *mu_j -= t * r_j;
            }
            mult_p += t;
            if full {
                active.push(p);
                mult.push(mult_p);
                break;
            }
            let (l, _) = blocking.expect("partial step implies a blocking constraint");
            active.remove(l);
            mult.remove(l);
        }
    }
}

/// Primal direction `z = (I − N N⁺) n_p` and dual direction `r = N⁺ n_p`
/// for the active normals `N` (columns `−G_jᵀ`).
fn step_directions(
    g: &DMatrix<f64>,
    active: &[usize],
    normal_p: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    if active.is_empty() {
        return (normal_p.clone(), DVector::zeros(0));
    }
    let dim = normal_p.len();
    let n_active = DMatrix::from_fn(dim, active.len(), |i, c| -g[(active[c], i)]);
    let qr = n_active.clone().qr();
    let q = qr.q();
    let r_mat = qr.r();
    let qt_np = q.transpose() * normal_p;
    let z = normal_p - &q * &qt_np;
    let r = r_mat
        .solve_upper_triangular(&qt_np)
        .unwrap_or_else(|| DVector::zeros(active.len()));
    (z, r)
}

/// Maximum violation of the KKT conditions of the projection problem:
/// stationarity, primal and dual feasibility, and complementary slackness.
pub fn kkt_residual(
    target: &DVector<f64>,
    g: &DMatrix<f64>,
    rhs: &DVector<f64>,
    u: &DVector<f64>,
    multipliers: &DVector<f64>,
) -> f64 {
    let stationarity = (u - target + g.transpose() * multipliers).amax();
    let mut worst = stationarity;
    for j in 0..g.nrows() {
        let s = slack(g, rhs, j, u);
        worst = worst
            .max((-s).max(0.0))
            .max((-multipliers[j]).max(0.0))
            .max((multipliers[j] * s).abs());
    }
    worst
}

/// Checks that `ray` certifies infeasibility of `{u : G u ≤ g}`; returns the
/// value `yᵀg / ‖y‖₁` (negative for a valid certificate) when `yᵀG ≈ 0`.
pub fn certificate_gap(g: &DMatrix<f64>, rhs: &DVector<f64>, ray: &DVector<f64>) -> Option<f64> {
    let norm1 = ray.iter().map(|v| v.abs()).sum::<f64>();
    if norm1 == 0.0 || ray.iter().any(|&v| v < 0.0) {
        return None;
    }
    let combination = g.transpose() * ray;
    let scale = g.amax().max(1.0);
    if combination.amax() > 1e-8 * scale * norm1 {
        return None;
    }
    Some(ray.dot(rhs) / norm1)
}
