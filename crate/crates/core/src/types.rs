//! Shared mathematical objects: models, noise descriptions, input sets and
//! constraint schedules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::qp;

/// Default cap on the dimension of a box whose corners are enumerated.
pub const DEFAULT_VERTEX_CAP: usize = 20;

const VERTEX_MEMBERSHIP_TOL: f64 = 1e-9;

/// Linear time-invariant model `x⁺ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square and nonempty, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!("B must be {n}xm with m >= 1, got {}x{}", b.nrows(), b.ncols())));
        }
        ensure_finite(a.as_slice(), "A")?;
        ensure_finite(b.as_slice(), "B")?;
        Ok(Self { a, b })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self { a: DMatrix::zeros(n, n), b: DMatrix::zeros(n, m) }
    }

    /// Builds the model from the stacked parameter matrix whose column `i`
    /// is `[A_iᵀ; B_iᵀ]`.
    pub fn from_theta(theta: &DMatrix<f64>, n: usize) -> Result<Self> {
        if theta.ncols() != n || theta.nrows() <= n {
            return Err(Error::Dimension(format!(
                "theta must be (n+m)x{n}, got {}x{}",
                theta.nrows(),
                theta.ncols()
            )));
        }
        let m = theta.nrows() - n;
        let ab = theta.transpose();
        Self::new(ab.columns(0, n).into_owned(), ab.columns(n, m).into_owned())
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `‖[A B]‖_F`
    pub fn frobenius_norm(&self) -> f64 {
        (self.a.norm_squared() + self.b.norm_squared()).sqrt()
    }

    /// Noise-free successor `A x + B u`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    /// Column `i` holds `θ_i = [A_iᵀ; B_iᵀ]`.
    pub fn theta(&self) -> DMatrix<f64> {
        let n = self.n();
        let m = self.m();
        let mut ab = DMatrix::zeros(n, n + m);
        ab.columns_mut(0, n).copy_from(&self.a);
        ab.columns_mut(n, m).copy_from(&self.b);
        ab.transpose()
    }

    pub fn theta_rows(&self) -> Vec<ThetaRow> {
        let theta = self.theta();
        theta
            .column_iter()
            .map(|c| ThetaRow { values: c.into_owned(), n: self.n(), m: self.m() })
            .collect()
    }
}

/// The stacked `i`-th rows of `A` and `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaRow {
    values: DVector<f64>,
    n: usize,
    m: usize,
}

impl ThetaRow {
    pub fn new(values: DVector<f64>, n: usize, m: usize) -> Result<Self> {
        if values.len() != n + m {
            return Err(Error::Dimension(format!("theta row must have {} entries, got {}", n + m, values.len())));
        }
        Ok(Self { values, n, m })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn state_part(&self) -> DVector<f64> {
        self.values.rows(0, self.n).into_owned()
    }

    pub fn input_part(&self) -> DVector<f64> {
        self.values.rows(self.n, self.m).into_owned()
    }
}

/// Process noise: the true covariance `W` (known only to the simulator) and
/// the known bound `r` with `W ⪯ rI`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    covariance: DMatrix<f64>,
    bound: f64,
}

impl NoiseSpec {
    pub fn new(covariance: DMatrix<f64>, bound: f64) -> Result<Self> {
        let spec = Self::new_unchecked(covariance, bound)?;
        let largest = spec.largest_eigenvalue();
        if largest > bound * (1.0 + 1e-12) {
            return Err(Error::Assumption(format!(
                "noise covariance bound W <= rI fails: largest eigenvalue {largest} exceeds r = {bound}"
            )));
        }
        Ok(spec)
    }

    /// Validates shape, symmetry and semi-definiteness but not `W ⪯ rI`.
    /// Used for negative controls that deliberately understate `r`.
    pub fn new_unchecked(covariance: DMatrix<f64>, bound: f64) -> Result<Self> {
        let n = covariance.nrows();
        if n == 0 || covariance.ncols() != n {
            return Err(Error::Dimension("noise covariance must be square and nonempty".into()));
        }
        ensure_finite(covariance.as_slice(), "noise covariance")?;
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvalidParameter(format!("noise bound r must be positive, got {bound}")));
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidParameter("noise covariance is not symmetric".into()));
        }
        let smallest = covariance.clone().symmetric_eigenvalues().min();
        if smallest < -1e-12 * scale {
            return Err(Error::InvalidParameter(format!(
                "noise covariance is not positive semi-definite (eigenvalue {smallest})"
            )));
        }
        Ok(Self { covariance, bound })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn largest_eigenvalue(&self) -> f64 {
        self.covariance.clone().symmetric_eigenvalues().max()
    }
}

/// Admissible input set `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `conv(vertices) = {u : G u ≤ g}`; the caller lists every vertex.
    VertexPolytope { vertices: Vec<Vec<f64>>, g_mat: Vec<Vec<f64>>, g_vec: Vec<f64> },
}

impl InputSet {
    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let set = InputSet::Box { lower, upper };
        set.validate()?;
        Ok(set)
    }

    pub fn symmetric_box(m: usize, bound: f64) -> Result<Self> {
        Self::new_box(vec![-bound; m], vec![bound; m])
    }

    pub fn new_polytope(vertices: Vec<Vec<f64>>, g_mat: Vec<Vec<f64>>, g_vec: Vec<f64>) -> Result<Self> {
        let set = InputSet::VertexPolytope { vertices, g_mat, g_vec };
        set.validate()?;
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSet::Box { lower, .. } => lower.len(),
            InputSet::VertexPolytope { g_mat, vertices, .. } => {
                g_mat.first().or(vertices.first()).map_or(0, Vec::len)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InputSet::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(Error::Dimension(format!(
                        "box bounds must be nonempty and equal length, got {} and {}",
                        lower.len(),
                        upper.len()
                    )));
                }
                ensure_finite(lower, "box lower bound")?;
                ensure_finite(upper, "box upper bound")?;
                if lower.iter().zip(upper).any(|(l, u)| l > u) {
                    return Err(Error::InvalidParameter("box lower bound exceeds upper bound".into()));
                }
                Ok(())
            }
            InputSet::VertexPolytope { vertices, g_mat, g_vec } => {
                let m = self.dim();
                if m == 0 || vertices.is_empty() {
                    return Err(Error::InvalidParameter("polytope needs a nonempty vertex list".into()));
                }
                if g_mat.len() != g_vec.len() || g_mat.iter().chain(vertices).any(|r| r.len() != m) {
                    return Err(Error::Dimension("polytope halfspaces and vertices disagree in shape".into()));
                }
                for row in g_mat.iter().chain(vertices) {
                    ensure_finite(row, "polytope data")?;
                }
                ensure_finite(g_vec, "polytope data")?;
                let (g, h) = self.halfspaces();
                for v in vertices {
                    let v = DVector::from_column_slice(v);
                    let worst = (&g * &v - &h).max();
                    if worst > VERTEX_MEMBERSHIP_TOL {
                        return Err(Error::InvalidParameter(format!(
                            "polytope vertex {v:?} violates its halfspaces by {worst}"
                        )));
                    }
                }
                if !halfspaces_bounded(&g)? {
                    return Err(Error::InvalidParameter("polytope halfspaces describe an unbounded set".into()));
                }
                Ok(())
            }
        }
    }

    /// Halfspace description `(G, g)` with `U = {u : G u ≤ g}`.
    pub fn halfspaces(&self) -> (DMatrix<f64>, DVector<f64>) {
        match self {
            InputSet::Box { lower, upper } => {
                let m = lower.len();
                let mut g = DMatrix::zeros(2 * m, m);
                let mut h = DVector::zeros(2 * m);
                for j in 0..m {
                    g[(2 * j, j)] = 1.0;
                    h[2 * j] = upper[j];
                    g[(2 * j + 1, j)] = -1.0;
                    h[2 * j + 1] = -lower[j];
                }
                (g, h)
            }
            InputSet::VertexPolytope { g_mat, g_vec, .. } => {
                let m = self.dim();
                let g = DMatrix::from_fn(g_mat.len(), m, |i, j| g_mat[i][j]);
                (g, DVector::from_column_slice(g_vec))
            }
        }
    }

    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        self.vertices_with_cap(DEFAULT_VERTEX_CAP)
    }

    /// Complete vertex list. For a box, all `2^m` corners, with corner
    /// index bit `j` selecting the upper bound of coordinate `j`.
    pub fn vertices_with_cap(&self, cap: usize) -> Result<Vec<DVector<f64>>> {
        match self {
            InputSet::Box { lower, upper } => {
                let m = lower.len();
                if m > cap || m >= usize::BITS as usize {
                    return Err(Error::VertexEnumerationTooLarge { dim: m, cap });
                }
                Ok((0..1usize << m)
                    .map(|mask| {
                        DVector::from_fn(m, |j, _| if mask >> j & 1 == 1 { upper[j] } else { lower[j] })
                    })
                    .collect())
            }
            InputSet::VertexPolytope { vertices, .. } => {
                Ok(vertices.iter().map(|v| DVector::from_column_slice(v)).collect())
            }
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        let (g, h) = self.halfspaces();
        u.len() == self.dim() && (&g * u - h).max() <= tol
    }

    /// Nearest point of `U` to `u`.
    pub fn clip(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            InputSet::Box { lower, upper } => {
                if u.len() != lower.len() {
                    return Err(Error::Dimension(format!("input has {} entries, U has {}", u.len(), lower.len())));
                }
                Ok(DVector::from_fn(u.len(), |j, _| u[j].clamp(lower[j], upper[j])))
            }
            InputSet::VertexPolytope { .. } => {
                let (g, h) = self.halfspaces();
                match qp::project(u, &g, &h)? {
                    qp::QpOutcome::Optimal { u, .. } => Ok(u),
                    qp::QpOutcome::Infeasible { .. } => {
                        Err(Error::InvalidParameter("input polytope is empty".into()))
                    }
                }
            }
        }
    }
}

/// `{u : G u ≤ g}` is bounded iff its recession cone `{d : G d ≤ 0}` is `{0}`.
/// A nonzero recession direction has some coordinate equal to ±1 after
/// scaling into the unit box, so 2m projection feasibility checks decide it.
fn halfspaces_bounded(g: &DMatrix<f64>) -> Result<bool> {
    let m = g.ncols();
    for j in 0..m {
        for sign in [1.0, -1.0] {
            let rows = g.nrows() + 2 * m + 2;
            let mut cone = DMatrix::zeros(rows, m);
            let mut rhs = DVector::zeros(rows);
            cone.rows_mut(0, g.nrows()).copy_from(g);
            let mut r = g.nrows();
            for k in 0..m {
                cone[(r, k)] = 1.0;
                rhs[r] = 1.0;
                cone[(r + 1, k)] = -1.0;
                rhs[r + 1] = 1.0;
                r += 2;
            }
            // sign·d_j ≥ 1
            cone[(r, j)] = -sign;
            rhs[r] = -1.0;
            cone[(r + 1, j)] = sign;
            rhs[r + 1] = 1.0;
            if qp::project(&DVector::zeros(m), &cone, &rhs)?.is_optimal() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Outcome of testing `H x ≤ h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyCheck {
    pub safe: bool,
    /// `max_i (H_i x − h_i)`; negative when strictly safe.
    pub margin: f64,
}

pub fn check_safety(h_mat: &DMatrix<f64>, h_vec: &DVector<f64>, x: &DVector<f64>) -> Result<SafetyCheck> {
    if h_mat.nrows() != h_vec.len() || h_mat.ncols() != x.len() {
        return Err(Error::Dimension(format!(
            "H is {}x{}, h has {} entries, x has {}",
            h_mat.nrows(),
            h_mat.ncols(),
            h_vec.len(),
            x.len()
        )));
    }
    let margin = (h_mat * x - h_vec).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SafetyCheck { safe: margin <= 0.0, margin })
}

/// One `(H[k], h[k])` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl Constraint {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::Dimension(format!(
                "H has {} rows but h has {} entries",
                h_mat.nrows(),
                h_vec.len()
            )));
        }
        ensure_finite(h_mat.as_slice(), "H")?;
        ensure_finite(h_vec.as_slice(), "h")?;
        Ok(Self { h_mat, h_vec })
    }
}

/// Time-varying state constraints and the input set. Step indices past the
/// end of the schedule reuse the last pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetySpec {
    schedule: Vec<Constraint>,
    input_set: InputSet,
}

impl SafetySpec {
    pub fn new(schedule: Vec<Constraint>, input_set: InputSet, n: usize) -> Result<Self> {
        if schedule.is_empty() {
            return Err(Error::InvalidParameter("constraint schedule is empty".into()));
        }
        if let Some(bad) = schedule.iter().find(|c| c.h_mat.ncols() != n) {
            return Err(Error::Dimension(format!("H has {} columns, state dimension is {n}", bad.h_mat.ncols())));
        }
        input_set.validate()?;
        Ok(Self { schedule, input_set })
    }

    pub fn constant(constraint: Constraint, input_set: InputSet, n: usize) -> Result<Self> {
        Self::new(vec![constraint], input_set, n)
    }

    pub fn constraint_at(&self, k: usize) -> &Constraint {
        &self.schedule[k.min(self.schedule.len() - 1)]
    }

    pub fn schedule(&self) -> &[Constraint] {
        &self.schedule
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input_set
    }
}
