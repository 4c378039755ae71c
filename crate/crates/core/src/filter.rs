//! Safety filter: tightened one-step constraints and the projection of the
//! nominal input onto them.
//!
//! The next state is `x⁺ = Â x + B̂ u + v + w` where the model error `v` lies in
//! a ball of radius `ζ n β(δ/(2n))` and the noise `w` in a ball of radius
//! `√(2rn/δ)`, each with probability at least `1 − δ/2`. Requiring
//! `H x⁺ ≤ h` for every such `v` and `w` is the same as the finite system
//! `H(Â x + B̂ u) ≤ h − ē` with `ē_i = (ζ n β(δ/(2n)) + √(2rn/δ)) ‖H_i‖₂`.

use nalgebra::{DMatrix, DVector};

use crate::confidence::{self, ConfidenceConfig};
use crate::error::{Error, Result};
use crate::estimator::{stack, EstimatorState};
use crate::qp::{self, QpOutcome};
use crate::types::{InputSet, LtiModel, SafetySpec};

/// Right-hand side after making `aᵀu + bᵀw ≤ c` hold for every `w` in the
/// ellipsoid `wᵀ W w ≤ radius_sq`: `c − √radius_sq ‖W^{-1/2} b‖₂`.
pub fn robust_halfspace_tighten(b: &DVector<f64>, c: f64, w: &DMatrix<f64>, radius_sq: f64) -> Result<f64> {
    if w.nrows() != b.len() || w.ncols() != b.len() {
        return Err(Error::Dimension(format!(
            "W is {}x{} but b has {} entries",
            w.nrows(),
            w.ncols(),
            b.len()
        )));
    }
    if !(radius_sq >= 0.0) {
        return Err(Error::InvalidParameter(format!("ellipsoid radius must be nonnegative, got {radius_sq}")));
    }
    let chol = nalgebra::Cholesky::new(w.clone()).ok_or(Error::NotPositiveDefinite("uncertainty shape W"))?;
    // ‖W^{-1/2} b‖² = bᵀ W⁻¹ b = ‖L⁻¹ b‖² for W = L Lᵀ.
    let weighted = confidence::inverse_weighted_norm(&chol, b);
    Ok(c - radius_sq.sqrt() * weighted)
}

/// Radii of the two uncertainty balls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TighteningTerms {
    /// `ζ n β(δ/(2n))`, the model-error radius.
    pub model: f64,
    /// `√(2rn/δ)`, the noise radius.
    pub noise: f64,
}

impl TighteningTerms {
    pub fn new(cfg: &ConfidenceConfig, beta_half: f64, zeta: f64) -> Self {
        let n = cfg.n as f64;
        Self { model: zeta * n * beta_half, noise: (2.0 * cfg.r * n / cfg.delta).sqrt() }
    }

    pub fn total(&self) -> f64 {
        self.model + self.noise
    }
}

/// Switch to the noise-only tightening once the model term is negligible.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterOptions {
    /// When set, the model term is dropped whenever it falls below
    /// `threshold · noise`.
    pub noise_only_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightenedProgram {
    pub model: LtiModel,
    pub x: DVector<f64>,
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
    pub e_bar: DVector<f64>,
    pub input_set: InputSet,
    pub u_nominal: DVector<f64>,
    pub terms: TighteningTerms,
}

impl TightenedProgram {
    /// Stacked constraints `G u ≤ g`: tightened state rows first, then the
    /// input set's halfspaces.
    pub fn stacked(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (g_u, g_vec) = self.input_set.halfspaces();
        let (g_x, c_x) = self.state_rows();
        let p = g_x.nrows();
        let m = self.u_nominal.len();
        let mut g = DMatrix::zeros(p + g_u.nrows(), m);
        g.rows_mut(0, p).copy_from(&g_x);
        g.rows_mut(p, g_u.nrows()).copy_from(&g_u);
        let mut rhs = DVector::zeros(p + g_u.nrows());
        rhs.rows_mut(0, p).copy_from(&c_x);
        rhs.rows_mut(p, g_u.nrows()).copy_from(&g_vec);
        (g, rhs)
    }

    /// `H B̂ u ≤ h − ē − H Â x`
    pub fn state_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let g = &self.h_mat * self.model.b();
        let c = &self.h_vec - &self.e_bar - &self.h_mat * (self.model.a() * &self.x);
        (g, c)
    }

    /// Largest violation of the tightened state rows at `u`.
    pub fn state_violation(&self, u: &DVector<f64>) -> f64 {
        let (g, c) = self.state_rows();
        (g * u - c).iter().copied().fold(0.0, f64::max)
    }
}

/// Assembles the tightened program. `beta_half` is `β(δ/(2n))` and `zeta` the
/// input-dependent scale at the current state.
#[allow(clippy::too_many_arguments)]
pub fn build_tightened_program(
    model: &LtiModel,
    x: &DVector<f64>,
    h_mat: &DMatrix<f64>,
    h_vec: &DVector<f64>,
    cfg: &ConfidenceConfig,
    beta_half: f64,
    zeta: f64,
    input_set: &InputSet,
    u_nominal: &DVector<f64>,
) -> Result<TightenedProgram> {
    build_with_terms(model, x, h_mat, h_vec, TighteningTerms::new(cfg, beta_half, zeta), input_set, u_nominal)
}

fn build_with_terms(
    model: &LtiModel,
    x: &DVector<f64>,
    h_mat: &DMatrix<f64>,
    h_vec: &DVector<f64>,
    terms: TighteningTerms,
    input_set: &InputSet,
    u_nominal: &DVector<f64>,
) -> Result<TightenedProgram> {
    let n = model.n();
    if x.len() != n || h_mat.ncols() != n || h_mat.nrows() != h_vec.len() {
        return Err(Error::Dimension(format!(
            "state has {} entries, H is {}x{}, h has {}, model has n={n}",
            x.len(),
            h_mat.nrows(),
            h_mat.ncols(),
            h_vec.len()
        )));
    }
    if u_nominal.len() != model.m() || input_set.dim() != model.m() {
        return Err(Error::Dimension(format!(
            "nominal input has {} entries, U has dimension {}, model has m={}",
            u_nominal.len(),
            input_set.dim(),
            model.m()
        )));
    }
    let scale = terms.total();
    let e_bar = DVector::from_fn(h_mat.nrows(), |i, _| scale * h_mat.row(i).norm());
    Ok(TightenedProgram {
        model: model.clone(),
        x: x.clone(),
        h_mat: h_mat.clone(),
        h_vec: h_vec.clone(),
        e_bar,
        input_set: input_set.clone(),
        u_nominal: u_nominal.clone(),
        terms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterStatus {
    Feasible,
    Infeasible,
}

impl FilterStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterStatus::Feasible => "feasible",
            FilterStatus::Infeasible => "infeasible",
        }
    }
}

/// Evidence that the tightened program has no solution.
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityReport {
    /// Farkas ray over the stacked constraints (state rows, then input rows).
    pub ray: DVector<f64>,
    /// Input in `U` minimising the largest tightened-row violation, projected
    /// from the nominal input.
    pub least_infeasible: DVector<f64>,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub status: FilterStatus,
    /// The safe input; present iff feasible.
    pub u: Option<DVector<f64>>,
    /// `‖u − ū‖₂`, measured at the least-infeasible point when infeasible.
    pub distance: f64,
    pub kkt_residual: f64,
    pub active_tightening: DVector<f64>,
    pub infeasibility: Option<InfeasibilityReport>,
}

impl FilterResult {
    /// Input to apply: the safe input, or the least-infeasible fallback.
    pub fn applied_input(&self) -> &DVector<f64> {
        match (&self.u, &self.infeasibility) {
            (Some(u), _) => u,
            (None, Some(report)) => &report.least_infeasible,
            (None, None) => unreachable!("filter result carries an input"),
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.status == FilterStatus::Feasible
    }
}

/// Minimises `½‖u − ū‖²` over the tightened program.
pub fn solve_projection(prog: &TightenedProgram) -> Result<FilterResult> {
    let (g, rhs) = prog.stacked();
    match qp::project(&prog.u_nominal, &g, &rhs)? {
        QpOutcome::Optimal { u, multipliers, .. } => {
            let kkt = qp::kkt_residual(&prog.u_nominal, &g, &rhs, &u, &multipliers);
            Ok(FilterResult {
                status: FilterStatus::Feasible,
                distance: (&u - &prog.u_nominal).norm(),
                u: Some(u),
                kkt_residual: kkt,
                active_tightening: prog.e_bar.clone(),
                infeasibility: None,
            })
        }
        QpOutcome::Infeasible { ray } => {
            let (least_infeasible, max_violation) = least_infeasible_point(prog)?;
            Ok(FilterResult {
                status: FilterStatus::Infeasible,
                distance: (&least_infeasible - &prog.u_nominal).norm(),
                u: None,
                kkt_residual: 0.0,
                active_tightening: prog.e_bar.clone(),
                infeasibility: Some(InfeasibilityReport { ray, least_infeasible, max_violation }),
            })
        }
    }
}

/// Lexicographically smallest relaxation of the tightened state rows that
/// makes the program feasible over `U`, and the projection of `ū` onto the
/// relaxed program.
///
/// Each round bisects on a common relaxation `t` of the rows not yet fixed,
/// then fixes the rows that cannot go below `t`. Rows that the input can
/// still satisfy are tightened further in later rounds, so an unactuated row
/// does not loosen the others.
fn least_infeasible_point(prog: &TightenedProgram) -> Result<(DVector<f64>, f64)> {
    let (g, rhs) = prog.stacked();
    let p = prog.h_mat.nrows();
    let (g_u, g_vec) = prog.input_set.halfspaces();
    let start = match qp::project(&prog.u_nominal, &g_u, &g_vec)? {
        QpOutcome::Optimal { u, .. } => u,
        QpOutcome::Infeasible { .. } => return Err(Error::InvalidParameter("input set is empty".into())),
    };
    let solve = |relax: &[f64]| -> Result<Option<DVector<f64>>> {
        let mut shifted = rhs.clone();
        for (i, r) in relax.iter().enumerate() {
            shifted[i] += r;
        }
        Ok(match qp::project(&prog.u_nominal, &g, &shifted)? {
            QpOutcome::Optimal { u, .. } => Some(u),
            QpOutcome::Infeasible { .. } => None,
        })
    };
    let with_free = |relax: &[f64], fixed: &[bool], t: f64| -> Vec<f64> {
        relax.iter().zip(fixed).map(|(&r, &f)| if f { r } else { t }).collect()
    };

    let mut hi = prog.state_violation(&start);
    let mut relax = vec![hi; p];
    let mut fixed = vec![false; p];
    let mut best = solve(&relax)?.unwrap_or(start);
    while fixed.iter().any(|f| !f) {
        if let Some(u) = solve(&with_free(&relax, &fixed, 0.0))? {
            best = u;
            for (r, f) in relax.iter_mut().zip(&fixed) {
                if !f {
                    *r = 0.0;
                }
            }
            break;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            if hi - lo <= 1e-10 * (1.0 + hi) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            match solve(&with_free(&relax, &fixed, mid))? {
                Some(u) => {
                    hi = mid;
                    best = u;
                }
                None => lo = mid,
            }
        }
        let eta = 1e-7 * (1.0 + hi);
        let trial = with_free(&relax, &fixed, hi);
        let mut newly_fixed = Vec::new();
        for i in (0..p).filter(|&i| !fixed[i]) {
            let mut tighter = trial.clone();
            tighter[i] = hi - eta;
            if solve(&tighter)?.is_none() {
                newly_fixed.push(i);
            }
        }
        relax = trial;
        if newly_fixed.is_empty() {
            break;
        }
        for i in newly_fixed {
            fixed[i] = true;
        }
    }
    let violation = prog.state_violation(&best);
    Ok((best, violation))
}

/// Where the one-step model comes from.
#[derive(Debug, Clone, Copy)]
pub enum ModelSource<'a> {
    /// Learned estimate with its confidence ellipsoid.
    Estimated(&'a EstimatorState),
    /// Exact model injected; the model-error term is zero.
    Known(&'a LtiModel),
}

/// Per-step quantities recorded alongside the filter decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// `β(δ/(2n))`
    pub beta: f64,
    pub zeta: f64,
    /// `‖V^{-1/2}[x; u]‖₂` at the applied input; never exceeds `zeta`.
    pub zeta_applied: f64,
    pub terms: TighteningTerms,
    /// Whether the model term was dropped by the noise-only switch.
    pub noise_only: bool,
    pub e_bar_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafeStep {
    pub result: FilterResult,
    pub diagnostics: StepDiagnostics,
}

/// `β(δ/(2n))`, `ζ` and the product `ζ n β(δ/(2n))` at the current state.
pub fn uncertainty_terms(
    est: &EstimatorState,
    cfg: &ConfidenceConfig,
    x: &DVector<f64>,
    input_set: &InputSet,
) -> Result<(f64, f64, TighteningTerms)> {
    let beta_half = confidence::beta(cfg, est.logdet(), cfg.delta / (2.0 * cfg.n as f64))?;
    let zeta = confidence::zeta(est.cholesky(), x, input_set)?;
    Ok((beta_half, zeta, TighteningTerms::new(cfg, beta_half, zeta)))
}

/// Filters `u_nominal` at step `k` so that `x[k+1]` satisfies `(H[k+1], h[k+1])`.
pub fn safe_step(
    source: ModelSource<'_>,
    cfg: &ConfidenceConfig,
    x: &DVector<f64>,
    u_nominal: &DVector<f64>,
    safety: &SafetySpec,
    k: usize,
    options: &FilterOptions,
) -> Result<SafeStep> {
    let input_set = safety.input_set();
    let (model, beta_half, zeta, mut terms) = match source {
        ModelSource::Estimated(est) => {
            let (beta_half, zeta, terms) = uncertainty_terms(est, cfg, x, input_set)?;
            (est.model(), beta_half, zeta, terms)
        }
        ModelSource::Known(model) => {
            (model.clone(), 0.0, 0.0, TighteningTerms::new(cfg, 0.0, 0.0))
        }
    };
    let noise_only = match options.noise_only_threshold {
        Some(threshold) if terms.model < threshold * terms.noise => {
            terms.model = 0.0;
            true
        }
        _ => false,
    };
    let next = safety.constraint_at(k + 1);
    let prog = build_with_terms(&model, x, &next.h_mat, &next.h_vec, terms, input_set, u_nominal)?;
    let result = solve_projection(&prog)?;
    let zeta_applied = match source {
        ModelSource::Estimated(est) => {
            confidence::inverse_weighted_norm(est.cholesky(), &stack(x, result.applied_input()))
        }
        ModelSource::Known(_) => 0.0,
    };
    let e_bar_max = prog.e_bar.iter().copied().fold(0.0, f64::max);
    Ok(SafeStep {
        result,
        diagnostics: StepDiagnostics { beta: beta_half, zeta, zeta_applied, terms, noise_only, e_bar_max },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Constraint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(values)
    }

    /// Program with identity input map and zero drift, so the state rows act
    /// directly on `u`.
    fn direct_program(rows: &[&[f64]], bounds: &[f64], set: InputSet, nominal: &[f64]) -> TightenedProgram {
        let m = nominal.len();
        let model = LtiModel::new(DMatrix::zeros(m, m), DMatrix::identity(m, m)).unwrap();
        let h_mat = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]);
        let terms = TighteningTerms { model: 0.0, noise: 0.0 };
        build_with_terms(&model, &DVector::zeros(m), &h_mat, &v(bounds), terms, &set, &v(nominal)).unwrap()
    }

    #[test]
    fn tighten_scaled_ball() {
        let t = robust_halfspace_tighten(&v(&[3.0, 4.0]), 10.0, &DMatrix::identity(2, 2), 4.0).unwrap();
        assert!((t - 0.0).abs() < 1e-12);
    }

    #[test]
    fn tighten_zero_radius_is_identity() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(robust_halfspace_tighten(&v(&[1.0, -2.0]), 3.5, &w, 0.0).unwrap(), 3.5);
    }

    #[test]
    fn tighten_rejects_indefinite_shape() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            robust_halfspace_tighten(&v(&[1.0, 0.0]), 1.0, &w, 1.0),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn tighten_survives_boundary_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let dim = rng.random_range(1..=3);
            let root = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            let w = &root * root.transpose() + DMatrix::identity(dim, dim) * 0.2;
            let b = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            let c = rng.random_range(-1.0..3.0);
            let radius_sq = rng.random_range(0.1..4.0);
            let tightened = robust_halfspace_tighten(&b, c, &w, radius_sq).unwrap();
            // Points w = √d · W^{-1/2} s on the ellipsoid boundary, with
            // W^{-1/2} from the symmetric eigendecomposition.
            let eig = w.clone().symmetric_eigen();
            let inv_root = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
                * eig.eigenvectors.transpose();
            let mut worst = f64::NEG_INFINITY;
            for _ in 0..100_000 {
                let s = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                let s = s.normalize();
                let wv = &inv_root * s * radius_sq.sqrt();
                worst = worst.max(b.dot(&wv));
            }
            // aᵀu = tightened: sound for every sample.
            assert!(tightened + worst <= c + 1e-9);
            // aᵀu = tightened + 1e-3: the sampled worst case exposes it.
            assert!(tightened + 1e-3 + worst > c, "gap {}", c - tightened - worst);
        }
    }

    #[test]
    fn e_bar_matches_formula() {
        let cfg = ConfidenceConfig::new(1.0, 1.0, 1.0, 0.1, 2, 1).unwrap();
        let model = LtiModel::zeros(2, 1);
        // ‖H_0‖ = 2, H_1 = 0.
        let h_mat = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let prog = build_tightened_program(
            &model,
            &v(&[0.0, 0.0]),
            &h_mat,
            &v(&[1.0, 1.0]),
            &cfg,
            3.0,
            1.0,
            &InputSet::symmetric_box(1, 1.0).unwrap(),
            &v(&[0.0]),
        )
        .unwrap();
        assert!((prog.e_bar[0] - 24.649_110_640_673_52).abs() < 1e-10);
        assert_eq!(prog.e_bar[1], 0.0);
        // Two successive unit-ball tightenings give the same right-hand side.
        let eye = DMatrix::identity(2, 2);
        let row = h_mat.row(0).transpose();
        let after_model = robust_halfspace_tighten(&row, 1.0, &eye, prog.terms.model.powi(2)).unwrap();
        let after_noise = robust_halfspace_tighten(&row, after_model, &eye, prog.terms.noise.powi(2)).unwrap();
        assert!((1.0 - after_noise - prog.e_bar[0]).abs() < 1e-12);
    }

    #[test]
    fn e_bar_vanishes_without_uncertainty() {
        let cfg = ConfidenceConfig::new(1e-300, 1.0, 1.0, 0.1, 1, 1).unwrap();
        let terms = TighteningTerms::new(&cfg, 0.0, 1.0);
        assert!(terms.total() < 1e-140);
    }

    #[test]
    fn projection_onto_halfspace() {
        let set = InputSet::symmetric_box(1, 3.0).unwrap();
        let r = solve_projection(&direct_program(&[&[1.0]], &[1.0], set, &[2.0])).unwrap();
        assert!(r.is_feasible());
        assert!((r.u.as_ref().unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((r.distance - 1.0).abs() < 1e-12);
        assert!(r.kkt_residual <= 1e-6);
    }

    #[test]
    fn feasible_nominal_is_kept() {
        let set = InputSet::symmetric_box(1, 3.0).unwrap();
        let r = solve_projection(&direct_program(&[&[1.0]], &[1.0], set, &[0.5])).unwrap();
        assert_eq!(r.u.unwrap()[0], 0.5);
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn projection_onto_diagonal_line() {
        let set = InputSet::symmetric_box(2, 5.0).unwrap();
        let r = solve_projection(&direct_program(&[&[1.0, 1.0]], &[2.0], set, &[2.0, 2.0])).unwrap();
        let u = r.u.unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12 && (u[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unactuated_violation_does_not_loosen_other_rows() {
        let set = InputSet::symmetric_box(2, 3.0).unwrap();
        let prog = direct_program(&[&[0.0, 0.0], &[1.0, 0.0]], &[-1.0, 0.5], set, &[2.0, 0.0]);
        let r = solve_projection(&prog).unwrap();
        let report = r.infeasibility.unwrap();
        assert!((report.max_violation - 1.0).abs() < 1e-8);
        assert!((report.least_infeasible[0] - 0.5).abs() < 1e-8, "{}", report.least_infeasible);
        assert!(report.least_infeasible[1].abs() < 1e-12);
    }

    #[test]
    fn empty_program_is_infeasible() {
        let set = InputSet::symmetric_box(1, 3.0).unwrap();
        let prog = direct_program(&[&[1.0], &[-1.0]], &[-1.0, -1.0], set, &[0.0]);
        let r = solve_projection(&prog).unwrap();
        assert_eq!(r.status, FilterStatus::Infeasible);
        let report = r.infeasibility.unwrap();
        let (g, rhs) = prog.stacked();
        assert!(qp::certificate_gap(&g, &rhs, &report.ray).unwrap() < 0.0);
        // u ≤ −1 and u ≥ 1 relax symmetrically to u = 0 with violation 1.
        assert!(report.least_infeasible[0].abs() < 1e-8);
        assert!((report.max_violation - 1.0).abs() < 1e-8);
    }

    #[test]
    fn known_model_uses_noise_only_tightening() {
        let model = LtiModel::new(DMatrix::from_row_slice(1, 1, &[0.5]), DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let cfg = ConfidenceConfig::new(1e-4, 1.0, 1.0, 0.1, 1, 1).unwrap();
        let set = InputSet::symmetric_box(1, 5.0).unwrap();
        let c = Constraint::new(DMatrix::from_row_slice(1, 1, &[2.0]), v(&[4.0])).unwrap();
        let spec = SafetySpec::constant(c, set, 1).unwrap();
        let step = safe_step(ModelSource::Known(&model), &cfg, &v(&[1.0]), &v(&[5.0]), &spec, 0, &FilterOptions::default())
            .unwrap();
        let noise = (2.0 * 1e-4 / 0.1_f64).sqrt();
        assert_eq!(step.diagnostics.terms.model, 0.0);
        assert!((step.diagnostics.e_bar_max - 2.0 * noise).abs() < 1e-12);
        // 2(0.5 + u) ≤ 4 − 2·noise.
        let u = step.result.u.unwrap()[0];
        assert!((u - (1.5 - noise)).abs() < 1e-10);
    }

    #[test]
    fn zero_model_start_depends_only_on_margin() {
        let cfg = ConfidenceConfig::new(0.01, 2.0, 1.0, 0.2, 2, 1).unwrap();
        let est = EstimatorState::new(2, 1, 1.0).unwrap();
        let set = InputSet::symmetric_box(1, 2.0).unwrap();
        let h_mat = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let x = v(&[0.0, 0.0]);
        let tight = SafetySpec::constant(Constraint::new(h_mat.clone(), v(&[5.0, 5.0])).unwrap(), set.clone(), 2).unwrap();
        let step = safe_step(ModelSource::Estimated(&est), &cfg, &x, &v(&[1.0]), &tight, 0, &FilterOptions::default())
            .unwrap();
        // ζ = 2 at V = I, x = 0; β(δ/4) = 0.01·√(2 ln 20) + 2.
        let beta = 0.01 * (2.0 * 20.0_f64.ln()).sqrt() + 2.0;
        assert!((step.diagnostics.beta - beta).abs() < 1e-12);
        assert!((step.diagnostics.zeta - 2.0).abs() < 1e-12);
        assert!(step.diagnostics.e_bar_max > 5.0);
        assert_eq!(step.result.status, FilterStatus::Infeasible);
        // Fallback keeps the nominal input since the zero rows ignore u.
        assert_eq!(step.result.applied_input()[0], 1.0);

        let loose = SafetySpec::constant(Constraint::new(h_mat, v(&[50.0, 50.0])).unwrap(), set, 2).unwrap();
        let step = safe_step(ModelSource::Estimated(&est), &cfg, &x, &v(&[1.0]), &loose, 0, &FilterOptions::default())
            .unwrap();
        assert!(step.result.is_feasible());
        assert_eq!(step.result.u.unwrap()[0], 1.0);
        assert!(step.diagnostics.zeta_applied <= step.diagnostics.zeta);
    }

    #[test]
    fn noise_only_switch_drops_model_term() {
        let cfg = ConfidenceConfig::new(0.01, 1.0, 1.0, 0.2, 1, 1).unwrap();
        let mut est = EstimatorState::new(1, 1, 1.0).unwrap();
        for t in 0..2000 {
            let u = if t % 2 == 0 { 1.0 } else { -1.0 };
            est.update(&v(&[u * 0.3]), &v(&[u]), &v(&[0.1])).unwrap();
        }
        let set = InputSet::symmetric_box(1, 1.0).unwrap();
        let spec = SafetySpec::constant(Constraint::new(DMatrix::identity(1, 1), v(&[10.0])).unwrap(), set, 1).unwrap();
        let opts = FilterOptions { noise_only_threshold: Some(1e6) };
        let step = safe_step(ModelSource::Estimated(&est), &cfg, &v(&[0.0]), &v(&[0.0]), &spec, 5, &opts).unwrap();
        assert!(step.diagnostics.noise_only);
        assert_eq!(step.diagnostics.terms.model, 0.0);
        assert!((step.diagnostics.e_bar_max - (2.0 * 0.01 / 0.2_f64).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(
            rows in prop::collection::vec(-2.0f64..2.0, 4),
            bounds in prop::collection::vec(-1.0f64..2.0, 2),
            nominal in prop::collection::vec(-4.0f64..4.0, 2),
        ) {
            let set = InputSet::symmetric_box(2, 3.0).unwrap();
            let r0: &[f64] = &rows[0..2];
            let r1: &[f64] = &rows[2..4];
            let first = solve_projection(&direct_program(&[r0, r1], &bounds, set.clone(), &nominal)).unwrap();
            if let Some(u) = first.u {
                prop_assert!(first.kkt_residual <= 1e-6);
                let again = solve_projection(&direct_program(&[r0, r1], &bounds, set, u.as_slice())).unwrap();
                let u2 = again.u.unwrap();
                prop_assert!((&u2 - &u).amax() <= 1e-10);
                prop_assert!(again.distance <= 1e-10);
            }
        }

        #[test]
        fn tightening_monotone_in_delta_and_r(
            delta in 0.01f64..0.5, bump in 1.01f64..1.9, r in 0.001f64..1.0,
            row in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            prop_assume!(row.iter().any(|x| x.abs() > 1e-3));
            let cfg = |r: f64, delta: f64| ConfidenceConfig::new(r, 1.0, 1.0, delta, 2, 1).unwrap();
            let h_mat = DMatrix::from_row_slice(1, 2, &row);
            let e = |c: &ConfidenceConfig| {
                let t = TighteningTerms::new(c, 1.5, 0.4);
                t.total() * h_mat.row(0).norm()
            };
            prop_assert!(e(&cfg(r, (delta * bump).min(0.99))) < e(&cfg(r, delta)));
            prop_assert!(TighteningTerms::new(&cfg(r * 0.5, delta), 1.5, 0.4).noise < TighteningTerms::new(&cfg(r, delta), 1.5, 0.4).noise);
        }

        #[test]
        fn scale_covariance(
            b in prop::collection::vec(-2.0f64..2.0, 2),
            c in 0.1f64..10.0,
            radius_sq in 0.0f64..5.0,
        ) {
            let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
            let b = DVector::from_vec(b);
            let base = -robust_halfspace_tighten(&b, 0.0, &w, radius_sq).unwrap();
            let scaled = -robust_halfspace_tighten(&(&b * c), 0.0, &w, radius_sq).unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-10 * (1.0 + scaled.abs()));
        }

        #[test]
        fn interior_nominal_is_untouched(
            shift in prop::collection::vec(-0.5f64..0.5, 2),
        ) {
            let set = InputSet::symmetric_box(2, 3.0).unwrap();
            let prog = direct_program(&[&[1.0, 1.0], &[1.0, -1.0]], &[2.0, 2.0], set, &shift);
            let r = solve_projection(&prog).unwrap();
            let u = r.u.unwrap();
            prop_assert_eq!(u.as_slice(), shift.as_slice());
        }
    }
}
