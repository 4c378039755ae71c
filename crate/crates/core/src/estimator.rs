//! Regularized least-squares identification of `[A B]` from streaming
//! transitions.
//!
//! The Gram matrix `V = ZᵀZ + λI` is kept together with its Cholesky factor,
//! which is updated in place with a rank-one update for every transition.
//! The parameter estimate is recovered from the factor by two triangular
//! solves, and `log det V` is read off the factor's diagonal.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{ensure_finite, Error, Result};
use crate::types::LtiModel;

/// One observed transition `(x[t], u[t], x[t+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x_prev: DVector<f64>,
    pub u_prev: DVector<f64>,
    pub x_next: DVector<f64>,
}

impl Transition {
    pub fn new(x_prev: DVector<f64>, u_prev: DVector<f64>, x_next: DVector<f64>) -> Self {
        Self { x_prev, u_prev, x_next }
    }

    fn regressor(&self) -> DVector<f64> {
        stack(&self.x_prev, &self.u_prev)
    }
}

/// `[x; u]`
pub fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    n: usize,
    m: usize,
    lambda: f64,
    k: usize,
    gram: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `ZᵀX`, one column per state coordinate.
    cross: DMatrix<f64>,
    /// Column `i` is `θ̂_i`.
    theta: DMatrix<f64>,
    logdet: f64,
}

impl EstimatorState {
    pub fn new(n: usize, m: usize, lambda: f64) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Dimension(format!("estimator needs n, m >= 1, got n={n}, m={m}")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("regularizer lambda must be positive, got {lambda}")));
        }
        let d = n + m;
        let gram = DMatrix::from_diagonal_element(d, d, lambda);
        Self::from_parts(n, m, lambda, 0, gram, DMatrix::zeros(d, n))
    }

    fn from_parts(
        n: usize,
        m: usize,
        lambda: f64,
        k: usize,
        gram: DMatrix<f64>,
        cross: DMatrix<f64>,
    ) -> Result<Self> {
        let chol = Cholesky::new(gram.clone()).ok_or(Error::NotPositiveDefinite("Gram matrix"))?;
        let mut state = Self {
            n,
            m,
            lambda,
            k,
            gram,
            chol,
            cross,
            theta: DMatrix::zeros(n + m, n),
            logdet: 0.0,
        };
        state.refresh();
        Ok(state)
    }

    fn refresh(&mut self) {
        self.theta = self.chol.solve(&self.cross);
        self.logdet = 2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }

    /// Absorbs one transition: `V ← V + zzᵀ`, `S ← S + z x_nextᵀ`.
    pub fn update(&mut self, x_prev: &DVector<f64>, u_prev: &DVector<f64>, x_next: &DVector<f64>) -> Result<()> {
        if x_prev.len() != self.n || u_prev.len() != self.m || x_next.len() != self.n {
            return Err(Error::Dimension(format!(
                "transition shapes ({}, {}, {}) do not match n={}, m={}",
                x_prev.len(),
                u_prev.len(),
                x_next.len(),
                self.n,
                self.m
            )));
        }
        ensure_finite(x_prev.as_slice(), "x_prev")?;
        ensure_finite(u_prev.as_slice(), "u_prev")?;
        ensure_finite(x_next.as_slice(), "x_next")?;

        let z = stack(x_prev, u_prev);
        self.gram.ger(1.0, &z, &z, 1.0);
        self.cross.ger(1.0, &z, x_next, 1.0);
        self.chol.rank_one_update(&z, 1.0);
        self.k += 1;
        self.refresh();
        Ok(())
    }

    pub fn absorb(&mut self, transition: &Transition) -> Result<()> {
        self.update(&transition.x_prev, &transition.u_prev, &transition.x_next)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n + self.m
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of absorbed transitions.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// Lower-triangular factor `L` with `L Lᵀ = V`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn cross_moment(&self) -> &DMatrix<f64> {
        &self.cross
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Current estimate `[Â B̂]`.
    pub fn model(&self) -> LtiModel {
        LtiModel::from_theta(&self.theta, self.n).expect("estimator theta has consistent shape")
    }

    /// Checkpoint text: a header line, then `n`, `m`, `k`, `lambda`, and the
    /// rows of `V` and `S` as whitespace-separated numbers. Values are written
    /// in shortest round-trip form so a reload is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::from("safelearn-estimator v1\n");
        let _ = writeln!(out, "n {}", self.n);
        let _ = writeln!(out, "m {}", self.m);
        let _ = writeln!(out, "k {}", self.k);
        let _ = writeln!(out, "lambda {}", self.lambda);
        for (name, mat) in [("V", &self.gram), ("S", &self.cross)] {
            let _ = writeln!(out, "{name} {} {}", mat.nrows(), mat.ncols());
            for row in mat.row_iter() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("estimator checkpoint: {what}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("safelearn-estimator v1") {
            return Err(bad("missing header"));
        }
        let mut scalar = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let rest = line.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| bad(key))?;
            Ok(rest.trim().to_string())
        };
        let n: usize = scalar("n")?.parse().map_err(|_| bad("n"))?;
        let m: usize = scalar("m")?.parse().map_err(|_| bad("m"))?;
        let k: usize = scalar("k")?.parse().map_err(|_| bad("k"))?;
        let lambda: f64 = scalar("lambda")?.parse().map_err(|_| bad("lambda"))?;
        let mut read_matrix = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let header = lines.next().ok_or_else(|| bad("truncated"))?;
            if header != format!("{name} {rows} {cols}") {
                return Err(bad(&format!("expected `{name} {rows} {cols}`")));
            }
            let mut mat = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                let line = lines.next().ok_or_else(|| bad("truncated"))?;
                let values: Vec<f64> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(name))?;
                if values.len() != cols {
                    return Err(bad(name));
                }
                for (j, v) in values.into_iter().enumerate() {
                    mat[(i, j)] = v;
                }
            }
            Ok(mat)
        };
        let d = n + m;
        let gram = read_matrix("V", d, d)?;
        let cross = read_matrix("S", d, n)?;
        if n == 0 || m == 0 || !(lambda > 0.0) {
            return Err(bad("invalid dimensions or lambda"));
        }
        Self::from_parts(n, m, lambda, k, gram, cross)
    }
}

/// Direct solution of the ridge problem
/// `min Σ‖x[t+1] − Āx[t] − B̄u[t]‖² + λ(‖Ā‖²_F + ‖B̄‖²_F)` from the whole data set,
/// via an SVD of the augmented design matrix `[Z; √λ I]`.
pub fn estimate_batch(transitions: &[Transition], lambda: f64) -> Result<LtiModel> {
    let first = transitions
        .first()
        .ok_or_else(|| Error::InvalidParameter("batch estimate needs at least one transition".into()))?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("regularizer lambda must be positive, got {lambda}")));
    }
    let n = first.x_prev.len();
    let m = first.u_prev.len();
    let d = n + m;
    if transitions
        .iter()
        .any(|t| t.x_prev.len() != n || t.u_prev.len() != m || t.x_next.len() != n)
    {
        return Err(Error::Dimension("transitions have inconsistent dimensions".into()));
    }
    let rows = transitions.len() + d;
    let mut design = DMatrix::zeros(rows, d);
    let mut targets = DMatrix::zeros(rows, n);
    for (t, tr) in transitions.iter().enumerate() {
        design.row_mut(t).copy_from(&tr.regressor().transpose());
        targets.row_mut(t).copy_from(&tr.x_next.transpose());
    }
    let root = lambda.sqrt();
    for j in 0..d {
        design[(transitions.len() + j, j)] = root;
    }
    let theta = design
        .svd(true, true)
        .solve(&targets, 0.0)
        .map_err(|e| Error::InvalidParameter(format!("batch solve failed: {e}")))?;
    LtiModel::from_theta(&theta, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(values)
    }

    fn assert_invariants(state: &EstimatorState) {
        let l = state.factor();
        let rel = (&l * l.transpose() - state.gram()).norm() / state.gram().norm();
        assert!(rel < 1e-9, "factor error {rel}");
        let resid = state.gram() * state.theta() - state.cross_moment();
        assert!(resid.norm() <= 1e-9 * state.cross_moment().norm().max(1.0));
        let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        assert!((logdet - state.logdet()).abs() < 1e-9);
        let min_eig = state.gram().clone().symmetric_eigenvalues().min();
        assert!(min_eig >= state.lambda() * (1.0 - 1e-9));
    }

    #[test]
    fn init_identity() {
        let s = EstimatorState::new(1, 1, 1.0).unwrap();
        assert_eq!(s.gram(), &DMatrix::identity(2, 2));
        assert_eq!(s.logdet(), 0.0);
        assert_eq!(s.theta(), &DMatrix::zeros(2, 1));
        assert_eq!(s.k(), 0);
    }

    #[test]
    fn init_logdet_is_diagonal() {
        let s = EstimatorState::new(2, 1, 4.0).unwrap();
        assert!((s.logdet() - 3.0 * 4.0_f64.ln()).abs() < 1e-12);
        assert!((s.logdet() - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn init_rejects_nonpositive_lambda() {
        assert!(EstimatorState::new(1, 1, 0.0).is_err());
        assert!(EstimatorState::new(1, 1, -1.0).is_err());
    }

    #[test]
    fn single_update_matches_hand_solve() {
        // (I + zzᵀ)θ = 2z with z = [1, 1]: θ = 2z / (1 + ‖z‖²) = [2/3, 2/3].
        let mut s = EstimatorState::new(1, 1, 1.0).unwrap();
        s.update(&v(&[1.0]), &v(&[1.0]), &v(&[2.0])).unwrap();
        assert_eq!(s.gram(), &DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        assert_eq!(s.cross_moment().as_slice(), &[2.0, 2.0]);
        assert!((s.theta()[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((s.theta()[1] - 2.0 / 3.0).abs() < 1e-14);
        assert_eq!(s.k(), 1);
        assert_invariants(&s);
    }

    #[test]
    fn zero_regressor_only_counts() {
        let mut s = EstimatorState::new(2, 1, 1.0).unwrap();
        s.update(&v(&[1.0, -1.0]), &v(&[0.5]), &v(&[0.3, 0.2])).unwrap();
        let before = s.clone();
        s.update(&v(&[0.0, 0.0]), &v(&[0.0]), &v(&[5.0, 5.0])).unwrap();
        assert_eq!(s.gram(), before.gram());
        assert_eq!(s.theta(), before.theta());
        assert_eq!(s.k(), 2);
    }

    #[test]
    fn update_rejects_bad_input() {
        let mut s = EstimatorState::new(1, 1, 1.0).unwrap();
        assert!(matches!(s.update(&v(&[f64::NAN]), &v(&[0.0]), &v(&[0.0])), Err(Error::NonFinite(_))));
        assert!(matches!(s.update(&v(&[0.0, 1.0]), &v(&[0.0]), &v(&[0.0])), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_single_transition() {
        let t = Transition::new(v(&[1.0]), v(&[1.0]), v(&[2.0]));
        let model = estimate_batch(&[t], 1.0).unwrap();
        assert!((model.a()[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        assert!((model.b()[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn batch_rejects_empty_and_ragged() {
        assert!(estimate_batch(&[], 1.0).is_err());
        let ragged = vec![
            Transition::new(v(&[1.0]), v(&[1.0]), v(&[2.0])),
            Transition::new(v(&[1.0, 2.0]), v(&[1.0]), v(&[2.0, 1.0])),
        ];
        assert!(estimate_batch(&ragged, 1.0).is_err());
    }

    #[test]
    fn batch_recovers_noise_free_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = 1.0;
        let data: Vec<Transition> = (0..200)
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..1.0);
                let next = 0.5 * x + u;
                let t = Transition::new(v(&[x]), v(&[u]), v(&[next]));
                x = next;
                t
            })
            .collect();
        let model = estimate_batch(&data, 1e-8).unwrap();
        assert!((model.a()[(0, 0)] - 0.5).abs() < 1e-4);
        assert!((model.b()[(0, 0)] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batch_shrinks_to_zero() {
        let data = vec![Transition::new(v(&[1.0, 2.0]), v(&[1.0]), v(&[3.0, -1.0]))];
        let model = estimate_batch(&data, 1e12).unwrap();
        assert!(model.frobenius_norm() < 1e-10);
    }

    #[test]
    fn get_model_layout() {
        let mut s = EstimatorState::new(2, 1, 1.0).unwrap();
        assert_eq!(s.model(), LtiModel::zeros(2, 1));
        s.update(&v(&[1.0, 0.5]), &v(&[-1.0]), &v(&[0.2, 0.7])).unwrap();
        let model = s.model();
        for i in 0..2 {
            let row: Vec<f64> = model.a().row(i).iter().chain(model.b().row(i).iter()).copied().collect();
            assert_eq!(row.as_slice(), s.theta().column(i).as_slice());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = EstimatorState::new(2, 1, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            s.update(&x, &u, &y).unwrap();
        }
        let text = s.to_text();
        let loaded = EstimatorState::from_text(&text).unwrap();
        assert_eq!(loaded.gram(), s.gram());
        assert_eq!(loaded.cross_moment(), s.cross_moment());
        assert_eq!(loaded.k(), 20);
        assert!((loaded.theta() - s.theta()).norm() < 1e-12);
        assert_eq!(loaded.to_text(), text);
        assert!(EstimatorState::from_text("garbage").is_err());
    }

    #[test]
    fn consistent_under_excitation() {
        // Noise-free transitions from well-spread regressors: the ridge bias
        // λ V⁻¹ θ_i shrinks like 1/k.
        let truth = LtiModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::Normal::new(0.0, 2.0).unwrap();
        let mut s = EstimatorState::new(2, 1, 1.0).unwrap();
        for _ in 0..1000 {
            let x = DVector::from_fn(2, |_, _| rng.sample(normal));
            let u = DVector::from_fn(1, |_, _| rng.sample(normal));
            let next = truth.predict(&x, &u);
            s.update(&x, &u, &next).unwrap();
        }
        for (est, true_row) in s.theta().column_iter().zip(truth.theta_rows()) {
            assert!((est - true_row.values()).norm() < 1e-3);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn recursive_matches_batch(
            seed in any::<u64>(),
            n in 1usize..=3,
            m in 1usize..=2,
            len in 1usize..60,
            lambda in prop::sample::select(vec![0.01, 1.0, 100.0]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = EstimatorState::new(n, m, lambda).unwrap();
            let mut data = Vec::new();
            let mut last_logdet = s.logdet();
            for _ in 0..len {
                let t = Transition::new(
                    DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
                    DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)),
                    DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
                );
                s.absorb(&t).unwrap();
                prop_assert!(s.logdet() >= last_logdet - 1e-12);
                last_logdet = s.logdet();
                data.push(t);
            }
            assert_invariants(&s);
            let batch = estimate_batch(&data, lambda).unwrap().theta();
            let rel = (s.theta() - &batch).norm() / batch.norm().max(1e-300);
            prop_assert!(rel < 1e-8, "relative error {}", rel);

            data.reverse();
            let permuted = estimate_batch(&data, lambda).unwrap().theta();
            prop_assert!((permuted - &batch).norm() <= 1e-9 * batch.norm().max(1.0));
        }
    }
}
