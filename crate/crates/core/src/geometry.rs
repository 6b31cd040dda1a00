//! Decision geometry on the unit hypersphere.
//!
//! A final RMSNorm followed by an unembedding makes every logit a function
//! of the residual direction only:
//!
//! ```text
//! z_k = sqrt(d) * w̄_kᵀ û + b_k,      w̄_k = w_k ⊙ γ,  û = h / ‖h‖
//! ```
//!
//! A context perturbation `δ = h_c − h_0` therefore acts on decisions (to
//! first order) only through its tangential part `P⊥ δ`, and within the
//! tangent space only through the span of the tangentially projected answer
//! rows. This module builds those objects and splits perturbations into
//! predictive and null-space parts.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::linalg::{self, dot, norm};

/// Default relative threshold for discarding QR pivots.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Relative perturbation size above which first-order results are flagged.
pub const FIRST_ORDER_EPSILON_LIMIT: f64 = 0.5;

/// Unembedding rows with the final normalization gain folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveUnembedding {
    rows: Vec<f64>,
    biases: Vec<f64>,
    hidden_dim: usize,
    vocab_size: usize,
}

impl EffectiveUnembedding {
    /// Folds `gamma` into the row-major `vocab_size × gamma.len()` matrix
    /// `raw_rows`.
    pub fn new(raw_rows: &[f64], gamma: &[f64], biases: &[f64]) -> Result<Self> {
        let hidden_dim = gamma.len();
        let vocab_size = biases.len();
        if hidden_dim == 0 || vocab_size == 0 {
            return Err(AuditError::Shape(
                "unembedding needs at least one row and one column".into(),
            ));
        }
        if raw_rows.len() != vocab_size * hidden_dim {
            return Err(AuditError::Shape(format!(
                "unembedding has {} entries, expected {vocab_size} x {hidden_dim}",
                raw_rows.len()
            )));
        }
        if !linalg::all_finite(raw_rows)
            || !linalg::all_finite(gamma)
            || !linalg::all_finite(biases)
        {
            return Err(AuditError::Data("non-finite unembedding entry".into()));
        }
        let rows = raw_rows
            .chunks_exact(hidden_dim)
            .flat_map(|row| row.iter().zip(gamma).map(|(w, g)| w * g))
            .collect();
        Ok(Self {
            rows,
            biases: biases.to_vec(),
            hidden_dim,
            vocab_size,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.rows[token * self.hidden_dim..(token + 1) * self.hidden_dim]
    }

    pub fn bias(&self, token: usize) -> f64 {
        self.biases[token]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab_size {
            return Err(AuditError::IndexOutOfRange {
                what: "vocabulary",
                index: token,
                len: self.vocab_size,
            });
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.hidden_dim {
            return Err(AuditError::Shape(format!(
                "state has length {len}, unembedding expects {}",
                self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Logit of a single token for the unit direction `unit`.
    fn logit_of_direction(&self, unit: &[f64], token: usize) -> f64 {
        (self.hidden_dim as f64).sqrt() * dot(self.row(token), unit) + self.biases[token]
    }
}

/// A residual-stream vector together with its norm and direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualState {
    h: Vec<f64>,
    r0: f64,
    unit_dir: Vec<f64>,
}

impl ResidualState {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() {
            return Err(AuditError::Shape("empty residual vector".into()));
        }
        if !linalg::all_finite(&h) {
            return Err(AuditError::Data("non-finite residual entry".into()));
        }
        let r0 = norm(&h);
        if r0 == 0.0 {
            return Err(AuditError::ZeroNorm);
        }
        let unit_dir = linalg::scale(&h, 1.0 / r0);
        Ok(Self { h, r0, unit_dir })
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn norm(&self) -> f64 {
        self.r0
    }

    pub fn unit_dir(&self) -> &[f64] {
        &self.unit_dir
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    /// `h + delta` as a new state.
    pub fn shifted(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.h.len() {
            return Err(AuditError::Shape(format!(
                "delta has length {}, state has {}",
                delta.len(),
                self.h.len()
            )));
        }
        Self::new(linalg::add(&self.h, delta))
    }
}

/// Full logit vector `z_k = sqrt(d) w̄_kᵀ û + b_k`.
pub fn logits(state: &ResidualState, unemb: &EffectiveUnembedding) -> Result<Vec<f64>> {
    unemb.check_dim(state.dim())?;
    Ok((0..unemb.vocab_size)
        .map(|k| unemb.logit_of_direction(&state.unit_dir, k))
        .collect())
}

/// Logits restricted to `tokens`, in the order given.
pub fn token_logits(
    state: &ResidualState,
    unemb: &EffectiveUnembedding,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    unemb.check_dim(state.dim())?;
    tokens
        .iter()
        .map(|&k| {
            unemb.check_token(k)?;
            Ok(unemb.logit_of_direction(&state.unit_dir, k))
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Margin `z_i − z_j`.
pub fn pairwise_margin(
    state: &ResidualState,
    unemb: &EffectiveUnembedding,
    token_i: usize,
    token_j: usize,
) -> Result<f64> {
    unemb.check_dim(state.dim())?;
    unemb.check_token(token_i)?;
    unemb.check_token(token_j)?;
    if token_i == token_j {
        return Ok(0.0);
    }
    let diff = linalg::sub(unemb.row(token_i), unemb.row(token_j));
    Ok(
        (unemb.hidden_dim as f64).sqrt() * dot(&diff, &state.unit_dir)
            + (unemb.biases[token_i] - unemb.biases[token_j]),
    )
}

/// `(I − û0 û0ᵀ) δ`.
pub fn tangent_project(delta: &[f64], base: &ResidualState) -> Result<Vec<f64>> {
    if delta.len() != base.dim() {
        return Err(AuditError::Shape(format!(
            "delta has length {}, base has {}",
            delta.len(),
            base.dim()
        )));
    }
    Ok(project_out(delta, &base.unit_dir))
}

fn project_out(v: &[f64], unit: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    linalg::axpy(&mut out, -dot(unit, v), unit);
    out
}

/// First-order direction after perturbing `base` by `delta`:
/// `û0 + P⊥ δ / r0`. Not renormalized.
pub fn first_order_direction(base: &ResidualState, delta: &[f64]) -> Result<Vec<f64>> {
    let tangential = tangent_project(delta, base)?;
    let mut out = base.unit_dir.clone();
    linalg::axpy(&mut out, 1.0 / base.r0, &tangential);
    Ok(out)
}

/// Pairwise margin evaluated at an arbitrary (possibly unnormalized)
/// direction vector, without renormalizing it.
pub fn margin_at_direction(
    direction: &[f64],
    unemb: &EffectiveUnembedding,
    token_i: usize,
    token_j: usize,
) -> Result<f64> {
    unemb.check_dim(direction.len())?;
    unemb.check_token(token_i)?;
    unemb.check_token(token_j)?;
    Ok(unemb.logit_of_direction(direction, token_i) - unemb.logit_of_direction(direction, token_j))
}

/// Logits read out along `direction` as given, without renormalizing it.
/// Fed [`first_order_direction`], this gives the linearized
/// logit response to a perturbation.
pub fn logits_at_direction(direction: &[f64], unemb: &EffectiveUnembedding) -> Result<Vec<f64>> {
    unemb.check_dim(direction.len())?;
    Ok((0..unemb.vocab_size)
        .map(|k| unemb.logit_of_direction(direction, k))
        .collect())
}

/// Span of the tangentially projected answer rows at a base direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSubspace {
    answer_token_ids: Vec<usize>,
    tangential_rows: Vec<Vec<f64>>,
    basis: Vec<Vec<f64>>,
    base_direction: Vec<f64>,
    r_diag: Vec<f64>,
}

impl AnswerSubspace {
    pub fn build(
        unemb: &EffectiveUnembedding,
        base: &ResidualState,
        answer_token_ids: &[usize],
        rank_tol: f64,
    ) -> Result<Self> {
        unemb.check_dim(base.dim())?;
        let k = answer_token_ids.len();
        if k == 0 || k > unemb.hidden_dim {
            return Err(AuditError::Shape(format!(
                "answer set of size {k} for hidden dimension {}",
                unemb.hidden_dim
            )));
        }
        if !(rank_tol.is_finite() && rank_tol >= 0.0) {
            return Err(AuditError::Domain(format!("rank tolerance {rank_tol}")));
        }
        for (i, &t) in answer_token_ids.iter().enumerate() {
            unemb.check_token(t)?;
            if answer_token_ids[..i].contains(&t) {
                return Err(AuditError::DuplicateToken(t));
            }
        }
        let tangential_rows: Vec<Vec<f64>> = answer_token_ids
            .iter()
            .map(|&t| project_out(unemb.row(t), &base.unit_dir))
            .collect();
        let qr = linalg::householder_qr(&tangential_rows, rank_tol);
        if qr.q.is_empty() {
            return Err(AuditError::DegenerateSubspace);
        }
        Ok(Self {
            answer_token_ids: answer_token_ids.to_vec(),
            tangential_rows,
            basis: qr.q,
            base_direction: base.unit_dir.clone(),
            r_diag: qr.r_diag,
        })
    }

    pub fn answer_token_ids(&self) -> &[usize] {
        &self.answer_token_ids
    }

    /// `w̃_k` for an answer token.
    pub fn tangential_row(&self, token: usize) -> Option<&[f64]> {
        self.answer_token_ids
            .iter()
            .position(|&t| t == token)
            .map(|i| self.tangential_rows[i].as_slice())
    }

    pub fn tangential_rows(&self) -> &[Vec<f64>] {
        &self.tangential_rows
    }

    /// Orthonormal basis columns `Q`.
    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn effective_rank(&self) -> usize {
        self.basis.len()
    }

    pub fn base_direction(&self) -> &[f64] {
        &self.base_direction
    }

    pub fn hidden_dim(&self) -> usize {
        self.base_direction.len()
    }

    /// Magnitudes of the QR diagonal, zero for dropped columns.
    pub fn r_diagonal(&self) -> &[f64] {
        &self.r_diag
    }

    /// `Π_A v = Q Qᵀ v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for q in &self.basis {
            linalg::axpy(&mut out, dot(q, v), q);
        }
        out
    }

    /// `P⊥ v` at this subspace's base direction.
    pub fn tangent_project(&self, v: &[f64]) -> Vec<f64> {
        project_out(v, &self.base_direction)
    }

    /// Whether `state` points along the base direction this subspace was
    /// built for.
    pub fn matches_base(&self, state: &ResidualState) -> bool {
        state.dim() == self.base_direction.len()
            && self
                .base_direction
                .iter()
                .zip(&state.unit_dir)
                .all(|(a, b)| (a - b).abs() <= 1e-12)
    }
}

/// A perturbation split into tangential, predictive and null-space parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDecomposition {
    pub raw: Vec<f64>,
    pub tangential: Vec<f64>,
    pub predictive: Vec<f64>,
    pub nullspace: Vec<f64>,
    /// `‖δ‖ / r0`
    pub epsilon: f64,
    /// `‖δ_r‖ / ‖δ⊥‖`, or 0 when the tangential part vanishes.
    pub cir: f64,
    /// Set when `‖δ⊥‖ = 0` and `cir` is a placeholder.
    pub degenerate: bool,
}

impl PerturbationDecomposition {
    /// True when the perturbation is too large for first-order results to be
    /// trusted.
    pub fn beyond_first_order(&self) -> bool {
        self.epsilon > FIRST_ORDER_EPSILON_LIMIT
    }
}

pub fn decompose(
    delta: &[f64],
    base: &ResidualState,
    subspace: &AnswerSubspace,
) -> Result<PerturbationDecomposition> {
    if delta.len() != base.dim() {
        return Err(AuditError::Shape(format!(
            "delta has length {}, base has {}",
            delta.len(),
            base.dim()
        )));
    }
    if !subspace.matches_base(base) {
        return Err(AuditError::BaseMismatch);
    }
    if !linalg::all_finite(delta) {
        return Err(AuditError::Data("non-finite perturbation entry".into()));
    }
    let tangential = project_out(delta, &base.unit_dir);
    let predictive = subspace.project(&tangential);
    let nullspace = linalg::sub(&tangential, &predictive);
    let tangential_norm = norm(&tangential);
    let degenerate = tangential_norm == 0.0;
    let cir = if degenerate {
        0.0
    } else {
        (norm(&predictive) / tangential_norm).min(1.0)
    };
    Ok(PerturbationDecomposition {
        raw: delta.to_vec(),
        epsilon: norm(delta) / base.r0,
        tangential,
        predictive,
        nullspace,
        cir,
        degenerate,
    })
}

/// `sqrt(K' / (d − 1))`, the CIR of a uniformly random tangential direction
/// in root-mean-square terms.
pub fn expected_random_cir(d: usize, k_prime: usize) -> Result<f64> {
    if k_prime == 0 || d < 2 || k_prime >= d {
        return Err(AuditError::Domain(format!(
            "need 1 <= K' <= d - 1, got K' = {k_prime}, d = {d}"
        )));
    }
    Ok((k_prime as f64 / (d - 1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unemb_identity(d: usize) -> EffectiveUnembedding {
        let mut raw = vec![0.0; d * d];
        for i in 0..d {
            raw[i * d + i] = 1.0;
        }
        EffectiveUnembedding::new(&raw, &vec![1.0; d], &vec![0.0; d]).unwrap()
    }

    #[test]
    fn effective_rows_fold_gamma() {
        let u = EffectiveUnembedding::new(&[1.0, 2.0], &[1.0, 1.0], &[0.0]).unwrap();
        assert_eq!(u.row(0), &[1.0, 2.0]);
        let u = EffectiveUnembedding::new(&[1.0, 2.0], &[0.5, 2.0], &[0.3]).unwrap();
        assert_eq!(u.row(0), &[0.5, 4.0]);
        assert_eq!(u.bias(0), 0.3);
    }

    #[test]
    fn effective_rows_reject_bad_input() {
        assert!(matches!(
            EffectiveUnembedding::new(&[1.0, 2.0], &[1.0, 1.0, 1.0], &[0.0]),
            Err(AuditError::Shape(_))
        ));
        assert!(matches!(
            EffectiveUnembedding::new(&[1.0, f64::NAN], &[1.0, 1.0], &[0.0]),
            Err(AuditError::Data(_))
        ));
    }

    #[test]
    fn zero_state_is_rejected() {
        assert!(matches!(
            ResidualState::new(vec![0.0; 3]),
            Err(AuditError::ZeroNorm)
        ));
    }

    #[test]
    fn logit_examples() {
        let u = unemb_identity(4);
        let s = ResidualState::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(logits(&s, &u).unwrap()[0], 2.0);

        let u = EffectiveUnembedding::new(&[0.0, 0.0], &[1.0, 1.0], &[0.7]).unwrap();
        let s = ResidualState::new(vec![0.3, -0.4]).unwrap();
        assert_eq!(logits(&s, &u).unwrap(), vec![0.7]);
    }

    #[test]
    fn logits_ignore_scale() {
        let u = EffectiveUnembedding::new(
            &[0.3, -0.2, 0.9, 0.1, 0.4, -0.7],
            &[1.1, 0.8],
            &[0.1, -0.2, 0.0],
        )
        .unwrap();
        let h = vec![0.37, -1.21];
        let a = logits(&ResidualState::new(h.clone()).unwrap(), &u).unwrap();
        let b = logits(&ResidualState::new(linalg::scale(&h, 10.0)).unwrap(), &u).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-14);
        }
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn margin_examples() {
        let u = EffectiveUnembedding::new(&[0.0, 0.0], &[1.0], &[1.5, 0.25]).unwrap();
        let s = ResidualState::new(vec![1.0]).unwrap();
        assert_eq!(pairwise_margin(&s, &u, 0, 0).unwrap(), 0.0);
        assert_eq!(pairwise_margin(&s, &u, 0, 1).unwrap(), 1.25);
        assert_eq!(pairwise_margin(&s, &u, 1, 0).unwrap(), -1.25);
        assert!(matches!(
            pairwise_margin(&s, &u, 0, 5),
            Err(AuditError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn tangent_projection_examples() {
        let base = ResidualState::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            tangent_project(&[0.1, 0.2, 0.0], &base).unwrap(),
            vec![0.0, 0.2, 0.0]
        );
        assert_eq!(
            tangent_project(&[3.0, 0.0, 0.0], &base).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            tangent_project(&[0.0, -1.0, 2.0], &base).unwrap(),
            vec![0.0, -1.0, 2.0]
        );
        assert!(tangent_project(&[1.0], &base).is_err());
    }

    #[test]
    fn first_order_direction_examples() {
        let base = ResidualState::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(
            first_order_direction(&base, &[0.0, 0.0]).unwrap(),
            base.unit_dir
        );
        let radial = first_order_direction(&base, &[0.3, 0.4]).unwrap();
        for (a, b) in radial.iter().zip(&base.unit_dir) {
            assert!((a - b).abs() < 1e-15);
        }

        let base = ResidualState::new(vec![1.0, 0.0]).unwrap();
        let approx = first_order_direction(&base, &[0.0, 0.01]).unwrap();
        assert_eq!(approx, vec![1.0, 0.01]);
        let exact = ResidualState::new(vec![1.0, 0.01]).unwrap();
        let err = norm(&linalg::sub(&approx, exact.unit_dir()));
        // ‖(1, 0.01) − (1, 0.01)/√1.0001‖ ≈ ε²/2
        assert!((err - 5e-5).abs() < 1e-6, "err = {err}");
    }

    #[test]
    fn single_answer_subspace() {
        let u = unemb_identity(3);
        let base = ResidualState::new(vec![1.0, 0.0, 0.0]).unwrap();
        let s = AnswerSubspace::build(&u, &base, &[1], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.effective_rank(), 1);
        let err = norm(&linalg::sub(&s.basis()[0], &[0.0, 1.0, 0.0]));
        assert!(err < 1e-12, "basis off by {err}");
    }

    #[test]
    fn identical_answer_rows_collapse() {
        let raw = [0.2, 0.5, -0.1, 0.2, 0.5, -0.1, 1.0, 0.0, 0.0];
        let u = EffectiveUnembedding::new(&raw, &[1.0; 3], &[0.0; 3]).unwrap();
        let base = ResidualState::new(vec![1.0, 1.0, 1.0]).unwrap();
        let s = AnswerSubspace::build(&u, &base, &[0, 1], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.effective_rank(), 1);
    }

    #[test]
    fn subspace_errors() {
        let u = unemb_identity(3);
        let base = ResidualState::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            AnswerSubspace::build(&u, &base, &[1, 1], DEFAULT_RANK_TOL),
            Err(AuditError::DuplicateToken(1))
        ));
        // the only answer row is parallel to the base direction
        assert!(matches!(
            AnswerSubspace::build(&u, &base, &[0], DEFAULT_RANK_TOL),
            Err(AuditError::DegenerateSubspace)
        ));
    }

    #[test]
    fn decompose_extremes() {
        let u = unemb_identity(4);
        let base = ResidualState::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = AnswerSubspace::build(&u, &base, &[1, 2], DEFAULT_RANK_TOL).unwrap();

        let full = decompose(&[0.0, 0.3, -0.2, 0.0], &base, &s).unwrap();
        assert!((full.cir - 1.0).abs() < 1e-15);
        assert!(norm(&full.nullspace) < 1e-15);

        let none = decompose(&[0.0, 0.0, 0.0, 0.5], &base, &s).unwrap();
        assert_eq!(none.cir, 0.0);
        assert!(!none.degenerate);

        let radial = decompose(&[0.5, 0.0, 0.0, 0.0], &base, &s).unwrap();
        assert!(radial.degenerate);
        assert_eq!(radial.cir, 0.0);
        assert_eq!(radial.epsilon, 0.5);
    }

    #[test]
    fn decompose_rejects_foreign_base() {
        let u = unemb_identity(3);
        let base = ResidualState::new(vec![1.0, 0.0, 0.0]).unwrap();
        let s = AnswerSubspace::build(&u, &base, &[1], DEFAULT_RANK_TOL).unwrap();
        let other = ResidualState::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            decompose(&[0.0, 1.0, 0.0], &other, &s),
            Err(AuditError::BaseMismatch)
        ));
    }

    #[test]
    fn large_perturbations_are_flagged() {
        let u = unemb_identity(3);
        let base = ResidualState::new(vec![1.0, 0.0, 0.0]).unwrap();
        let s = AnswerSubspace::build(&u, &base, &[1], DEFAULT_RANK_TOL).unwrap();
        assert!(decompose(&[0.0, 0.6, 0.0], &base, &s)
            .unwrap()
            .beyond_first_order());
        assert!(!decompose(&[0.0, 0.4, 0.0], &base, &s)
            .unwrap()
            .beyond_first_order());
    }

    #[test]
    fn random_cir_baseline() {
        assert!((expected_random_cir(4096, 4).unwrap() - 0.03125).abs() < 1e-4);
        assert_eq!(expected_random_cir(10, 9).unwrap(), 1.0);
        assert_eq!(expected_random_cir(2, 1).unwrap(), 1.0);
        assert!(expected_random_cir(4, 4).is_err());
        assert!(expected_random_cir(4, 0).is_err());
    }
}
