//! Authority forces, the authority alignment index and joint-margin
//! prediction for sensor/user conflict instances.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::geometry::{
    self, decompose, pairwise_margin, AnswerSubspace, EffectiveUnembedding,
    PerturbationDecomposition, ResidualState,
};
use crate::linalg::{self, dot};

/// The four prompt conditions every conflict instance is run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Baseline,
    SensorOnly,
    UserOnly,
    Joint,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Baseline,
        Condition::SensorOnly,
        Condition::UserOnly,
        Condition::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::SensorOnly => "sensor_only",
            Condition::UserOnly => "user_only",
            Condition::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per condition. All four are always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ByCondition<T> {
    pub baseline: T,
    pub sensor_only: T,
    pub user_only: T,
    pub joint: T,
}

impl<T> ByCondition<T> {
    pub fn get(&self, c: Condition) -> &T {
        match c {
            Condition::Baseline => &self.baseline,
            Condition::SensorOnly => &self.sensor_only,
            Condition::UserOnly => &self.user_only,
            Condition::Joint => &self.joint,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Condition, &T) -> U) -> ByCondition<U> {
        ByCondition {
            baseline: f(Condition::Baseline, &self.baseline),
            sensor_only: f(Condition::SensorOnly, &self.sensor_only),
            user_only: f(Condition::UserOnly, &self.user_only),
            joint: f(Condition::Joint, &self.joint),
        }
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(Condition, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ByCondition<U>, E> {
        Ok(ByCondition {
            baseline: f(Condition::Baseline, &self.baseline)?,
            sensor_only: f(Condition::SensorOnly, &self.sensor_only)?,
            user_only: f(Condition::UserOnly, &self.user_only)?,
            joint: f(Condition::Joint, &self.joint)?,
        })
    }
}

/// The model's choice for one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    /// Full-vocabulary argmax, the proxy for the first generated token.
    pub token: usize,
    /// Argmax restricted to the answer tokens.
    pub answer_token: usize,
    /// Whether `token` is one of the answer tokens.
    pub is_answer: bool,
}

impl Decision {
    pub fn of(
        state: &ResidualState,
        unemb: &EffectiveUnembedding,
        answer_token_ids: &[usize],
    ) -> Result<Self> {
        let z = geometry::logits(state, unemb)?;
        let token = geometry::argmax(&z);
        let restricted: Vec<f64> = answer_token_ids.iter().map(|&t| z[t]).collect();
        let answer_token = answer_token_ids[geometry::argmax(&restricted)];
        Ok(Self {
            token,
            answer_token,
            is_answer: answer_token_ids.contains(&token),
        })
    }
}

/// Context perturbations of the three non-baseline conditions, measured
/// against the baseline state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDecompositions {
    pub sensor_only: PerturbationDecomposition,
    pub user_only: PerturbationDecomposition,
    pub joint: PerturbationDecomposition,
}

/// A fully observed conflict instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub instance_id: String,
    pub states: ByCondition<ResidualState>,
    pub sensor_answer: usize,
    pub user_answer: usize,
    pub baseline_decision: usize,
    pub decisions: ByCondition<Decision>,
    pub decomposed: ConditionDecompositions,
}

impl ConflictRecord {
    /// Builds a record from the four final-layer states.
    ///
    /// `subspace` must have been built at the baseline state.
    pub fn new(
        instance_id: impl Into<String>,
        states: ByCondition<ResidualState>,
        sensor_answer: usize,
        user_answer: usize,
        unemb: &EffectiveUnembedding,
        subspace: &AnswerSubspace,
    ) -> Result<Self> {
        if sensor_answer == user_answer {
            return Err(AuditError::NoConflict(sensor_answer));
        }
        let d = states.baseline.dim();
        for c in Condition::ALL {
            if states.get(c).dim() != d {
                return Err(AuditError::Shape(format!(
                    "{c} state has length {}, baseline has {d}",
                    states.get(c).dim()
                )));
            }
        }
        for t in [sensor_answer, user_answer] {
            if subspace.tangential_row(t).is_none() {
                return Err(AuditError::NotAnAnswer(t));
            }
        }
        let base = &states.baseline;
        if !subspace.matches_base(base) {
            return Err(AuditError::BaseMismatch);
        }
        let answers = subspace.answer_token_ids();
        let decisions = states.try_map(|_, s| Decision::of(s, unemb, answers))?;
        let delta = |s: &ResidualState| linalg::sub(s.h(), base.h());
        let decomposed = ConditionDecompositions {
            sensor_only: decompose(&delta(&states.sensor_only), base, subspace)?,
            user_only: decompose(&delta(&states.user_only), base, subspace)?,
            joint: decompose(&delta(&states.joint), base, subspace)?,
        };
        Ok(Self {
            instance_id: instance_id.into(),
            baseline_decision: decisions.baseline.token,
            states,
            sensor_answer,
            user_answer,
            decisions,
            decomposed,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.states.baseline.dim()
    }

    /// `sqrt(d) / r0` with `r0` taken from the baseline state.
    pub fn force_scale(&self) -> f64 {
        (self.hidden_dim() as f64).sqrt() / self.states.baseline.norm()
    }

    /// `δ_su − δ_s − δ_u`.
    pub fn interaction_delta(&self) -> Vec<f64> {
        let mut out = self.decomposed.joint.raw.clone();
        linalg::axpy(&mut out, -1.0, &self.decomposed.sensor_only.raw);
        linalg::axpy(&mut out, -1.0, &self.decomposed.user_only.raw);
        out
    }
}

/// `d* = w̃_{a_s} − w̃_{a_u}`.
pub fn decision_direction(
    subspace: &AnswerSubspace,
    sensor_answer: usize,
    user_answer: usize,
) -> Result<Vec<f64>> {
    if sensor_answer == user_answer {
        return Err(AuditError::NoConflict(sensor_answer));
    }
    let s = subspace
        .tangential_row(sensor_answer)
        .ok_or(AuditError::NotAnAnswer(sensor_answer))?;
    let u = subspace
        .tangential_row(user_answer)
        .ok_or(AuditError::NotAnAnswer(user_answer))?;
    Ok(linalg::sub(s, u))
}

fn check_direction(record: &ConflictRecord, direction: &[f64]) -> Result<()> {
    if direction.len() != record.hidden_dim() {
        return Err(AuditError::Shape(format!(
            "decision direction has length {}, record has {}",
            direction.len(),
            record.hidden_dim()
        )));
    }
    Ok(())
}

/// Sensor and user authority forces `(F_s, F_u)`.
///
/// Positive `F_s` pushes toward the sensor answer; positive `F_u` pushes
/// toward the user answer.
pub fn authority_forces(record: &ConflictRecord, direction: &[f64]) -> Result<(f64, f64)> {
    check_direction(record, direction)?;
    let scale = record.force_scale();
    let f_s = scale * dot(direction, &record.decomposed.sensor_only.predictive);
    let f_u = -scale * dot(direction, &record.decomposed.user_only.predictive);
    Ok((f_s, f_u))
}

/// Interaction force `I_su = (sqrt(d)/r0) d*ᵀ Π_A P⊥ δ_inter`.
pub fn interaction_force(
    record: &ConflictRecord,
    subspace: &AnswerSubspace,
    direction: &[f64],
) -> Result<f64> {
    check_direction(record, direction)?;
    if !subspace.matches_base(&record.states.baseline) {
        return Err(AuditError::BaseMismatch);
    }
    let inter = record.interaction_delta();
    let predictive = subspace.project(&subspace.tangent_project(&inter));
    Ok(record.force_scale() * dot(direction, &predictive))
}

/// Authority alignment index with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aai {
    pub value: f64,
    /// Both forces are exactly zero; `value` is a placeholder 0.
    pub degenerate: bool,
}

/// `(F_s − F_u) / (|F_s| + |F_u|)`.
pub fn aai(force_sensor: f64, force_user: f64) -> Aai {
    let denom = force_sensor.abs() + force_user.abs();
    if denom == 0.0 {
        return Aai {
            value: 0.0,
            degenerate: true,
        };
    }
    Aai {
        value: ((force_sensor - force_user) / denom).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Geometric authority analysis of one conflict instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorityReport {
    pub force_sensor: f64,
    pub force_user: f64,
    pub interaction: f64,
    pub aai: Aai,
    pub baseline_margin: f64,
    pub predicted_joint_margin: f64,
    pub observed_joint_margin: f64,
    pub inversion_error_predicted: bool,
    pub decision_direction: Vec<f64>,
}

/// Predicts the joint sensor-vs-user margin from the single-context runs.
pub fn predict_joint_margin(
    record: &ConflictRecord,
    subspace: &AnswerSubspace,
    unemb: &EffectiveUnembedding,
) -> Result<AuthorityReport> {
    if !subspace.matches_base(&record.states.baseline) {
        return Err(AuditError::BaseMismatch);
    }
    let (s, u) = (record.sensor_answer, record.user_answer);
    let direction = decision_direction(subspace, s, u)?;
    let (force_sensor, force_user) = authority_forces(record, &direction)?;
    let interaction = interaction_force(record, subspace, &direction)?;
    let baseline_margin = pairwise_margin(&record.states.baseline, unemb, s, u)?;
    let observed_joint_margin = pairwise_margin(&record.states.joint, unemb, s, u)?;
    let predicted_joint_margin = baseline_margin + force_sensor - force_user + interaction;
    Ok(AuthorityReport {
        force_sensor,
        force_user,
        interaction,
        aai: aai(force_sensor, force_user),
        baseline_margin,
        predicted_joint_margin,
        observed_joint_margin,
        inversion_error_predicted: force_user > baseline_margin + force_sensor + interaction,
        decision_direction: direction,
    })
}

/// Joint-condition trust rates over a population of records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustSummary {
    pub n: usize,
    pub sensor_count: usize,
    pub user_count: usize,
    pub trust_s: f64,
    pub trust_u: f64,
    pub trust_other: f64,
    /// `trust_s − trust_u`
    pub baai: f64,
}

pub fn behavioral_metrics<'a, I>(records: I) -> Result<TrustSummary>
where
    I: IntoIterator<Item = &'a ConflictRecord>,
{
    let (mut n, mut sensor_count, mut user_count) = (0usize, 0usize, 0usize);
    for r in records {
        n += 1;
        let chosen = r.decisions.joint.token;
        if chosen == r.sensor_answer {
            sensor_count += 1;
        } else if chosen == r.user_answer {
            user_count += 1;
        }
    }
    trust_from_counts(n, sensor_count, user_count)
}

/// Trust summary from raw counts.
pub fn trust_from_counts(n: usize, sensor_count: usize, user_count: usize) -> Result<TrustSummary> {
    if n == 0 {
        return Err(AuditError::DegenerateSample(
            "no records for trust metrics".into(),
        ));
    }
    if sensor_count + user_count > n {
        return Err(AuditError::Domain(format!(
            "{sensor_count} + {user_count} decisions out of {n}"
        )));
    }
    let total = n as f64;
    let trust_s = sensor_count as f64 / total;
    let trust_u = user_count as f64 / total;
    let trust_other = (n - sensor_count - user_count) as f64 / total;
    Ok(TrustSummary {
        n,
        sensor_count,
        user_count,
        trust_s,
        trust_u,
        trust_other,
        baai: trust_s - trust_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_RANK_TOL;

    /// d = 4, base along e0, answers 1 and 2 with rows e1 and e2.
    fn axis_setup() -> (EffectiveUnembedding, AnswerSubspace, ResidualState) {
        let d = 4;
        let mut raw = vec![0.0; d * d];
        for i in 0..d {
            raw[i * d + i] = 1.0;
        }
        let u = EffectiveUnembedding::new(&raw, &[1.0; 4], &[0.0; 4]).unwrap();
        let base = ResidualState::new(vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let s = AnswerSubspace::build(&u, &base, &[1, 2], DEFAULT_RANK_TOL).unwrap();
        (u, s, base)
    }

    fn record_with(
        u: &EffectiveUnembedding,
        s: &AnswerSubspace,
        base: &ResidualState,
        ds: &[f64],
        du: &[f64],
        dsu: &[f64],
    ) -> ConflictRecord {
        let states = ByCondition {
            baseline: base.clone(),
            sensor_only: base.shifted(ds).unwrap(),
            user_only: base.shifted(du).unwrap(),
            joint: base.shifted(dsu).unwrap(),
        };
        ConflictRecord::new("t", states, 1, 2, u, s).unwrap()
    }

    #[test]
    fn decision_direction_axis_case() {
        let (_, s, _) = axis_setup();
        assert_eq!(
            decision_direction(&s, 1, 2).unwrap(),
            vec![0.0, 1.0, -1.0, 0.0]
        );
        assert!(matches!(
            decision_direction(&s, 1, 1),
            Err(AuditError::NoConflict(1))
        ));
        assert!(matches!(
            decision_direction(&s, 1, 3),
            Err(AuditError::NotAnAnswer(3))
        ));
    }

    #[test]
    fn forces_from_planted_components() {
        let (u, s, base) = axis_setup();
        let zero = [0.0; 4];
        let r = record_with(&u, &s, &base, &zero, &zero, &zero);
        let dir = decision_direction(&s, 1, 2).unwrap();
        assert_eq!(authority_forces(&r, &dir).unwrap(), (0.0, 0.0));

        // δ_r^s = λ d*, δ_r^u = −μ d*; ‖d*‖² = 2, sqrt(d)/r0 = 1
        let (lambda, mu) = (0.1, 0.25);
        let r = record_with(
            &u,
            &s,
            &base,
            &linalg::scale(&dir, lambda),
            &linalg::scale(&dir, -mu),
            &zero,
        );
        let (fs, fu) = authority_forces(&r, &dir).unwrap();
        assert!((fs - lambda * 2.0).abs() < 1e-15);
        assert!((fu - mu * 2.0).abs() < 1e-15);
    }

    #[test]
    fn interaction_cases() {
        let (u, s, base) = axis_setup();
        let dir = decision_direction(&s, 1, 2).unwrap();
        let ds = [0.0, 0.1, 0.0, 0.2];
        let du = [0.0, 0.0, 0.3, -0.1];
        let additive = linalg::add(&ds, &du);
        let r = record_with(&u, &s, &base, &ds, &du, &additive);
        assert!(interaction_force(&r, &s, &dir).unwrap().abs() < 1e-15);

        // interaction purely in the null direction e3
        let r = record_with(
            &u,
            &s,
            &base,
            &ds,
            &du,
            &linalg::add(&additive, &[0.0, 0.0, 0.0, 0.4]),
        );
        assert!(interaction_force(&r, &s, &dir).unwrap().abs() < 1e-15);

        // δ_inter = d*: I = sqrt(d)/r0 ‖d*‖² = 2
        let r = record_with(&u, &s, &base, &ds, &du, &linalg::add(&additive, &dir));
        assert!((interaction_force(&r, &s, &dir).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn aai_examples() {
        assert_eq!(aai(1.0, 1.0).value, 0.0);
        assert_eq!(aai(0.0, 2.0).value, -1.0);
        let v = aai(0.02, 0.20).value;
        assert!((v - (-0.18 / 0.22)).abs() < 1e-15);
        assert!((v + 0.818_181_818_181_818).abs() < 1e-12);
        let z = aai(0.0, 0.0);
        assert!(z.degenerate);
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn no_context_prediction_is_baseline() {
        let (u, s, base) = axis_setup();
        let zero = [0.0; 4];
        let r = record_with(&u, &s, &base, &zero, &zero, &zero);
        let rep = predict_joint_margin(&r, &s, &u).unwrap();
        assert_eq!(rep.predicted_joint_margin, rep.baseline_margin);
        assert_eq!(rep.observed_joint_margin, rep.baseline_margin);
        assert!(rep.aai.degenerate);
    }

    #[test]
    fn record_rejects_same_answers() {
        let (u, s, base) = axis_setup();
        let states = ByCondition {
            baseline: base.clone(),
            sensor_only: base.clone(),
            user_only: base.clone(),
            joint: base.clone(),
        };
        assert!(matches!(
            ConflictRecord::new("x", states, 1, 1, &u, &s),
            Err(AuditError::NoConflict(1))
        ));
    }

    #[test]
    fn trust_examples() {
        let t = trust_from_counts(80, 0, 80).unwrap();
        assert_eq!(
            (t.trust_s, t.trust_u, t.trust_other, t.baai),
            (0.0, 1.0, 0.0, -1.0)
        );
        let t = trust_from_counts(80, 80, 0).unwrap();
        assert_eq!(
            (t.trust_s, t.trust_u, t.trust_other, t.baai),
            (1.0, 0.0, 0.0, 1.0)
        );
        let t = trust_from_counts(80, 8, 72).unwrap();
        assert!((t.baai + 0.8).abs() < 1e-15);
        assert!(trust_from_counts(0, 0, 0).is_err());
        let empty: Vec<ConflictRecord> = Vec::new();
        assert!(behavioral_metrics(&empty).is_err());
    }
}
