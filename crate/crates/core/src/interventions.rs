//! Causal interventions on the joint-condition residual state and
//! layer-level patching over recorded traces.
//!
//! Residual-state interventions (ablation, injection and their controls)
//! edit the final joint state and re-read the decision through the full
//! logit path.
//!
//! Layer patching works on traces that store one residual state per layer
//! output at the answer position. Each layer's write is recovered as the
//! difference of consecutive stored states (the state before layer 0 is
//! taken as zero), and "replacing a layer's output" swaps that write for the
//! baseline run's write at the same layer while replaying every other write
//! of the joint run unchanged. This delta replay is exact when later layers'
//! writes do not depend on the patched state (true of the reference model)
//! and is an approximation for dumps of real models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::authority::{decision_direction, Condition, ConflictRecord, Decision};
use crate::error::{AuditError, Result};
use crate::geometry::{pairwise_margin, AnswerSubspace, EffectiveUnembedding, ResidualState};
use crate::linalg::{self, norm};

/// Safety factor applied to the minimal injection magnitude by default.
pub const DEFAULT_SAFETY: f64 = 1.1;

/// Number of critical layers GAC interpolates by default.
pub const DEFAULT_GAC_LAYERS: usize = 5;

/// Per-layer residual states of one instance under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub instance_id: String,
    pub condition: Condition,
    layer_states: Vec<Vec<f64>>,
}

impl LayerTrace {
    pub fn new(
        instance_id: impl Into<String>,
        condition: Condition,
        layer_states: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let d = layer_states
            .first()
            .map(Vec::len)
            .ok_or_else(|| AuditError::Shape("layer trace with no layers".into()))?;
        if d == 0 {
            return Err(AuditError::Shape(
                "layer trace with zero hidden size".into(),
            ));
        }
        for (l, s) in layer_states.iter().enumerate() {
            if s.len() != d {
                return Err(AuditError::Shape(format!(
                    "layer {l} has length {}, layer 0 has {d}",
                    s.len()
                )));
            }
            if !linalg::all_finite(s) {
                return Err(AuditError::Data(format!("non-finite entry at layer {l}")));
            }
        }
        Ok(Self {
            instance_id: instance_id.into(),
            condition,
            layer_states,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layer_states.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer_states[0].len()
    }

    pub fn layer_states(&self) -> &[Vec<f64>] {
        &self.layer_states
    }

    /// The analysis state: the last layer's output.
    pub fn final_state(&self) -> &[f64] {
        self.layer_states.last().expect("non-empty by construction")
    }

    /// Residual write of layer `layer`.
    pub fn layer_write(&self, layer: usize) -> Vec<f64> {
        match layer {
            0 => self.layer_states[0].clone(),
            l => linalg::sub(&self.layer_states[l], &self.layer_states[l - 1]),
        }
    }
}

fn check_pair(joint: &LayerTrace, baseline: &LayerTrace) -> Result<()> {
    if joint.num_layers() != baseline.num_layers() {
        return Err(AuditError::Shape(format!(
            "traces have {} and {} layers",
            joint.num_layers(),
            baseline.num_layers()
        )));
    }
    if joint.hidden_dim() != baseline.hidden_dim() {
        return Err(AuditError::Shape(format!(
            "traces have hidden sizes {} and {}",
            joint.hidden_dim(),
            baseline.hidden_dim()
        )));
    }
    Ok(())
}

/// Final state after giving layer `l` the write
/// `baseline_write + weight[l] * (joint_write − baseline_write)`.
///
/// The sum is anchored at whichever run the weights sit closer to, so
/// all-ones weights return the joint final state bit for bit and all-zeros
/// weights return the baseline final state bit for bit.
fn blend_writes(joint: &LayerTrace, baseline: &LayerTrace, weights: &[f64]) -> Vec<f64> {
    let mean_weight = weights.iter().sum::<f64>() / weights.len() as f64;
    let (mut out, offset) = if mean_weight >= 0.5 {
        (joint.final_state().to_vec(), -1.0)
    } else {
        (baseline.final_state().to_vec(), 0.0)
    };
    for (l, w) in weights.iter().enumerate() {
        let coeff = w + offset;
        if coeff == 0.0 {
            continue;
        }
        let diff = linalg::sub(&joint.layer_write(l), &baseline.layer_write(l));
        linalg::axpy(&mut out, coeff, &diff);
    }
    out
}

/// Joint final state with the writes of `layers` replaced by the baseline
/// run's writes.
pub fn patched_final_state(
    joint: &LayerTrace,
    baseline: &LayerTrace,
    layers: &[usize],
) -> Result<Vec<f64>> {
    check_pair(joint, baseline)?;
    let mut weights = vec![1.0; joint.num_layers()];
    for &l in layers {
        if l >= weights.len() {
            return Err(AuditError::IndexOutOfRange {
                what: "layers",
                index: l,
                len: weights.len(),
            });
        }
        weights[l] = 0.0;
    }
    Ok(blend_writes(joint, baseline, &weights))
}

/// Margin change `m(a_s, a_u)` from patching each layer on its own.
pub fn layer_importance(
    joint: &LayerTrace,
    baseline: &LayerTrace,
    unemb: &EffectiveUnembedding,
    sensor_answer: usize,
    user_answer: usize,
) -> Result<Vec<f64>> {
    check_pair(joint, baseline)?;
    let unpatched = pairwise_margin(
        &ResidualState::new(joint.final_state().to_vec())?,
        unemb,
        sensor_answer,
        user_answer,
    )?;
    (0..joint.num_layers())
        .map(|l| {
            let state = ResidualState::new(patched_final_state(joint, baseline, &[l])?)?;
            Ok(pairwise_margin(&state, unemb, sensor_answer, user_answer)? - unpatched)
        })
        .collect()
}

/// Layers ordered by mean importance, largest first (ties: lower index).
pub fn rank_layers(importances: &[Vec<f64>]) -> Result<Vec<usize>> {
    let l = importances
        .first()
        .map(Vec::len)
        .ok_or_else(|| AuditError::DegenerateSample("no importance rows".into()))?;
    if importances.iter().any(|row| row.len() != l) {
        return Err(AuditError::Shape("importance rows differ in length".into()));
    }
    let mut mean = vec![0.0; l];
    for row in importances {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / importances.len() as f64;
        }
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    Ok(order)
}

/// One instance's traces as needed for patching.
#[derive(Debug, Clone, Copy)]
pub struct PatchCase<'a> {
    pub joint: &'a LayerTrace,
    pub baseline: &'a LayerTrace,
    pub sensor_answer: usize,
}

/// Fraction of cases whose full-vocabulary decision is the sensor answer
/// after patching the first `k` layers of `ranked_layers` together.
pub fn cumulative_ablation(
    cases: &[PatchCase<'_>],
    unemb: &EffectiveUnembedding,
    ranked_layers: &[usize],
    k: usize,
) -> Result<f64> {
    if k > ranked_layers.len() {
        return Err(AuditError::Domain(format!(
            "k = {k} exceeds the {} ranked layers",
            ranked_layers.len()
        )));
    }
    if cases.is_empty() {
        return Err(AuditError::DegenerateSample("no cases to ablate".into()));
    }
    let mut correct = 0usize;
    for case in cases {
        if k > case.joint.num_layers() {
            return Err(AuditError::Domain(format!(
                "k = {k} exceeds {} layers",
                case.joint.num_layers()
            )));
        }
        let state = ResidualState::new(patched_final_state(
            case.joint,
            case.baseline,
            &ranked_layers[..k],
        )?)?;
        if argmax_token(&state, unemb)? == case.sensor_answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / cases.len() as f64)
}

/// Geometric authority calibration: at each critical layer the joint write
/// becomes `baseline + alpha * (joint − baseline)`. Returns the final state.
pub fn gac(
    joint: &LayerTrace,
    baseline: &LayerTrace,
    critical_layers: &[usize],
    alpha: f64,
) -> Result<Vec<f64>> {
    check_pair(joint, baseline)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AuditError::Domain(format!(
            "alpha = {alpha} outside [0, 1]"
        )));
    }
    let mut weights = vec![1.0; joint.num_layers()];
    for &l in critical_layers {
        if l >= weights.len() {
            return Err(AuditError::IndexOutOfRange {
                what: "layers",
                index: l,
                len: weights.len(),
            });
        }
        weights[l] = alpha;
    }
    Ok(blend_writes(joint, baseline, &weights))
}

fn argmax_token(state: &ResidualState, unemb: &EffectiveUnembedding) -> Result<usize> {
    Ok(crate::geometry::argmax(&crate::geometry::logits(
        state, unemb,
    )?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    AblateUserPredictive,
    AblateRandom,
    AblateNull,
    InjectTheory,
    InjectRandom,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 5] = [
        InterventionKind::AblateUserPredictive,
        InterventionKind::AblateRandom,
        InterventionKind::AblateNull,
        InterventionKind::InjectTheory,
        InterventionKind::InjectRandom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InterventionKind::AblateUserPredictive => "ablate_user_predictive",
            InterventionKind::AblateRandom => "ablate_random",
            InterventionKind::AblateNull => "ablate_null",
            InterventionKind::InjectTheory => "inject_theory",
            InterventionKind::InjectRandom => "inject_random",
        }
    }

    pub fn is_injection(self) -> bool {
        matches!(
            self,
            InterventionKind::InjectTheory | InterventionKind::InjectRandom
        )
    }
}

impl std::str::FromStr for InterventionKind {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AuditError::Domain(format!("unknown intervention kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationControl {
    RandomMatched,
    NullComponent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionDirection {
    Theory,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub kind: InterventionKind,
    pub pre_decision: usize,
    pub post_decision: usize,
    /// The decision moved onto the sensor answer.
    pub flipped: bool,
    /// Norm of the vector added to or removed from the joint state.
    pub magnitude: f64,
    pub seed: Option<u64>,
    /// Sensor-vs-user margin after the intervention.
    pub post_margin: f64,
}

fn finish(
    record: &ConflictRecord,
    unemb: &EffectiveUnembedding,
    kind: InterventionKind,
    modified: Vec<f64>,
    magnitude: f64,
    seed: Option<u64>,
) -> Result<InterventionResult> {
    let state = ResidualState::new(modified)?;
    let post = Decision::of(&state, unemb, &[record.sensor_answer, record.user_answer])?.token;
    let pre = record.decisions.joint.token;
    Ok(InterventionResult {
        kind,
        pre_decision: pre,
        post_decision: post,
        flipped: pre != record.sensor_answer && post == record.sensor_answer,
        magnitude,
        seed,
        post_margin: pairwise_margin(&state, unemb, record.sensor_answer, record.user_answer)?,
    })
}

/// Seeded unit vector, uniform over the tangent space at the subspace's
/// base direction.
pub fn random_tangent_unit(subspace: &AnswerSubspace, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a Gaussian draw lands exactly on the base direction with probability 0
    for _ in 0..8 {
        let v = subspace.tangent_project(&linalg::gaussian(&mut rng, subspace.hidden_dim()));
        let n = norm(&v);
        if n > 0.0 {
            return Ok(linalg::scale(&v, 1.0 / n));
        }
    }
    Err(AuditError::Domain(
        "no nonzero tangent direction (hidden size 1?)".into(),
    ))
}

/// Removes the user context's predictive component from the joint state.
pub fn ablate_user_predictive(
    record: &ConflictRecord,
    unemb: &EffectiveUnembedding,
) -> Result<InterventionResult> {
    let component = &record.decomposed.user_only.predictive;
    let modified = linalg::sub(record.states.joint.h(), component);
    finish(
        record,
        unemb,
        InterventionKind::AblateUserPredictive,
        modified,
        norm(component),
        None,
    )
}

/// Control ablations: a norm-matched random tangent vector, or the user
/// context's null-space component.
pub fn ablate_control(
    record: &ConflictRecord,
    subspace: &AnswerSubspace,
    unemb: &EffectiveUnembedding,
    control: AblationControl,
    seed: u64,
) -> Result<InterventionResult> {
    if !subspace.matches_base(&record.states.baseline) {
        return Err(AuditError::BaseMismatch);
    }
    let (kind, removed, seed) = match control {
        AblationControl::RandomMatched => {
            let size = norm(&record.decomposed.user_only.predictive);
            let v = linalg::scale(&random_tangent_unit(subspace, seed)?, size);
            (InterventionKind::AblateRandom, v, Some(seed))
        }
        AblationControl::NullComponent => (
            InterventionKind::AblateNull,
            record.decomposed.user_only.nullspace.clone(),
            None,
        ),
    };
    let modified = linalg::sub(record.states.joint.h(), &removed);
    finish(record, unemb, kind, modified, norm(&removed), seed)
}

/// Smallest step along `d*/‖d*‖` that lifts a margin `m` to zero under the
/// linear response `Δm = (sqrt(d)/r) ‖d*‖ λ`, times `safety`.
pub fn required_injection_magnitude(
    observed_joint_margin: f64,
    direction: &[f64],
    r: f64,
    d: usize,
    safety: f64,
) -> Result<f64> {
    let dn = norm(direction);
    if dn == 0.0 {
        return Err(AuditError::DegenerateDirection);
    }
    if !(safety >= 1.0) {
        return Err(AuditError::Domain(format!(
            "safety factor {safety} below 1"
        )));
    }
    if !(r > 0.0) || d == 0 {
        return Err(AuditError::Domain(format!("norm {r}, dimension {d}")));
    }
    Ok(safety * (-observed_joint_margin).max(0.0) * r / ((d as f64).sqrt() * dn))
}

/// Adds `magnitude` along the decision direction (theory) or along a seeded
/// random tangent direction (control) to the joint state.
pub fn inject(
    record: &ConflictRecord,
    subspace: &AnswerSubspace,
    unemb: &EffectiveUnembedding,
    direction: InjectionDirection,
    magnitude: f64,
    seed: u64,
) -> Result<InterventionResult> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(AuditError::Domain(format!(
            "injection magnitude {magnitude}"
        )));
    }
    if !subspace.matches_base(&record.states.baseline) {
        return Err(AuditError::BaseMismatch);
    }
    let (kind, unit, seed) = match direction {
        InjectionDirection::Theory => {
            let d_star = decision_direction(subspace, record.sensor_answer, record.user_answer)?;
            let n = norm(&d_star);
            if n == 0.0 {
                return Err(AuditError::DegenerateDirection);
            }
            (
                InterventionKind::InjectTheory,
                linalg::scale(&d_star, 1.0 / n),
                None,
            )
        }
        InjectionDirection::Random => (
            InterventionKind::InjectRandom,
            random_tangent_unit(subspace, seed)?,
            Some(seed),
        ),
    };
    let mut modified = record.states.joint.h().to_vec();
    linalg::axpy(&mut modified, magnitude, &unit);
    finish(record, unemb, kind, modified, magnitude, seed)
}

/// Theory-guided injection at the default magnitude: the linearization is
/// taken at the joint state itself, so its norm sets the response scale.
pub fn theory_injection_magnitude(
    record: &ConflictRecord,
    subspace: &AnswerSubspace,
    unemb: &EffectiveUnembedding,
    safety: f64,
) -> Result<f64> {
    let d_star = decision_direction(subspace, record.sensor_answer, record.user_answer)?;
    let m = pairwise_margin(
        &record.states.joint,
        unemb,
        record.sensor_answer,
        record.user_answer,
    )?;
    required_injection_magnitude(
        m,
        &d_star,
        record.states.joint.norm(),
        record.hidden_dim(),
        safety,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(c: Condition, states: Vec<Vec<f64>>) -> LayerTrace {
        LayerTrace::new("t", c, states).unwrap()
    }

    #[test]
    fn trace_validation() {
        assert!(LayerTrace::new("t", Condition::Joint, vec![]).is_err());
        assert!(LayerTrace::new("t", Condition::Joint, vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(LayerTrace::new("t", Condition::Joint, vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn patching_identical_traces_is_noop() {
        let states = vec![vec![1.0, 0.5], vec![1.2, 0.1], vec![0.9, 0.4]];
        let j = trace(Condition::Joint, states.clone());
        let b = trace(Condition::Baseline, states);
        let u = EffectiveUnembedding::new(&[1.0, 0.0, 0.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        let imp = layer_importance(&j, &b, &u, 0, 1).unwrap();
        assert!(imp.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_layer_patch_swaps_one_write() {
        let b = trace(
            Condition::Baseline,
            vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![2.0, 1.0]],
        );
        // joint adds (0, 3) at layer 1
        let j = trace(
            Condition::Joint,
            vec![vec![1.0, 0.0], vec![1.0, 4.0], vec![2.0, 4.0]],
        );
        assert_eq!(patched_final_state(&j, &b, &[1]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(patched_final_state(&j, &b, &[0]).unwrap(), vec![2.0, 4.0]);
        assert_eq!(
            patched_final_state(&j, &b, &[0, 1, 2]).unwrap(),
            vec![2.0, 1.0]
        );
        assert!(patched_final_state(&j, &b, &[3]).is_err());
    }

    #[test]
    fn gac_endpoints_are_exact() {
        let b = trace(
            Condition::Baseline,
            vec![
                vec![0.1, 0.7, -0.3],
                vec![0.33, 0.2, 0.9],
                vec![1.1, -0.4, 0.05],
            ],
        );
        let j = trace(
            Condition::Joint,
            vec![
                vec![0.2, 0.5, -0.1],
                vec![0.13, 0.9, 0.7],
                vec![0.7, 0.3, 0.31],
            ],
        );
        assert_eq!(gac(&j, &b, &[1, 2], 1.0).unwrap(), j.final_state());
        assert_eq!(gac(&j, &b, &[0, 1, 2], 0.0).unwrap(), b.final_state());
        assert!(gac(&j, &b, &[1], 1.5).is_err());
        assert!(gac(&j, &b, &[7], 0.5).is_err());
        // affine in alpha
        let a = gac(&j, &b, &[1], 0.25).unwrap();
        let lo = gac(&j, &b, &[1], 0.0).unwrap();
        let hi = gac(&j, &b, &[1], 1.0).unwrap();
        for i in 0..3 {
            assert!((a[i] - (0.75 * lo[i] + 0.25 * hi[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn injection_magnitude_examples() {
        let d_star = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(
            required_injection_magnitude(0.3, &d_star, 10.0, 4, 1.0).unwrap(),
            0.0
        );
        assert_eq!(
            required_injection_magnitude(-2.0, &d_star, 10.0, 4, 1.0).unwrap(),
            10.0
        );
        assert!(
            (required_injection_magnitude(-2.0, &d_star, 10.0, 4, 1.1).unwrap() - 11.0).abs()
                < 1e-12
        );
        assert!(matches!(
            required_injection_magnitude(-2.0, &[0.0; 4], 10.0, 4, 1.0),
            Err(AuditError::DegenerateDirection)
        ));
        assert!(required_injection_magnitude(-2.0, &d_star, 10.0, 4, 0.9).is_err());
    }

    #[test]
    fn rank_layers_orders_by_mean() {
        let order = rank_layers(&[vec![0.1, 0.5, 0.2], vec![0.3, 0.1, 0.2]]).unwrap();
        assert_eq!(order, vec![1, 0, 2]);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in InterventionKind::ALL {
            assert_eq!(k.as_str().parse::<InterventionKind>().unwrap(), k);
        }
        assert!("ablate_everything".parse::<InterventionKind>().is_err());
    }
}
