//! A synthetic reference model with planted context effects.
//!
//! The model is a readout testbed rather than a trained network. A residual
//! stream of `L` layers accumulates one write per layer: a prompt-driven
//! affine term shared by every condition, plus context writes at chosen
//! layers. The final state goes through an RMSNorm-style readout with gain
//! `gamma` and per-token biases, so logits follow
//! `z_k = sqrt(d) w̄_kᵀ û + b_k` exactly.
//!
//! Each conflict instance plants a sensor write and a user write with known
//! CIR and authority force, measured against the instance's own baseline.
//! In the joint condition the two contexts also interact through
//! `s * τ * tanh(δ_s ⊙ δ_u / τ)` (with `τ = r0 / sqrt(d)` and `s` the
//! nonlinearity strength), a second-order term in the perturbation size.
//!
//! Readout parameters are always rounded to f32 so that a dump of the model
//! reproduces them exactly. Layer states are rounded too unless
//! [`ReferenceModelConfig::f32_states`] is off.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::authority::{aai, decision_direction, ByCondition, Condition, ConflictRecord, Decision};
use crate::dumpio::{self, AnswerToken, ExperimentManifest, RawReadout, TensorSet};
use crate::error::{AuditError, Result};
use crate::geometry::{
    pairwise_margin, AnswerSubspace, EffectiveUnembedding, ResidualState, DEFAULT_RANK_TOL,
};
use crate::interventions::LayerTrace;
use crate::linalg::{self, dot, norm};

/// Width of the per-instance prompt feature vector.
const PROMPT_FEATURES: usize = 8;

/// Target mean logit of the two conflicting answers at baseline, keeping
/// them above the rest of the vocabulary.
const ANSWER_LIFT: f64 = 4.0;

/// Largest share of the baseline direction given to the answer rows.
const MAX_LIFT_WEIGHT: f64 = 0.8;

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub answer_count: usize,
    /// Strength `s` of the joint-condition interaction term.
    pub nonlinearity_strength: f64,
    pub seed: u64,
    /// Answer-token biases are drawn from `±answer_bias_spread`.
    #[serde(default)]
    pub answer_bias_spread: f64,
    /// Round stored layer states to f32, as a real dump would.
    #[serde(default = "default_true")]
    pub f32_states: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ReferenceModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 16,
            vocab_size: 32,
            answer_count: 4,
            nonlinearity_strength: 1.0,
            seed: 0,
            answer_bias_spread: 0.0,
            f32_states: true,
        }
    }
}

impl ReferenceModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(AuditError::Config(m));
        if self.answer_count < 2 {
            return err(format!("answer_count {} < 2", self.answer_count));
        }
        if self.hidden_dim < self.answer_count + 2 {
            return err(format!("hidden_dim {} < answer_count + 2", self.hidden_dim));
        }
        if self.num_layers < 2 {
            return err(format!("num_layers {} < 2", self.num_layers));
        }
        if self.vocab_size < self.answer_count {
            return err(format!(
                "vocab_size {} < answer_count {}",
                self.vocab_size, self.answer_count
            ));
        }
        if !(self.nonlinearity_strength >= 0.0 && self.nonlinearity_strength.is_finite()) {
            return err(format!(
                "nonlinearity_strength {}",
                self.nonlinearity_strength
            ));
        }
        if !(self.answer_bias_spread >= 0.0 && self.answer_bias_spread.is_finite()) {
            return err(format!("answer_bias_spread {}", self.answer_bias_spread));
        }
        Ok(())
    }
}

/// Planted ground truth for one conflict instance.
///
/// Answers are positions in the model's answer list, not token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConflictSpec {
    pub sensor_answer: usize,
    pub user_answer: usize,
    pub target_cir_sensor: f64,
    pub target_cir_user: f64,
    pub force_sensor: f64,
    pub force_user: f64,
    /// Linear interaction force added in the joint condition on top of the
    /// model's nonlinear term.
    pub interaction: f64,
    /// Baseline margin `m(a_s, a_u)`. Ignored when `norm_preserving`.
    pub baseline_margin: f64,
    pub write_layer_sensor: usize,
    pub write_layer_user: usize,
    /// Tangential size of each single-context write, relative to `r0`.
    pub epsilon_scale: f64,
    /// Radial size of each single-context write relative to its tangential
    /// size. Ignored when `norm_preserving`.
    pub radial_fraction: f64,
    /// Keep every final state at norm `r0` and make the baseline neutral
    /// between the two answers (`m0 = b_s − b_u`). Under an affine model
    /// this makes the first-order joint margin exact.
    pub norm_preserving: bool,
}

impl PlantedConflictSpec {
    /// A spec with no context effect at all.
    pub fn null(sensor_answer: usize, user_answer: usize, num_layers: usize) -> Self {
        Self {
            sensor_answer,
            user_answer,
            target_cir_sensor: 0.0,
            target_cir_user: 0.0,
            force_sensor: 0.0,
            force_user: 0.0,
            interaction: 0.0,
            baseline_margin: 0.0,
            write_layer_sensor: num_layers / 2,
            write_layer_user: num_layers - 1,
            epsilon_scale: 0.0,
            radial_fraction: 0.0,
            norm_preserving: false,
        }
    }
}

/// Construction-side facts about an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub instance_id: String,
    pub seed: u64,
    pub spec: PlantedConflictSpec,
    pub r0: f64,
    /// Sensor, user and joint-only writes exactly as added.
    pub sensor_write: Vec<f64>,
    pub user_write: Vec<f64>,
    pub interaction_write: Vec<f64>,
    /// Forces and AAI of the planted writes, before any rounding of states.
    pub planted_force_sensor: f64,
    pub planted_force_user: f64,
    pub planted_interaction: f64,
    pub planted_aai: f64,
    /// Full-vocabulary decisions of the exact forward pass per condition.
    pub decisions: ByCondition<usize>,
    /// `m(a_s, a_u)` of the exact joint state.
    pub exact_joint_margin: f64,
}

/// One generated instance: the record the audit sees plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub record: ConflictRecord,
    pub subspace: AnswerSubspace,
    pub traces: ByCondition<LayerTrace>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// User claims dominate: low sensor CIR, high user CIR, `F_u > F_s`.
    HarLike,
    /// Weaker, overlapping dominance of the user claim.
    CasasLike,
    /// Sensor dominates: sensor CIR above user CIR, `F_s > F_u`.
    HealthLike,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::HarLike, Regime::CasasLike, Regime::HealthLike];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::HarLike => "har_like",
            Regime::CasasLike => "casas_like",
            Regime::HealthLike => "health_like",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| AuditError::Config(format!("unknown regime `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    config: ReferenceModelConfig,
    readout: RawReadout,
    unembedding: EffectiveUnembedding,
    answer_token_ids: Vec<usize>,
    /// Per layer: `d × PROMPT_FEATURES` mixing matrix, row-major.
    mix: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
}

pub fn build_reference_model(config: &ReferenceModelConfig) -> Result<ReferenceModel> {
    config.validate()?;
    let d = config.hidden_dim;
    let v = config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let row_scale = 1.0 / (d as f64).sqrt();

    let rows: Vec<f64> = linalg::gaussian(&mut rng, v * d)
        .into_iter()
        .map(|x| round_f32(x * row_scale))
        .collect();
    let gamma: Vec<f64> = linalg::gaussian(&mut rng, d)
        .into_iter()
        .map(|x| round_f32(1.0 + 0.1 * x))
        .collect();
    let mut answer_token_ids = sample(&mut rng, v, config.answer_count).into_vec();
    answer_token_ids.sort_unstable();
    let biases: Vec<f64> = (0..v)
        .map(|t| {
            let b = if answer_token_ids.contains(&t) {
                config.answer_bias_spread * rng.random_range(-1.0..=1.0)
            } else {
                -1.0 + 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            };
            round_f32(b)
        })
        .collect();

    let mix_scale = 1.0 / (PROMPT_FEATURES as f64).sqrt();
    let mix = (0..config.num_layers)
        .map(|_| {
            linalg::gaussian(&mut rng, d * PROMPT_FEATURES)
                .into_iter()
                .map(|x| x * mix_scale)
                .collect()
        })
        .collect();
    let offsets = (0..config.num_layers)
        .map(|_| linalg::scale(&linalg::gaussian(&mut rng, d), 0.5))
        .collect();

    let unembedding = EffectiveUnembedding::new(&rows, &gamma, &biases)?;
    Ok(ReferenceModel {
        config: config.clone(),
        readout: RawReadout {
            rows,
            gamma,
            biases,
        },
        unembedding,
        answer_token_ids,
        mix,
        offsets,
    })
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| linalg::scale(v, 1.0 / n))
}

/// Removes from `v` its components along each (orthonormal) vector in `basis`.
fn orthogonalize(v: &mut [f64], basis: &[&[f64]]) {
    // twice, for numerical orthogonality
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            linalg::axpy(v, -c, b);
        }
    }
}

/// Seeded unit vector in the tangent space at the subspace's base direction
/// that is orthogonal to every vector in `exclude` (assumed orthonormal and
/// tangent) and, when `inside` is set, lies in the answer subspace, otherwise
/// in its complement.
fn random_unit_in<R: Rng>(
    rng: &mut R,
    subspace: &AnswerSubspace,
    inside: bool,
    exclude: &[&[f64]],
) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let g = subspace.tangent_project(&linalg::gaussian(rng, subspace.hidden_dim()));
        let p = subspace.project(&g);
        let mut v = if inside { p } else { linalg::sub(&g, &p) };
        orthogonalize(&mut v, exclude);
        if inside {
            v = subspace.project(&v);
        } else {
            let back = subspace.project(&v);
            linalg::axpy(&mut v, -1.0, &back);
        }
        v = subspace.tangent_project(&v);
        if let Some(u) = unit(&v) {
            if norm(&v) > 1e-6 {
                return Some(u);
            }
        }
    }
    None
}

/// A tangential perturbation of norm `size` whose CIR is `target_cir` and
/// whose predictive part has inner product `target_inner` with `direction`.
///
/// The predictive part is `α d̂ + β v` with `v` a seeded unit vector in the
/// answer subspace orthogonal to `d̂`; the rest is a seeded null-space vector.
pub fn plant_perturbation(
    subspace: &AnswerSubspace,
    direction: &[f64],
    target_cir: f64,
    target_inner: f64,
    size: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if direction.len() != subspace.hidden_dim() {
        return Err(AuditError::Shape(format!(
            "direction has length {}, subspace has {}",
            direction.len(),
            subspace.hidden_dim()
        )));
    }
    if !(0.0..=1.0).contains(&target_cir) {
        return Err(AuditError::Config(format!("target CIR {target_cir}")));
    }
    if !(size >= 0.0 && size.is_finite()) || !target_inner.is_finite() {
        return Err(AuditError::Config(format!(
            "perturbation size {size}, inner product {target_inner}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_hat = unit(&subspace.project(&subspace.tangent_project(direction)));
    let predictive_norm = target_cir * size;
    let null_norm = (1.0 - target_cir * target_cir).max(0.0).sqrt() * size;

    let mut out = vec![0.0; subspace.hidden_dim()];
    let alpha = match &d_hat {
        Some(_) => target_inner / norm(direction),
        None if target_inner == 0.0 => 0.0,
        None => return Err(AuditError::DegenerateDirection),
    };
    if alpha.abs() > predictive_norm * (1.0 + 1e-12) {
        return Err(AuditError::Config(format!(
            "inner product {target_inner} needs a predictive norm of at least {}, \
             but CIR {target_cir} at size {size} allows {predictive_norm}",
            alpha.abs()
        )));
    }
    if let Some(d_hat) = &d_hat {
        linalg::axpy(&mut out, alpha, d_hat);
    }
    let beta = (predictive_norm * predictive_norm - alpha * alpha)
        .max(0.0)
        .sqrt();
    if beta > 0.0 {
        let exclude: Vec<&[f64]> = d_hat.iter().map(Vec::as_slice).collect();
        let v = random_unit_in(&mut rng, subspace, true, &exclude).ok_or_else(|| {
            AuditError::Config("answer subspace has no room orthogonal to d*".into())
        })?;
        linalg::axpy(&mut out, beta, &v);
    }
    if null_norm > 0.0 {
        let v = random_unit_in(&mut rng, subspace, false, &[])
            .ok_or_else(|| AuditError::Config("tangent space has no null-space room".into()))?;
        linalg::axpy(&mut out, null_norm, &v);
    }
    Ok(out)
}

impl ReferenceModel {
    pub fn config(&self) -> &ReferenceModelConfig {
        &self.config
    }

    pub fn unembedding(&self) -> &EffectiveUnembedding {
        &self.unembedding
    }

    pub fn readout(&self) -> &RawReadout {
        &self.readout
    }

    pub fn answer_token_ids(&self) -> &[usize] {
        &self.answer_token_ids
    }

    /// Labels "A", "B", ... for the answer tokens in order.
    pub fn answer_labels(&self) -> Vec<String> {
        (0..self.answer_token_ids.len()).map(answer_label).collect()
    }

    pub fn answer_tokens(&self) -> Vec<AnswerToken> {
        self.answer_token_ids
            .iter()
            .enumerate()
            .map(|(i, &t)| AnswerToken {
                label: answer_label(i),
                token_id: t,
                rendering: None,
            })
            .collect()
    }

    fn answer_gap(&self, sensor: usize, user: usize) -> Vec<f64> {
        let s = self.answer_token_ids[sensor];
        let u = self.answer_token_ids[user];
        linalg::sub(self.unembedding.row(s), self.unembedding.row(u))
    }

    /// `b_s − b_u` for two answer positions.
    pub fn bias_gap(&self, sensor: usize, user: usize) -> f64 {
        self.unembedding.bias(self.answer_token_ids[sensor])
            - self.unembedding.bias(self.answer_token_ids[user])
    }

    /// Upper bound on the force a single write of tangential size
    /// `epsilon * r0` and CIR `cir` can exert between two answers:
    /// `sqrt(d) ‖w̄_s − w̄_u‖ cir epsilon`.
    pub fn force_bound(&self, sensor: usize, user: usize, cir: f64, epsilon: f64) -> f64 {
        (self.config.hidden_dim as f64).sqrt()
            * norm(&self.answer_gap(sensor, user))
            * cir
            * epsilon
    }

    fn check_spec(&self, spec: &PlantedConflictSpec) -> Result<()> {
        let k = self.answer_token_ids.len();
        let l = self.config.num_layers;
        let err = |m: String| Err(AuditError::Config(m));
        if spec.sensor_answer >= k || spec.user_answer >= k {
            return err(format!(
                "answer positions {} / {} for {k} answers",
                spec.sensor_answer, spec.user_answer
            ));
        }
        if spec.sensor_answer == spec.user_answer {
            return Err(AuditError::NoConflict(
                self.answer_token_ids[spec.sensor_answer],
            ));
        }
        if spec.write_layer_sensor >= l || spec.write_layer_user >= l {
            return err(format!(
                "write layers {} / {} for {l} layers",
                spec.write_layer_sensor, spec.write_layer_user
            ));
        }
        let finite = [
            spec.force_sensor,
            spec.force_user,
            spec.interaction,
            spec.baseline_margin,
            spec.radial_fraction,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return err("non-finite spec value".into());
        }
        if !(spec.epsilon_scale >= 0.0 && spec.epsilon_scale.is_finite()) {
            return err(format!("epsilon_scale {}", spec.epsilon_scale));
        }
        for cir in [spec.target_cir_sensor, spec.target_cir_user] {
            if !(0.0..=1.0).contains(&cir) {
                return err(format!("target CIR {cir}"));
            }
        }
        Ok(())
    }

    /// Baseline unit direction with the requested margin between the two
    /// answers and both lifted above the rest of the vocabulary.
    fn baseline_direction<R: Rng>(
        &self,
        rng: &mut R,
        spec: &PlantedConflictSpec,
    ) -> Result<Vec<f64>> {
        let sqrt_d = (self.config.hidden_dim as f64).sqrt();
        let s = self.answer_token_ids[spec.sensor_answer];
        let u = self.answer_token_ids[spec.user_answer];
        let gap = self.answer_gap(spec.sensor_answer, spec.user_answer);
        let gap_hat = unit(&gap).ok_or(AuditError::DegenerateDirection)?;
        let gap_norm = norm(&gap);
        let bias_gap = self.bias_gap(spec.sensor_answer, spec.user_answer);

        let a = if spec.norm_preserving {
            0.0
        } else {
            (spec.baseline_margin - bias_gap) / (sqrt_d * gap_norm)
        };
        if a.abs() > 0.9 {
            return Err(AuditError::Config(format!(
                "baseline margin {} is out of reach",
                spec.baseline_margin
            )));
        }

        let mut sum = linalg::add(self.unembedding.row(s), self.unembedding.row(u));
        let sum_along_gap = dot(&sum, &gap_hat);
        orthogonalize(&mut sum, &[&gap_hat]);
        let sum_hat = unit(&sum);
        let b = match &sum_hat {
            Some(_) => {
                let needed = 2.0 * ANSWER_LIFT
                    - self.unembedding.bias(s)
                    - self.unembedding.bias(u)
                    - sqrt_d * a * sum_along_gap;
                (needed / (sqrt_d * norm(&sum)))
                    .clamp(0.0, MAX_LIFT_WEIGHT)
                    .min((1.0 - a * a).max(0.0).sqrt() * MAX_LIFT_WEIGHT)
            }
            None => 0.0,
        };
        let c = (1.0 - a * a - b * b).max(0.0).sqrt();

        let mut exclude: Vec<&[f64]> = vec![&gap_hat];
        if let Some(h) = &sum_hat {
            exclude.push(h);
        }
        let mut g = linalg::gaussian(rng, self.config.hidden_dim);
        orthogonalize(&mut g, &exclude);
        let g_hat = unit(&g).ok_or_else(|| AuditError::Config("hidden_dim too small".into()))?;

        let mut dir = linalg::scale(&gap_hat, a);
        if let Some(h) = &sum_hat {
            linalg::axpy(&mut dir, b, h);
        }
        linalg::axpy(&mut dir, c, &g_hat);
        Ok(dir)
    }

    /// Baseline layer writes summing exactly to `h0`: a prompt-driven affine
    /// write per layer plus an equal share of the remainder.
    fn baseline_writes<R: Rng>(&self, rng: &mut R, h0: &[f64]) -> Vec<Vec<f64>> {
        let d = self.config.hidden_dim;
        let l = self.config.num_layers;
        let x = linalg::gaussian(rng, PROMPT_FEATURES);
        let mut writes: Vec<Vec<f64>> = (0..l)
            .map(|layer| {
                let m = &self.mix[layer];
                (0..d)
                    .map(|i| dot(&m[i * PROMPT_FEATURES..(i + 1) * PROMPT_FEATURES], &x))
                    .zip(&self.offsets[layer])
                    .map(|(a, c)| a + c)
                    .collect()
            })
            .collect();
        let mut total = vec![0.0; d];
        for w in &writes {
            linalg::axpy(&mut total, 1.0, w);
        }
        let share = linalg::scale(&linalg::sub(h0, &total), 1.0 / l as f64);
        for w in &mut writes {
            linalg::axpy(w, 1.0, &share);
        }
        writes
    }

    fn trace(
        &self,
        id: &str,
        condition: Condition,
        base: &[Vec<f64>],
        extra: &[(usize, &[f64])],
    ) -> Result<LayerTrace> {
        let mut state = vec![0.0; self.config.hidden_dim];
        let mut states = Vec::with_capacity(base.len());
        for (layer, w) in base.iter().enumerate() {
            linalg::axpy(&mut state, 1.0, w);
            for (l, e) in extra {
                if *l == layer {
                    linalg::axpy(&mut state, 1.0, e);
                }
            }
            states.push(if self.config.f32_states {
                state.iter().map(|&x| round_f32(x)).collect()
            } else {
                state.clone()
            });
        }
        LayerTrace::new(id, condition, states)
    }

    /// Runs the four conditions for one planted instance.
    pub fn run_conditions(
        &self,
        instance_id: &str,
        spec: &PlantedConflictSpec,
        seed: u64,
    ) -> Result<SyntheticInstance> {
        self.check_spec(spec)?;
        let d = self.config.hidden_dim;
        let sqrt_d = (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r0 = sqrt_d * rng.random_range(0.75..1.5);

        let dir = self.baseline_direction(&mut rng, spec)?;
        let mut h0 = linalg::scale(&dir, r0);
        if self.config.f32_states {
            h0.iter_mut().for_each(|x| *x = round_f32(*x));
        }
        let base_state = ResidualState::new(h0.clone())?;
        let r0 = base_state.norm();
        let u0 = base_state.unit_dir().to_vec();
        let s_tok = self.answer_token_ids[spec.sensor_answer];
        let u_tok = self.answer_token_ids[spec.user_answer];
        let plant_space = AnswerSubspace::build(
            &self.unembedding,
            &base_state,
            &self.answer_token_ids,
            DEFAULT_RANK_TOL,
        )?;
        let d_star = decision_direction(&plant_space, s_tok, u_tok)?;
        let force_scale = sqrt_d / r0;

        let size = spec.epsilon_scale * r0;
        let t_s = plant_perturbation(
            &plant_space,
            &d_star,
            spec.target_cir_sensor,
            spec.force_sensor / force_scale,
            size,
            rng.random(),
        )?;
        let t_u = plant_perturbation(
            &plant_space,
            &d_star,
            spec.target_cir_user,
            -spec.force_user / force_scale,
            size,
            rng.random(),
        )?;

        let dd = dot(&d_star, &d_star);
        let mut inter = if spec.interaction != 0.0 {
            if dd == 0.0 {
                return Err(AuditError::DegenerateDirection);
            }
            linalg::scale(&d_star, spec.interaction / (force_scale * dd))
        } else {
            vec![0.0; d]
        };
        let strength = self.config.nonlinearity_strength;
        if strength > 0.0 {
            let tau = r0 / sqrt_d;
            for i in 0..d {
                inter[i] += strength * tau * (t_s[i] * t_u[i] / tau).tanh();
            }
        }

        let (w_s, w_u, w_i) = if spec.norm_preserving {
            // radial parts chosen so every final norm equals r0
            let radial = |t: &[f64]| -> Result<f64> {
                let tt = dot(t, t);
                if tt >= r0 * r0 {
                    return Err(AuditError::Config(format!(
                        "tangential write of norm {} exceeds r0 = {r0}",
                        tt.sqrt()
                    )));
                }
                Ok((r0 * r0 - tt).sqrt() - r0)
            };
            let inter_t = linalg::sub(&inter, &linalg::scale(&u0, dot(&inter, &u0)));
            let t_j = linalg::add(&linalg::add(&t_s, &t_u), &inter_t);
            let (rs, ru, rj) = (radial(&t_s)?, radial(&t_u)?, radial(&t_j)?);
            let mut w_s = t_s.clone();
            linalg::axpy(&mut w_s, rs, &u0);
            let mut w_u = t_u.clone();
            linalg::axpy(&mut w_u, ru, &u0);
            let mut w_i = inter_t;
            linalg::axpy(&mut w_i, rj - rs - ru, &u0);
            (w_s, w_u, w_i)
        } else {
            let mut w_s = t_s.clone();
            linalg::axpy(&mut w_s, spec.radial_fraction * norm(&t_s), &u0);
            let mut w_u = t_u.clone();
            linalg::axpy(&mut w_u, spec.radial_fraction * norm(&t_u), &u0);
            (w_s, w_u, inter)
        };

        let base_writes = self.baseline_writes(&mut rng, &h0);
        let (ls, lu) = (spec.write_layer_sensor, spec.write_layer_user);
        let li = ls.max(lu);
        let traces = ByCondition {
            baseline: self.trace(instance_id, Condition::Baseline, &base_writes, &[])?,
            sensor_only: self.trace(
                instance_id,
                Condition::SensorOnly,
                &base_writes,
                &[(ls, &w_s)],
            )?,
            user_only: self.trace(
                instance_id,
                Condition::UserOnly,
                &base_writes,
                &[(lu, &w_u)],
            )?,
            joint: self.trace(
                instance_id,
                Condition::Joint,
                &base_writes,
                &[(ls, &w_s), (lu, &w_u), (li, &w_i)],
            )?,
        };

        let states = traces.try_map(|_, t| ResidualState::new(t.final_state().to_vec()))?;
        let subspace = AnswerSubspace::build(
            &self.unembedding,
            &states.baseline,
            &self.answer_token_ids,
            DEFAULT_RANK_TOL,
        )?;
        let record = ConflictRecord::new(
            instance_id,
            states,
            s_tok,
            u_tok,
            &self.unembedding,
            &subspace,
        )?;

        // planted quantities from the exact writes and the planting subspace
        let predictive_force = |w: &[f64]| {
            force_scale
                * dot(
                    &d_star,
                    &plant_space.project(&plant_space.tangent_project(w)),
                )
        };
        let planted_force_sensor = predictive_force(&w_s);
        let planted_force_user = -predictive_force(&w_u);
        let planted_interaction = predictive_force(&w_i);

        let exact = |c: Condition| -> Result<ResidualState> {
            let mut h = h0.clone();
            if matches!(c, Condition::SensorOnly | Condition::Joint) {
                linalg::axpy(&mut h, 1.0, &w_s);
            }
            if matches!(c, Condition::UserOnly | Condition::Joint) {
                linalg::axpy(&mut h, 1.0, &w_u);
            }
            if c == Condition::Joint {
                linalg::axpy(&mut h, 1.0, &w_i);
            }
            ResidualState::new(h)
        };
        let exact_states = ByCondition {
            baseline: exact(Condition::Baseline)?,
            sensor_only: exact(Condition::SensorOnly)?,
            user_only: exact(Condition::UserOnly)?,
            joint: exact(Condition::Joint)?,
        };
        let decisions = exact_states
            .try_map(|_, st| Decision::of(st, &self.unembedding, &self.answer_token_ids))?
            .map(|_, dcs| dcs.token);
        let exact_joint_margin =
            pairwise_margin(&exact_states.joint, &self.unembedding, s_tok, u_tok)?;

        let truth = GroundTruth {
            instance_id: instance_id.to_string(),
            seed,
            spec: spec.clone(),
            r0,
            sensor_write: w_s,
            user_write: w_u,
            interaction_write: w_i,
            planted_force_sensor,
            planted_force_user,
            planted_interaction,
            planted_aai: aai(planted_force_sensor, planted_force_user).value,
            decisions,
            exact_joint_margin,
        };
        Ok(SyntheticInstance {
            record,
            subspace,
            traces,
            truth,
        })
    }

    /// Runs many specs in parallel; output keeps input order.
    pub fn run_many(
        &self,
        prefix: &str,
        specs: &[(PlantedConflictSpec, u64)],
    ) -> Result<Vec<SyntheticInstance>> {
        specs
            .par_iter()
            .enumerate()
            .map(|(i, (spec, seed))| self.run_conditions(&format!("{prefix}-{i:04}"), spec, *seed))
            .collect()
    }

    fn layer_in<R: Rng>(&self, rng: &mut R, lo: f64, hi: f64) -> usize {
        let l = self.config.num_layers as f64;
        let a = ((lo * l).floor() as usize).min(self.config.num_layers - 1);
        let b = ((hi * l).ceil() as usize).clamp(a + 1, self.config.num_layers);
        rng.random_range(a..b)
    }

    /// First layer of the final ~20% of the stack.
    pub fn late_layer_start(&self) -> usize {
        let l = self.config.num_layers;
        ((0.8 * l as f64).floor() as usize).min(l - 1)
    }

    fn answer_pair<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let k = self.answer_token_ids.len();
        let s = rng.random_range(0..k);
        let u = (s + rng.random_range(1..k)) % k;
        (s, u)
    }

    fn regime_spec<R: Rng>(&self, rng: &mut R, regime: Regime) -> PlantedConflictSpec {
        let (s, u) = self.answer_pair(rng);
        let eps = rng.random_range(0.2..0.4);
        let (cir_s, cir_u) = match regime {
            Regime::HarLike => (rng.random_range(0.03..0.08), rng.random_range(0.07..0.17)),
            Regime::CasasLike => (rng.random_range(0.05..0.10), rng.random_range(0.06..0.12)),
            Regime::HealthLike => (rng.random_range(0.03..0.06), rng.random_range(0.02..0.035)),
        };
        let max_s = self.force_bound(s, u, cir_s, eps);
        let max_u = self.force_bound(s, u, cir_u, eps);
        let (f_s, f_u, m0) = match regime {
            Regime::HarLike | Regime::CasasLike => {
                let (ratio, lean) = if regime == Regime::HarLike {
                    (rng.random_range(0.1..0.7), rng.random_range(-0.3..0.9))
                } else {
                    (rng.random_range(0.4..0.95), rng.random_range(-0.2..0.9))
                };
                let f_u = rng.random_range(0.5..0.8) * max_u;
                let f_s = (rng.random_range(0.1..0.6) * max_s).min(ratio * f_u);
                (f_s, f_u, lean * (f_u - f_s))
            }
            Regime::HealthLike => {
                let f_s = rng.random_range(0.5..0.8) * max_s;
                let f_u =
                    (rng.random_range(0.1..0.6) * max_u).min(rng.random_range(0.1..0.7) * f_s);
                (f_s, f_u, -rng.random_range(-0.3..0.9) * (f_s - f_u))
            }
        };
        let late = self.late_layer_start() as f64 / self.config.num_layers as f64;
        PlantedConflictSpec {
            sensor_answer: s,
            user_answer: u,
            target_cir_sensor: cir_s,
            target_cir_user: cir_u,
            force_sensor: f_s,
            force_user: f_u,
            interaction: 0.0,
            baseline_margin: m0,
            write_layer_sensor: self.layer_in(rng, 1.0 / 3.0, late),
            write_layer_user: self.layer_in(rng, late, 1.0),
            epsilon_scale: eps,
            radial_fraction: 0.1,
            norm_preserving: false,
        }
    }

    /// A seeded suite in one of the named regimes.
    pub fn generate_conflict_suite(
        &self,
        regime: Regime,
        count: usize,
        seed: u64,
    ) -> Result<Vec<SyntheticInstance>> {
        if count == 0 {
            return Err(AuditError::Config("suite count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<_> = (0..count)
            .map(|_| (self.regime_spec(&mut rng, regime), rng.random()))
            .collect();
        self.run_many(regime.as_str(), &specs)
    }

    /// Instances where the user write, placed at a single late layer, pulls
    /// the joint decision off the sensor answer: `m0 = −F_s + w F_u` with
    /// `w ∈ [0.25, 0.75]`. Every returned joint decision is wrong.
    pub fn inversion_suite(&self, count: usize, seed: u64) -> Result<Vec<SyntheticInstance>> {
        if count == 0 {
            return Err(AuditError::Config("suite count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let late = self.late_layer_start() as f64 / self.config.num_layers as f64;
        let mut kept: Vec<(PlantedConflictSpec, u64)> = Vec::with_capacity(count);
        // the interaction term can rescue the sensor answer, so draws are
        // rejected until `count` joint decisions are wrong
        for _ in 0..64 {
            let batch: Vec<_> = (0..count)
                .map(|_| {
                    let mut spec = self.regime_spec(&mut rng, Regime::HarLike);
                    let f_s = spec.force_sensor.min(0.6 * spec.force_user);
                    spec.force_sensor = f_s;
                    spec.baseline_margin = -f_s + rng.random_range(0.25..0.75) * spec.force_user;
                    spec.write_layer_sensor = self.layer_in(&mut rng, 0.25, late);
                    (spec, rng.random())
                })
                .collect();
            let runs = self.run_many("inversion", &batch)?;
            kept.extend(
                batch
                    .into_iter()
                    .zip(runs)
                    .filter(|(_, r)| r.truth.decisions.joint != r.record.sensor_answer)
                    .map(|(b, _)| b),
            );
            if kept.len() >= count {
                kept.truncate(count);
                return self.run_many("inversion", &kept);
            }
        }
        Err(AuditError::Config(
            "could not draw enough wrong joint decisions".into(),
        ))
    }

    /// Instances with forces of both signs and no regime structure, every
    /// write of tangential size `epsilon * r0`. With `norm_preserving` the
    /// first-order joint margin is exact under an affine model.
    pub fn fidelity_suite(
        &self,
        count: usize,
        epsilon: f64,
        norm_preserving: bool,
        seed: u64,
    ) -> Result<Vec<SyntheticInstance>> {
        if count == 0 {
            return Err(AuditError::Config("suite count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<_> = (0..count)
            .map(|_| {
                let (s, u) = self.answer_pair(&mut rng);
                let cir_s = rng.random_range(0.03..0.5);
                let cir_u = rng.random_range(0.03..0.5);
                let max_s = self.force_bound(s, u, cir_s, epsilon);
                let max_u = self.force_bound(s, u, cir_u, epsilon);
                let spec = PlantedConflictSpec {
                    sensor_answer: s,
                    user_answer: u,
                    target_cir_sensor: cir_s,
                    target_cir_user: cir_u,
                    force_sensor: rng.random_range(-0.8..0.8) * max_s,
                    force_user: rng.random_range(-0.8..0.8) * max_u,
                    interaction: rng.random_range(-0.2..0.2) * max_s.min(max_u),
                    baseline_margin: rng.random_range(-1.0..1.0) * max_s.max(max_u),
                    write_layer_sensor: rng.random_range(0..self.config.num_layers),
                    write_layer_user: rng.random_range(0..self.config.num_layers),
                    epsilon_scale: epsilon,
                    radial_fraction: rng.random_range(-0.2..0.2),
                    norm_preserving,
                };
                (spec, rng.random())
            })
            .collect();
        self.run_many("fidelity", &specs)
    }

    /// Lays out instances as a dump plus manifest.
    pub fn export(
        &self,
        model_label: &str,
        instances: &[SyntheticInstance],
    ) -> Result<(TensorSet, ExperimentManifest)> {
        let labels = self.answer_labels();
        let label = |token: usize| {
            let i = self
                .answer_token_ids
                .iter()
                .position(|&t| t == token)
                .expect("record answers come from the model");
            labels[i].as_str()
        };
        dumpio::export(
            model_label,
            &self.readout,
            &self.answer_tokens(),
            instances.iter().map(|inst| dumpio::ExportInstance {
                instance_id: &inst.record.instance_id,
                sensor_label: label(inst.record.sensor_answer),
                user_label: label(inst.record.user_answer),
                traces: &inst.traces,
            }),
        )
    }
}

fn answer_label(i: usize) -> String {
    let mut s = String::new();
    let mut n = i;
    loop {
        s.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    s
}
