//! Batch runners that turn an assembled suite into reports: the authority
//! audit, the residual-state interventions with layer patching, and GAC.
//!
//! Rows are computed per instance in parallel and collected in manifest
//! order; every aggregate is a function of the emitted rows plus the run
//! options, so two runs on the same inputs serialize identically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::authority::{predict_joint_margin, TrustSummary};
use crate::dumpio::{AssembledInstance, AssembledSuite, SCHEMA_VERSION};
use crate::error::{AuditError, Result};
use crate::geometry::{expected_random_cir, DEFAULT_RANK_TOL};
use crate::interventions::{
    self, ablate_control, ablate_user_predictive, inject, layer_importance, rank_layers,
    theory_injection_magnitude, AblationControl, InjectionDirection, InterventionKind,
    InterventionResult, PatchCase, DEFAULT_GAC_LAYERS, DEFAULT_SAFETY,
};
use crate::stats::{self, TestResult};

/// Version of the JSON report layout and the CSV column order.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub rank_tol: f64,
    pub seed: u64,
    pub safety: f64,
    pub alpha: f64,
    /// Number of critical layers for GAC.
    pub layers: usize,
    /// Draws per instance for the seeded random controls.
    pub random_trials: usize,
    /// Injection magnitude override for sensitivity sweeps.
    pub fixed_magnitude: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            seed: 0,
            safety: DEFAULT_SAFETY,
            alpha: 0.1,
            layers: DEFAULT_GAC_LAYERS,
            random_trials: 1,
            fixed_magnitude: None,
        }
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub report_schema_version: u32,
    pub manifest_schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub model_label: String,
    pub instance_count: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub options: RunOptions,
    /// Layer patching replays recorded per-layer writes; exact only when
    /// later writes do not depend on earlier states.
    pub patch_semantics: String,
}

fn metadata(command: &str, suite: &AssembledSuite, options: &RunOptions) -> RunMetadata {
    let first = suite.instances.first();
    RunMetadata {
        report_schema_version: REPORT_SCHEMA_VERSION,
        manifest_schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        model_label: suite.model_label.clone(),
        instance_count: suite.instances.len(),
        hidden_dim: suite.unembedding.hidden_dim(),
        num_layers: first.map_or(0, |i| i.traces.joint.num_layers()),
        options: options.clone(),
        patch_semantics: "delta_replay".into(),
    }
}

fn check_options(options: &RunOptions) -> Result<()> {
    if !(0.0..=1.0).contains(&options.alpha) {
        return Err(AuditError::Domain(format!(
            "alpha = {} outside [0, 1]",
            options.alpha
        )));
    }
    if !(options.safety >= 1.0) {
        return Err(AuditError::Domain(format!(
            "safety = {} below 1",
            options.safety
        )));
    }
    if options.random_trials == 0 {
        return Err(AuditError::Domain(
            "random_trials must be at least 1".into(),
        ));
    }
    if let Some(m) = options.fixed_magnitude {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(AuditError::Domain(format!("fixed magnitude {m}")));
        }
    }
    Ok(())
}

fn nonempty(suite: &AssembledSuite) -> Result<()> {
    if suite.instances.is_empty() {
        return Err(AuditError::Manifest("manifest lists no instances".into()));
    }
    Ok(())
}

/// Where a decision landed relative to the conflict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Sensor,
    User,
    Other,
}

impl Outcome {
    fn of(token: usize, inst: &AssembledInstance) -> Self {
        if token == inst.record.sensor_answer {
            Outcome::Sensor
        } else if token == inst.record.user_answer {
            Outcome::User
        } else {
            Outcome::Other
        }
    }
}

/// One instance of the authority audit. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub instance_id: String,
    pub sensor_answer: usize,
    pub user_answer: usize,
    pub decision_baseline: usize,
    pub decision_sensor_only: usize,
    pub decision_user_only: usize,
    pub decision_joint: usize,
    /// Answer-restricted argmax of the joint state.
    pub decision_joint_answer: usize,
    pub joint_outcome: Outcome,
    pub cir_s: f64,
    pub cir_u: f64,
    pub cir_joint: f64,
    pub force_sensor: f64,
    pub force_user: f64,
    pub interaction: f64,
    pub aai: f64,
    pub aai_degenerate: bool,
    pub baseline_margin: f64,
    pub predicted_joint_margin: f64,
    pub observed_joint_margin: f64,
    pub inversion_error_predicted: bool,
    pub epsilon_s: f64,
    pub epsilon_u: f64,
    pub epsilon_joint: f64,
    pub cir_s_degenerate: bool,
    pub cir_u_degenerate: bool,
    pub beyond_first_order: bool,
    pub effective_rank: usize,
}

/// A statistic that could not be computed, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub test: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditAggregates {
    pub trust: TrustSummary,
    /// Sensor choices among sensor-or-user decisions against p = 0.5.
    pub trust_test: Option<TestResult>,
    pub aai_mean: Option<f64>,
    pub aai_std: Option<f64>,
    pub aai_n: usize,
    pub aai_degenerate_count: usize,
    /// AAI against zero; the effect size is Cohen's d.
    pub aai_test: Option<TestResult>,
    pub cir_s_mean: f64,
    pub cir_u_mean: f64,
    /// Paired CIR(sensor) vs CIR(user).
    pub cir_test: Option<TestResult>,
    /// `sqrt(K' / (d − 1))` at the smallest effective rank in the suite.
    pub random_cir_baseline: Option<f64>,
    /// Predicted vs observed joint margins.
    pub margin_correlation: Option<TestResult>,
    pub inversion_predicted_count: usize,
    pub beyond_first_order_count: usize,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub metadata: RunMetadata,
    pub rows: Vec<AuditRow>,
    pub aggregates: AuditAggregates,
}

fn audit_row(inst: &AssembledInstance, suite: &AssembledSuite) -> Result<AuditRow> {
    let rec = &inst.record;
    let rep = predict_joint_margin(rec, &inst.subspace, &suite.unembedding)?;
    let dec = &rec.decomposed;
    Ok(AuditRow {
        instance_id: rec.instance_id.clone(),
        sensor_answer: rec.sensor_answer,
        user_answer: rec.user_answer,
        decision_baseline: rec.decisions.baseline.token,
        decision_sensor_only: rec.decisions.sensor_only.token,
        decision_user_only: rec.decisions.user_only.token,
        decision_joint: rec.decisions.joint.token,
        decision_joint_answer: rec.decisions.joint.answer_token,
        joint_outcome: Outcome::of(rec.decisions.joint.token, inst),
        cir_s: dec.sensor_only.cir,
        cir_u: dec.user_only.cir,
        cir_joint: dec.joint.cir,
        force_sensor: rep.force_sensor,
        force_user: rep.force_user,
        interaction: rep.interaction,
        aai: rep.aai.value,
        aai_degenerate: rep.aai.degenerate,
        baseline_margin: rep.baseline_margin,
        predicted_joint_margin: rep.predicted_joint_margin,
        observed_joint_margin: rep.observed_joint_margin,
        inversion_error_predicted: rep.inversion_error_predicted,
        epsilon_s: dec.sensor_only.epsilon,
        epsilon_u: dec.user_only.epsilon,
        epsilon_joint: dec.joint.epsilon,
        cir_s_degenerate: dec.sensor_only.degenerate,
        cir_u_degenerate: dec.user_only.degenerate,
        beyond_first_order: dec.sensor_only.beyond_first_order()
            || dec.user_only.beyond_first_order()
            || dec.joint.beyond_first_order(),
        effective_rank: inst.subspace.effective_rank(),
    })
}

fn attempt(
    skipped: &mut Vec<Skipped>,
    test: &str,
    result: Result<TestResult>,
) -> Option<TestResult> {
    match result {
        Ok(r) => Some(r),
        Err(e) => {
            skipped.push(Skipped {
                test: test.into(),
                reason: e.to_string(),
            });
            None
        }
    }
}

/// Recomputes the audit aggregates from rows alone.
pub fn audit_aggregates(rows: &[AuditRow], hidden_dim: usize) -> Result<AuditAggregates> {
    let n = rows.len();
    let sensor = rows
        .iter()
        .filter(|r| r.joint_outcome == Outcome::Sensor)
        .count();
    let user = rows
        .iter()
        .filter(|r| r.joint_outcome == Outcome::User)
        .count();
    let trust = crate::authority::trust_from_counts(n, sensor, user)?;
    let mut skipped = Vec::new();

    let trust_test = attempt(
        &mut skipped,
        "trust_test",
        stats::binomial_sign_test(sensor, sensor + user, 0.5),
    );

    let aai: Vec<f64> = rows
        .iter()
        .filter(|r| !r.aai_degenerate)
        .map(|r| r.aai)
        .collect();
    let aai_ms = stats::mean_std(&aai);
    let aai_test = attempt(&mut skipped, "aai_test", stats::one_sample_t(&aai, 0.0));

    let mean = |f: fn(&AuditRow) -> f64| rows.iter().map(f).sum::<f64>() / n.max(1) as f64;
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.cir_s, r.cir_u)).collect();
    let cir_test = attempt(
        &mut skipped,
        "cir_test",
        stats::wilcoxon_signed_rank(&pairs),
    );

    let predicted: Vec<f64> = rows.iter().map(|r| r.predicted_joint_margin).collect();
    let observed: Vec<f64> = rows.iter().map(|r| r.observed_joint_margin).collect();
    let margin_correlation = attempt(
        &mut skipped,
        "margin_correlation",
        stats::pearson(&predicted, &observed),
    );

    let random_cir_baseline = rows
        .iter()
        .map(|r| r.effective_rank)
        .min()
        .and_then(|k| expected_random_cir(hidden_dim, k).ok());

    Ok(AuditAggregates {
        trust,
        trust_test,
        aai_mean: aai_ms.map(|(m, _)| m),
        aai_std: aai_ms.map(|(_, s)| s),
        aai_n: aai.len(),
        aai_degenerate_count: n - aai.len(),
        aai_test,
        cir_s_mean: mean(|r| r.cir_s),
        cir_u_mean: mean(|r| r.cir_u),
        cir_test,
        random_cir_baseline,
        margin_correlation,
        inversion_predicted_count: rows.iter().filter(|r| r.inversion_error_predicted).count(),
        beyond_first_order_count: rows.iter().filter(|r| r.beyond_first_order).count(),
        skipped,
    })
}

/// Decisions, CIR, forces, AAI and joint-margin predictions per instance,
/// with population statistics.
pub fn run_audit(suite: &AssembledSuite, options: &RunOptions) -> Result<AuditReport> {
    check_options(options)?;
    nonempty(suite)?;
    let rows = suite
        .instances
        .par_iter()
        .map(|inst| audit_row(inst, suite))
        .collect::<Result<Vec<_>>>()?;
    let aggregates = audit_aggregates(&rows, suite.unembedding.hidden_dim())?;
    Ok(AuditReport {
        metadata: metadata("audit", suite, options),
        rows,
        aggregates,
    })
}

/// One intervention trial. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub instance_id: String,
    pub kind: InterventionKind,
    pub trial: usize,
    pub seed: Option<u64>,
    pub sensor_answer: usize,
    pub pre_decision: usize,
    pub post_decision: usize,
    pub flipped: bool,
    pub magnitude: f64,
    pub post_margin: f64,
}

impl InterventionRow {
    fn new(inst: &AssembledInstance, trial: usize, r: InterventionResult) -> Self {
        Self {
            instance_id: inst.record.instance_id.clone(),
            kind: r.kind,
            trial,
            seed: r.seed,
            sensor_answer: inst.record.sensor_answer,
            pre_decision: r.pre_decision,
            post_decision: r.post_decision,
            flipped: r.flipped,
            magnitude: r.magnitude,
            post_margin: r.post_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSummary {
    pub kind: InterventionKind,
    pub trials: usize,
    /// Trials whose joint decision was not the sensor answer.
    pub eligible: usize,
    pub flips: usize,
    /// `flips / eligible`, absent when nothing was eligible.
    pub flip_rate: Option<f64>,
    pub pre_accuracy: f64,
    /// Fraction of trials deciding the sensor answer afterwards.
    pub post_accuracy: f64,
    pub mean_magnitude: f64,
}

/// One instance's margin change from patching one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub instance_id: String,
    pub layer: usize,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub mean_importance: Vec<f64>,
    pub ranked_layers: Vec<usize>,
    /// Sensor accuracy after patching the top `k` layers, for `k = 0..=L`.
    pub cumulative_accuracy: Vec<f64>,
    /// Share of instances whose own most important layer is among the top
    /// `min(layers, L)` ranked layers.
    pub top_layer_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub metadata: RunMetadata,
    pub kinds: Vec<InterventionKind>,
    pub rows: Vec<InterventionRow>,
    pub summaries: Vec<InterventionSummary>,
    pub layer_rows: Vec<LayerRow>,
    pub layers: LayerSummary,
}

/// Seed for trial `t` of instance `i`: `base + i * trials + t`.
pub fn trial_seed(base: u64, instance: usize, trials: usize, t: usize) -> u64 {
    base.wrapping_add((instance * trials + t) as u64)
}

fn intervene_one(
    suite: &AssembledSuite,
    inst: &AssembledInstance,
    index: usize,
    kinds: &[InterventionKind],
    options: &RunOptions,
) -> Result<Vec<InterventionRow>> {
    let rec = &inst.record;
    let sp = &inst.subspace;
    let un = &suite.unembedding;
    let magnitude = match options.fixed_magnitude {
        Some(m) => m,
        None => theory_injection_magnitude(rec, sp, un, options.safety)?,
    };
    let trials = options.random_trials;
    let mut rows = Vec::new();
    for &kind in kinds {
        match kind {
            InterventionKind::AblateUserPredictive => {
                rows.push(InterventionRow::new(
                    inst,
                    0,
                    ablate_user_predictive(rec, un)?,
                ));
            }
            InterventionKind::AblateNull => {
                let r = ablate_control(rec, sp, un, AblationControl::NullComponent, 0)?;
                rows.push(InterventionRow::new(inst, 0, r));
            }
            InterventionKind::InjectTheory => {
                let r = inject(rec, sp, un, InjectionDirection::Theory, magnitude, 0)?;
                rows.push(InterventionRow::new(inst, 0, r));
            }
            InterventionKind::AblateRandom | InterventionKind::InjectRandom => {
                for t in 0..trials {
                    let seed = trial_seed(options.seed, index, trials, t);
                    let r = if kind == InterventionKind::AblateRandom {
                        ablate_control(rec, sp, un, AblationControl::RandomMatched, seed)?
                    } else {
                        inject(rec, sp, un, InjectionDirection::Random, magnitude, seed)?
                    };
                    rows.push(InterventionRow::new(inst, t, r));
                }
            }
        }
    }
    Ok(rows)
}

/// Summaries per kind, recomputed from rows.
pub fn intervention_summaries(
    rows: &[InterventionRow],
    kinds: &[InterventionKind],
) -> Vec<InterventionSummary> {
    kinds
        .iter()
        .map(|&kind| {
            let sel: Vec<&InterventionRow> = rows.iter().filter(|r| r.kind == kind).collect();
            let trials = sel.len();
            let eligible = sel
                .iter()
                .filter(|r| r.pre_decision != r.sensor_answer)
                .count();
            let flips = sel.iter().filter(|r| r.flipped).count();
            let frac = |c: usize| c as f64 / trials.max(1) as f64;
            InterventionSummary {
                kind,
                trials,
                eligible,
                flips,
                flip_rate: (eligible > 0).then(|| flips as f64 / eligible as f64),
                pre_accuracy: frac(trials - eligible),
                post_accuracy: frac(
                    sel.iter()
                        .filter(|r| r.post_decision == r.sensor_answer)
                        .count(),
                ),
                mean_magnitude: sel.iter().map(|r| r.magnitude).sum::<f64>() / trials.max(1) as f64,
            }
        })
        .collect()
}

fn importances(suite: &AssembledSuite) -> Result<Vec<Vec<f64>>> {
    suite
        .instances
        .par_iter()
        .map(|inst| {
            layer_importance(
                &inst.traces.joint,
                &inst.traces.baseline,
                &suite.unembedding,
                inst.record.sensor_answer,
                inst.record.user_answer,
            )
        })
        .collect()
}

fn patch_cases(suite: &AssembledSuite) -> Vec<PatchCase<'_>> {
    suite
        .instances
        .iter()
        .map(|inst| PatchCase {
            joint: &inst.traces.joint,
            baseline: &inst.traces.baseline,
            sensor_answer: inst.record.sensor_answer,
        })
        .collect()
}

fn argmax_layer(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn layer_summary(suite: &AssembledSuite, imp: &[Vec<f64>], top: usize) -> Result<LayerSummary> {
    let ranked_layers = rank_layers(imp)?;
    let l = ranked_layers.len();
    let mut mean_importance = vec![0.0; l];
    for row in imp {
        for (m, v) in mean_importance.iter_mut().zip(row) {
            *m += v / imp.len() as f64;
        }
    }
    let cases = patch_cases(suite);
    let cumulative_accuracy = (0..=l)
        .into_par_iter()
        .map(|k| interventions::cumulative_ablation(&cases, &suite.unembedding, &ranked_layers, k))
        .collect::<Result<Vec<_>>>()?;
    let top_set = &ranked_layers[..top.min(l)];
    let covered = imp
        .iter()
        .filter(|row| top_set.contains(&argmax_layer(row)))
        .count();
    Ok(LayerSummary {
        mean_importance,
        ranked_layers,
        cumulative_accuracy,
        top_layer_coverage: covered as f64 / imp.len() as f64,
    })
}

/// Residual-state interventions of the requested kinds on every instance,
/// plus per-layer patching importance and cumulative ablation.
pub fn run_interventions(
    suite: &AssembledSuite,
    kinds: &[InterventionKind],
    options: &RunOptions,
) -> Result<InterventionReport> {
    check_options(options)?;
    nonempty(suite)?;
    if kinds.is_empty() {
        return Err(AuditError::Domain("no intervention kinds requested".into()));
    }
    let mut uniq = Vec::new();
    for k in kinds {
        if !uniq.contains(k) {
            uniq.push(*k);
        }
    }
    let rows: Vec<InterventionRow> = suite
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| intervene_one(suite, inst, i, &uniq, options))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let imp = importances(suite)?;
    let layer_rows = suite
        .instances
        .iter()
        .zip(&imp)
        .flat_map(|(inst, row)| {
            row.iter().enumerate().map(|(layer, &importance)| LayerRow {
                instance_id: inst.record.instance_id.clone(),
                layer,
                importance,
            })
        })
        .collect();
    let layers = layer_summary(suite, &imp, options.layers)?;
    Ok(InterventionReport {
        metadata: metadata("intervene", suite, options),
        summaries: intervention_summaries(&rows, &uniq),
        kinds: uniq,
        rows,
        layer_rows,
        layers,
    })
}

/// One instance under GAC. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GacRow {
    pub instance_id: String,
    pub sensor_answer: usize,
    pub baseline_decision: usize,
    pub joint_decision: usize,
    pub gac_decision: usize,
    /// Sensor-only (non-conflict) trace under the same calibration.
    pub sensor_only_decision: usize,
    pub sensor_only_gac_decision: usize,
    pub gac_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GacSummary {
    pub alpha: f64,
    pub critical_layers: Vec<usize>,
    pub baseline_accuracy: f64,
    pub accuracy_without: f64,
    pub accuracy_with: f64,
    /// Sensor accuracy on the sensor-only traces before and after GAC.
    pub non_conflict_accuracy_without: f64,
    pub non_conflict_accuracy_with: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GacReport {
    pub metadata: RunMetadata,
    pub rows: Vec<GacRow>,
    pub summary: GacSummary,
}

pub fn gac_summary(rows: &[GacRow], alpha: f64, critical_layers: Vec<usize>) -> GacSummary {
    let n = rows.len().max(1) as f64;
    let acc = |f: fn(&GacRow) -> usize| {
        rows.iter().filter(|r| f(r) == r.sensor_answer).count() as f64 / n
    };
    GacSummary {
        alpha,
        critical_layers,
        baseline_accuracy: acc(|r| r.baseline_decision),
        accuracy_without: acc(|r| r.joint_decision),
        accuracy_with: acc(|r| r.gac_decision),
        non_conflict_accuracy_without: acc(|r| r.sensor_only_decision),
        non_conflict_accuracy_with: acc(|r| r.sensor_only_gac_decision),
    }
}

/// Picks the top `options.layers` layers by mean patching importance and
/// interpolates the joint run toward baseline there with `options.alpha`.
pub fn run_gac(suite: &AssembledSuite, options: &RunOptions) -> Result<GacReport> {
    check_options(options)?;
    nonempty(suite)?;
    let num_layers = suite.instances[0].traces.joint.num_layers();
    if options.layers == 0 || options.layers > num_layers {
        return Err(AuditError::Domain(format!(
            "layer count {} outside 1..={num_layers}",
            options.layers
        )));
    }
    let critical: Vec<usize> = if options.layers == num_layers {
        (0..num_layers).collect()
    } else {
        rank_layers(&importances(suite)?)?[..options.layers].to_vec()
    };
    let un = &suite.unembedding;
    let rows = suite
        .instances
        .par_iter()
        .map(|inst| {
            let t = &inst.traces;
            let rec = &inst.record;
            let decide = |h: Vec<f64>| -> Result<(usize, f64)> {
                let st = crate::geometry::ResidualState::new(h)?;
                let z = crate::geometry::logits(&st, un)?;
                Ok((
                    crate::geometry::argmax(&z),
                    z[rec.sensor_answer] - z[rec.user_answer],
                ))
            };
            let (gac_decision, gac_margin) = decide(interventions::gac(
                &t.joint,
                &t.baseline,
                &critical,
                options.alpha,
            )?)?;
            let (sensor_only_gac_decision, _) = decide(interventions::gac(
                &t.sensor_only,
                &t.baseline,
                &critical,
                options.alpha,
            )?)?;
            Ok(GacRow {
                instance_id: rec.instance_id.clone(),
                sensor_answer: rec.sensor_answer,
                baseline_decision: rec.decisions.baseline.token,
                joint_decision: rec.decisions.joint.token,
                gac_decision,
                sensor_only_decision: rec.decisions.sensor_only.token,
                sensor_only_gac_decision,
                gac_margin,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GacReport {
        metadata: metadata("gac", suite, options),
        summary: gac_summary(&rows, options.alpha, critical),
        rows,
    })
}
