//! End-to-end checks: reference model -> dump -> assembled suite -> reports.

use aaud_core::audit::{run_audit, RunOptions};
use aaud_core::dumpio::{assemble_records, decode, encode, AssembledSuite, TensorSet};
use aaud_core::geometry::{AnswerSubspace, DEFAULT_RANK_TOL};
use aaud_core::linalg::{self, dot, norm};
use aaud_core::refmodel::{
    build_reference_model, PlantedConflictSpec, ReferenceModel, ReferenceModelConfig, Regime,
    SyntheticInstance,
};
use aaud_core::{AuditError, Condition, ResidualState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> ReferenceModel {
    build_reference_model(&ReferenceModelConfig {
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn round_trip(model: &ReferenceModel, suite: &[SyntheticInstance]) -> AssembledSuite {
    let (set, manifest) = model.export("ref", suite).unwrap();
    let set = decode(&encode(&set).unwrap()).unwrap();
    assemble_records(&manifest, &set, DEFAULT_RANK_TOL).unwrap()
}

/// Modified Gram-Schmidt on the tangential answer rows.
fn mgs_basis(rows: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let scale = rows.iter().map(|r| norm(r)).fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &v);
                linalg::axpy(&mut v, -c, q);
            }
        }
        let n = norm(&v);
        if n > tol * scale {
            basis.push(linalg::scale(&v, 1.0 / n));
        }
    }
    basis
}

#[test]
fn projector_matches_gram_schmidt() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let base = ResidualState::new(linalg::gaussian(&mut rng, 64)).unwrap();
        let sp = AnswerSubspace::build(
            m.unembedding(),
            &base,
            m.answer_token_ids(),
            DEFAULT_RANK_TOL,
        )
        .unwrap();
        let q = mgs_basis(sp.tangential_rows(), DEFAULT_RANK_TOL);
        assert_eq!(q.len(), sp.effective_rank());
        let v = linalg::gaussian(&mut rng, 64);
        let mut oracle = vec![0.0; 64];
        for b in &q {
            linalg::axpy(&mut oracle, dot(b, &v), b);
        }
        let got = sp.project(&v);
        assert!(norm(&linalg::sub(&got, &oracle)) < 1e-12 * norm(&v));
    }
}

#[test]
fn assembled_records_match_in_memory_records() {
    let m = model(5);
    let suite = m.generate_conflict_suite(Regime::HarLike, 12, 6).unwrap();
    let asm = round_trip(&m, &suite);
    assert_eq!(asm.instances.len(), suite.len());
    for (a, s) in asm.instances.iter().zip(&suite) {
        assert_eq!(a.record, s.record);
        assert_eq!(a.subspace, s.subspace);
        assert_eq!(a.traces, s.traces);
    }
    assert_eq!(asm.label_of(asm.answer_token_ids[1]), Some("B"));
}

#[test]
fn regimes_produce_their_authority_signatures() {
    let m = model(7);
    let opts = RunOptions::default();
    let har = run_audit(
        &round_trip(
            &m,
            &m.generate_conflict_suite(Regime::HarLike, 120, 8).unwrap(),
        ),
        &opts,
    )
    .unwrap();
    let agg = &har.aggregates;
    assert!(agg.trust.baai < 0.0, "har bAAI {}", agg.trust.baai);
    assert!(agg.aai_mean.unwrap() < 0.0);
    assert!(agg.cir_u_mean > agg.cir_s_mean);
    assert!(agg.aai_test.as_ref().unwrap().p_value < 1e-6);

    let health = run_audit(
        &round_trip(
            &m,
            &m.generate_conflict_suite(Regime::HealthLike, 120, 9)
                .unwrap(),
        ),
        &opts,
    )
    .unwrap();
    assert!(health.aggregates.aai_mean.unwrap() > 0.0);
    assert!(health.aggregates.trust.baai > 0.0);
}

#[test]
fn planted_cir_targets_are_recovered() {
    let m = model(10);
    let l = m.config().num_layers;
    let mut spec = PlantedConflictSpec::null(0, 1, l);
    spec.target_cir_sensor = 0.03;
    spec.target_cir_user = 0.15;
    spec.epsilon_scale = 0.2;
    spec.write_layer_sensor = 6;
    spec.write_layer_user = 14;
    let specs: Vec<_> = (0..30).map(|i| (spec.clone(), i)).collect();
    let suite = m.run_many("cir", &specs).unwrap();
    let asm = round_trip(&m, &suite);
    for inst in &asm.instances {
        let d = &inst.record.decomposed;
        assert!(
            (d.sensor_only.cir - 0.03).abs() < 0.005,
            "sensor {}",
            d.sensor_only.cir
        );
        assert!(
            (d.user_only.cir - 0.15).abs() < 0.005,
            "user {}",
            d.user_only.cir
        );
    }
}

#[test]
fn missing_tensor_is_named() {
    let m = model(11);
    let suite = m.generate_conflict_suite(Regime::CasasLike, 2, 12).unwrap();
    let (set, manifest) = m.export("ref", &suite).unwrap();
    let dropped = manifest.instances[1].layers.get(Condition::Joint)[3].clone();
    let mut partial = TensorSet::new();
    for (name, t) in set.iter().filter(|(n, _)| *n != dropped) {
        partial.insert(name, t.clone()).unwrap();
    }
    match assemble_records(&manifest, &partial, DEFAULT_RANK_TOL) {
        Err(AuditError::Manifest(msg)) => assert!(msg.contains(&dropped), "{msg}"),
        other => panic!("expected manifest error, got {other:?}"),
    }
}

#[test]
fn manifest_json_round_trips() {
    let m = model(13);
    let suite = m.generate_conflict_suite(Regime::HarLike, 3, 14).unwrap();
    let (_, manifest) = m.export("ref", &suite).unwrap();
    let back = aaud_core::dumpio::ExperimentManifest::from_json(&manifest.to_json()).unwrap();
    assert_eq!(back, manifest);
    let extra = manifest.to_json().replacen('{', "{\"surprise\": 1,", 1);
    assert!(aaud_core::dumpio::ExperimentManifest::from_json(&extra).is_err());
}
