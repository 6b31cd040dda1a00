//! Activation dumps and manifests: the boundary between a model runtime
//! (or the reference model) and the analysis core.
//!
//! Values are stored as f32 and widened to f64 on load.

mod format;
mod manifest;

pub use format::{
    decode, encode, read_dump, write_dump, FormatError, Tensor, TensorSet, HEADER_LEN, MAGIC,
    VERSION,
};
pub use manifest::{
    AnswerToken, ExperimentManifest, InstanceEntry, UnembeddingTensors, SCHEMA_VERSION,
};

use rayon::prelude::*;

use crate::authority::{ByCondition, Condition, ConflictRecord};
use crate::error::{AuditError, Result};
use crate::geometry::{AnswerSubspace, EffectiveUnembedding, ResidualState};
use crate::interventions::LayerTrace;

pub const ROWS_TENSOR: &str = "unembed.rows";
pub const GAMMA_TENSOR: &str = "unembed.gamma";
pub const BIASES_TENSOR: &str = "unembed.biases";

/// Tensor name used by [`export`] for one layer state.
pub fn layer_tensor_name(instance_id: &str, condition: Condition, layer: usize) -> String {
    format!("{instance_id}/{condition}/L{layer:03}")
}

/// One conflict instance ready for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInstance {
    pub record: ConflictRecord,
    pub subspace: AnswerSubspace,
    pub traces: ByCondition<LayerTrace>,
}

/// Everything a manifest + dump pair describes, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSuite {
    pub model_label: String,
    pub unembedding: EffectiveUnembedding,
    pub answer_token_ids: Vec<usize>,
    pub answer_labels: Vec<String>,
    pub instances: Vec<AssembledInstance>,
}

impl AssembledSuite {
    pub fn label_of(&self, token: usize) -> Option<&str> {
        self.answer_token_ids
            .iter()
            .position(|&t| t == token)
            .map(|i| self.answer_labels[i].as_str())
    }
}

/// Builds records, answer subspaces and layer traces for every manifest
/// instance. Work runs in parallel; output keeps manifest order.
pub fn assemble_records(
    manifest: &ExperimentManifest,
    dump: &TensorSet,
    rank_tol: f64,
) -> Result<AssembledSuite> {
    manifest.validate(dump)?;
    let tensor = |name: &str| {
        dump.get(name)
            .ok_or_else(|| AuditError::Manifest(format!("missing tensor `{name}`")))
    };
    let unembedding = EffectiveUnembedding::new(
        &tensor(&manifest.unembedding.rows)?.to_f64(),
        &tensor(&manifest.unembedding.gamma)?.to_f64(),
        &tensor(&manifest.unembedding.biases)?.to_f64(),
    )?;
    let answer_token_ids = manifest.answer_token_ids();

    let instances = manifest
        .instances
        .par_iter()
        .map(|inst| {
            let traces = inst.layers.try_map(|c, names| {
                let states = names
                    .iter()
                    .map(|n| tensor(n).map(Tensor::to_f64))
                    .collect::<Result<Vec<_>>>()?;
                LayerTrace::new(inst.instance_id.clone(), c, states)
            })?;
            let states = traces.try_map(|_, t| ResidualState::new(t.final_state().to_vec()))?;
            let subspace =
                AnswerSubspace::build(&unembedding, &states.baseline, &answer_token_ids, rank_tol)?;
            let record = ConflictRecord::new(
                inst.instance_id.clone(),
                states,
                manifest.token_for_label(&inst.sensor_answer)?,
                manifest.token_for_label(&inst.user_answer)?,
                &unembedding,
                &subspace,
            )?;
            Ok(AssembledInstance {
                record,
                subspace,
                traces,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AssembledSuite {
        model_label: manifest.model_label.clone(),
        unembedding,
        answer_labels: manifest.answers.iter().map(|a| a.label.clone()).collect(),
        answer_token_ids,
        instances,
    })
}

/// Readout parameters as stored on disk (before folding gamma in).
#[derive(Debug, Clone, PartialEq)]
pub struct RawReadout {
    /// Row-major `[vocab_size, hidden_dim]`.
    pub rows: Vec<f64>,
    pub gamma: Vec<f64>,
    pub biases: Vec<f64>,
}

/// One instance to export.
#[derive(Debug, Clone, Copy)]
pub struct ExportInstance<'a> {
    pub instance_id: &'a str,
    pub sensor_label: &'a str,
    pub user_label: &'a str,
    pub traces: &'a ByCondition<LayerTrace>,
}

/// Lays out a suite as a tensor set plus the manifest that indexes it.
pub fn export<'a>(
    model_label: &str,
    readout: &RawReadout,
    answers: &[AnswerToken],
    instances: impl IntoIterator<Item = ExportInstance<'a>>,
) -> Result<(TensorSet, ExperimentManifest)> {
    let d = readout.gamma.len();
    let vocab = readout.biases.len();
    let mut set = TensorSet::new();
    set.insert(ROWS_TENSOR, Tensor::from_f64(vec![vocab, d], &readout.rows))?;
    set.insert(GAMMA_TENSOR, Tensor::from_f64(vec![d], &readout.gamma))?;
    set.insert(
        BIASES_TENSOR,
        Tensor::from_f64(vec![vocab], &readout.biases),
    )?;

    let mut entries = Vec::new();
    let mut num_layers = None;
    for inst in instances {
        let layers = inst.traces.try_map(|c, trace| {
            if *num_layers.get_or_insert(trace.num_layers()) != trace.num_layers() {
                return Err(AuditError::Shape("instances differ in layer count".into()));
            }
            trace
                .layer_states()
                .iter()
                .enumerate()
                .map(|(l, s)| {
                    let name = layer_tensor_name(inst.instance_id, c, l);
                    set.insert(name.clone(), Tensor::from_f64(vec![d], s))?;
                    Ok(name)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        entries.push(InstanceEntry {
            instance_id: inst.instance_id.to_string(),
            sensor_answer: inst.sensor_label.to_string(),
            user_answer: inst.user_label.to_string(),
            layers,
        });
    }

    let manifest = ExperimentManifest {
        schema_version: SCHEMA_VERSION,
        model_label: model_label.to_string(),
        hidden_dim: d,
        num_layers: num_layers.unwrap_or(0),
        unembedding: UnembeddingTensors {
            rows: ROWS_TENSOR.into(),
            gamma: GAMMA_TENSOR.into(),
            biases: BIASES_TENSOR.into(),
        },
        answers: answers.to_vec(),
        instances: entries,
    };
    Ok((set, manifest))
}
