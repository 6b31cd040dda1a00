//! Experiment manifest: the JSON document that names which dump tensors
//! hold the unembedding and each instance's per-layer states.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::format::TensorSet;
use crate::authority::{ByCondition, Condition};
use crate::error::{AuditError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnembeddingTensors {
    /// `[vocab_size, hidden_dim]`
    pub rows: String,
    /// `[hidden_dim]`
    pub gamma: String,
    /// `[vocab_size]`
    pub biases: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerToken {
    /// Display label, e.g. "A".
    pub label: String,
    pub token_id: usize,
    /// How the extractor rendered the label when resolving `token_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendering: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub instance_id: String,
    pub sensor_answer: String,
    pub user_answer: String,
    /// Per condition, one tensor name per layer (shape `[hidden_dim]`),
    /// first layer first.
    pub layers: ByCondition<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub model_label: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub unembedding: UnembeddingTensors,
    pub answers: Vec<AnswerToken>,
    pub instances: Vec<InstanceEntry>,
}

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AuditError::Manifest(format!("parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| AuditError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn answer_token_ids(&self) -> Vec<usize> {
        self.answers.iter().map(|a| a.token_id).collect()
    }

    pub fn token_for_label(&self, label: &str) -> Result<usize> {
        self.answers
            .iter()
            .find(|a| a.label == label)
            .map(|a| a.token_id)
            .ok_or_else(|| AuditError::Manifest(format!("unknown answer label `{label}`")))
    }

    /// Checks internal consistency and every tensor reference against
    /// `dump`.
    pub fn validate(&self, dump: &TensorSet) -> Result<()> {
        if self.schema_version == 0 || self.schema_version > SCHEMA_VERSION {
            return Err(AuditError::Manifest(format!(
                "unsupported schema_version {} (supported: {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(AuditError::Manifest(
                "hidden_dim and num_layers must be positive".into(),
            ));
        }
        if self.answers.is_empty() {
            return Err(AuditError::Manifest("no answer tokens".into()));
        }
        let mut labels = HashSet::new();
        let mut ids = HashSet::new();
        for a in &self.answers {
            if !labels.insert(a.label.as_str()) {
                return Err(AuditError::Manifest(format!(
                    "duplicate answer label `{}`",
                    a.label
                )));
            }
            if !ids.insert(a.token_id) {
                return Err(AuditError::Manifest(format!(
                    "answer labels share token id {}",
                    a.token_id
                )));
            }
        }
        if self.instances.is_empty() {
            return Err(AuditError::Manifest("manifest lists no instances".into()));
        }

        let d = self.hidden_dim;
        let rows = expect_tensor(dump, &self.unembedding.rows)?;
        if rows.dims.len() != 2 || rows.dims[1] != d {
            return Err(AuditError::Manifest(format!(
                "unembedding rows `{}` have dims {:?}, expected [V, {d}]",
                self.unembedding.rows, rows.dims
            )));
        }
        let vocab = rows.dims[0];
        expect_dims(dump, &self.unembedding.gamma, &[d])?;
        expect_dims(dump, &self.unembedding.biases, &[vocab])?;
        if let Some(a) = self.answers.iter().find(|a| a.token_id >= vocab) {
            return Err(AuditError::Manifest(format!(
                "answer `{}` has token id {} beyond vocabulary of {vocab}",
                a.label, a.token_id
            )));
        }

        let mut instance_ids = HashSet::new();
        for inst in &self.instances {
            if !instance_ids.insert(inst.instance_id.as_str()) {
                return Err(AuditError::Manifest(format!(
                    "duplicate instance id `{}`",
                    inst.instance_id
                )));
            }
            let s = self.token_for_label(&inst.sensor_answer)?;
            let u = self.token_for_label(&inst.user_answer)?;
            if s == u {
                return Err(AuditError::Manifest(format!(
                    "instance `{}`: sensor and user answers are both `{}`",
                    inst.instance_id, inst.sensor_answer
                )));
            }
            for c in Condition::ALL {
                let names = inst.layers.get(c);
                if names.len() != self.num_layers {
                    return Err(AuditError::Manifest(format!(
                        "instance `{}` condition {c}: {} layer tensors, expected {}",
                        inst.instance_id,
                        names.len(),
                        self.num_layers
                    )));
                }
                for name in names {
                    expect_dims(dump, name, &[d])?;
                }
            }
        }
        Ok(())
    }
}

fn expect_tensor<'a>(dump: &'a TensorSet, name: &str) -> Result<&'a super::format::Tensor> {
    dump.get(name)
        .ok_or_else(|| AuditError::Manifest(format!("missing tensor `{name}`")))
}

fn expect_dims(dump: &TensorSet, name: &str, dims: &[usize]) -> Result<()> {
    let t = expect_tensor(dump, name)?;
    if t.dims != dims {
        return Err(AuditError::Manifest(format!(
            "tensor `{name}` has dims {:?}, expected {dims:?}",
            t.dims
        )));
    }
    Ok(())
}
