//! Task vectors over full checkpoints.
//!
//! A task vector is the elementwise difference between a fine-tuned
//! checkpoint and the base it was tuned from. Adding a scaled task vector to
//! another fine-tuned checkpoint of the same base transfers what the first
//! fine-tune learned.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{index_fingerprint, Dtype, Tensor, TensorMap};
use crate::error::{Error, Result};

pub const KIND_KEY: &str = "langmerge.kind";
pub const TASK_VECTOR_KIND: &str = "task_vector";
pub const FINGERPRINT_KEY: &str = "base_fingerprint";

/// How tensor name sets of two checkpoints must relate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NamePolicy {
    /// Name sets must be identical.
    #[default]
    Strict,
    /// Only names present on both sides take part; the rest pass through.
    Intersection,
}

/// How two LoRA adapters are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MergeMode {
    /// `A' = A_T + λ·A_S`, `B' = B_T + λ·B_S`.
    #[default]
    PerMatrix,
    /// `Δ' = (α/r)(B_T·A_T + λ·B_S·A_S)`; has no low-rank form.
    DeltaSpace,
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "per_matrix" => Ok(MergeMode::PerMatrix),
            "delta_space" => Ok(MergeMode::DeltaSpace),
            _ => Err(Error::InvalidArgument(format!("unknown merge mode `{s}`"))),
        }
    }
}

impl FromStr for NamePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(NamePolicy::Strict),
            "intersection" => Ok(NamePolicy::Intersection),
            _ => Err(Error::InvalidArgument(format!("unknown name policy `{s}`"))),
        }
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::PerMatrix => "PER_MATRIX",
            MergeMode::DeltaSpace => "DELTA_SPACE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeSpec {
    pub lambda: f64,
    pub mode: MergeMode,
    pub name_policy: NamePolicy,
}

impl Default for MergeSpec {
    fn default() -> Self {
        MergeSpec {
            lambda: 0.0,
            mode: MergeMode::PerMatrix,
            name_policy: NamePolicy::Strict,
        }
    }
}

impl MergeSpec {
    pub fn new(lambda: f64) -> Self {
        MergeSpec {
            lambda,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: MergeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_policy(mut self, name_policy: NamePolicy) -> Self {
        self.name_policy = name_policy;
        self
    }

    pub fn validate(&self, lo: f64, hi: f64) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < lo || self.lambda > hi {
            return Err(Error::InvalidArgument(format!(
                "lambda {} outside [{lo}, {hi}]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-tensor deltas bound to the index of the base checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    deltas: TensorMap,
    base_fingerprint: String,
}

impl TaskVector {
    pub fn deltas(&self) -> &TensorMap {
        &self.deltas
    }

    pub fn base_fingerprint(&self) -> &str {
        &self.base_fingerprint
    }

    /// L2 norm of all deltas concatenated.
    pub fn l2_norm(&self) -> f64 {
        self.deltas
            .iter()
            .flat_map(|(_, t)| t.values().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Recomputes the fingerprint from the delta index.
    pub fn verify(&self) -> Result<()> {
        let actual = self.deltas.fingerprint();
        if actual != self.base_fingerprint {
            return Err(Error::FingerprintMismatch(
                self.base_fingerprint.clone(),
                actual,
            ));
        }
        Ok(())
    }

    /// Container form with the fingerprint stored in the metadata.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = self.deltas.clone();
        let mut meta = BTreeMap::new();
        meta.insert(KIND_KEY.to_string(), TASK_VECTOR_KIND.to_string());
        meta.insert(FINGERPRINT_KEY.to_string(), self.base_fingerprint.clone());
        map.set_metadata(Some(meta));
        map
    }

    pub fn from_tensor_map(map: TensorMap) -> Result<Self> {
        let stored = map
            .metadata()
            .and_then(|m| m.get(FINGERPRINT_KEY))
            .cloned();
        let deltas: TensorMap = map.into_iter().collect();
        let tv = TaskVector {
            base_fingerprint: stored.unwrap_or_else(|| deltas.fingerprint()),
            deltas,
        };
        tv.verify()?;
        Ok(tv)
    }
}

/// Checks that `left` and `right` can be combined name by name, returning the
/// names that take part.
fn paired_names<'a>(
    left: &'a TensorMap,
    right: &'a TensorMap,
    policy: NamePolicy,
) -> Result<Vec<&'a str>> {
    let only_left: Vec<&str> = left.names().filter(|n| !right.contains(n)).collect();
    let only_right: Vec<&str> = right.names().filter(|n| !left.contains(n)).collect();
    if policy == NamePolicy::Strict && !(only_left.is_empty() && only_right.is_empty()) {
        return Err(Error::NameMismatch(format!(
            "only on left: {only_left:?}; only on right: {only_right:?}"
        )));
    }
    let mut shared = Vec::new();
    for (name, l) in left.iter() {
        if let Some(r) = right.get(name) {
            if l.shape() != r.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: l.shape().to_vec(),
                    right: r.shape().to_vec(),
                });
            }
            shared.push(name);
        }
    }
    Ok(shared)
}

/// `deltas[n] = finetuned[n] − base[n]`.
pub fn compute_task_vector(
    finetuned: &TensorMap,
    base: &TensorMap,
    policy: NamePolicy,
) -> Result<TaskVector> {
    let names = paired_names(finetuned, base, policy)?;
    let mut deltas = TensorMap::new();
    for name in names {
        let ft = finetuned.get(name).expect("paired");
        let b = base.get(name).expect("paired");
        let values = ft
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x - y)
            .collect();
        deltas.insert(name, b.with_values(values)?);
    }
    let base_fingerprint = index_fingerprint(
        deltas
            .iter()
            .map(|(n, t)| (n, t.dtype(), t.shape())),
    );
    Ok(TaskVector {
        deltas,
        base_fingerprint,
    })
}

/// `result[n] = target[n] + lambda·tv[n]`. Merged tensors are emitted as
/// `F32`; tensors the task vector does not cover pass through unchanged.
pub fn apply_task_vector(
    target: &TensorMap,
    tv: &TaskVector,
    lambda: f64,
    policy: NamePolicy,
) -> Result<TensorMap> {
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    paired_names(target, &tv.deltas, policy)?;
    let mut out = TensorMap::new();
    for (name, t) in target.iter() {
        let merged = match tv.deltas.get(name) {
            Some(d) => {
                let values = t
                    .values()
                    .iter()
                    .zip(d.values())
                    .map(|(x, dx)| x + lambda * dx)
                    .collect();
                Tensor::new(Dtype::F32, t.shape().to_vec(), values)?
            }
            None => t.clone(),
        };
        out.insert(name, merged);
    }
    out.set_metadata(target.metadata().cloned());
    Ok(out)
}

/// `Σ weight_i · tv_i`.
pub fn combine_task_vectors(terms: &[(&TaskVector, f64)]) -> Result<TaskVector> {
    let (first, _) = terms
        .first()
        .ok_or_else(|| Error::InvalidArgument("no task vectors to combine".into()))?;
    for (tv, _) in &terms[1..] {
        if tv.base_fingerprint != first.base_fingerprint {
            return Err(Error::FingerprintMismatch(
                first.base_fingerprint.clone(),
                tv.base_fingerprint.clone(),
            ));
        }
        paired_names(&first.deltas, &tv.deltas, NamePolicy::Strict)?;
    }
    let mut deltas = TensorMap::new();
    for (name, proto) in first.deltas.iter() {
        let mut acc = vec![0.0; proto.len()];
        for (tv, weight) in terms {
            let d = tv.deltas.get(name).expect("checked above");
            for (a, v) in acc.iter_mut().zip(d.values()) {
                *a += weight * v;
            }
        }
        deltas.insert(name, proto.with_values(acc)?);
    }
    Ok(TaskVector {
        deltas,
        base_fingerprint: first.base_fingerprint.clone(),
    })
}
