//! LoRA adapters: container I/O, two-adapter merging and materialization
//! onto a base checkpoint.
//!
//! An adapter layer holds `A` (`r×k`) and `B` (`d×r`); its effective weight
//! update is `(α/r)·B·A`. Scaling is applied at materialization, never
//! stored in the factors.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::checkpoint::{Dtype, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::taskvec::{MergeMode, MergeSpec};

pub const RANK_KEY: &str = "rank";
pub const ALPHA_KEY: &str = "alpha";
pub const TARGET_MODULES_KEY: &str = "target_modules";

/// Rank used for the adapters this toolkit was built around.
pub const DEFAULT_RANK: usize = 32;
pub const DEFAULT_ALPHA: f64 = 64.0;
pub const DEFAULT_TARGET_MODULES: [&str; 2] = ["q_proj", "v_proj"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraLayer {
    pub fn new(a: Array2<f64>, b: Array2<f64>) -> Self {
        LoraLayer { a, b }
    }

    /// `B·A` without the `α/r` factor.
    pub fn product(&self) -> Array2<f64> {
        self.b.dot(&self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    layers: BTreeMap<String, LoraLayer>,
    rank: usize,
    alpha: f64,
    target_modules: Vec<String>,
    dtype: Dtype,
}

impl LoraAdapter {
    pub fn new(
        layers: BTreeMap<String, LoraLayer>,
        rank: usize,
        alpha: f64,
        target_modules: Vec<String>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("LoRA rank must be positive".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "LoRA alpha must be positive, got {alpha}"
            )));
        }
        for (id, layer) in &layers {
            if layer.a.nrows() != rank || layer.b.ncols() != rank {
                return Err(Error::AdapterMismatch(format!(
                    "layer `{id}`: A is {:?} and B is {:?}, expected rank {rank}",
                    layer.a.dim(),
                    layer.b.dim()
                )));
            }
        }
        Ok(LoraAdapter {
            layers,
            rank,
            alpha,
            target_modules,
            dtype: Dtype::F32,
        })
    }

    pub fn layers(&self) -> &BTreeMap<String, LoraLayer> {
        &self.layers
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn target_modules(&self) -> &[String] {
        &self.target_modules
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    /// Reads `<layer>.lora_A` / `<layer>.lora_B` pairs. The rank comes from
    /// the metadata or, failing that, from the shape of `A`; alpha must be
    /// recorded in the metadata.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let meta = map.metadata().cloned().unwrap_or_default();
        let mut a_parts: BTreeMap<String, &Tensor> = BTreeMap::new();
        let mut b_parts: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (name, tensor) in map.iter() {
            let name = name.strip_suffix(".weight").unwrap_or(name);
            if let Some(id) = name.strip_suffix(".lora_A") {
                a_parts.insert(id.to_string(), tensor);
            } else if let Some(id) = name.strip_suffix(".lora_B") {
                b_parts.insert(id.to_string(), tensor);
            } else {
                return Err(Error::AdapterMismatch(format!(
                    "tensor `{name}` is neither lora_A nor lora_B"
                )));
            }
        }
        if a_parts.len() != b_parts.len() || a_parts.keys().ne(b_parts.keys()) {
            return Err(Error::AdapterMismatch(
                "every layer needs both lora_A and lora_B".into(),
            ));
        }

        let dtype = a_parts.values().next().map_or(Dtype::F32, |t| t.dtype());
        let mut layers = BTreeMap::new();
        for (id, a) in a_parts {
            let b = b_parts[&id];
            layers.insert(id.clone(), LoraLayer::new(to_matrix(&id, a)?, to_matrix(&id, b)?));
        }

        let rank = match meta.get(RANK_KEY) {
            Some(r) => r
                .parse()
                .map_err(|_| Error::Parse(format!("bad rank `{r}` in adapter metadata")))?,
            None => layers
                .values()
                .next()
                .map(|l| l.a.nrows())
                .ok_or_else(|| Error::AdapterMismatch("adapter has no layers".into()))?,
        };
        let alpha = meta
            .get(ALPHA_KEY)
            .ok_or_else(|| Error::AdapterMismatch("adapter metadata lacks `alpha`".into()))?;
        let alpha = alpha
            .parse()
            .map_err(|_| Error::Parse(format!("bad alpha `{alpha}` in adapter metadata")))?;
        let target_modules = match meta.get(TARGET_MODULES_KEY) {
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            None => DEFAULT_TARGET_MODULES.iter().map(|s| s.to_string()).collect(),
        };
        let mut adapter = LoraAdapter::new(layers, rank, alpha, target_modules)?;
        adapter.dtype = dtype;
        Ok(adapter)
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for (id, layer) in &self.layers {
            map.insert(format!("{id}.lora_A"), from_matrix(&layer.a, self.dtype));
            map.insert(format!("{id}.lora_B"), from_matrix(&layer.b, self.dtype));
        }
        let mut meta = BTreeMap::new();
        meta.insert(RANK_KEY.to_string(), self.rank.to_string());
        meta.insert(ALPHA_KEY.to_string(), format!("{}", self.alpha));
        meta.insert(TARGET_MODULES_KEY.to_string(), self.target_modules.join(","));
        map.set_metadata(Some(meta));
        map
    }

    fn check_compatible(&self, other: &LoraAdapter) -> Result<()> {
        if self.rank != other.rank {
            return Err(Error::AdapterMismatch(format!(
                "rank {} vs {}",
                self.rank, other.rank
            )));
        }
        if self.alpha != other.alpha {
            return Err(Error::AdapterMismatch(format!(
                "alpha {} vs {}",
                self.alpha, other.alpha
            )));
        }
        if self.layers.len() != other.layers.len() || self.layers.keys().ne(other.layers.keys()) {
            return Err(Error::AdapterMismatch("layer sets differ".into()));
        }
        for (id, l) in &self.layers {
            let r = &other.layers[id];
            if l.a.dim() != r.a.dim() || l.b.dim() != r.b.dim() {
                return Err(Error::AdapterMismatch(format!(
                    "layer `{id}`: A {:?}/{:?}, B {:?}/{:?}",
                    l.a.dim(),
                    r.a.dim(),
                    l.b.dim(),
                    r.b.dim()
                )));
            }
        }
        Ok(())
    }
}

fn to_matrix(id: &str, t: &Tensor) -> Result<Array2<f64>> {
    match *t.shape() {
        [rows, cols] => Ok(Array2::from_shape_vec((rows, cols), t.values().to_vec())
            .expect("tensor length matches shape")),
        _ => Err(Error::AdapterMismatch(format!(
            "layer `{id}`: factor has shape {:?}, expected a matrix",
            t.shape()
        ))),
    }
}

fn from_matrix(m: &Array2<f64>, dtype: Dtype) -> Tensor {
    let (rows, cols) = m.dim();
    Tensor::new(dtype, vec![rows, cols], m.iter().copied().collect())
        .expect("matrix length matches shape")
}

/// Result of merging two adapters.
#[derive(Debug, Clone, PartialEq)]
pub enum MergedAdapter {
    LowRank(LoraAdapter),
    /// Per-layer dense deltas, already multiplied by `α/r`.
    Dense(DenseDelta),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseDelta {
    pub deltas: BTreeMap<String, Array2<f64>>,
    pub target_modules: Vec<String>,
}

impl MergedAdapter {
    pub fn materialize(&self, base: &TensorMap) -> Result<TensorMap> {
        match self {
            MergedAdapter::LowRank(adapter) => materialize_lora(adapter, base),
            MergedAdapter::Dense(dense) => apply_dense(
                base,
                &dense.target_modules,
                dense.deltas.iter().map(|(id, d)| (id.as_str(), d.clone())),
            ),
        }
    }
}

/// Merges the support adapter into the target adapter in low-rank form.
/// Only [`MergeMode::PerMatrix`] has a low-rank result.
pub fn merge_lora(target: &LoraAdapter, support: &LoraAdapter, spec: &MergeSpec) -> Result<LoraAdapter> {
    if spec.mode != MergeMode::PerMatrix {
        return Err(Error::InvalidArgument(format!(
            "{} merges have no low-rank factors; materialize them instead",
            spec.mode
        )));
    }
    match merge_adapters(target, support, spec)? {
        MergedAdapter::LowRank(adapter) => Ok(adapter),
        MergedAdapter::Dense(_) => unreachable!("PER_MATRIX yields low-rank factors"),
    }
}

pub fn merge_adapters(
    target: &LoraAdapter,
    support: &LoraAdapter,
    spec: &MergeSpec,
) -> Result<MergedAdapter> {
    if !spec.lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite, got {}",
            spec.lambda
        )));
    }
    target.check_compatible(support)?;
    let lambda = spec.lambda;
    match spec.mode {
        MergeMode::PerMatrix => {
            let layers = target
                .layers
                .iter()
                .map(|(id, t)| {
                    let s = &support.layers[id];
                    let merged = LoraLayer::new(&t.a + &(&s.a * lambda), &t.b + &(&s.b * lambda));
                    (id.clone(), merged)
                })
                .collect();
            LoraAdapter::new(
                layers,
                target.rank,
                target.alpha,
                target.target_modules.clone(),
            )
            .map(MergedAdapter::LowRank)
        }
        MergeMode::DeltaSpace => {
            let scale = target.scale();
            let deltas = target
                .layers
                .iter()
                .map(|(id, t)| {
                    let s = &support.layers[id];
                    let delta = (t.product() + s.product() * lambda) * scale;
                    (id.clone(), delta)
                })
                .collect();
            Ok(MergedAdapter::Dense(DenseDelta {
                deltas,
                target_modules: target.target_modules.clone(),
            }))
        }
    }
}

/// `base[n] + (α/r)·B·A` for every adapter layer; other tensors unchanged.
pub fn materialize_lora(adapter: &LoraAdapter, base: &TensorMap) -> Result<TensorMap> {
    let scale = adapter.scale();
    apply_dense(
        base,
        &adapter.target_modules,
        adapter
            .layers
            .iter()
            .map(|(id, layer)| (id.as_str(), layer.product() * scale)),
    )
}

fn apply_dense<'a>(
    base: &TensorMap,
    target_modules: &[String],
    deltas: impl Iterator<Item = (&'a str, Array2<f64>)>,
) -> Result<TensorMap> {
    let mut out = base.clone();
    for (id, delta) in deltas {
        let name = resolve_layer(id, base, target_modules)?;
        let tensor = base.get(&name).expect("resolved");
        let (d, k) = delta.dim();
        if tensor.shape() != [d, k] {
            return Err(Error::ShapeMismatch {
                name,
                left: tensor.shape().to_vec(),
                right: vec![d, k],
            });
        }
        let values = tensor
            .values()
            .iter()
            .zip(delta.iter())
            .map(|(w, dw)| w + dw)
            .collect();
        out.insert(name, Tensor::new(Dtype::F32, vec![d, k], values)?);
    }
    Ok(out)
}

/// Maps an adapter layer id to a base tensor name. The id's last dotted
/// component must be one of the target modules (when any are configured);
/// the base tensor is `<id>.weight` or `<id>`, optionally after dropping a
/// `base_model.model.` wrapper prefix.
pub fn resolve_layer(id: &str, base: &TensorMap, target_modules: &[String]) -> Result<String> {
    let module = id.rsplit('.').next().unwrap_or(id);
    if !target_modules.is_empty() && !target_modules.iter().any(|m| m == module) {
        return Err(Error::UnresolvedLayer(format!(
            "{id} (module `{module}` not in {target_modules:?})"
        )));
    }
    let stripped = id.strip_prefix("base_model.model.");
    [Some(id), stripped]
        .into_iter()
        .flatten()
        .flat_map(|stem| [format!("{stem}.weight"), stem.to_string()])
        .find(|candidate| base.contains(candidate))
        .ok_or_else(|| Error::UnresolvedLayer(id.to_string()))
}
