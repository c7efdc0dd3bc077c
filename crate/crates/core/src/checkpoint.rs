//! Named-parameter checkpoints in safetensors format.
//!
//! The header metadata carries a JSON `meta` entry with the format version,
//! checkpoint kind, model config, seed and (for multi-source bundles) the
//! domain names. Loading checks every expected name, shape and dtype.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PromptViT, PromptViTConfig};
use crate::nn::Param;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    PromptVit,
    MultiSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: PromptViTConfig,
    pub seed: u64,
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub shared_prompts: usize,
}

fn to_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.detach().flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            StDtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => {
            return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}")));
        }
    };
    Ok(t)
}

/// Writes `params` and `meta` to `path`.
pub fn save_params(path: &Path, params: &[&Param], meta: &CheckpointMeta) -> Result<()> {
    let mut raw: BTreeMap<String, (StDtype, Vec<usize>, Vec<u8>)> = BTreeMap::new();
    for p in params {
        let (dt, bytes) = to_bytes(&p.value())?;
        if raw
            .insert(p.name().to_string(), (dt, p.dims().to_vec(), bytes))
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate parameter name {}", p.name())));
        }
    }
    let views = raw
        .iter()
        .map(|(name, (dt, shape, bytes))| Ok((name.clone(), TensorView::new(*dt, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert("meta".to_string(), serde_json::to_string(meta)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(info), path)?;
    Ok(())
}

/// Raw checkpoint contents.
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl LoadedCheckpoint {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)?;
        let (_, header) = SafeTensors::read_metadata(&bytes)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("meta"))
            .ok_or_else(|| Error::Checkpoint("missing meta header".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, from_view(&view)?);
        }
        Ok(Self { meta, tensors })
    }

    pub fn dtype(&self) -> DType {
        self.tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .unwrap_or(DType::F32)
    }

    /// Copies tensors into `params`, requiring an exact name and shape match.
    pub fn assign(&self, params: &[&Param]) -> Result<()> {
        let expected: BTreeMap<&str, &Param> = params.iter().map(|p| (p.name(), *p)).collect();
        for name in self.tensors.keys() {
            if !expected.contains_key(name.as_str()) {
                return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
            }
        }
        for (name, p) in &expected {
            let t = self
                .tensors
                .get(*name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != p.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    p.dims()
                )));
            }
            p.set(t)?;
        }
        Ok(())
    }
}

pub fn save_model(path: &Path, model: &PromptViT, seed: u64) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::PromptVit,
        config: model.config().clone(),
        seed,
        domains: Vec::new(),
        shared_prompts: 0,
    };
    save_params(path, &model.params(), &meta)
}

/// Loads a single-model checkpoint; returns the model (all parameters trainable) and its meta.
pub fn load_model(path: &Path) -> Result<(PromptViT, CheckpointMeta)> {
    let ck = LoadedCheckpoint::read(path)?;
    if ck.meta.kind != CheckpointKind::PromptVit {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected a single model",
            path.display(),
            ck.meta.kind
        )));
    }
    let model = PromptViT::skeleton(&ck.meta.config, ck.dtype())?;
    ck.assign(&model.params())?;
    Ok((model, ck.meta))
}
