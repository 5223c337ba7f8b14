use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{EpochLoss, Sgd, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{ModelConfig, VpNet};
use crate::nn::ParamStore;

/// Format tag stored in every checkpoint header.
pub const CHECKPOINT_FORMAT: &str = "vanishnet-checkpoint/1";

/// Everything in a checkpoint except the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub history: Vec<EpochLoss>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

impl Trainer {
    /// Writes parameters, normalisation buffers, momentum and metadata to a
    /// single safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            model: self.model.config().clone(),
            train: self.config.clone(),
            loss: self.loss,
            history: self.history.clone(),
        };
        let store = self.model.store();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, p) in store.params() {
            tensors.push((format!("param.{name}"), p.var.as_tensor().clone()));
        }
        for (name, v) in store.buffers() {
            tensors.push((format!("buffer.{name}"), v.as_tensor().clone()));
        }
        for (name, v) in self.optimizer.velocity() {
            tensors.push((format!("momentum.{name}"), v.clone()));
        }
        let info = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("epoch".to_string(), meta.epoch.to_string()),
            ("config".to_string(), json(&(&meta.model, &meta.train, &meta.loss))),
            ("history".to_string(), json(&meta.history)),
        ]);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(tensors, Some(info), path).map_err(|e| ckpt_err(path, e))
    }

    /// Restores a trainer so that continuing it matches an uninterrupted run.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read(path)?;
        let model = rebuild(path, &meta, &tensors)?;
        let mut optimizer = Sgd::new(model.store(), meta.train.momentum, meta.train.weight_decay);
        let velocity: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix("momentum.").map(|n| (n.to_string(), t.clone())))
            .collect();
        optimizer.set_velocity(velocity);
        let mut trainer = Trainer::new(model, meta.train, meta.loss)?;
        trainer.optimizer = optimizer;
        trainer.epoch = meta.epoch;
        trainer.history = meta.history;
        Ok(trainer)
    }
}

/// Loads only the model for inference.
pub fn load_model(path: &Path) -> Result<(VpNet, CheckpointMeta)> {
    let (meta, tensors) = read(path)?;
    let model = rebuild(path, &meta, &tensors)?;
    Ok((model, meta))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("checkpoint metadata serialises")
}

fn read(path: &Path) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_err(path, "missing metadata header"))?;
    let field = |k: &str| info.get(k).ok_or_else(|| ckpt_err(path, format!("missing `{k}` metadata")));
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(ckpt_err(path, format!("unsupported format {:?}", field("format")?)));
    }
    let epoch: usize = field("epoch")?.parse().map_err(|e| ckpt_err(path, e))?;
    let (model, train, loss): (ModelConfig, TrainConfig, LossConfig) =
        serde_json::from_str(field("config")?).map_err(|e| ckpt_err(path, e))?;
    let history: Vec<EpochLoss> = serde_json::from_str(field("history")?).map_err(|e| ckpt_err(path, e))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let meta = CheckpointMeta {
        epoch,
        model,
        train,
        loss,
        history,
    };
    Ok((meta, tensors))
}

fn rebuild(path: &Path, meta: &CheckpointMeta, tensors: &HashMap<String, Tensor>) -> Result<VpNet> {
    let dtype = tensors
        .iter()
        .find(|(k, _)| k.starts_with("param."))
        .map(|(_, t)| t.dtype())
        .unwrap_or(DType::F32);
    let model = VpNet::new(&meta.model, &ParamStore::new(Device::Cpu, dtype, meta.train.seed))?;
    let store = model.store();
    let mut expected = 0;
    let mut restore = |key: String, var: &candle_core::Var| -> Result<()> {
        expected += 1;
        let t = tensors
            .get(&key)
            .ok_or_else(|| ckpt_err(path, format!("checkpoint/config mismatch: `{key}` missing")))?;
        if t.dims() != var.dims() {
            return Err(ckpt_err(
                path,
                format!("checkpoint/config mismatch: `{key}` has shape {:?}, model expects {:?}", t.dims(), var.dims()),
            ));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
        Ok(())
    };
    for (name, p) in store.params() {
        restore(format!("param.{name}"), &p.var)?;
    }
    for (name, v) in store.buffers() {
        restore(format!("buffer.{name}"), &v)?;
    }
    let stored = tensors.keys().filter(|k| !k.starts_with("momentum.")).count();
    if stored != expected {
        return Err(ckpt_err(
            path,
            format!("checkpoint/config mismatch: {stored} stored tensors, model has {expected}"),
        ));
    }
    Ok(model)
}
