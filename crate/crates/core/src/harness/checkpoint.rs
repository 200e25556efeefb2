//! Model and optimiser state in the binary checkpoint container.
//!
//! Arrays: `param/<name>` (f32), `master/<name>` (f64 copy used on load),
//! `adam.m/<name>` and `adam.v/<name>` (f64).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{Adam, Moments};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::idtransfer::{IdentityBundle, TransferPhase};
use crate::model::{Model, ModelConfig};
use crate::synthdata::{ArrayData, Checkpoint, NamedArray};

pub const CHECKPOINT_KIND: &str = "talkfield-model";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub model: ModelConfig,
    /// Encoder-and-hypernetwork conditioning.
    pub live: bool,
    pub phase: TransferPhase,
    pub step: usize,
    #[serde(default)]
    pub adam_step: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub bundle: Option<IdentityBundle>,
}

impl CheckpointMeta {
    pub fn new(model: &Model, phase: TransferPhase, step: usize, train: Option<TrainConfig>, bundle: Option<IdentityBundle>) -> Self {
        Self { kind: CHECKPOINT_KIND.into(), model: model.config.clone(), live: model.is_live(), phase, step, adam_step: 0, train, bundle }
    }
}

pub fn to_checkpoint(model: &Model, adam: Option<&Adam>, meta: &CheckpointMeta) -> Result<Checkpoint> {
    let mut meta = meta.clone();
    meta.adam_step = adam.map_or(0, |a| a.step);
    let mut arrays = Vec::new();
    for (_, p) in model.store.iter() {
        let shape = p.value.shape().to_vec();
        let arr = |prefix: &str, data: ArrayData| NamedArray { name: format!("{prefix}/{}", p.name), group: p.group.clone(), shape: shape.clone(), data };
        arrays.push(arr("param", ArrayData::F32(p.value.data().iter().map(|&v| v as f32).collect())));
        arrays.push(arr("master", ArrayData::F64(p.value.data().to_vec())));
        if let Some(st) = adam.and_then(|a| a.state.get(&p.name)) {
            arrays.push(arr("adam.m", ArrayData::F64(st.m.clone())));
            arrays.push(arr("adam.v", ArrayData::F64(st.v.clone())));
        }
    }
    let meta = serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    Ok(Checkpoint { meta, arrays })
}

pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, Adam, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone()).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("unexpected checkpoint kind {:?}", meta.kind)));
    }
    let mut model = Model::new(meta.model.clone(), meta.live)?;
    let adam_cfg = meta.train.as_ref().map(|t| t.adam).unwrap_or_default();
    let mut adam = Adam::new(adam_cfg);
    adam.step = meta.adam_step;
    let names: Vec<(String, Vec<usize>)> = model.store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
    for (name, shape) in names {
        let pick = |prefix: &str| ckpt.array(&format!("{prefix}/{name}"));
        let src = pick("master").or_else(|| pick("param")).ok_or_else(|| Error::Checkpoint(format!("missing array for parameter {name}")))?;
        if src.shape != shape {
            return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}, expected {shape:?}", src.shape)));
        }
        model.store.set_value(&name, Tensor::new(shape.clone(), src.data.to_f64())?)?;
        if let (Some(m), Some(v)) = (pick("adam.m"), pick("adam.v")) {
            adam.state.insert(name.clone(), Moments { m: m.data.to_f64(), v: v.data.to_f64() });
        }
    }
    Ok((model, adam, meta))
}

pub fn save_model(path: &Path, model: &Model, adam: Option<&Adam>, meta: &CheckpointMeta) -> Result<()> {
    to_checkpoint(model, adam, meta)?.save(path)
}

pub fn load_model(path: &Path) -> Result<(Model, Adam, CheckpointMeta)> {
    from_checkpoint(&Checkpoint::load(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::synthdata::Dataset;

    #[test]
    fn round_trip_restores_parameters_and_renders() {
        let mut model = Model::new(ModelConfig::tiny(Variant::ODR, 8, 8), false).unwrap();
        for (_, p) in model.store.iter_mut() {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 1e-3 * ((i as f64) * 0.7).sin() + 1e-9;
            }
        }
        let meta = CheckpointMeta::new(&model, TransferPhase::Finetune, 3, None, None);
        let ckpt = to_checkpoint(&model, None, &meta).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let (back, _, m) = from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(m.step, 3);
        assert_eq!(back.store.snapshot(), model.store.snapshot());
        assert_eq!(to_checkpoint(&back, None, &meta).unwrap().to_bytes().unwrap(), bytes);
        let ds = Dataset::generate(1, 1, 8, 8, 0).unwrap();
        let (cam, s) = (ds.camera(0, 0), &ds.frame(0, 0).signals);
        assert_eq!(back.render_frame(&cam, s, None).unwrap(), model.render_frame(&cam, s, None).unwrap());
    }

    #[test]
    fn header_lists_every_trainable_array() {
        let model = Model::new(ModelConfig::tiny(Variant::ODR, 8, 8), false).unwrap();
        let ckpt = to_checkpoint(&model, None, &CheckpointMeta::new(&model, TransferPhase::Finetune, 0, None, None)).unwrap();
        for (_, p) in model.store.iter() {
            assert!(ckpt.array(&format!("param/{}", p.name)).is_some(), "{}", p.name);
        }
        for name in ["param/face.enc.table", "param/canon.enc.table", "param/id.dyn", "param/id.offset", "param/face.mlp.w1"] {
            assert!(ckpt.array(name).is_some(), "{name}");
        }
    }
}
