//! Identity encoder, last-layer hypernetwork and the pretrain/fine-tune lifecycle.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_layer, Graph, ParamId, ParamStore, Tensor, Var};
use crate::deform::LastLayer;
use crate::error::{Error, Result};
use crate::image::{label, Image};
use crate::model::{IdentityMode, Model};

pub const ENCODER_GROUP: &str = "encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdDims {
    pub dynamic: usize,
    pub appearance: usize,
    pub geometry: usize,
}

impl Default for IdDims {
    fn default() -> Self {
        Self { dynamic: 16, appearance: 16, geometry: 16 }
    }
}

/// A reference portrait with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrame {
    pub image: Image,
    pub labels: Vec<u8>,
}

impl ReferenceFrame {
    /// Planar `[5,H,W]` input: foreground RGB, face mask, torso mask.
    pub fn encoder_input(&self) -> Tensor {
        let (w, h) = (self.image.width, self.image.height);
        let n = w * h;
        let mut data = vec![0.0; 5 * n];
        for p in 0..n {
            let l = self.labels[p];
            if l != label::BACKGROUND {
                for c in 0..3 {
                    data[c * n + p] = self.image.data[3 * p + c];
                }
            }
            data[3 * n + p] = label::is_face(l) as u8 as f64;
            data[4 * n + p] = (l == label::TORSO) as u8 as f64;
        }
        Tensor::from_parts(vec![5, h, w], data)
    }
}

/// Per-identity features as graph nodes, each `[1, *]`.
#[derive(Debug, Clone, Copy)]
pub struct IdFeatures {
    pub dynamic: Var,
    pub appearance: Var,
    pub geometry: Var,
    pub offset: Var,
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, seed: u64, zero: bool) -> Self {
        let (mut w, mut b) = init_layer(seed, 0, fan_in, fan_out);
        if zero {
            w.data_mut().fill(0.0);
            b.data_mut().fill(0.0);
        }
        Self { w: store.add(format!("{name}.w"), ENCODER_GROUP, w), b: store.add(format!("{name}.b"), ENCODER_GROUP, b) }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

/// Strided convolution stack, global pooling and dense heads.
#[derive(Debug, Clone)]
pub struct IdEncoder {
    pub width: usize,
    pub height: usize,
    pub dims: IdDims,
    convs: Vec<(ParamId, ParamId)>,
    heads: [Dense; 4],
}

pub const ENCODER_CHANNELS: [usize; 5] = [5, 8, 16, 16, 16];

impl IdEncoder {
    pub fn new(store: &mut ParamStore, width: usize, height: usize, dims: IdDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe1c0de);
        let mut convs = Vec::new();
        for (l, pair) in ENCODER_CHANNELS.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
            let wid = store.add(format!("idenc.conv{l}.w"), ENCODER_GROUP, Tensor::from_parts(vec![cout, cin, 3, 3], w));
            let bid = store.add(format!("idenc.conv{l}.b"), ENCODER_GROUP, Tensor::zeros(&[cout]));
            convs.push((wid, bid));
        }
        let feat = *ENCODER_CHANNELS.last().unwrap();
        let heads = [
            Dense::new(store, "idenc.dyn", feat, dims.dynamic, seed ^ 0xd1, false),
            Dense::new(store, "idenc.app", feat, dims.appearance, seed ^ 0xa2, false),
            Dense::new(store, "idenc.geo", feat, dims.geometry, seed ^ 0x63, false),
            Dense::new(store, "idenc.offset", feat, 3, seed ^ 0x0f, true),
        ];
        Self { width, height, dims, convs, heads }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend(self.heads.iter().flat_map(|d| [d.w, d.b]));
        ids
    }

    pub fn forward(&self, g: &mut Graph<'_>, reference: &ReferenceFrame) -> Result<IdFeatures> {
        let (w, h) = (reference.image.width, reference.image.height);
        if (w, h) != (self.width, self.height) || reference.labels.len() != w * h {
            return Err(Error::contract(format!(
                "identity encoder expects a {}x{} frame with labels, got {w}x{h} with {} labels",
                self.width,
                self.height,
                reference.labels.len()
            )));
        }
        let mut x = g.input(reference.encoder_input());
        for &(wid, bid) in &self.convs {
            let (cw, cb) = (g.param(wid), g.param(bid));
            x = g.conv2d(x, cw, cb, 2, 1)?;
            x = g.relu(x);
        }
        let pooled = g.global_avg_pool(x)?;
        let [dynamic, appearance, geometry, offset] = [0, 1, 2, 3].map(|i| self.heads[i].forward(g, pooled));
        Ok(IdFeatures { dynamic: dynamic?, appearance: appearance?, geometry: geometry?, offset: offset? })
    }
}

/// One generated layer: `fan_in x fan_out` weights followed by `fan_out` biases.
#[derive(Debug, Clone)]
pub struct HyperTarget {
    pub mlp: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: ParamId,
    pub b: ParamId,
}

/// Linear map from the dynamic feature to the final layers of the deformation MLPs.
#[derive(Debug, Clone)]
pub struct HyperNet {
    pub dim: usize,
    pub targets: Vec<HyperTarget>,
}

impl HyperNet {
    /// `targets` lists `(mlp name, fan_in, fan_out)`.
    pub fn new(store: &mut ParamStore, dim: usize, targets: &[(String, usize, usize)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e7);
        let targets = targets
            .iter()
            .map(|(mlp, fan_in, fan_out)| {
                let p = fan_in * fan_out + fan_out;
                let w: Vec<f64> = (0..dim * p).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
                let w = store.add(format!("hyper.{mlp}.w"), ENCODER_GROUP, Tensor::from_parts(vec![dim, p], w));
                let b = store.add(format!("hyper.{mlp}.b"), ENCODER_GROUP, Tensor::zeros(&[1, p]));
                HyperTarget { mlp: mlp.clone(), fan_in: *fan_in, fan_out: *fan_out, w, b }
            })
            .collect();
        Self { dim, targets }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.targets.iter().flat_map(|t| [t.w, t.b]).collect()
    }

    /// Emits one `(W [fan_in, fan_out], b [1, fan_out])` per target, in target order.
    pub fn emit(&self, g: &mut Graph<'_>, dynamic: Var) -> Result<Vec<LastLayer>> {
        if g.shape(dynamic) != [1, self.dim] {
            return Err(Error::dimension("hypernetwork input", format!("[1, {}]", self.dim), format!("{:?}", g.shape(dynamic))));
        }
        self.targets
            .iter()
            .map(|t| {
                let (w, b) = (g.param(t.w), g.param(t.b));
                let flat = g.linear(dynamic, w, Some(b))?;
                let wf = g.slice_cols(flat, 0, t.fan_in * t.fan_out)?;
                let w = g.reshape(wf, &[t.fan_in, t.fan_out])?;
                let b = g.slice_cols(flat, t.fan_in * t.fan_out, t.fan_out)?;
                Ok((w, b))
            })
            .collect()
    }

    pub fn emit_values(&self, store: &ParamStore, dynamic: &[f64]) -> Result<BTreeMap<String, LayerWeights>> {
        let mut g = Graph::new(store);
        let d = g.input(Tensor::row(dynamic));
        let layers = self.emit(&mut g, d)?;
        Ok(self
            .targets
            .iter()
            .zip(layers)
            .map(|(t, (w, b))| (t.mlp.clone(), LayerWeights { weight: g.value(w).clone(), bias: g.value(b).clone() }))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityBundle {
    pub dynamic_feature: Vec<f64>,
    pub appearance_feature: Vec<f64>,
    pub geometry_feature: Vec<f64>,
    pub canonical_offset: [f64; 3],
    pub last_layer_weights: BTreeMap<String, LayerWeights>,
}

impl IdentityBundle {
    pub fn distance(&self, other: &IdentityBundle) -> f64 {
        self.dynamic_feature.iter().zip(&other.dynamic_feature).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPhase {
    Pretrain,
    FinetuneInit,
    Finetune,
    Inference,
}

impl TransferPhase {
    pub fn advance(self, next: TransferPhase) -> Result<TransferPhase> {
        use TransferPhase::*;
        match (self, next) {
            (Pretrain, FinetuneInit) | (FinetuneInit, Finetune) | (Finetune, Inference) => Ok(next),
            _ => Err(Error::State(format!("illegal phase transition {self:?} -> {next:?}"))),
        }
    }
}

/// Runs the encoder and hypernetwork on a reference frame.
pub fn encode_identity(model: &Model, reference: &ReferenceFrame) -> Result<IdentityBundle> {
    let IdentityMode::Live { encoder, hyper } = &model.identity else {
        return Err(Error::State("identity encoding needs a pretrain-phase model".into()));
    };
    let mut g = Graph::new(&model.store);
    let f = encoder.forward(&mut g, reference)?;
    let row = |g: &Graph<'_>, v: Var| g.value(v).data().to_vec();
    let dynamic_feature = row(&g, f.dynamic);
    let o = row(&g, f.offset);
    Ok(IdentityBundle {
        last_layer_weights: hyper.emit_values(&model.store, &dynamic_feature)?,
        dynamic_feature,
        appearance_feature: row(&g, f.appearance),
        geometry_feature: row(&g, f.geometry),
        canonical_offset: [o[0], o[1], o[2]],
    })
}

/// Materialises `bundle` into a model with plain identity parameters. The encoder
/// and hypernetwork are dropped.
pub fn finetune_init(pretrained: &Model, bundle: &IdentityBundle) -> Result<Model> {
    if !matches!(pretrained.identity, IdentityMode::Live { .. }) {
        return Err(Error::State("fine-tune initialisation needs a pretrain-phase model".into()));
    }
    let mut model = Model::new(pretrained.config.clone(), false)?;
    model.store.copy_matching_from(&pretrained.store);
    model.apply_bundle(bundle)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::synthdata::Dataset;

    fn reference(ds: &Dataset, id: usize, frame: usize) -> ReferenceFrame {
        let f = ds.frame(id, frame);
        ReferenceFrame { image: f.image(ds.manifest.width, ds.manifest.height), labels: f.labels.clone() }
    }

    fn live_model() -> Model {
        Model::new(ModelConfig::tiny(Variant::ODR, 16, 16), true).unwrap()
    }

    #[test]
    fn phase_transitions() {
        use TransferPhase::*;
        assert_eq!(Pretrain.advance(FinetuneInit).unwrap(), FinetuneInit);
        assert_eq!(FinetuneInit.advance(Finetune).unwrap(), Finetune);
        assert_eq!(Finetune.advance(Inference).unwrap(), Inference);
        for (a, b) in [(Pretrain, Finetune), (Inference, Pretrain), (Finetune, FinetuneInit), (Pretrain, Pretrain)] {
            assert!(matches!(a.advance(b), Err(Error::State(_))));
        }
    }

    #[test]
    fn encoding_is_deterministic_and_identity_specific() {
        let ds = Dataset::generate(2, 2, 16, 16, 4).unwrap();
        let m = live_model();
        let a = encode_identity(&m, &reference(&ds, 0, 0)).unwrap();
        assert_eq!(a, encode_identity(&m, &reference(&ds, 0, 0)).unwrap());
        let b = encode_identity(&m, &reference(&ds, 1, 0)).unwrap();
        assert!(a.distance(&b) > 0.0);
        let (fan_in, fan_out) = m.face.as_ref().unwrap().mlp.last_layer_shape();
        assert_eq!(a.last_layer_weights["face.mlp"].weight.shape(), &[fan_in, fan_out]);
    }

    #[test]
    fn resolution_mismatch_is_a_contract_error() {
        let ds = Dataset::generate(1, 1, 24, 24, 4).unwrap();
        let m = live_model();
        assert!(matches!(encode_identity(&m, &reference(&ds, 0, 0)), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_encoder_yields_bias_defined_layers() {
        let ds = Dataset::generate(1, 1, 16, 16, 4).unwrap();
        let mut m = live_model();
        let IdentityMode::Live { encoder, hyper } = m.identity.clone() else { unreachable!() };
        for id in encoder.param_ids() {
            m.store.value_mut(id).data_mut().fill(0.0);
        }
        for t in &hyper.targets {
            let v: Vec<f64> = (0..m.store.value(t.b).len()).map(|i| (i as f64 * 0.37).sin()).collect();
            m.store.value_mut(t.b).data_mut().copy_from_slice(&v);
        }
        let b = encode_identity(&m, &reference(&ds, 0, 0)).unwrap();
        assert!(b.dynamic_feature.iter().chain(&b.appearance_feature).chain(&b.geometry_feature).all(|&v| v == 0.0));
        assert_eq!(b.canonical_offset, [0.0; 3]);
        for t in &hyper.targets {
            let hb = m.store.value(t.b).data();
            let lw = &b.last_layer_weights[&t.mlp];
            assert_eq!(lw.weight.data(), &hb[..t.fan_in * t.fan_out]);
            assert_eq!(lw.bias.data(), &hb[t.fan_in * t.fan_out..]);
        }
    }

    #[test]
    fn hypernet_is_linear_and_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        let h = HyperNet::new(&mut store, 2, &[("m".to_string(), 2, 1)], 5);
        store.value_mut(h.targets[0].b).data_mut().copy_from_slice(&[0.5, -0.25, 1.0]);
        let w = store.value(h.targets[0].w).data().to_vec();
        let v = [0.7, -1.3];
        let out = h.emit_values(&store, &v).unwrap();
        let hand: Vec<f64> = (0..3).map(|j| v[0] * w[j] + v[1] * w[3 + j] + [0.5, -0.25, 1.0][j]).collect();
        let got = &out["m"];
        assert_eq!(got.weight.shape(), &[2, 1]);
        for (a, b) in got.weight.data().iter().chain(got.bias.data()).zip(&hand) {
            assert!((a - b).abs() < 1e-15);
        }
        let e0 = &h.emit_values(&store, &[0.0, 0.0]).unwrap()["m"];
        let e2 = &h.emit_values(&store, &[1.4, -2.6]).unwrap()["m"];
        for i in 0..2 {
            let lhs = e2.weight.data()[i] - e0.weight.data()[i];
            let rhs = 2.0 * (got.weight.data()[i] - e0.weight.data()[i]);
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }
}
