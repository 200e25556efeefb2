//! The full portrait model: deformation, canonical radiance and identity conditioning.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::deform::{warp, AttentionScores, DrivingSignals, FaceField, FieldConfig, LastLayer, MonolithicField, SignalBatch, SignalDims, SignalVars, TorsoField, WarpIdentity};
use crate::error::{Error, Result};
use crate::hashenc::HashGridSpec;
use crate::idtransfer::{HyperNet, IdDims, IdEncoder, IdFeatures, IdentityBundle, ReferenceFrame};
use crate::image::Image;
use crate::radiance::{encode_direction, RadianceConfig, RadianceField, StaticIdentity};
use crate::render::{norm, transmittance, Camera, RayBatch};

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Signals fed straight into the radiance field.
    #[serde(rename = "o")]
    O,
    /// One deformation field on all signals.
    #[serde(rename = "od")]
    OD,
    /// Region-specific face and torso cascade.
    #[serde(rename = "odr")]
    ODR,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::O, Variant::OD, Variant::ODR];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::O => "O",
            Variant::OD => "O+D",
            Variant::ODR => "O+D+R",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('+', "").as_str() {
            "o" => Ok(Variant::O),
            "od" => Ok(Variant::OD),
            "odr" => Ok(Variant::ODR),
            _ => Err(Error::Config(format!("unknown variant {s:?}; expected o, od or odr"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub signal_dims: SignalDims,
    pub deform: FieldConfig,
    pub radiance: RadianceConfig,
    pub id: IdDims,
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    /// Frame size seen by the identity encoder.
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, width: usize, height: usize) -> Self {
        Self {
            variant,
            signal_dims: SignalDims::default(),
            deform: FieldConfig::default(),
            radiance: RadianceConfig::default(),
            id: IdDims::default(),
            samples_per_ray: 64,
            background: [0.5; 3],
            width,
            height,
            seed: 0,
        }
    }

    /// Reduced network for single-core training at 64 px.
    pub fn desk(variant: Variant, width: usize, height: usize) -> Self {
        let hash = HashGridSpec { table_size_log2: 14, base_resolution: 8, per_level_scale: 1.35, ..HashGridSpec::default() };
        Self {
            deform: FieldConfig { hash, width: 32, hidden_layers: 2, ..FieldConfig::default() },
            radiance: RadianceConfig { hash, width: 32, ..RadianceConfig::default() },
            samples_per_ray: 24,
            ..Self::new(variant, width, height)
        }
    }

    /// A very small network for unit tests and micro-scenes.
    pub fn tiny(variant: Variant, width: usize, height: usize) -> Self {
        let hash = HashGridSpec { levels: 4, features_per_level: 2, table_size_log2: 10, base_resolution: 4, per_level_scale: 2.0, seed: 0 };
        Self {
            deform: FieldConfig { hash, width: 16, hidden_layers: 1, attention_dim: 4 },
            radiance: RadianceConfig { hash, width: 16, geo_features: 7, dir_frequencies: 2 },
            id: IdDims { dynamic: 4, appearance: 4, geometry: 4 },
            samples_per_ray: 8,
            ..Self::new(variant, width, height)
        }
    }
}

/// Learnable per-identity codes used once the encoder has been discarded.
#[derive(Debug, Clone)]
pub struct IdCodes {
    pub dynamic: ParamId,
    pub appearance: ParamId,
    pub geometry: ParamId,
    pub offset: ParamId,
}

#[derive(Debug, Clone)]
pub enum IdentityMode {
    Codes(IdCodes),
    Live { encoder: IdEncoder, hyper: HyperNet },
}

pub const ID_GROUP: &str = "id";

/// Identity inputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct IdVars {
    pub features: IdFeatures,
    /// Generated final layers, in the order of [`Model::deform_mlps`].
    pub last: [Option<LastLayer>; 2],
}

/// Per-sample outputs of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PointOutputs {
    pub sigma: Var,
    pub color: Var,
    pub delta_face: Option<Var>,
    pub delta_torso: Option<Var>,
    pub attention: Option<AttentionScores>,
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RayOutputs {
    /// Composited over the background, `[R,3]`.
    pub rgb: Var,
    pub alpha: Var,
    pub depth: Var,
    pub points: PointOutputs,
}

/// A rendered frame with its auxiliary maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRender {
    pub image: Image,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    /// Per-pixel `sum_i T_i alpha_i |delta_face|`.
    pub face_heat: Vec<f64>,
    pub torso_heat: Vec<f64>,
    /// Per-pixel expected attention scores `(lip, eye, torso)`.
    pub attention: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub face: Option<FaceField>,
    pub torso: Option<TorsoField>,
    pub mono: Option<MonolithicField>,
    pub radiance: RadianceField,
    pub identity: IdentityMode,
}

impl Model {
    /// `live` selects encoder-and-hypernetwork conditioning; otherwise the identity
    /// is held in plain codes.
    pub fn new(config: ModelConfig, live: bool) -> Result<Self> {
        if config.samples_per_ray < 2 {
            return Err(Error::Config(format!("samples_per_ray must be at least 2, got {}", config.samples_per_ray)));
        }
        let mut store = ParamStore::new();
        let (dims, id, seed) = (config.signal_dims, config.id, config.seed);
        let (mut face, mut torso, mut mono) = (None, None, None);
        let mut extra = 0;
        match config.variant {
            Variant::O => extra = dims.total() + id.dynamic,
            Variant::OD => mono = Some(MonolithicField::new(&mut store, &config.deform, dims, id.dynamic, seed ^ 0x3)?),
            Variant::ODR => {
                face = Some(FaceField::new(&mut store, &config.deform, dims, id.dynamic, seed ^ 0x1)?);
                torso = Some(TorsoField::new(&mut store, &config.deform, id.dynamic, seed ^ 0x2)?);
            }
        }
        let radiance = RadianceField::new(&mut store, &config.radiance, id.geometry, id.appearance, extra, seed ^ 0x4)?;
        let mlps: Vec<Mlp> = face.iter().map(|f: &FaceField| f.mlp.clone()).chain(torso.iter().map(|t: &TorsoField| t.mlp.clone())).chain(mono.iter().map(|m: &MonolithicField| m.mlp.clone())).collect();
        let identity = if live {
            let targets: Vec<(String, usize, usize)> = mlps.iter().map(|m| (m.name.clone(), m.last_layer_shape().0, m.last_layer_shape().1)).collect();
            let encoder = IdEncoder::new(&mut store, config.width, config.height, id, seed ^ 0x5);
            let hyper = HyperNet::new(&mut store, id.dynamic, &targets, seed ^ 0x6);
            IdentityMode::Live { encoder, hyper }
        } else {
            let mut add = |name: &str, d: usize| store.add(name, ID_GROUP, Tensor::zeros(&[1, d]));
            let codes = IdCodes {
                dynamic: add("id.dyn", id.dynamic),
                appearance: add("id.app", id.appearance),
                geometry: add("id.geo", id.geometry),
                offset: add("id.offset", 3),
            };
            for m in &mlps {
                for p in [*m.weights.last().unwrap(), *m.biases.last().unwrap()] {
                    store.get_mut(p).group = ID_GROUP.into();
                }
            }
            IdentityMode::Codes(codes)
        };
        Ok(Self { config, store, face, torso, mono, radiance, identity })
    }

    pub fn is_live(&self) -> bool {
        matches!(self.identity, IdentityMode::Live { .. })
    }

    /// Deformation MLPs whose final layer carries identity information.
    pub fn deform_mlps(&self) -> Vec<&Mlp> {
        let mut v: Vec<&Mlp> = Vec::new();
        if let Some(f) = &self.face {
            v.push(&f.mlp);
        }
        if let Some(t) = &self.torso {
            v.push(&t.mlp);
        }
        if let Some(m) = &self.mono {
            v.push(&m.mlp);
        }
        v
    }

    fn last_layer_params(&self) -> Vec<(ParamId, ParamId)> {
        self.deform_mlps().iter().map(|m| (*m.weights.last().unwrap(), *m.biases.last().unwrap())).collect()
    }

    /// Writes a bundle into the identity codes and final layers.
    pub fn apply_bundle(&mut self, bundle: &IdentityBundle) -> Result<()> {
        let IdentityMode::Codes(codes) = self.identity.clone() else {
            return Err(Error::State("bundles are materialised only into code-conditioned models".into()));
        };
        let set = |store: &mut ParamStore, id: ParamId, v: &[f64]| -> Result<()> {
            let name = store.get(id).name.clone();
            store.set_value(&name, Tensor::new(vec![1, v.len()], v.to_vec())?)
        };
        set(&mut self.store, codes.dynamic, &bundle.dynamic_feature)?;
        set(&mut self.store, codes.appearance, &bundle.appearance_feature)?;
        set(&mut self.store, codes.geometry, &bundle.geometry_feature)?;
        set(&mut self.store, codes.offset, &bundle.canonical_offset)?;
        let names: Vec<String> = self.deform_mlps().iter().map(|m| m.name.clone()).collect();
        if names.len() != bundle.last_layer_weights.len() {
            return Err(Error::contract(format!("bundle carries {} layers, model has {}", bundle.last_layer_weights.len(), names.len())));
        }
        for (name, (w, b)) in names.iter().zip(self.last_layer_params()) {
            let lw = bundle.last_layer_weights.get(name).ok_or_else(|| Error::contract(format!("bundle has no layer for {name}")))?;
            let (wn, bn) = (self.store.get(w).name.clone(), self.store.get(b).name.clone());
            self.store.set_value(&wn, lw.weight.clone())?;
            self.store.set_value(&bn, lw.bias.clone())?;
        }
        Ok(())
    }

    /// Identity inputs for a pass. Live models read `reference`; code models must
    /// not be given one.
    pub fn id_vars(&self, g: &mut Graph<'_>, reference: Option<&ReferenceFrame>) -> Result<IdVars> {
        match (&self.identity, reference) {
            (IdentityMode::Live { encoder, hyper }, Some(r)) => {
                let features = encoder.forward(g, r)?;
                let layers = hyper.emit(g, features.dynamic)?;
                let mut last = [None, None];
                for (slot, l) in last.iter_mut().zip(layers) {
                    *slot = Some(l);
                }
                Ok(IdVars { features, last })
            }
            (IdentityMode::Live { .. }, None) => Err(Error::State("a pretrain-phase model needs a reference frame".into())),
            (IdentityMode::Codes(c), None) => {
                let features = IdFeatures {
                    dynamic: g.param(c.dynamic),
                    appearance: g.param(c.appearance),
                    geometry: g.param(c.geometry),
                    offset: g.param(c.offset),
                };
                Ok(IdVars { features, last: [None, None] })
            }
            (IdentityMode::Codes(_), Some(_)) => Err(Error::State("the identity encoder was discarded; reference frames are no longer read".into())),
        }
    }

    /// Per-sample forward pass. `x [N,3]`, `dirs [N, 6F]`.
    pub fn forward_points(&self, g: &mut Graph<'_>, x: Var, dirs: Var, s: &SignalVars, id: &IdVars) -> Result<PointOutputs> {
        let n = g.shape(x)[0];
        let id_dyn = g.broadcast_rows(id.features.dynamic, n)?;
        let sid = StaticIdentity { geometry: Some(id.features.geometry), appearance: Some(id.features.appearance), offset: Some(id.features.offset) };
        let (x_prime, delta_face, delta_torso, attention, clamped, extra) = match self.config.variant {
            Variant::O => {
                let extra = g.concat(&[s.audio, s.eye, s.pose, id_dyn])?;
                (x, None, None, None, 0, Some(extra))
            }
            Variant::OD => {
                let mono = self.mono.as_ref().expect("OD model has a monolithic field");
                let (delta, clamped) = mono.forward(g, x, s, Some(id_dyn), id.last[0])?;
                let xp = g.add(x, delta)?;
                (xp, Some(delta), None, None, clamped, None)
            }
            Variant::ODR => {
                let (face, torso) = (self.face.as_ref().expect("face field"), self.torso.as_ref().expect("torso field"));
                let w = warp(g, face, torso, x, s, WarpIdentity { id_dyn: Some(id_dyn), face_last: id.last[0], torso_last: id.last[1] })?;
                let r = w.result;
                (r.x_prime, Some(r.delta_face), Some(r.delta_torso), Some(w.attention), w.clamped, None)
            }
        };
        let rad = self.radiance.forward(g, x_prime, dirs, sid, extra)?;
        Ok(PointOutputs { sigma: rad.sigma, color: rad.color, delta_face, delta_torso, attention, clamped: clamped + rad.clamped })
    }

    /// Encoded view directions for every sample of a batch.
    pub fn dirs_tensor(&self, batch: &RayBatch) -> Tensor {
        let f = self.config.radiance.dir_frequencies;
        let data: Vec<f64> = batch.dirs.chunks_exact(3).flat_map(|d| encode_direction([d[0], d[1], d[2]], f)).collect();
        Tensor::from_parts(vec![batch.num_samples(), 6 * f], data)
    }

    /// Renders a ray batch. `signals` has one row per sample.
    pub fn render_rays(&self, g: &mut Graph<'_>, batch: &RayBatch, signals: &SignalBatch, id: &IdVars) -> Result<RayOutputs> {
        if signals.rows() != batch.num_samples() {
            return Err(Error::dimension("render signals", format!("{} rows", batch.num_samples()), format!("{}", signals.rows())));
        }
        let x = g.input(batch.points_tensor());
        let dirs = g.input(self.dirs_tensor(batch));
        let s = SignalVars::new(g, signals);
        let points = self.forward_points(g, x, dirs, &s, id)?;
        let out = batch.integrate(g, points.sigma, points.color)?;
        let rgb = g.slice_cols(out, 0, 3)?;
        let alpha = g.slice_cols(out, 3, 1)?;
        let depth = g.slice_cols(out, 4, 1)?;
        let r = batch.num_rays();
        let bg = self.config.background;
        let bg = g.input(Tensor::from_parts(vec![r, 3], (0..r).flat_map(|_| bg).collect()));
        let neg = g.scale(alpha, -1.0);
        let clear = g.add_scalar(neg, 1.0);
        let bg = g.mul_col(bg, clear)?;
        let rgb = g.add(rgb, bg)?;
        Ok(RayOutputs { rgb, alpha, depth, points })
    }

    /// Renders every pixel of `camera` without recording gradients for later use.
    pub fn render_frame(&self, camera: &Camera, signals: &DrivingSignals, reference: Option<&ReferenceFrame>) -> Result<FrameRender> {
        signals.validate(self.config.signal_dims)?;
        let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
        let s = self.config.samples_per_ray;
        let mut f = FrameRender {
            image: Image::filled(w, h, [0.0; 3]),
            alpha: vec![0.0; w * h],
            depth: vec![0.0; w * h],
            face_heat: vec![0.0; w * h],
            torso_heat: vec![0.0; w * h],
            attention: vec![[0.0; 3]; w * h],
        };
        let pixels: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
        // A fresh graph per tile keeps the tape small.
        for tile in pixels.chunks(512) {
            let rays = tile.iter().map(|&(r, c)| camera.ray(r, c)).collect();
            let batch = RayBatch::new(rays, s, None)?;
            let mut g = Graph::new(&self.store);
            let id = self.id_vars(&mut g, reference)?;
            let out = self.render_rays(&mut g, &batch, &SignalBatch::uniform(signals, batch.num_samples()), &id)?;
            let rgb = g.value(out.rgb).data();
            let sigma = g.value(out.points.sigma).data();
            let rows = |v: Option<Var>, cols: usize| v.map(|v| g.value(v).data().to_vec()).unwrap_or_else(|| vec![0.0; cols * batch.num_samples()]);
            let df = rows(out.points.delta_face, 3);
            let dt = rows(out.points.delta_torso, 3);
            let att = out.points.attention;
            let (al, ae, at) = (rows(att.map(|a| a.f_lip), 1), rows(att.map(|a| a.f_eye), 1), rows(att.map(|a| a.f_torso), 1));
            for (k, &(r, c)) in tile.iter().enumerate() {
                let p = r * w + c;
                f.image.set(r, c, [rgb[3 * k], rgb[3 * k + 1], rgb[3 * k + 2]]);
                f.alpha[p] = g.value(out.alpha).data()[k];
                f.depth[p] = g.value(out.depth).data()[k];
                let span = k * s..(k + 1) * s;
                let trans = transmittance(&sigma[span.clone()], &batch.delta[span.clone()]);
                for (i, j) in span.enumerate() {
                    let wi = trans[i] - trans[i + 1];
                    f.face_heat[p] += wi * norm([df[3 * j], df[3 * j + 1], df[3 * j + 2]]);
                    f.torso_heat[p] += wi * norm([dt[3 * j], dt[3 * j + 1], dt[3 * j + 2]]);
                    f.attention[p][0] += wi * al[j];
                    f.attention[p][1] += wi * ae[j];
                    f.attention[p][2] += wi * at[j];
                }
            }
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::idtransfer::{encode_identity, finetune_init};
    use crate::synthdata::{world_camera, Dataset};

    fn reference(ds: &Dataset) -> ReferenceFrame {
        let f = ds.frame(0, 0);
        ReferenceFrame { image: f.image(16, 16), labels: f.labels.clone() }
    }

    fn perturb(model: &mut Model, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in model.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }

    fn query(model: &Model, reference: Option<&ReferenceFrame>, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 100;
        let x: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let dirs: Vec<f64> = (0..n)
            .flat_map(|_| {
                let d = crate::render::normalize([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                encode_direction(d, model.config.radiance.dir_frequencies)
            })
            .collect();
        let frames: Vec<DrivingSignals> = (0..n)
            .map(|_| DrivingSignals {
                audio: (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                eye: vec![rng.gen_range(0.0..0.4)],
                pose: std::array::from_fn(|_| rng.gen_range(-0.1..0.1)),
            })
            .collect();
        let refs: Vec<&DrivingSignals> = frames.iter().collect();
        let batch = SignalBatch::from_frames(&refs, &vec![1; n]);
        let mut g = Graph::new(&model.store);
        let id = model.id_vars(&mut g, reference).unwrap();
        let xv = g.input(Tensor::new(vec![n, 3], x).unwrap());
        let dv = g.input(Tensor::new(vec![n, 6 * model.config.radiance.dir_frequencies], dirs).unwrap());
        let s = SignalVars::new(&mut g, &batch);
        let out = model.forward_points(&mut g, xv, dv, &s, &id).unwrap();
        let mut v = g.value(out.sigma).data().to_vec();
        v.extend_from_slice(g.value(out.color).data());
        if let Some(d) = out.delta_face {
            v.extend_from_slice(g.value(d).data());
        }
        v
    }

    #[test]
    fn materialisation_is_bit_exact_for_every_variant() {
        let ds = Dataset::generate(1, 1, 16, 16, 2).unwrap();
        let r = reference(&ds);
        for variant in Variant::ALL {
            let mut live = Model::new(ModelConfig::tiny(variant, 16, 16), true).unwrap();
            perturb(&mut live, 0.05, 9);
            let bundle = encode_identity(&live, &r).unwrap();
            let codes = finetune_init(&live, &bundle).unwrap();
            let a = query(&live, Some(&r), 1);
            let b = query(&codes, None, 1);
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), "{variant}");
        }
    }

    #[test]
    fn reference_frames_are_not_read_after_discard() {
        let ds = Dataset::generate(1, 1, 16, 16, 2).unwrap();
        let codes = Model::new(ModelConfig::tiny(Variant::ODR, 16, 16), false).unwrap();
        let mut g = Graph::new(&codes.store);
        assert!(matches!(codes.id_vars(&mut g, Some(&reference(&ds))), Err(Error::State(_))));
        let live = Model::new(ModelConfig::tiny(Variant::ODR, 16, 16), true).unwrap();
        let mut g = Graph::new(&live.store);
        assert!(matches!(live.id_vars(&mut g, None), Err(Error::State(_))));
    }

    #[test]
    fn gradients_reach_materialised_layers_and_offset() {
        let ds = Dataset::generate(1, 1, 16, 16, 2).unwrap();
        let mut live = Model::new(ModelConfig::tiny(Variant::ODR, 16, 16), true).unwrap();
        perturb(&mut live, 0.05, 4);
        let bundle = encode_identity(&live, &reference(&ds)).unwrap();
        let m = finetune_init(&live, &bundle).unwrap();
        let cam = world_camera(16, 16);
        let rays = (0..8).map(|i| cam.ray(6 + i / 4, 6 + i % 4)).collect();
        let batch = RayBatch::new(rays, 8, None).unwrap();
        let sig = &ds.frame(0, 0).signals;
        let mut g = Graph::new(&m.store);
        let id = m.id_vars(&mut g, None).unwrap();
        let out = m.render_rays(&mut g, &batch, &SignalBatch::uniform(sig, batch.num_samples()), &id).unwrap();
        let d = out.points.delta_face.unwrap();
        let sq = g.square(out.rgb);
        let a = g.sum(sq);
        let dq = g.square(d);
        let b = g.sum(dq);
        let loss = g.add(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        let IdentityMode::Codes(c) = &m.identity else { unreachable!() };
        let nz = |id: ParamId| grads.param(id).map_or(false, |v| v.iter().any(|x| *x != 0.0));
        assert!(nz(c.offset));
        let (w, b) = m.last_layer_params()[0];
        assert!(nz(w) && nz(b));
    }

    #[test]
    fn untrained_frame_has_no_deformation_heat() {
        let m = Model::new(ModelConfig::tiny(Variant::ODR, 8, 8), false).unwrap();
        let ds = Dataset::generate(1, 1, 8, 8, 2).unwrap();
        let f = m.render_frame(&ds.camera(0, 0), &ds.frame(0, 0).signals, None).unwrap();
        assert!(f.face_heat.iter().chain(&f.torso_heat).all(|&v| v == 0.0));
        assert!(f.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&j).unwrap(), v);
        }
        assert!("x".parse::<Variant>().is_err());
    }
}
