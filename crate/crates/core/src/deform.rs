//! Region-specific cascaded deformation fields.
//!
//! The face field sees the audio-motion and eye signals, the torso field sees the
//! head pose plus the face field's offset at the same point, and the canonical
//! coordinate is `x' = x + dx_face + dx_torso`. Each signal is gated by a per-point
//! attention score before it reaches its field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Mlp, MlpSpec, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::hashenc::{HashEncoder, HashGridSpec};

/// Optimiser group of every deformation-field parameter.
pub const DEFORM_GROUP: &str = "deform";

/// Per-frame conditioning signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingSignals {
    /// Audio-motion feature `F_a`.
    pub audio: Vec<f64>,
    /// Eye aspect ratio `F_e`; zero means closed.
    pub eye: Vec<f64>,
    /// Head pose `F_h`: three rotations then three translations.
    pub pose: [f64; 6],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalDims {
    pub audio: usize,
    pub eye: usize,
    pub pose: usize,
}

impl Default for SignalDims {
    fn default() -> Self {
        Self { audio: 32, eye: 1, pose: 6 }
    }
}

impl SignalDims {
    pub fn total(&self) -> usize {
        self.audio + self.eye + self.pose
    }
}

impl DrivingSignals {
    pub fn neutral(dims: SignalDims, eye_open: f64) -> Self {
        Self { audio: vec![0.0; dims.audio], eye: vec![eye_open; dims.eye], pose: [0.0; 6] }
    }

    pub fn validate(&self, dims: SignalDims) -> Result<()> {
        if self.audio.len() != dims.audio || self.eye.len() != dims.eye || dims.pose != 6 {
            return Err(Error::contract(format!(
                "signal dimensions ({}, {}, 6) do not match the manifest ({}, {}, {})",
                self.audio.len(),
                self.eye.len(),
                dims.audio,
                dims.eye,
                dims.pose
            )));
        }
        let all = self.audio.iter().chain(&self.eye).chain(&self.pose);
        if let Some(v) = all.clone().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite driving signal {v}")));
        }
        if let Some(v) = self.eye.iter().find(|v| **v < 0.0) {
            return Err(Error::contract(format!("negative eye aspect ratio {v}")));
        }
        Ok(())
    }
}

/// Per-sample signal matrices for one batch.
#[derive(Debug, Clone)]
pub struct SignalBatch {
    pub audio: Tensor,
    pub eye: Tensor,
    pub pose: Tensor,
}

impl SignalBatch {
    /// Repeats each frame's signals for `counts[i]` consecutive sample rows.
    pub fn from_frames(frames: &[&DrivingSignals], counts: &[usize]) -> Self {
        let mut audio = Vec::new();
        let mut eye = Vec::new();
        let mut pose = Vec::new();
        let n: usize = counts.iter().sum();
        for (s, &c) in frames.iter().zip(counts) {
            for _ in 0..c {
                audio.extend_from_slice(&s.audio);
                eye.extend_from_slice(&s.eye);
                pose.extend_from_slice(&s.pose);
            }
        }
        let da = frames.first().map_or(0, |s| s.audio.len());
        let de = frames.first().map_or(0, |s| s.eye.len());
        Self {
            audio: Tensor::new(vec![n, da], audio).expect("uniform signal dims"),
            eye: Tensor::new(vec![n, de], eye).expect("uniform signal dims"),
            pose: Tensor::new(vec![n, 6], pose).expect("uniform signal dims"),
        }
    }

    pub fn uniform(signals: &DrivingSignals, n: usize) -> Self {
        Self::from_frames(&[signals], &[n])
    }

    pub fn rows(&self) -> usize {
        self.audio.rows()
    }
}

/// Graph handles for a [`SignalBatch`].
#[derive(Debug, Clone, Copy)]
pub struct SignalVars {
    pub audio: Var,
    pub eye: Var,
    pub pose: Var,
}

impl SignalVars {
    pub fn new(g: &mut Graph<'_>, batch: &SignalBatch) -> Self {
        Self { audio: g.input(batch.audio.clone()), eye: g.input(batch.eye.clone()), pose: g.input(batch.pose.clone()) }
    }
}

/// Dot-product gate: `f_s = sigmoid(<q_s, k(x)> / sqrt(d))` with `k` a linear
/// projection of the encoder features.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub key: ParamId,
    pub queries: ParamId,
    pub dim: usize,
}

impl AttentionHead {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, feat_dim: usize, dim: usize, signals: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (feat_dim as f64).sqrt();
        let key: Vec<f64> = (0..feat_dim * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let queries: Vec<f64> = (0..dim * signals).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self {
            key: store.add(format!("{name}.key"), group, Tensor::new(vec![feat_dim, dim], key).expect("shape")),
            queries: store.add(format!("{name}.query"), group, Tensor::new(vec![dim, signals], queries).expect("shape")),
            dim,
        }
    }

    /// `[N, signals]` scores in `(0, 1)`.
    pub fn scores(&self, g: &mut Graph<'_>, features: Var) -> Result<Var> {
        let (k, q) = (g.param(self.key), g.param(self.queries));
        let keys = g.linear(features, k, None)?;
        let logits = g.linear(keys, q, None)?;
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        Ok(g.sigmoid(logits))
    }
}

/// Architecture shared by the deformation fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldConfig {
    pub hash: HashGridSpec,
    pub width: usize,
    pub hidden_layers: usize,
    pub attention_dim: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { hash: HashGridSpec::default(), width: 64, hidden_layers: 3, attention_dim: 16 }
    }
}

/// Caller-supplied final layer for a field's MLP (hypernetwork output).
pub type LastLayer = (Var, Var);

fn field_mlp(store: &mut ParamStore, name: &str, cfg: &FieldConfig, input: usize, seed: u64) -> Result<Mlp> {
    let spec = MlpSpec::uniform(input, cfg.width, cfg.hidden_layers, 3, Activation::Relu, seed);
    let mlp = Mlp::new(store, name, DEFORM_GROUP, spec)?;
    mlp.zero_last_layer(store);
    Ok(mlp)
}

fn run_mlp(g: &mut Graph<'_>, mlp: &Mlp, input: Var, last: Option<LastLayer>) -> Result<Var> {
    match last {
        Some((w, b)) => mlp.forward_with_last(g, input, w, b),
        None => mlp.forward(g, input),
    }
}

fn check_rows(g: &Graph<'_>, what: &str, v: Var, n: usize, cols: usize) -> Result<()> {
    if g.shape(v) != [n, cols] {
        return Err(Error::contract(format!("{what}: expected [{n}, {cols}], got {:?}", g.shape(v))));
    }
    Ok(())
}

pub struct FaceOutput {
    pub delta: Var,
    pub f_lip: Var,
    pub f_eye: Var,
    pub features: Var,
    pub clamped: usize,
}

/// `Phi_face`.
#[derive(Debug, Clone)]
pub struct FaceField {
    pub encoder: HashEncoder,
    pub attention: AttentionHead,
    pub mlp: Mlp,
    pub dims: SignalDims,
    pub id_dim: usize,
}

impl FaceField {
    pub fn new(store: &mut ParamStore, cfg: &FieldConfig, dims: SignalDims, id_dim: usize, seed: u64) -> Result<Self> {
        let encoder = HashEncoder::new(store, "face.enc", DEFORM_GROUP, HashGridSpec { seed, ..cfg.hash })?;
        let feat = encoder.output_dim();
        let attention = AttentionHead::new(store, "face.att", DEFORM_GROUP, feat, cfg.attention_dim, 2, seed ^ 0xfa);
        let mlp = field_mlp(store, "face.mlp", cfg, feat + dims.audio + dims.eye + id_dim, seed ^ 0xface)?;
        Ok(Self { encoder, attention, mlp, dims, id_dim })
    }

    /// `x [N,3]`, signals `[N,*]`, `id_dyn [N,id_dim]` when the field was built with one.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, s: &SignalVars, id_dyn: Option<Var>, last: Option<LastLayer>) -> Result<FaceOutput> {
        let n = g.shape(x)[0];
        check_rows(g, "face field audio", s.audio, n, self.dims.audio)?;
        check_rows(g, "face field eye", s.eye, n, self.dims.eye)?;
        let enc = self.encoder.encode(g, x)?;
        let att = self.attention.scores(g, enc.features)?;
        let f_lip = g.slice_cols(att, 0, 1)?;
        let f_eye = g.slice_cols(att, 1, 1)?;
        let audio = g.mul_col(s.audio, f_lip)?;
        let eye = g.mul_col(s.eye, f_eye)?;
        let mut parts = vec![enc.features, audio, eye];
        push_id(g, &mut parts, id_dyn, self.id_dim, n, "face field")?;
        let input = g.concat(&parts)?;
        let delta = run_mlp(g, &self.mlp, input, last)?;
        Ok(FaceOutput { delta, f_lip, f_eye, features: enc.features, clamped: enc.clamped })
    }
}

fn push_id(g: &Graph<'_>, parts: &mut Vec<Var>, id_dyn: Option<Var>, id_dim: usize, n: usize, what: &str) -> Result<()> {
    match (id_dyn, id_dim) {
        (None, 0) => Ok(()),
        (Some(v), d) if d > 0 => {
            check_rows(g, &format!("{what} identity feature"), v, n, d)?;
            parts.push(v);
            Ok(())
        }
        _ => Err(Error::contract(format!("{what}: identity feature presence does not match the field (width {id_dim})"))),
    }
}

pub struct TorsoOutput {
    pub delta: Var,
    pub f_torso: Var,
    pub clamped: usize,
}

/// `Phi_torso`, conditioned on the face field's offset at the same point.
#[derive(Debug, Clone)]
pub struct TorsoField {
    pub encoder: HashEncoder,
    pub attention: AttentionHead,
    pub mlp: Mlp,
    pub id_dim: usize,
}

impl TorsoField {
    pub fn new(store: &mut ParamStore, cfg: &FieldConfig, id_dim: usize, seed: u64) -> Result<Self> {
        let encoder = HashEncoder::new(store, "torso.enc", DEFORM_GROUP, HashGridSpec { seed: seed ^ 0x7, ..cfg.hash })?;
        let feat = encoder.output_dim();
        let attention = AttentionHead::new(store, "torso.att", DEFORM_GROUP, feat, cfg.attention_dim, 1, seed ^ 0x70);
        let mlp = field_mlp(store, "torso.mlp", cfg, feat + 6 + 3 + id_dim, seed ^ 0x7050)?;
        Ok(Self { encoder, attention, mlp, id_dim })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        pose: Var,
        delta_face: Var,
        id_dyn: Option<Var>,
        last: Option<LastLayer>,
    ) -> Result<TorsoOutput> {
        let n = g.shape(x)[0];
        check_rows(g, "torso field pose", pose, n, 6)?;
        check_rows(g, "torso field face offset", delta_face, n, 3)?;
        let enc = self.encoder.encode(g, x)?;
        let f_torso = self.attention.scores(g, enc.features)?;
        let pose = g.mul_col(pose, f_torso)?;
        let mut parts = vec![enc.features, pose, delta_face];
        push_id(g, &mut parts, id_dyn, self.id_dim, n, "torso field")?;
        let input = g.concat(&parts)?;
        let delta = run_mlp(g, &self.mlp, input, last)?;
        Ok(TorsoOutput { delta, f_torso, clamped: enc.clamped })
    }
}

/// One field on every signal, without attention or regions.
#[derive(Debug, Clone)]
pub struct MonolithicField {
    pub encoder: HashEncoder,
    pub mlp: Mlp,
    pub dims: SignalDims,
    pub id_dim: usize,
}

impl MonolithicField {
    pub fn new(store: &mut ParamStore, cfg: &FieldConfig, dims: SignalDims, id_dim: usize, seed: u64) -> Result<Self> {
        let encoder = HashEncoder::new(store, "mono.enc", DEFORM_GROUP, HashGridSpec { seed, ..cfg.hash })?;
        let input = encoder.output_dim() + dims.total() + id_dim;
        let mlp = field_mlp(store, "mono.mlp", cfg, input, seed ^ 0x3030)?;
        Ok(Self { encoder, mlp, dims, id_dim })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, s: &SignalVars, id_dyn: Option<Var>, last: Option<LastLayer>) -> Result<(Var, usize)> {
        let n = g.shape(x)[0];
        let enc = self.encoder.encode(g, x)?;
        let mut parts = vec![enc.features, s.audio, s.eye, s.pose];
        push_id(g, &mut parts, id_dyn, self.id_dim, n, "monolithic field")?;
        let input = g.concat(&parts)?;
        Ok((run_mlp(g, &self.mlp, input, last)?, enc.clamped))
    }
}

/// Graph handles of a warp.
#[derive(Debug, Clone, Copy)]
pub struct DeformationResult {
    pub delta_face: Var,
    pub delta_torso: Var,
    pub x_prime: Var,
}

/// Per-point attention scores, each `[N,1]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionScores {
    pub f_lip: Var,
    pub f_eye: Var,
    pub f_torso: Var,
}

/// Identity inputs to the cascade.
#[derive(Debug, Clone, Copy, Default)]
pub struct WarpIdentity {
    pub id_dyn: Option<Var>,
    pub face_last: Option<LastLayer>,
    pub torso_last: Option<LastLayer>,
}

pub struct Warp {
    pub result: DeformationResult,
    pub attention: AttentionScores,
    pub clamped: usize,
}

/// Composes both fields.
pub fn warp(g: &mut Graph<'_>, face: &FaceField, torso: &TorsoField, x: Var, s: &SignalVars, id: WarpIdentity) -> Result<Warp> {
    let f = face.forward(g, x, s, id.id_dyn, id.face_last)?;
    let t = torso.forward(g, x, s.pose, f.delta, id.id_dyn, id.torso_last)?;
    let sum = g.add(f.delta, t.delta)?;
    let x_prime = g.add(x, sum)?;
    Ok(Warp {
        result: DeformationResult { delta_face: f.delta, delta_torso: t.delta, x_prime },
        attention: AttentionScores { f_lip: f.f_lip, f_eye: f.f_eye, f_torso: t.f_torso },
        clamped: f.clamped + t.clamped,
    })
}

/// Concrete values of a single-point warp.
#[derive(Debug, Clone, PartialEq)]
pub struct PointWarp {
    pub delta_face: [f64; 3],
    pub delta_torso: [f64; 3],
    pub x_prime: [f64; 3],
    pub f_lip: f64,
    pub f_eye: f64,
    pub f_torso: f64,
}

fn as3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

/// Graph-free warp of one point, for inspection and tests.
pub fn warp_point(
    store: &ParamStore,
    face: &FaceField,
    torso: &TorsoField,
    x: [f64; 3],
    signals: &DrivingSignals,
    id_dyn: Option<&[f64]>,
) -> Result<PointWarp> {
    signals.validate(face.dims)?;
    let mut g = Graph::new(store);
    let xv = g.input(Tensor::row(&x));
    let s = SignalVars::new(&mut g, &SignalBatch::uniform(signals, 1));
    let id_dyn = id_dyn.map(|d| g.input(Tensor::row(d)));
    let w = warp(&mut g, face, torso, xv, &s, WarpIdentity { id_dyn, ..Default::default() })?;
    Ok(PointWarp {
        delta_face: as3(g.value(w.result.delta_face).data()),
        delta_torso: as3(g.value(w.result.delta_torso).data()),
        x_prime: as3(g.value(w.result.x_prime).data()),
        f_lip: g.value(w.attention.f_lip).item(),
        f_eye: g.value(w.attention.f_eye).item(),
        f_torso: g.value(w.attention.f_torso).item(),
    })
}
