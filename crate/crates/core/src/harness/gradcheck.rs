//! Finite-difference verification of every training loss on a micro-scene.
//!
//! The scene is four rays of one synthetic frame, one per labelled region
//! (torso, face, eye, lip), rendered through a small perturbed model so that no
//! gradient is identically zero. The perceptual term needs three pooling levels
//! and is checked on a 4x4 patch of the same frame.

use serde::Serialize;

use crate::autodiff::{grad_check, Activation, GradCheckOptions, Graph, Mlp, MlpSpec, ParamId, ParamStore, Tensor, Var};
use crate::deform::SignalBatch;
use crate::error::{Error, Result};
use crate::idtransfer::ReferenceFrame;
use crate::image::label;
use crate::losses::{attention_reg_loss, color_loss, entropy_loss, region_reg_loss, total_loss, LossParts, LossWeights, PerceptualProxy, PixelWeights, RegionMasks};
use crate::model::{IdVars, Model, ModelConfig, RayOutputs, Variant};
use crate::render::{Ray, RayBatch};
use crate::synthdata::{Dataset, Frame};

pub const GRADCHECK_RTOL: f64 = 1e-4;
pub const MODULES: [&str; 4] = ["losses", "autodiff", "render", "idtransfer"];

const SIZE: usize = 16;
const PATCH: usize = 4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub module: String,
    pub name: String,
    pub params: usize,
    pub entries: usize,
    /// Largest discrepancy relative to the largest gradient magnitude of the check.
    pub max_deviation: f64,
    /// Largest per-parameter relative deviation, dominated by rounding noise on
    /// parameters whose gradient is tiny.
    pub worst_param_deviation: f64,
    pub passed: bool,
}

fn options() -> GradCheckOptions {
    GradCheckOptions { step: 1e-6, max_entries: Some(4), floor: 1e-10, seed: 7, prefer_nonzero: true }
}

fn entry(module: &str, name: &str, report: crate::autodiff::GradCheckReport) -> GradCheckEntry {
    let max_deviation = report.scaled_deviation();
    GradCheckEntry {
        module: module.into(),
        name: name.into(),
        params: report.per_param.len(),
        entries: report.per_param.iter().map(|p| p.checked).sum(),
        max_deviation,
        worst_param_deviation: report.max_deviation(),
        passed: max_deviation < GRADCHECK_RTOL,
    }
}

/// Adds a smooth deterministic offset to every parameter.
fn perturb(store: &mut ParamStore, amplitude: f64) {
    for (k, (_, p)) in store.iter_mut().enumerate() {
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v += amplitude * ((i as f64 * 0.618 + k as f64 * 1.3).sin());
        }
    }
}

struct Scene {
    ds: Dataset,
    frame: usize,
    batch: RayBatch,
    signals: SignalBatch,
    gt: Tensor,
    weights: Vec<f64>,
    masks: RegionMasks,
    patch: RayBatch,
    patch_signals: SignalBatch,
    patch_gt: Tensor,
}

impl Scene {
    fn new(samples: usize) -> Result<Self> {
        const REGIONS: [u8; 4] = [label::TORSO, label::FACE, label::EYE, label::LIP];
        let ds = Dataset::generate(1, 24, SIZE, SIZE, 21)?;
        let frame = (0..24)
            .find(|&i| REGIONS.iter().all(|l| ds.frame(0, i).labels.contains(l)))
            .ok_or_else(|| Error::Evaluation("no micro-scene frame shows every region".into()))?;
        let f: &Frame = ds.frame(0, frame);
        let cam = ds.camera(0, frame);
        let pixels: Vec<usize> = REGIONS.iter().map(|l| f.labels.iter().position(|x| x == l).expect("region present")).collect();
        let rays: Vec<Ray> = pixels.iter().map(|&p| cam.ray(p / SIZE, p % SIZE)).collect();
        let gt: Vec<f64> = pixels.iter().flat_map(|&p| f.rgb[3 * p..3 * p + 3].iter().map(|&b| b as f64 / 255.0)).collect();
        let labels: Vec<u8> = pixels.iter().map(|&p| f.labels[p]).collect();
        let batch = RayBatch::new(rays, samples, None)?;
        let signals = SignalBatch::uniform(&f.signals, batch.num_samples());

        let (r0, c0) = ((SIZE - PATCH) / 2, (SIZE - PATCH) / 2);
        let mut prays = Vec::new();
        let mut chw = vec![0.0; 3 * PATCH * PATCH];
        for i in 0..PATCH {
            for j in 0..PATCH {
                prays.push(cam.ray(r0 + i, c0 + j));
                let p = (r0 + i) * SIZE + c0 + j;
                for c in 0..3 {
                    chw[c * PATCH * PATCH + i * PATCH + j] = f.rgb[3 * p + c] as f64 / 255.0;
                }
            }
        }
        let patch = RayBatch::new(prays, samples, None)?;
        let patch_signals = SignalBatch::uniform(&f.signals, patch.num_samples());
        let weights = labels.iter().map(|&l| PixelWeights::default().weight(l)).collect();
        Ok(Self {
            frame,
            gt: Tensor::new(vec![labels.len(), 3], gt)?,
            weights,
            masks: RegionMasks::from_ray_labels(&labels, samples),
            batch,
            signals,
            patch,
            patch_signals,
            patch_gt: Tensor::new(vec![3, PATCH, PATCH], chw)?,
            ds,
        })
    }

    fn reference(&self) -> ReferenceFrame {
        let f = self.ds.frame(0, self.frame);
        ReferenceFrame { image: f.image(SIZE, SIZE), labels: f.labels.clone() }
    }
}

fn micro_model(variant: Variant, live: bool, ds: &Dataset) -> Result<Model> {
    let mut cfg = ModelConfig::tiny(variant, SIZE, SIZE);
    cfg.signal_dims = ds.manifest.signal_dims;
    cfg.samples_per_ray = 6;
    let mut model = Model::new(cfg, live)?;
    perturb(&mut model.store, 0.05);
    Ok(model)
}

fn forward(model: &Model, g: &mut Graph<'_>, scene: &Scene, reference: Option<&ReferenceFrame>) -> Result<(IdVars, RayOutputs)> {
    let id = model.id_vars(g, reference)?;
    let out = model.render_rays(g, &scene.batch, &scene.signals, &id)?;
    Ok((id, out))
}

fn perceptual(model: &Model, g: &mut Graph<'_>, scene: &Scene, id: &IdVars) -> Result<Var> {
    let out = model.render_rays(g, &scene.patch, &scene.patch_signals, id)?;
    let t = g.transpose(out.rgb);
    let pred = g.reshape(t, &[3, PATCH, PATCH])?;
    PerceptualProxy::default().loss(g, pred, &scene.patch_gt)
}

type LossFn = fn(&Model, &mut Graph<'_>, &Scene) -> Result<Var>;

fn loss_terms() -> Vec<(&'static str, LossFn)> {
    vec![
        ("color", |m, g, s| {
            let (_, out) = forward(m, g, s, None)?;
            color_loss(g, out.rgb, &s.gt, &s.weights)
        }),
        ("region", |m, g, s| {
            let (_, out) = forward(m, g, s, None)?;
            let p = out.points;
            region_reg_loss(g, p.delta_face.expect("face offsets"), p.delta_torso.expect("torso offsets"), &s.masks)
        }),
        ("attention", |m, g, s| {
            let (_, out) = forward(m, g, s, None)?;
            let a = out.points.attention.expect("attention scores");
            attention_reg_loss(g, a.f_eye, a.f_lip, a.f_torso, &s.masks)
        }),
        ("entropy", |m, g, s| {
            let (_, out) = forward(m, g, s, None)?;
            Ok(entropy_loss(g, out.alpha))
        }),
        ("perceptual", |m, g, s| {
            let id = m.id_vars(g, None)?;
            perceptual(m, g, s, &id)
        }),
        ("total", |m, g, s| {
            let (id, out) = forward(m, g, s, None)?;
            let p = out.points;
            let a = p.attention.expect("attention scores");
            let parts = LossParts {
                color: color_loss(g, out.rgb, &s.gt, &s.weights)?,
                delta: Some(region_reg_loss(g, p.delta_face.expect("face offsets"), p.delta_torso.expect("torso offsets"), &s.masks)?),
                att: Some(attention_reg_loss(g, a.f_eye, a.f_lip, a.f_torso, &s.masks)?),
                alpha: Some(entropy_loss(g, out.alpha)),
                lpips: Some(perceptual(m, g, s, &id)?),
            };
            Ok(total_loss(g, &parts, &LossWeights::default(), 99, 100)?.0)
        }),
    ]
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}

fn check_losses() -> Result<Vec<GradCheckEntry>> {
    let scene = Scene::new(6)?;
    let model = micro_model(Variant::ODR, false, &scene.ds)?;
    loss_terms()
        .into_iter()
        .map(|(name, f)| {
            let mut store = model.store.clone();
            let ids = all_ids(&store);
            let report = grad_check(&mut store, &ids, &options(), |g| f(&model, g, &scene))?;
            Ok(entry("losses", name, report))
        })
        .collect()
}

fn check_autodiff() -> Result<Vec<GradCheckEntry>> {
    let mut store = ParamStore::new();
    let spec = MlpSpec { layer_widths: vec![5, 7, 6, 3], activations: vec![Activation::Relu, Activation::Tanh, Activation::Sigmoid], seed: 3 };
    let mlp = Mlp::new(&mut store, "net", "mlp", spec)?;
    let x = store.add("x", "input", Tensor::new(vec![4, 5], (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect())?);
    let ids = all_ids(&store);
    let opts = GradCheckOptions { max_entries: None, ..options() };
    let report = grad_check(&mut store, &ids, &opts, |g| {
        let xv = g.param(x);
        let y = mlp.forward(g, xv)?;
        let sq = g.square(y);
        Ok(g.sum(sq))
    })?;
    Ok(vec![entry("autodiff", "three_layer_mlp", report)])
}

fn check_render() -> Result<Vec<GradCheckEntry>> {
    let scene = Scene::new(6)?;
    let n = scene.batch.num_samples();
    let mut store = ParamStore::new();
    let sigma = store.add("sigma", "render", Tensor::new(vec![n, 1], (0..n).map(|i| 0.5 + 3.0 * ((i as f64) * 0.37).sin().abs()).collect())?);
    let color = store.add("color", "render", Tensor::new(vec![n, 3], (0..3 * n).map(|i| 0.5 + 0.4 * ((i as f64) * 0.91).cos()).collect())?);
    let ids = [sigma, color];
    let opts = GradCheckOptions { max_entries: None, ..options() };
    let report = grad_check(&mut store, &ids, &opts, |g| {
        let (s, c) = (g.param(sigma), g.param(color));
        let out = scene.batch.integrate(g, s, c)?;
        let w = g.input(Tensor::new(vec![scene.batch.num_rays(), 5], (0..5 * scene.batch.num_rays()).map(|i| 1.0 + (i % 5) as f64 * 0.3).collect())?);
        let p = g.mul(out, w)?;
        let sq = g.square(p);
        Ok(g.sum(sq))
    })?;
    Ok(vec![entry("render", "integrate", report)])
}

fn check_idtransfer() -> Result<Vec<GradCheckEntry>> {
    let scene = Scene::new(6)?;
    let model = micro_model(Variant::ODR, true, &scene.ds)?;
    let reference = scene.reference();
    let mut store = model.store.clone();
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.name.starts_with("idenc.") || p.name.starts_with("hyper.")).map(|(id, _)| id).collect();
    let report = grad_check(&mut store, &ids, &options(), |g| {
        let (_, out) = forward(&model, g, &scene, Some(&reference))?;
        color_loss(g, out.rgb, &scene.gt, &scene.weights)
    })?;
    Ok(vec![entry("idtransfer", "encoder_and_hypernetwork", report)])
}

/// Runs the checks of one module, or of all modules when `module` is `None`.
pub fn run_gradchecks(module: Option<&str>) -> Result<Vec<GradCheckEntry>> {
    let selected: Vec<&str> = match module {
        None => MODULES.to_vec(),
        Some(m) if MODULES.contains(&m) => vec![m],
        Some(m) => return Err(Error::Config(format!("unknown gradcheck module {m:?}; expected one of {}", MODULES.join(", ")))),
    };
    let mut out = Vec::new();
    for m in selected {
        out.extend(match m {
            "losses" => check_losses()?,
            "autodiff" => check_autodiff()?,
            "render" => check_render()?,
            _ => check_idtransfer()?,
        });
    }
    Ok(out)
}
