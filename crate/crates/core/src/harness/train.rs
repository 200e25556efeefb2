use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{save_model, CheckpointMeta};
use super::config::{Phase, TrainConfig};
use super::eval::{evaluate_frames, split_frames, MetricReport};
use super::optim::Adam;
use crate::autodiff::{Graph, Tensor};
use crate::deform::{DrivingSignals, SignalBatch};
use crate::error::{Error, Result};
use crate::idtransfer::{encode_identity, finetune_init, IdentityBundle, ReferenceFrame, TransferPhase};
use crate::losses::{attention_reg_loss, color_loss, entropy_loss, region_reg_loss, total_loss, LossParts, LossReport, PerceptualProxy, RegionMasks};
use crate::model::Model;
use crate::render::{Ray, RayBatch};
use crate::synthdata::{Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub report: MetricReport,
}

#[derive(Serialize)]
struct StepLog<'a> {
    step: usize,
    epoch: f64,
    identity: usize,
    loss: &'a LossReport,
    lr: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct EvalLog<'a> {
    step: usize,
    eval: &'a MetricReport,
}

/// Rays drawn for one step, kept for diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct BatchInfo {
    pub identity: usize,
    pub frames: Vec<usize>,
    pub reference: Option<usize>,
    /// `(frame, row, col)` of each ray.
    pub pixels: Vec<(usize, usize, usize)>,
}

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    pub total_steps: usize,
    pub steps_per_epoch: usize,
    pub history: Vec<EvalPoint>,
    pub phase: TransferPhase,
    pub bundle: Option<IdentityBundle>,
    ds: &'d Dataset,
    rng: ChaCha8Rng,
    identities: Vec<usize>,
    train_frames: Vec<Vec<usize>>,
    proxy: PerceptualProxy,
    log: Option<BufWriter<File>>,
    out_dir: Option<PathBuf>,
}

/// Training frames of an identity after applying `frac`.
pub fn training_frames(ds: &Dataset, identity: usize, frac: f64) -> Vec<usize> {
    let all = ds.split(identity, Split::Train);
    let keep = ((all.len() as f64 * frac).ceil() as usize).clamp(1, all.len().max(1));
    all.into_iter().take(keep).collect()
}

pub fn reference_frame(ds: &Dataset, identity: usize, frame: usize) -> ReferenceFrame {
    let f = ds.frame(identity, frame);
    ReferenceFrame { image: f.image(ds.manifest.width, ds.manifest.height), labels: f.labels.clone() }
}

/// Encodes the first training frame of `identity` and materialises the result.
pub fn finetune_from(pretrained: &Model, ds: &Dataset, identity: usize) -> Result<(Model, IdentityBundle)> {
    let first = *ds.split(identity, Split::Train).first().ok_or_else(|| Error::Evaluation(format!("identity {identity} has no training frames")))?;
    let bundle = encode_identity(pretrained, &reference_frame(ds, identity, first))?;
    let model = finetune_init(pretrained, &bundle)?;
    Ok((model, bundle))
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, ds: &'d Dataset, model: Model) -> Result<Self> {
        config.validate()?;
        if ds.identities.is_empty() {
            return Err(Error::Config("dataset has no identities".into()));
        }
        let (live, phase) = match config.phase {
            Phase::Pretrain => (true, TransferPhase::Pretrain),
            Phase::Scratch | Phase::Finetune => (false, TransferPhase::Finetune),
        };
        if model.is_live() != live {
            return Err(Error::State(format!("{:?} training needs a {} model", config.phase, if live { "pretrain-phase" } else { "code-conditioned" })));
        }
        if (ds.manifest.width, ds.manifest.height) != (model.config.width, model.config.height) {
            return Err(Error::Config("model resolution differs from the dataset".into()));
        }
        let identities: Vec<usize> = match config.phase {
            Phase::Pretrain if config.pretrain_identities.is_empty() => (0..ds.identities.len()).collect(),
            Phase::Pretrain => config.pretrain_identities.clone(),
            _ => vec![config.identity],
        };
        if let Some(&bad) = identities.iter().find(|&&i| i >= ds.identities.len()) {
            return Err(Error::Config(format!("identity {bad} not in a dataset of {}", ds.identities.len())));
        }
        let train_frames: Vec<Vec<usize>> = (0..ds.identities.len()).map(|i| training_frames(ds, i, config.frac)).collect();
        if identities.iter().any(|&i| train_frames[i].is_empty()) {
            return Err(Error::Config("an identity has no training frames".into()));
        }
        let pixels = ds.manifest.width * ds.manifest.height;
        let steps_per_epoch = config.steps_per_epoch.unwrap_or_else(|| {
            let frames: usize = identities.iter().map(|&i| train_frames[i].len()).sum();
            (frames * pixels).div_ceil(config.batch_rays).max(1)
        });
        let total_steps = (config.epochs * steps_per_epoch as f64).ceil() as usize;
        Ok(Self {
            adam: Adam::new(config.adam),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            total_steps,
            steps_per_epoch,
            history: Vec::new(),
            phase,
            bundle: None,
            ds,
            identities,
            train_frames,
            proxy: PerceptualProxy::default(),
            log: None,
            out_dir: None,
            config,
            model,
        })
    }

    /// Writes JSON lines to `out/train.jsonl` and per-epoch checkpoints to `out`.
    pub fn with_output(mut self, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("train.jsonl");
        self.log = Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?));
        self.out_dir = Some(out.to_path_buf());
        Ok(self)
    }

    pub fn epoch(&self) -> f64 {
        self.step as f64 / self.steps_per_epoch as f64
    }

    fn sample_batch(&mut self) -> (BatchInfo, Vec<Ray>, Vec<f64>, Vec<u8>) {
        let identity = self.identities[self.rng.gen_range(0..self.identities.len())];
        let pool = &self.train_frames[identity];
        let fpb = self.config.frames_per_batch;
        let frames: Vec<usize> = (0..fpb).map(|_| pool[self.rng.gen_range(0..pool.len())]).collect();
        let reference = self.model.is_live().then(|| pool[self.rng.gen_range(0..pool.len())]);
        let (w, h) = (self.ds.manifest.width, self.ds.manifest.height);
        let mut info = BatchInfo { identity, frames: frames.clone(), reference, pixels: Vec::new() };
        let (mut rays, mut gt, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for (k, &fi) in frames.iter().enumerate() {
            let n = self.config.batch_rays / fpb + usize::from(k < self.config.batch_rays % fpb);
            let cam = self.ds.camera(identity, fi);
            let f = self.ds.frame(identity, fi);
            for _ in 0..n {
                let p = self.rng.gen_range(0..w * h);
                let (r, c) = (p / w, p % w);
                rays.push(cam.ray(r, c));
                gt.extend(f.rgb[3 * p..3 * p + 3].iter().map(|&b| b as f64 / 255.0));
                labels.push(f.labels[p]);
                info.pixels.push((fi, r, c));
            }
        }
        (info, rays, gt, labels)
    }

    fn sample_patch(&mut self, identity: usize) -> (usize, usize, usize) {
        let pool = &self.train_frames[identity];
        let fi = pool[self.rng.gen_range(0..pool.len())];
        let p = self.config.patch;
        let (w, h) = (self.ds.manifest.width, self.ds.manifest.height);
        (fi, self.rng.gen_range(0..=h.saturating_sub(p)), self.rng.gen_range(0..=w.saturating_sub(p)))
    }

    /// One optimiser step.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let (info, rays, gt, labels) = self.sample_batch();
        let s = self.model.config.samples_per_ray;
        let nrays = rays.len();
        let batch = RayBatch::new(rays, s, Some(&mut self.rng))?;
        let counts: Vec<usize> = info.frames.iter().enumerate().map(|(k, _)| s * (nrays / info.frames.len() + usize::from(k < nrays % info.frames.len()))).collect();
        let sigs: Vec<&DrivingSignals> = info.frames.iter().map(|&f| &self.ds.frame(info.identity, f).signals).collect();
        let signals = SignalBatch::from_frames(&sigs, &counts);
        let reference = info.reference.map(|f| reference_frame(self.ds, info.identity, f));
        let lpips_on = self.config.losses.lpips_at(self.step, self.total_steps) > 0.0;
        let patch = lpips_on.then(|| self.sample_patch(info.identity));
        let weights: Vec<f64> = labels.iter().map(|&l| self.config.pixel_weights.weight(l)).collect();
        let masks = RegionMasks::from_ray_labels(&labels, s);
        let gt = Tensor::new(vec![nrays, 3], gt)?;

        let (grads, report) = {
            let mut g = Graph::new(&self.model.store);
            let id = self.model.id_vars(&mut g, reference.as_ref())?;
            let out = self.model.render_rays(&mut g, &batch, &signals, &id)?;
            let color = color_loss(&mut g, out.rgb, &gt, &weights)?;
            let p = out.points;
            let delta = match (p.delta_face, p.delta_torso) {
                (Some(df), Some(dt)) => Some(region_reg_loss(&mut g, df, dt, &masks)?),
                _ => None,
            };
            let att = match p.attention {
                Some(a) => Some(attention_reg_loss(&mut g, a.f_eye, a.f_lip, a.f_torso, &masks)?),
                None => None,
            };
            let alpha = Some(entropy_loss(&mut g, out.alpha));
            let lpips = match patch {
                Some(pt) => Some(self.patch_loss(&mut g, &id, info.identity, pt)?),
                None => None,
            };
            let parts = LossParts { color, delta, att, alpha, lpips };
            let (loss, report) = total_loss(&mut g, &parts, &self.config.losses, self.step, self.total_steps)?;
            if !report.is_finite() {
                return Err(self.non_finite(&info, &report, "loss"));
            }
            let grads = g.backward(loss)?;
            if !grads.is_finite() {
                return Err(self.non_finite(&info, &report, "gradient"));
            }
            (grads, report)
        };
        self.model.store.zero_grad();
        self.model.store.accumulate(&grads);
        let epoch = self.epoch();
        let cfg = &self.config;
        self.adam.update(&mut self.model.store, &|group| cfg.lr_at(group, epoch), &cfg.frozen_groups)?;
        self.step += 1;
        if self.log.is_some() {
            let lr = self.model.store.groups().into_iter().map(|g| {
                let v = self.config.lr_at(&g, epoch);
                (g, v)
            }).collect();
            let line = StepLog { step: self.step, epoch, identity: info.identity, loss: &report, lr };
            self.write_log(&line)?;
        }
        Ok(report)
    }

    fn patch_loss(&self, g: &mut Graph<'_>, id: &crate::model::IdVars, identity: usize, (fi, r0, c0): (usize, usize, usize)) -> Result<crate::autodiff::Var> {
        let p = self.config.patch;
        let cam = self.ds.camera(identity, fi);
        let w = self.ds.manifest.width;
        let f = self.ds.frame(identity, fi);
        let mut rays = Vec::with_capacity(p * p);
        let mut chw = vec![0.0; 3 * p * p];
        for i in 0..p {
            for j in 0..p {
                rays.push(cam.ray(r0 + i, c0 + j));
                let px = (r0 + i) * w + c0 + j;
                for c in 0..3 {
                    chw[c * p * p + i * p + j] = f.rgb[3 * px + c] as f64 / 255.0;
                }
            }
        }
        let s = self.model.config.samples_per_ray;
        let batch = RayBatch::new(rays, s, None)?;
        let out = self.model.render_rays(g, &batch, &SignalBatch::uniform(&f.signals, batch.num_samples()), id)?;
        let t = g.transpose(out.rgb);
        let pred = g.reshape(t, &[3, p, p])?;
        self.proxy.loss(g, pred, &Tensor::new(vec![3, p, p], chw)?)
    }

    fn non_finite(&self, info: &BatchInfo, report: &LossReport, what: &str) -> Error {
        let mut detail = format!("non-finite {what}; report {report:?}; identity {} frames {:?}", info.identity, info.frames);
        if let Some(dir) = &self.out_dir {
            let path = dir.join(format!("nonfinite_step{}.json", self.step));
            let dump = serde_json::json!({ "step": self.step, "report": report, "batch": info });
            if crate::synthdata::write_json(&path, &dump).is_ok() {
                detail.push_str(&format!("; batch dumped to {}", path.display()));
            }
        }
        Error::NonFinite { step: self.step, detail }
    }

    fn write_log<T: Serialize>(&mut self, line: &T) -> Result<()> {
        if let Some(log) = &mut self.log {
            let s = serde_json::to_string(line).map_err(|e| Error::Config(format!("log: {e}")))?;
            writeln!(log, "{s}").map_err(|e| Error::io("train.jsonl", e))?;
        }
        Ok(())
    }

    /// Validation metrics on the first `eval_frames` validation frames.
    pub fn evaluate(&self) -> Result<MetricReport> {
        let mut frames = split_frames(self.ds, self.config.identity, Split::Val)?;
        if let Some(n) = self.config.eval_frames {
            frames.truncate(n.max(1));
        }
        evaluate_frames(&self.model, self.ds, self.config.identity, &frames)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta::new(&self.model, self.phase, self.step, Some(self.config.clone()), self.bundle.clone())
    }

    fn save_epoch(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            save_model(&dir.join("checkpoint.loki"), &self.model, Some(&self.adam), &self.checkpoint_meta())?;
        }
        Ok(())
    }

    /// Runs until `total_steps`, evaluating every `eval_every` steps.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps)
    }

    pub fn run_until(&mut self, last: usize) -> Result<()> {
        let every = self.config.eval_every;
        while self.step < last.min(self.total_steps) {
            let before = self.epoch().floor();
            self.train_step()?;
            if every > 0 && !self.model.is_live() && (self.step % every == 0 || self.step == self.total_steps) {
                let report = self.evaluate()?;
                self.write_log(&EvalLog { step: self.step, eval: &report })?;
                self.history.push(EvalPoint { step: self.step, report });
            }
            if self.epoch().floor() > before || self.step == self.total_steps {
                self.save_epoch()?;
            }
        }
        if let Some(log) = &mut self.log {
            log.flush().map_err(|e| Error::io("train.jsonl", e))?;
        }
        Ok(())
    }

    /// First evaluated step at which validation PSNR reached `db`.
    pub fn steps_to_psnr(&self, db: f64) -> Option<usize> {
        self.history.iter().find(|p| p.report.psnr >= db).map(|p| p.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn micro(phase: Phase, variant: Variant, ds: &Dataset) -> TrainConfig {
        let mut c = TrainConfig::for_dataset(phase, variant, ds);
        c.model = ModelConfig { background: c.model.background, signal_dims: c.model.signal_dims, ..ModelConfig::tiny(variant, 16, 16) };
        c.batch_rays = 64;
        c.frames_per_batch = 2;
        c.epochs = 1.0;
        c.steps_per_epoch = Some(40);
        c.lr = super::super::config::LrRange::new(1e-2, 1e-3);
        c
    }

    #[test]
    fn pretrain_runs_and_rejects_mode_mismatch() {
        let ds = Dataset::generate(2, 8, 16, 16, 1).unwrap();
        let cfg = micro(Phase::Pretrain, Variant::ODR, &ds);
        let codes = Model::new(cfg.model.clone(), false).unwrap();
        assert!(matches!(Trainer::new(cfg.clone(), &ds, codes), Err(Error::State(_))));
        let mut t = Trainer::new(cfg.clone(), &ds, Model::new(cfg.model.clone(), true).unwrap()).unwrap();
        t.run_until(5).unwrap();
        assert_eq!(t.step, 5);
    }

    #[test]
    fn perceptual_term_switches_on_late() {
        let ds = Dataset::generate(1, 8, 16, 16, 1).unwrap();
        let mut cfg = micro(Phase::Scratch, Variant::O, &ds);
        cfg.steps_per_epoch = Some(5);
        let mut t = Trainer::new(cfg.clone(), &ds, Model::new(cfg.model.clone(), false).unwrap()).unwrap();
        let reports: Vec<LossReport> = (0..5).map(|_| t.train_step().unwrap()).collect();
        assert_eq!(reports[0].lpips, 0.0);
        assert!(reports[4].lpips > 0.0);
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let ds = Dataset::generate(1, 8, 16, 16, 1).unwrap();
        let mut cfg = micro(Phase::Scratch, Variant::ODR, &ds);
        cfg.frozen_groups = vec!["hash".into()];
        let model = Model::new(cfg.model.clone(), false).unwrap();
        let before = model.store.snapshot();
        let mut t = Trainer::new(cfg, &ds, model).unwrap();
        t.run_until(3).unwrap();
        let after = t.model.store.snapshot();
        for (_, p) in t.model.store.iter().filter(|(_, p)| p.group == "hash") {
            assert_eq!(before[&p.name], after[&p.name], "{}", p.name);
        }
        assert!(t.model.store.iter().any(|(_, p)| p.group == "mlp" && before[&p.name] != after[&p.name]));
    }

    #[test]
    fn fraction_keeps_the_clip_start() {
        let ds = Dataset::generate(1, 44, 8, 8, 1).unwrap();
        let all = ds.split(0, Split::Train);
        assert_eq!(training_frames(&ds, 0, 0.5), all[..20].to_vec());
        assert_eq!(training_frames(&ds, 0, 1.0), all);
    }
}
