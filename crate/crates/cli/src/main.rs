use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use talkfield_core::deform::DrivingSignals;
use talkfield_core::harness::{
    ablate, emit_heatmap, evaluate, finetune_from, format_table, load_model, run_gradchecks, save_model, split_frames, Phase, TrainConfig, Trainer,
};
use talkfield_core::idtransfer::TransferPhase;
use talkfield_core::image::{encode_pgm16, encode_ppm, to_u16_full_range, write_file};
use talkfield_core::model::{Model, Variant};
use talkfield_core::render::{Camera, Pose};
use talkfield_core::synthdata::{read_json, world_camera, write_json, Dataset, Split};

#[derive(Parser)]
#[command(name = "talkfield", version, about = "Talking-portrait radiance fields on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-identity dataset.
    SynthGen {
        #[arg(long)]
        ids: usize,
        #[arg(long)]
        frames: usize,
        /// Image size as WIDTHxHEIGHT.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config (pretrain or scratch phase).
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one identity with a pretrained model and fine-tune on part of its frames.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        frac: f64,
        #[arg(long)]
        out: PathBuf,
        /// Identity of the dataset to adapt to.
        #[arg(long, default_value_t = 0)]
        identity: usize,
        /// Optional JSON config replacing the fine-tune defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render frames for a list of driving signals.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON list of driving signals, as in a dataset's `signals.json`.
        #[arg(long)]
        signals: PathBuf,
        /// JSON list of head-space camera poses, as in `cameras.json`.
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        depth: bool,
        #[arg(long)]
        heatmap: bool,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        identity: Option<usize>,
        #[arg(long)]
        json: bool,
        /// Also write face/torso deformation heatmaps and their statistics here.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Train and evaluate O, O+D and O+D+R with shared seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base config; the variant field is overridden per row.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(w)?, p(h)?))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn synth_gen(ids: usize, frames: usize, (w, h): (usize, usize), seed: u64, out: &Path) -> Result<()> {
    let ds = Dataset::generate(ids, frames, w, h, seed)?;
    ds.write(out)?;
    eprintln!("wrote {ids} identities x {frames} frames at {w}x{h} to {}", out.display());
    Ok(())
}

fn pretrain(data: &Path, config: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let cfg = TrainConfig::load(config)?;
    if cfg.phase == Phase::Finetune {
        bail!("{}: fine-tune configs are run with the finetune subcommand", config.display());
    }
    let model = Model::new(cfg.model.clone(), cfg.phase == Phase::Pretrain)?;
    let mut t = Trainer::new(cfg, &ds, model)?.with_output(out)?;
    t.run()?;
    save_model(&out.join("checkpoint.loki"), &t.model, Some(&t.adam), &t.checkpoint_meta())?;
    eprintln!("trained {} steps; checkpoint at {}", t.step, out.join("checkpoint.loki").display());
    Ok(())
}

fn finetune(data: &Path, ckpt: &Path, frac: f64, out: &Path, identity: usize, config: Option<&Path>) -> Result<()> {
    let ds = load_dataset(data)?;
    let (pretrained, _, meta) = load_model(ckpt)?;
    if meta.phase != TransferPhase::Pretrain {
        bail!("{}: expected a pretrain-phase checkpoint, found {:?}", ckpt.display(), meta.phase);
    }
    let (model, bundle) = finetune_from(&pretrained, &ds, identity)?;
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::finetune(model.config.clone()),
    };
    cfg.phase = Phase::Finetune;
    cfg.model = model.config.clone();
    cfg.identity = identity;
    cfg.frac = frac;
    let mut t = Trainer::new(cfg, &ds, model)?.with_output(out)?;
    t.bundle = Some(bundle);
    t.run()?;
    save_model(&out.join("checkpoint.loki"), &t.model, Some(&t.adam), &t.checkpoint_meta())?;
    eprintln!("fine-tuned {} steps on {:.0}% of identity {identity}", t.step, frac * 100.0);
    Ok(())
}

fn render(ckpt: &Path, signals: &Path, cameras: Option<&Path>, out: &Path, depth: bool, heatmap: bool) -> Result<()> {
    let (model, _, _) = load_model(ckpt)?;
    let signals: Vec<DrivingSignals> = read_json(signals)?;
    let (w, h) = (model.config.width, model.config.height);
    let cams: Vec<Camera> = match cameras {
        Some(p) => {
            let poses: Vec<Pose> = read_json(p)?;
            if poses.len() != signals.len() {
                bail!("{}: {} cameras for {} signal frames", p.display(), poses.len(), signals.len());
            }
            let intr = world_camera(w, h).intrinsics;
            poses.into_iter().map(|c2w| Camera { intrinsics: intr, c2w }).collect()
        }
        None => vec![world_camera(w, h); signals.len()],
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, (s, cam)) in signals.iter().zip(&cams).enumerate() {
        let r = model.render_frame(cam, s, None).with_context(|| format!("rendering frame {i}"))?;
        write_file(&out.join(format!("{i:05}.ppm")), &encode_ppm(w, h, &r.image.to_bytes()))?;
        if depth {
            write_file(&out.join(format!("{i:05}_depth.pgm")), &encode_pgm16(w, h, &to_u16_full_range(&r.depth)))?;
        }
        if heatmap {
            write_file(&out.join(format!("{i:05}_face_heat.pgm")), &encode_pgm16(w, h, &to_u16_full_range(&r.face_heat)))?;
            write_file(&out.join(format!("{i:05}_torso_heat.pgm")), &encode_pgm16(w, h, &to_u16_full_range(&r.torso_heat)))?;
        }
    }
    eprintln!("rendered {} frames to {}", signals.len(), out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: Split, identity: Option<usize>, json: bool, heatmap: Option<&Path>) -> Result<()> {
    let ds = load_dataset(data)?;
    let (model, _, meta) = load_model(ckpt)?;
    let identity = identity.or_else(|| meta.train.as_ref().map(|t| t.identity)).unwrap_or(0);
    let report = evaluate(&model, &ds, identity, split)?;
    if json {
        print_json(&report)?;
    } else {
        println!(
            "psnr {:.3} dB  proxy {:.5}  keypoints {:.3} px (eye {:.3}, lip {:.3}) over {} frames",
            report.psnr, report.perceptual_proxy, report.keypoint_distance, report.eye_keypoint_distance, report.lip_keypoint_distance, report.frames
        );
    }
    if let Some(dir) = heatmap {
        let maps = emit_heatmap(&model, &ds, identity, &split_frames(&ds, identity, split)?)?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        maps.write(dir)?;
        write_json(&dir.join("heat_stats.json"), &maps.stats)?;
    }
    Ok(())
}

fn run_ablate(data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let ds = load_dataset(data)?;
    let base = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(Phase::Scratch, Variant::ODR, &ds),
    };
    if base.phase != Phase::Scratch {
        bail!("ablation trains code-conditioned models from scratch; set \"phase\": \"scratch\"");
    }
    let rows = ablate(&ds, &base, &Variant::ALL, Some(out))?;
    write_json(&out.join("ablation.json"), &rows)?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn gradcheck(module: Option<&str>) -> Result<bool> {
    let entries = run_gradchecks(module)?;
    for e in &entries {
        println!(
            "{} {}/{}: scaled deviation {:.3e} (worst parameter {:.1e}) over {} entries of {} parameters",
            if e.passed { "PASS" } else { "FAIL" },
            e.module,
            e.name,
            e.max_deviation,
            e.worst_param_deviation,
            e.entries,
            e.params
        );
    }
    Ok(entries.iter().all(|e| e.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SynthGen { ids, frames, size, seed, out } => synth_gen(ids, frames, size, seed, &out)?,
        Command::Pretrain { data, config, out } => pretrain(&data, &config, &out)?,
        Command::Finetune { data, ckpt, frac, out, identity, config } => finetune(&data, &ckpt, frac, &out, identity, config.as_deref())?,
        Command::Render { ckpt, signals, cameras, out, depth, heatmap } => render(&ckpt, &signals, cameras.as_deref(), &out, depth, heatmap)?,
        Command::Eval { ckpt, data, split, identity, json, heatmap } => eval(&ckpt, &data, split, identity, json, heatmap.as_deref())?,
        Command::Ablate { data, out, config } => run_ablate(&data, &out, config.as_deref())?,
        Command::Gradcheck { module } => return gradcheck(module.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
