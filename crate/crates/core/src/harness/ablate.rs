use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::checkpoint::save_model;
use super::config::TrainConfig;
use super::eval::{evaluate, MetricReport};
use super::train::Trainer;
use crate::error::Result;
use crate::model::{Model, Variant};
use crate::synthdata::{Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub steps: usize,
    pub report: MetricReport,
}

/// Trains every variant with the same data, seeds and schedule and evaluates each
/// on the validation split.
pub fn ablate(ds: &Dataset, base: &TrainConfig, variants: &[Variant], out: Option<&Path>) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let mut cfg = base.clone();
            cfg.model.variant = variant;
            let model = Model::new(cfg.model.clone(), false)?;
            let mut t = Trainer::new(cfg, ds, model)?;
            if let Some(dir) = out {
                t = t.with_output(&dir.join(variant_dir(variant)))?;
            }
            t.run()?;
            let report = evaluate(&t.model, ds, t.config.identity, Split::Val)?;
            if let Some(dir) = out {
                save_model(&dir.join(variant_dir(variant)).join("checkpoint.loki"), &t.model, Some(&t.adam), &t.checkpoint_meta())?;
            }
            Ok(AblationRow { variant, steps: t.step, report })
        })
        .collect()
}

pub fn variant_dir(v: Variant) -> &'static str {
    match v {
        Variant::O => "o",
        Variant::OD => "od",
        Variant::ODR => "odr",
    }
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant   steps    psnr_db  proxy     kp_px   eye_px  lip_px\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{:<8} {:>6}  {:>8.3}  {:>8.5}  {:>6.3}  {:>6.3}  {:>6.3}",
            r.variant.to_string(),
            r.steps,
            m.psnr,
            m.perceptual_proxy,
            m.keypoint_distance,
            m.eye_keypoint_distance,
            m.lip_keypoint_distance
        );
    }
    s
}
