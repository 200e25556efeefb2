use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{label, Image};
use crate::losses::PerceptualProxy;
use crate::model::Model;
use crate::synthdata::{Dataset, Palette, Split};

/// Penalty in pixels when a feature is present in only one of the two images.
pub const MISSING_FEATURE_PX: f64 = 4.0;

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("invalid psnr {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean over frames; `+inf` when every frame is reproduced exactly.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub perceptual_proxy: f64,
    /// Mean centroid error over the lip and both eyes, in pixels.
    pub keypoint_distance: f64,
    pub eye_keypoint_distance: f64,
    pub lip_keypoint_distance: f64,
    pub frames: usize,
}

pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Labels a rendered image by the nearest palette colour (background included).
pub fn segment(image: &Image, palette: &Palette, background: [f64; 3]) -> Vec<u8> {
    let classes: Vec<(u8, [f64; 3])> = [label::BACKGROUND, label::TORSO, label::FACE, label::EYE, label::LIP]
        .iter()
        .map(|&l| (l, palette.color(l).map_or(background, |c| c.map(|v| v as f64 / 255.0))))
        .collect();
    (0..image.num_pixels())
        .map(|p| {
            let px = &image.data[3 * p..3 * p + 3];
            let dist = |c: &[f64; 3]| (0..3).map(|i| (px[i] - c[i]).powi(2)).sum::<f64>();
            classes.iter().min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1))).expect("five classes").0
        })
        .collect()
}

/// Centroids `(col, row)` of the left eye, right eye and lip regions. Eye pixels
/// are split at `split_col`.
pub fn feature_centroids(labels: &[u8], width: usize, split_col: f64) -> [Option<[f64; 2]>; 3] {
    let mut acc = [[0.0f64; 3]; 3];
    for (p, &l) in labels.iter().enumerate() {
        let (r, c) = ((p / width) as f64, (p % width) as f64);
        let k = match l {
            label::EYE if c < split_col => 0,
            label::EYE => 1,
            label::LIP => 2,
            _ => continue,
        };
        acc[k][0] += c;
        acc[k][1] += r;
        acc[k][2] += 1.0;
    }
    acc.map(|a| (a[2] > 0.0).then(|| [a[0] / a[2], a[1] / a[2]]))
}

fn centroid_error(a: Option<[f64; 2]>, b: Option<[f64; 2]>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
        (None, None) => 0.0,
        _ => MISSING_FEATURE_PX,
    }
}

/// Frames of `split` for one identity.
pub fn split_frames(ds: &Dataset, identity: usize, split: Split) -> Result<Vec<usize>> {
    if identity >= ds.identities.len() {
        return Err(Error::Evaluation(format!("identity {identity} not in a dataset of {}", ds.identities.len())));
    }
    let frames = ds.split(identity, split);
    if frames.is_empty() {
        return Err(Error::Evaluation(format!("split {split:?} of identity {identity} has no frames")));
    }
    Ok(frames)
}

/// Scores predictions for `frames` of `identity` against the ground truth.
pub fn score_predictions(ds: &Dataset, identity: usize, frames: &[usize], preds: &[Image]) -> Result<MetricReport> {
    if frames.len() != preds.len() || frames.is_empty() {
        return Err(Error::Evaluation(format!("{} predictions for {} frames", preds.len(), frames.len())));
    }
    let (w, h) = (ds.manifest.width, ds.manifest.height);
    let palette = ds.manifest.identities[identity].params.palette;
    let bg = super::config::quantized_background(ds.manifest.background);
    let proxy = PerceptualProxy::default();
    let mut r = MetricReport { psnr: 0.0, perceptual_proxy: 0.0, keypoint_distance: 0.0, eye_keypoint_distance: 0.0, lip_keypoint_distance: 0.0, frames: frames.len() };
    for (&fi, pred) in frames.iter().zip(preds) {
        let f = ds.frame(identity, fi);
        let gt = f.image(w, h);
        r.psnr += psnr(pred.mse(&gt)?);
        r.perceptual_proxy += proxy.loss_images(pred, &gt)?;
        let split = (f.keypoints["eye_left"][0] + f.keypoints["eye_right"][0]) / 2.0;
        let truth = feature_centroids(&f.labels, w, split);
        let got = feature_centroids(&segment(pred, &palette, bg), w, split);
        let e: Vec<f64> = (0..3).map(|k| centroid_error(got[k], truth[k])).collect();
        r.eye_keypoint_distance += (e[0] + e[1]) / 2.0;
        r.lip_keypoint_distance += e[2];
        r.keypoint_distance += (e[0] + e[1] + e[2]) / 3.0;
    }
    let n = frames.len() as f64;
    r.psnr /= n;
    r.perceptual_proxy /= n;
    r.keypoint_distance /= n;
    r.eye_keypoint_distance /= n;
    r.lip_keypoint_distance /= n;
    Ok(r)
}

/// Renders the listed frames with their recorded signals and cameras.
pub fn render_frames(model: &Model, ds: &Dataset, identity: usize, frames: &[usize]) -> Result<Vec<Image>> {
    if model.is_live() {
        return Err(Error::State("evaluation needs a code-conditioned model; run fine-tune initialisation first".into()));
    }
    frames
        .iter()
        .map(|&fi| Ok(model.render_frame(&ds.camera(identity, fi), &ds.frame(identity, fi).signals, None)?.image))
        .collect()
}

pub fn evaluate(model: &Model, ds: &Dataset, identity: usize, split: Split) -> Result<MetricReport> {
    let frames = split_frames(ds, identity, split)?;
    evaluate_frames(model, ds, identity, &frames)
}

pub fn evaluate_frames(model: &Model, ds: &Dataset, identity: usize, frames: &[usize]) -> Result<MetricReport> {
    let preds = render_frames(model, ds, identity, frames)?;
    score_predictions(ds, identity, frames, &preds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_scores_perfectly() {
        let ds = Dataset::generate(1, 24, 32, 32, 5).unwrap();
        let frames = ds.split(0, Split::Val);
        let preds: Vec<Image> = frames.iter().map(|&i| ds.frame(0, i).image(32, 32)).collect();
        let r = score_predictions(&ds, 0, &frames, &preds).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        assert_eq!((r.keypoint_distance, r.perceptual_proxy), (0.0, 0.0));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""));
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
    }

    #[test]
    fn uniform_grey_matches_the_formula() {
        let ds = Dataset::generate(1, 12, 16, 16, 5).unwrap();
        let frames = ds.split(0, Split::Val);
        let grey = Image::filled(16, 16, [0.5; 3]);
        let r = score_predictions(&ds, 0, &frames, &[grey.clone()]).unwrap();
        let m = grey.mse(&ds.frame(0, frames[0]).image(16, 16)).unwrap();
        assert!((r.psnr - 10.0 * (1.0 / m).log10()).abs() < 1e-12);
    }

    #[test]
    fn missing_features_cost_the_penalty() {
        let labels = vec![0u8; 16];
        let mut with_lip = labels.clone();
        with_lip[5] = label::LIP;
        let a = feature_centroids(&labels, 4, 2.0);
        let b = feature_centroids(&with_lip, 4, 2.0);
        assert_eq!(b[2], Some([1.0, 1.0]));
        assert_eq!(centroid_error(a[2], b[2]), MISSING_FEATURE_PX);
        assert_eq!(centroid_error(a[0], b[0]), 0.0);
    }

    #[test]
    fn psnr_sentinel() {
        assert_eq!(psnr(0.0), f64::INFINITY);
        assert!((psnr(1e-3) - 30.0).abs() < 1e-12);
    }
}
