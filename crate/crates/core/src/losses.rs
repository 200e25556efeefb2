use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{binary_entropy, Graph, ParamStore, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::image::{label, Image};

/// Extra colour-loss weight on face and on eye/lip pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelWeights {
    pub face: f64,
    pub feature: f64,
}

impl Default for PixelWeights {
    fn default() -> Self {
        Self { face: 4.0, feature: 9.0 }
    }
}

impl PixelWeights {
    pub fn weight(&self, l: u8) -> f64 {
        let face = if label::is_face(l) { self.face } else { 0.0 };
        let feature = if l == label::EYE || l == label::LIP { self.feature } else { 0.0 };
        1.0 + face + feature
    }
}

/// Binary region masks for a set of rays or samples, derived from pixel labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionMasks {
    pub face: Vec<f64>,
    pub torso: Vec<f64>,
    pub eye: Vec<f64>,
    pub lip: Vec<f64>,
}

impl RegionMasks {
    pub fn from_labels(labels: &[u8]) -> Self {
        let ind = |f: &dyn Fn(u8) -> bool| labels.iter().map(|&l| if f(l) { 1.0 } else { 0.0 }).collect();
        Self {
            face: ind(&label::is_face),
            torso: ind(&|l| l == label::TORSO),
            eye: ind(&|l| l == label::EYE),
            lip: ind(&|l| l == label::LIP),
        }
    }

    /// Each ray's label repeated for its samples.
    pub fn from_ray_labels(labels: &[u8], samples_per_ray: usize) -> Self {
        let expanded: Vec<u8> = labels.iter().flat_map(|&l| std::iter::repeat(l).take(samples_per_ray)).collect();
        Self::from_labels(&expanded)
    }

    pub fn len(&self) -> usize {
        self.face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.face.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta: f64,
    pub att: f64,
    pub alpha: f64,
    pub lpips: f64,
    /// Fraction of training after which the perceptual term switches on.
    pub lpips_start: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { delta: 1e-5, att: 1e-4, alpha: 1e-4, lpips: 5e-3, lpips_start: 0.8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.delta, self.att, self.alpha, self.lpips];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || !(0.0..=1.0).contains(&self.lpips_start) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }

    /// Perceptual weight in effect at `iteration` of `total`.
    pub fn lpips_at(&self, iteration: usize, total: usize) -> f64 {
        if total > 0 && iteration as f64 >= self.lpips_start * total as f64 {
            self.lpips
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub color: f64,
    pub delta: f64,
    pub att: f64,
    pub alpha: f64,
    pub lpips: f64,
    pub total: f64,
}

impl LossReport {
    /// Itemised report with the schedule applied.
    pub fn new(color: f64, delta: f64, att: f64, alpha: f64, lpips: f64, w: &LossWeights, iteration: usize, total: usize) -> Self {
        let total_loss = color + w.delta * delta + w.att * att + w.alpha * alpha + w.lpips_at(iteration, total) * lpips;
        Self { color, delta, att, alpha, lpips, total: total_loss }
    }

    pub fn is_finite(&self) -> bool {
        [self.color, self.delta, self.att, self.alpha, self.lpips, self.total].iter().all(|v| v.is_finite())
    }
}

/// Graph handles of the individual terms; absent terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub color: Var,
    pub delta: Option<Var>,
    pub att: Option<Var>,
    pub alpha: Option<Var>,
    pub lpips: Option<Var>,
}

/// Weighted total as a graph node, plus the itemised report.
pub fn total_loss(g: &mut Graph<'_>, parts: &LossParts, w: &LossWeights, iteration: usize, total: usize) -> Result<(Var, LossReport)> {
    let value = |g: &Graph<'_>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let mut acc = parts.color;
    let lpips_w = w.lpips_at(iteration, total);
    for (term, lambda) in [(parts.delta, w.delta), (parts.att, w.att), (parts.alpha, w.alpha), (parts.lpips, lpips_w)] {
        if let Some(t) = term {
            if lambda != 0.0 {
                let s = g.scale(t, lambda);
                acc = g.add(acc, s)?;
            }
        }
    }
    let report = LossReport::new(
        g.value(parts.color).item(),
        value(g, parts.delta),
        value(g, parts.att),
        value(g, parts.alpha),
        value(g, parts.lpips),
        w,
        iteration,
        total,
    );
    Ok((acc, report))
}

fn column(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len(), 1], v.to_vec()).expect("column")
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dimension(what, format!("{expected} rows"), format!("{got}")));
    }
    Ok(())
}

/// `sum_i w_i |C_i - C^_i|^2` over `[R,3]` colours.
pub fn color_loss(g: &mut Graph<'_>, pred: Var, gt: &Tensor, weights: &[f64]) -> Result<Var> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::dimension("color loss", format!("{:?}", gt.shape()), format!("{:?}", g.shape(pred))));
    }
    check_len("color loss weights", gt.rows(), weights.len())?;
    let t = g.input(gt.clone());
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    let per = g.sum_cols(sq);
    let w = g.input(column(weights));
    let weighted = g.mul(per, w)?;
    Ok(g.sum(weighted))
}

/// `sum |dx_face| (1 - face) + |dx_torso| (1 - torso)` with per-point L2 norms.
pub fn region_reg_loss(g: &mut Graph<'_>, delta_face: Var, delta_torso: Var, masks: &RegionMasks) -> Result<Var> {
    let n = g.shape(delta_face)[0];
    check_len("region masks", n, masks.len())?;
    let mut terms = Vec::new();
    for (d, m) in [(delta_face, &masks.face), (delta_torso, &masks.torso)] {
        let norm = g.row_norm(d);
        let outside = g.input(column(&m.iter().map(|v| 1.0 - v).collect::<Vec<_>>()));
        let p = g.mul(norm, outside)?;
        terms.push(g.sum(p));
    }
    g.add(terms[0], terms[1])
}

/// `sum_s sum |f_s| (1 - m_s)` over the eye, lip and torso scores (`[N,1]` each).
pub fn attention_reg_loss(g: &mut Graph<'_>, f_eye: Var, f_lip: Var, f_torso: Var, masks: &RegionMasks) -> Result<Var> {
    let n = g.shape(f_eye)[0];
    check_len("attention masks", n, masks.len())?;
    let mut acc: Option<Var> = None;
    for (f, m) in [(f_eye, &masks.eye), (f_lip, &masks.lip), (f_torso, &masks.torso)] {
        let a = g.unary(f, Unary::Abs);
        let outside = g.input(column(&m.iter().map(|v| 1.0 - v).collect::<Vec<_>>()));
        let p = g.mul(a, outside)?;
        let s = g.sum(p);
        acc = Some(match acc {
            None => s,
            Some(prev) => g.add(prev, s)?,
        });
    }
    Ok(acc.expect("three terms"))
}

/// `-sum (a ln a + (1-a) ln(1-a))`.
pub fn entropy_loss(g: &mut Graph<'_>, alpha: Var) -> Var {
    let h = g.unary(alpha, Unary::BinaryEntropy);
    g.sum(h)
}

/// Graph-free entropy of an alpha map.
pub fn entropy(alpha: &[f64]) -> f64 {
    alpha.iter().map(|&a| binary_entropy(a)).sum()
}

/// Graph-free weighted colour error.
pub fn color_error(pred: &Image, gt: &Image, weights: &[f64]) -> Result<f64> {
    pred.same_size(gt)?;
    check_len("color loss weights", gt.num_pixels(), weights.len())?;
    Ok((0..gt.num_pixels())
        .map(|p| weights[p] * (0..3).map(|c| (pred.data[3 * p + c] - gt.data[3 * p + c]).powi(2)).sum::<f64>())
        .sum())
}

/// Fixed random linear filter bank at three scales. Because the filters are
/// linear and bias-free, the feature distance equals the filtered difference.
#[derive(Debug, Clone)]
pub struct PerceptualProxy {
    pub filters: Tensor,
    pub scales: usize,
}

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (o, c, k) = (8, 3, 3);
        let bound = (3.0 / (c * k * k) as f64).sqrt();
        let data = (0..o * c * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { filters: Tensor::new(vec![o, c, k, k], data).expect("filter shape"), scales: 3 }
    }

    /// `pred` is a `[3,H,W]` node; `gt` the matching planar tensor.
    pub fn loss(&self, g: &mut Graph<'_>, pred: Var, gt: &Tensor) -> Result<Var> {
        if g.shape(pred) != gt.shape() || gt.shape().len() != 3 || gt.shape()[0] != 3 {
            return Err(Error::dimension("perceptual proxy", format!("{:?}", gt.shape()), format!("{:?}", g.shape(pred))));
        }
        let t = g.input(gt.clone());
        let mut x = g.sub(pred, t)?;
        let w = g.input(self.filters.clone());
        let b = g.input(Tensor::zeros(&[self.filters.shape()[0]]));
        let mut acc: Option<Var> = None;
        for s in 0..self.scales {
            if s > 0 {
                x = g.avg_pool2(x)?;
            }
            let f = g.conv2d(x, w, b, 1, 1)?;
            let n = g.value(f).len() as f64;
            let sq = g.square(f);
            let sum = g.sum(sq);
            let mean = g.scale(sum, 1.0 / n);
            acc = Some(match acc {
                None => mean,
                Some(prev) => g.add(prev, mean)?,
            });
        }
        Ok(acc.expect("at least one scale"))
    }

    pub fn loss_images(&self, pred: &Image, gt: &Image) -> Result<f64> {
        pred.same_size(gt)?;
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let shape = vec![3, pred.height, pred.width];
        let p = g.input(Tensor::new(shape.clone(), pred.to_chw())?);
        let l = self.loss(&mut g, p, &Tensor::new(shape, gt.to_chw())?)?;
        Ok(g.value(l).item())
    }
}

impl Default for PerceptualProxy {
    fn default() -> Self {
        Self::new(13)
    }
}
