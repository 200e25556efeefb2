//! Rays, stratified sampling and differentiable volume integration.
//!
//! Along a ray with samples `t_1 < ... < t_n`, opacity `alpha_i = 1 - exp(-sigma_i delta_i)`,
//! transmittance `T_i = prod_{j<i} (1 - alpha_j)` and
//! `C = sum_i T_i alpha_i c_i`. Sample `i` owns the cell between the midpoints to
//! its neighbours (the first cell starts at `t_near`, the last ends at `t_far`),
//! so the `delta_i` always sum to `t_far - t_near`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

/// Threshold below which a ray counts as empty for depth.
pub const DEPTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add3(self.origin, scale3(self.dir, t))
    }

    /// Clips `[t_near, t_far]` to the unit cube. Returns `false` when the ray misses it.
    pub fn clip_to_unit_box(&mut self) -> bool {
        match unit_box_interval(self.origin, self.dir) {
            Some((a, b)) if b > a && b > 0.0 => {
                self.t_near = a.max(0.0);
                self.t_far = b;
                true
            }
            _ => false,
        }
    }
}

/// Slab intersection of a ray with `[0,1]^3`.
pub fn unit_box_interval(o: Vec3, d: Vec3) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < 0.0 || o[k] > 1.0 {
                return None;
            }
        } else {
            let a = (0.0 - o[k]) / d[k];
            let b = (1.0 - o[k]) / d[k];
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    (hi > lo).then_some((lo, hi))
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square-pixel camera with focal length `2 * width`.
    pub fn portrait(width: usize, height: usize) -> Self {
        let f = 2.0 * width as f64;
        Self { width, height, fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }
}

/// Camera-to-world rigid transform; the camera looks down its local `-z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add3(self.rotate(p), self.translation)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]];
        let inv = Pose { rotation: rt, translation: [0.0; 3] };
        let t = inv.rotate(self.translation);
        Pose { rotation: rt, translation: scale3(t, -1.0) }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Self {
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.rotation[i][k] * other.rotation[k][j]).sum();
            }
        }
        Pose { rotation: rot, translation: self.apply(other.translation) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub c2w: Pose,
}

impl Camera {
    /// Ray through the centre of pixel `(row, col)`, clipped to the unit cube.
    /// Rays that miss the cube get `t_near == t_far`.
    pub fn ray(&self, row: usize, col: usize) -> Ray {
        let k = &self.intrinsics;
        let d_cam = normalize([(col as f64 + 0.5 - k.cx) / k.fx, -(row as f64 + 0.5 - k.cy) / k.fy, -1.0]);
        let mut ray = Ray { origin: self.c2w.translation, dir: self.c2w.rotate(d_cam), t_near: 0.0, t_far: 0.0, pixel: (row, col) };
        if !ray.clip_to_unit_box() {
            ray.t_near = 0.0;
            ray.t_far = 0.0;
        }
        ray
    }

    /// Continuous pixel coordinates `(col, row)` of a world point, in the same
    /// convention as pixel indices (pixel `(r,c)` has its centre at `(c, r)`).
    pub fn project(&self, p: Vec3) -> (f64, f64) {
        let q = self.c2w.inverse().apply(p);
        let k = &self.intrinsics;
        let z = -q[2];
        (k.fx * q[0] / z + k.cx - 0.5, -k.fy * q[1] / z + k.cy - 0.5)
    }
}

/// Sample distances and their cell lengths along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Stratified sampling: one distance per equal bin of `[t_near, t_far]`, at the bin
/// centre without jitter or uniformly inside the bin with `jitter`.
pub fn sample_ray(ray: &Ray, n: usize, jitter: Option<&mut ChaCha8Rng>) -> Result<RaySamples> {
    if n < 2 {
        return Err(Error::contract(format!("need at least 2 samples per ray, got {n}")));
    }
    let (a, b) = (ray.t_near, ray.t_far);
    let h = (b - a) / n as f64;
    let t: Vec<f64> = match jitter {
        None => (0..n).map(|i| a + (i as f64 + 0.5) * h).collect(),
        Some(rng) => (0..n).map(|i| a + (i as f64 + rng.gen::<f64>()) * h).collect(),
    };
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let lo = if i == 0 { a } else { 0.5 * (t[i - 1] + t[i]) };
        let hi = if i + 1 == n { b } else { 0.5 * (t[i] + t[i + 1]) };
        delta.push(hi - lo);
    }
    Ok(RaySamples { t, delta })
}

/// Convenience: jittered sampling with a dedicated seed.
pub fn sample_ray_seeded(ray: &Ray, n: usize, jitter_seed: u64) -> Result<RaySamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    sample_ray(ray, n, Some(&mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadianceSample {
    pub color: Vec3,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedPixel {
    pub color: Vec3,
    pub alpha: f64,
    pub depth: f64,
}

/// Transmittance before each sample plus the residual `T_{n+1}`.
pub fn transmittance(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut t = Vec::with_capacity(sigma.len() + 1);
    let mut acc = 0.0;
    t.push(1.0);
    for (s, d) in sigma.iter().zip(delta) {
        acc += s * d;
        t.push((-acc).exp());
    }
    t
}

/// Per-ray forward pass shared by [`integrate`] and the batched op.
/// `colors` is `[n,3]` row-major.
fn integrate_ray(sigma: &[f64], colors: &[f64], delta: &[f64], t: &[f64], t_far: f64) -> [f64; 5] {
    let mut trans = 1.0;
    let mut acc_opt = 0.0;
    let mut out = [0.0; 5];
    let mut depth_num = 0.0;
    for i in 0..sigma.len() {
        acc_opt += sigma[i] * delta[i];
        let next = (-acc_opt).exp();
        let w = trans - next;
        out[0] += w * colors[3 * i];
        out[1] += w * colors[3 * i + 1];
        out[2] += w * colors[3 * i + 2];
        depth_num += w * t[i];
        trans = next;
    }
    out[3] = 1.0 - trans;
    out[4] = if out[3] < DEPTH_EPS { t_far } else { depth_num / out[3] };
    out
}

/// Integrates one ray's samples.
pub fn integrate(samples: &[RadianceSample], ray_samples: &RaySamples, t_far: f64) -> Result<RenderedPixel> {
    if samples.len() != ray_samples.t.len() {
        return Err(Error::dimension("integrate", format!("{} samples", ray_samples.t.len()), format!("{}", samples.len())));
    }
    if let Some(d) = ray_samples.delta.iter().find(|d| **d < 0.0) {
        return Err(Error::contract(format!("negative sample spacing {d}")));
    }
    if let Some(s) = samples.iter().find(|s| !(s.sigma >= 0.0)) {
        return Err(Error::contract(format!("negative density {}", s.sigma)));
    }
    let sigma: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    let colors: Vec<f64> = samples.iter().flat_map(|s| s.color).collect();
    let o = integrate_ray(&sigma, &colors, &ray_samples.delta, &ray_samples.t, t_far);
    Ok(RenderedPixel { color: [o[0], o[1], o[2]], alpha: o[3], depth: o[4] })
}

/// Flattened sample layout of a batch of rays with a fixed sample count.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub samples_per_ray: usize,
    /// `[R*S]` sample distances.
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// `[R*S, 3]` sample positions.
    pub points: Vec<f64>,
    /// `[R*S, 3]` unit directions.
    pub dirs: Vec<f64>,
}

impl RayBatch {
    pub fn new(rays: Vec<Ray>, samples_per_ray: usize, mut jitter: Option<&mut ChaCha8Rng>) -> Result<Self> {
        let n = rays.len() * samples_per_ray;
        let mut t = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(3 * n);
        let mut dirs = Vec::with_capacity(3 * n);
        for ray in &rays {
            let s = sample_ray(ray, samples_per_ray, jitter.as_deref_mut())?;
            for (&ti, &di) in s.t.iter().zip(&s.delta) {
                t.push(ti);
                delta.push(di);
                points.extend_from_slice(&ray.at(ti));
                dirs.extend_from_slice(&ray.dir);
            }
        }
        Ok(Self { rays, samples_per_ray, t, delta, points, dirs })
    }

    pub fn num_rays(&self) -> usize {
        self.rays.len()
    }

    pub fn num_samples(&self) -> usize {
        self.t.len()
    }

    pub fn points_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_samples(), 3], self.points.clone()).expect("consistent batch")
    }

    pub fn dirs_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_samples(), 3], self.dirs.clone()).expect("consistent batch")
    }

    /// Volume integration of `sigma [N,1]` and `color [N,3]` into `[R,5]` rows of
    /// `(r, g, b, alpha, depth)`.
    pub fn integrate(&self, g: &mut Graph<'_>, sigma: Var, color: Var) -> Result<Var> {
        let n = self.num_samples();
        if g.value(sigma).len() != n || g.shape(color) != [n, 3] {
            return Err(Error::dimension(
                "volume integration",
                format!("sigma [{n},1] and color [{n},3]"),
                format!("{:?} and {:?}", g.shape(sigma), g.shape(color)),
            ));
        }
        let s = self.samples_per_ray;
        let sig = g.value(sigma).data();
        let col = g.value(color).data();
        let mut out = Vec::with_capacity(self.num_rays() * 5);
        for (r, ray) in self.rays.iter().enumerate() {
            let span = r * s..(r + 1) * s;
            out.extend_from_slice(&integrate_ray(
                &sig[span.clone()],
                &col[3 * span.start..3 * span.end],
                &self.delta[span.clone()],
                &self.t[span],
                ray.t_far,
            ));
        }
        let op = IntegrateOp { samples_per_ray: s, delta: self.delta.clone(), t: self.t.clone() };
        Ok(g.custom(&[sigma, color], Tensor::new(vec![self.num_rays(), 5], out)?, Box::new(op)))
    }
}

struct IntegrateOp {
    samples_per_ray: usize,
    delta: Vec<f64>,
    t: Vec<f64>,
}

impl CustomOp for IntegrateOp {
    fn name(&self) -> &'static str {
        "volume_integrate"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let sig = inputs[0].data();
        let col = inputs[1].data();
        let s = self.samples_per_ray;
        let n = sig.len();
        let mut dsig = vec![0.0; n];
        let mut dcol = vec![0.0; 3 * n];
        let mut trans = vec![0.0; s + 1];
        let mut w = vec![0.0; s];
        let mut q = vec![0.0; s];
        for r in 0..n / s {
            let base = r * s;
            let o = &output.data()[5 * r..5 * r + 5];
            let go = &grad_out[5 * r..5 * r + 5];
            // Depth = num / alpha when alpha >= eps, a constant otherwise.
            let (d_alpha, d_num) = if o[3] < DEPTH_EPS { (go[3], 0.0) } else { (go[3] - go[4] * o[4] / o[3], go[4] / o[3]) };
            let mut acc = 0.0;
            trans[0] = 1.0;
            for i in 0..s {
                acc += sig[base + i] * self.delta[base + i];
                trans[i + 1] = (-acc).exp();
                w[i] = trans[i] - trans[i + 1];
                let c = &col[3 * (base + i)..3 * (base + i) + 3];
                q[i] = go[0] * c[0] + go[1] * c[1] + go[2] * c[2] + d_alpha + d_num * self.t[base + i];
                dcol[3 * (base + i)] = w[i] * go[0];
                dcol[3 * (base + i) + 1] = w[i] * go[1];
                dcol[3 * (base + i) + 2] = w[i] * go[2];
            }
            // d/dsigma_k sum_i w_i q_i = delta_k (T_{k+1} q_k - sum_{i>k} w_i q_i)
            let mut tail = 0.0;
            for k in (0..s).rev() {
                dsig[base + k] = self.delta[base + k] * (trans[k + 1] * q[k] - tail);
                tail += w[k] * q[k];
            }
        }
        vec![needs[0].then_some(dsig), needs[1].then_some(dcol)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions, ParamStore};
    use proptest::prelude::*;

    fn unit_ray() -> Ray {
        Ray { origin: [0.0; 3], dir: [0.0, 0.0, 1.0], t_near: 0.0, t_far: 1.0, pixel: (0, 0) }
    }

    #[test]
    fn midpoints_without_jitter() {
        let s = sample_ray(&unit_ray(), 4, None).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.delta, vec![0.25; 4]);
    }

    #[test]
    fn deltas_telescope() {
        let ray = Ray { t_near: 1.3, t_far: 2.9, ..unit_ray() };
        for seed in 0..5 {
            let s = sample_ray_seeded(&ray, 17, seed).unwrap();
            let total: f64 = s.delta.iter().sum();
            assert!((total - 1.6).abs() < 1e-12);
            assert!(s.t.windows(2).all(|w| w[0] < w[1]));
            assert!(s.t.iter().all(|t| (1.3..=2.9).contains(t)));
        }
    }

    #[test]
    fn jitter_reproducible() {
        let a = sample_ray_seeded(&unit_ray(), 8, 9).unwrap();
        let b = sample_ray_seeded(&unit_ray(), 8, 9).unwrap();
        let c = sample_ray_seeded(&unit_ray(), 8, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(sample_ray(&unit_ray(), 1, None).is_err());
    }

    #[test]
    fn vacuum_is_transparent() {
        let s = sample_ray(&unit_ray(), 8, None).unwrap();
        let samples = vec![RadianceSample { color: [0.3, 0.6, 0.9], sigma: 0.0 }; 8];
        let px = integrate(&samples, &s, 1.0).unwrap();
        assert_eq!(px.color, [0.0; 3]);
        assert_eq!(px.alpha, 0.0);
        assert_eq!(px.depth, 1.0);
        assert!(transmittance(&[0.0; 8], &s.delta).iter().all(|&t| t == 1.0));
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        let c0 = [0.2, 0.5, 0.9];
        let s = sample_ray(&unit_ray(), 256, None).unwrap();
        let samples = vec![RadianceSample { color: c0, sigma: 2.0 }; 256];
        let px = integrate(&samples, &s, 1.0).unwrap();
        let k = 1.0 - (-2.0f64).exp();
        for c in 0..3 {
            assert!((px.color[c] - c0[c] * k).abs() < 1e-4);
        }
    }

    #[test]
    fn opaque_first_sample_saturates() {
        let s = RaySamples { t: vec![0.1, 0.5, 0.9], delta: vec![1.0, 1.0, 1.0] };
        let samples = [
            RadianceSample { color: [0.7, 0.1, 0.4], sigma: 40.0 },
            RadianceSample { color: [0.0, 1.0, 0.0], sigma: 3.0 },
            RadianceSample { color: [1.0, 1.0, 1.0], sigma: 3.0 },
        ];
        let px = integrate(&samples, &s, 1.0).unwrap();
        for c in 0..3 {
            assert!((px.color[c] - samples[0].color[c]).abs() < 1e-15);
        }
        assert!((px.alpha - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_inputs_are_contract_errors() {
        let s = RaySamples { t: vec![0.1, 0.5], delta: vec![0.5, -0.1] };
        let samples = [RadianceSample { color: [0.0; 3], sigma: 1.0 }; 2];
        assert!(integrate(&samples, &s, 1.0).is_err());
        let s = RaySamples { t: vec![0.1, 0.5], delta: vec![0.5, 0.5] };
        let bad = [RadianceSample { color: [0.0; 3], sigma: -1.0 }; 2];
        assert!(integrate(&bad, &s, 1.0).is_err());
    }

    #[test]
    fn batched_gradients_match_differences() {
        let rays = vec![unit_ray(), Ray { t_near: 0.5, t_far: 2.0, ..unit_ray() }];
        let batch = RayBatch::new(rays, 6, None).unwrap();
        let mut store = ParamStore::new();
        let sig: Vec<f64> = (0..12).map(|i| 0.3 + (i as f64 * 0.77).sin().abs() * 2.0).collect();
        let col: Vec<f64> = (0..36).map(|i| 0.5 + 0.4 * (i as f64 * 1.3).cos()).collect();
        let ps = store.add("sigma", "x", Tensor::new(vec![12, 1], sig).unwrap());
        let pc = store.add("color", "x", Tensor::new(vec![12, 3], col).unwrap());
        let probe = Tensor::from_rows(&[vec![0.3, -0.2, 0.5, 0.7, 0.1], vec![-0.4, 0.9, 0.2, -0.3, 0.6]]).unwrap();
        let report = grad_check(&mut store, &[ps, pc], &GradCheckOptions::default(), |g| {
            let (s, c) = (g.param(ps), g.param(pc));
            let out = batch.integrate(g, s, c)?;
            let w = g.input(probe.clone());
            let p = g.mul(out, w)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }

    #[test]
    fn batch_matches_single_ray_path() {
        let ray = Ray { t_near: 0.2, t_far: 1.7, ..unit_ray() };
        let batch = RayBatch::new(vec![ray], 5, None).unwrap();
        let sig = [0.1, 2.0, 0.0, 5.0, 1.0];
        let cols: Vec<Vec3> = (0..5).map(|i| [0.1 * i as f64, 0.5, 1.0 - 0.2 * i as f64]).collect();
        let samples: Vec<RadianceSample> = sig.iter().zip(&cols).map(|(&s, &c)| RadianceSample { color: c, sigma: s }).collect();
        let single = integrate(&samples, &sample_ray(&ray, 5, None).unwrap(), ray.t_far).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.input(Tensor::new(vec![5, 1], sig.to_vec()).unwrap());
        let c = g.input(Tensor::new(vec![5, 3], cols.concat()).unwrap());
        let out = batch.integrate(&mut g, s, c).unwrap();
        let o = g.value(out).data();
        assert_eq!(&o[..3], &single.color);
        assert_eq!(o[3], single.alpha);
        assert_eq!(o[4], single.depth);
    }

    #[test]
    fn camera_projection_inverts_rays() {
        let cam = Camera { intrinsics: Intrinsics::portrait(64, 64), c2w: Pose { translation: [0.5, 0.5, 2.5], ..Pose::identity() } };
        let ray = cam.ray(10, 40);
        assert!(ray.t_far > ray.t_near);
        let (u, v) = cam.project(ray.at(1.9));
        assert!((u - 40.0).abs() < 1e-9 && (v - 10.0).abs() < 1e-9);
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let (a, b) = (0.3f64, -0.2f64);
        let rot = [[a.cos(), 0.0, a.sin()], [0.0, 1.0, 0.0], [-a.sin(), 0.0, a.cos()]];
        let rx = [[1.0, 0.0, 0.0], [0.0, b.cos(), -b.sin()], [0.0, b.sin(), b.cos()]];
        let p = Pose { rotation: rot, translation: [0.1, -0.4, 2.0] }.compose(&Pose { rotation: rx, translation: [0.0, 1.0, 0.0] });
        let q = p.inverse().apply(p.apply([0.3, 0.7, -1.2]));
        assert!((q[0] - 0.3).abs() < 1e-12 && (q[1] - 0.7).abs() < 1e-12 && (q[2] + 1.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_monotone(sig in proptest::collection::vec(0.0f64..30.0, 2..40), len in 0.1f64..3.0) {
            let n = sig.len();
            let ray = Ray { t_far: len, ..unit_ray() };
            let s = sample_ray(&ray, n, None).unwrap();
            let samples: Vec<RadianceSample> = sig.iter().map(|&x| RadianceSample { color: [1.0, 0.0, 0.5], sigma: x }).collect();
            let px = integrate(&samples, &s, len).unwrap();
            let tr = transmittance(&sig, &s.delta);
            prop_assert_eq!(tr[0], 1.0);
            prop_assert!(tr.windows(2).all(|w| w[1] <= w[0]));
            let weights: f64 = (0..n).map(|i| tr[i] - tr[i + 1]).sum();
            prop_assert!((weights + tr[n] - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&px.alpha));
            prop_assert!((px.alpha - weights).abs() < 1e-12);
            prop_assert!(px.color[0] <= px.alpha + 1e-12);
        }
    }
}
