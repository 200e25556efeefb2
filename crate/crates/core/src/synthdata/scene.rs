//! Analytic "articulated portrait": a head sphere with eye and lip decals over an
//! ellipsoidal torso, seen by a fixed pinhole camera.
//!
//! Canonical (head) space is the unit cube. The head is static in that space; a
//! frame's head pose moves the head in the world, and the torso follows the head
//! translation through a stiffness factor. Dataset cameras are expressed in head
//! space, so the torso is what appears to move there.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{DrivingSignals, SignalDims};
use crate::image::label;
use crate::render::{add3, dot, scale3, sub3, unit_box_interval, Camera, Intrinsics, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub skin: [u8; 3],
    pub eye: [u8; 3],
    pub lip: [u8; 3],
    pub torso: [u8; 3],
}

impl Palette {
    pub fn color(&self, l: u8) -> Option<[u8; 3]> {
        match l {
            label::FACE => Some(self.skin),
            label::EYE => Some(self.eye),
            label::LIP => Some(self.lip),
            label::TORSO => Some(self.torso),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub seed: u64,
    pub head_center: Vec3,
    pub head_radius: f64,
    pub torso_center: Vec3,
    /// Ellipsoid semi-axes.
    pub torso_size: Vec3,
    pub palette: Palette,
    /// Eye centres at `(+-eye_separation, eye_height)` in head-local `(u, v)`.
    pub eye_separation: f64,
    pub eye_height: f64,
    pub eye_half_width: f64,
    /// Eye half-height per unit eye aspect ratio.
    pub eye_gain: f64,
    /// Eye aspect ratio of an open eye.
    pub eye_open: f64,
    pub lip_height: f64,
    pub lip_half_width: f64,
    pub lip_min: f64,
    /// Lip opening (full height) per unit of the first audio component.
    pub lip_gain: f64,
    pub pose_gain: f64,
    pub torso_stiffness: f64,
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], spread: i32) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.gen_range(-spread..=spread)).clamp(0, 255) as u8)
}

/// World camera shared by every identity.
pub fn world_camera(width: usize, height: usize) -> Camera {
    Camera { intrinsics: Intrinsics::portrait(width, height), c2w: Pose { translation: [0.5, 0.5, 2.5], ..Pose::identity() } }
}

/// `R = Rz(roll) Ry(yaw) Rx(pitch)`.
pub fn rotation_xyz(pitch: f64, yaw: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sz, cz) = roll.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let p = |r: [[f64; 3]; 3]| Pose { rotation: r, translation: [0.0; 3] };
    p(rz).compose(&p(ry)).compose(&p(rx)).rotation
}

/// Entry and exit distances of a ray through an axis-aligned ellipsoid.
fn ellipsoid_hit(o: Vec3, d: Vec3, c: Vec3, r: Vec3) -> Option<(f64, f64)> {
    let oc = sub3(o, c);
    let o2 = [oc[0] / r[0], oc[1] / r[1], oc[2] / r[2]];
    let d2 = [d[0] / r[0], d[1] / r[1], d[2] / r[2]];
    let a = dot(d2, d2);
    let b = 2.0 * dot(o2, d2);
    let cc = dot(o2, o2) - 1.0;
    let disc = b * b - 4.0 * a * cc;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some(((-b - s) / (2.0 * a), (-b + s) / (2.0 * a)))
}

/// Ground-truth frame: 8-bit RGB plus a label per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GtFrame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
}

impl GtFrame {
    pub fn label_count(&self, l: u8) -> usize {
        self.labels.iter().filter(|&&x| x == l).count()
    }
}

/// Named pixel positions `(col, row)`.
pub type Keypoints = BTreeMap<String, [f64; 2]>;

pub const KEYPOINT_NAMES: [&str; 10] =
    ["chin", "eye_left", "eye_right", "lip_bottom", "lip_center", "lip_left", "lip_right", "lip_top", "shoulder_left", "shoulder_right"];

impl SyntheticIdentity {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1d);
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let head_radius = u(0.19, 0.23);
        let torso_size = [u(0.30, 0.36), 0.2, u(0.17, 0.2)];
        let eye_separation = u(0.07, 0.09);
        let eye_height = u(0.03, 0.05);
        let eye_half_width = u(0.035, 0.045);
        let eye_gain = u(0.09, 0.12);
        let eye_open = u(0.27, 0.33);
        let lip_height = u(0.08, 0.1);
        let lip_half_width = u(0.06, 0.08);
        let lip_min = u(0.008, 0.012);
        let lip_gain = u(0.05, 0.07);
        let pose_gain = u(0.8, 1.2);
        let torso_stiffness = u(0.4, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc01_0e);
        let palette = Palette {
            skin: jitter(&mut rng, [215, 170, 135], 20),
            eye: jitter(&mut rng, [30, 25, 35], 12),
            lip: jitter(&mut rng, [175, 45, 55], 20),
            torso: jitter(&mut rng, [55, 95, 170], 30),
        };
        Self {
            seed,
            head_center: [0.5, 0.6, 0.5],
            head_radius,
            torso_center: [0.5, 0.17, 0.5],
            torso_size,
            palette,
            eye_separation,
            eye_height,
            eye_half_width,
            eye_gain,
            eye_open,
            lip_height,
            lip_half_width,
            lip_min,
            lip_gain,
            pose_gain,
            torso_stiffness,
        }
    }

    pub fn neutral_signals(&self, dims: SignalDims) -> DrivingSignals {
        DrivingSignals::neutral(dims, self.eye_open)
    }

    /// Head space to world.
    pub fn head_pose(&self, s: &DrivingSignals) -> Pose {
        let g = self.pose_gain;
        let rot = rotation_xyz(g * s.pose[0], g * s.pose[1], g * s.pose[2]);
        let r = Pose { rotation: rot, translation: [0.0; 3] };
        let c = self.head_center;
        let t = [g * s.pose[3], g * s.pose[4], g * s.pose[5]];
        Pose { rotation: rot, translation: sub3(add3(c, t), r.rotate(c)) }
    }

    pub fn torso_world_center(&self, s: &DrivingSignals) -> Vec3 {
        let k = self.pose_gain * self.torso_stiffness;
        add3(self.torso_center, [k * s.pose[3], k * s.pose[4], k * s.pose[5]])
    }

    /// The world camera expressed in head space for this frame.
    pub fn head_camera(&self, s: &DrivingSignals, world: &Camera) -> Camera {
        Camera { intrinsics: world.intrinsics, c2w: self.head_pose(s).inverse().compose(&world.c2w) }
    }

    pub fn eye_half_height(&self, s: &DrivingSignals) -> f64 {
        self.eye_gain * s.eye.first().copied().unwrap_or(0.0).max(0.0)
    }

    /// Full lip opening height; linear in the first audio component.
    pub fn lip_opening(&self, s: &DrivingSignals) -> f64 {
        2.0 * self.lip_min + self.lip_gain * s.audio.first().copied().unwrap_or(0.0).max(0.0)
    }

    /// Label of a head-local surface point `(u, v, w)` with `w` toward the camera.
    fn head_label(&self, local: Vec3, s: &DrivingSignals) -> u8 {
        let (u, v, w) = (local[0], local[1], local[2]);
        if w > 0.0 {
            let b = self.eye_half_height(s);
            if b > 0.0 {
                for sx in [-1.0, 1.0] {
                    let du = (u - sx * self.eye_separation) / self.eye_half_width;
                    let dv = (v - self.eye_height) / b;
                    if du * du + dv * dv <= 1.0 {
                        return label::EYE;
                    }
                }
            }
            let h = 0.5 * self.lip_opening(s);
            let du = u / self.lip_half_width;
            let dv = (v + self.lip_height) / h;
            if du * du + dv * dv <= 1.0 {
                return label::LIP;
            }
        }
        label::FACE
    }

    /// Visible label along a world ray, restricted to the head-space unit cube.
    pub fn trace(&self, origin: Vec3, dir: Vec3, s: &DrivingSignals) -> u8 {
        let inv = self.head_pose(s).inverse();
        let (ho, hd) = (inv.apply(origin), inv.rotate(dir));
        let Some((tn, tf)) = unit_box_interval(ho, hd) else { return label::BACKGROUND };
        let tn = tn.max(0.0);
        let clip = |hit: Option<(f64, f64)>| hit.and_then(|(a, b)| {
            let (a, b) = (a.max(tn), b.min(tf));
            (a < b).then_some(a)
        });
        let r = self.head_radius;
        let head = clip(ellipsoid_hit(ho, hd, self.head_center, [r, r, r]));
        let torso = clip(ellipsoid_hit(origin, dir, self.torso_world_center(s), self.torso_size));
        match (head, torso) {
            (Some(th), t) if t.map_or(true, |tt| th <= tt) => {
                let p = add3(ho, scale3(hd, th));
                self.head_label(sub3(p, self.head_center), s)
            }
            (_, Some(_)) => label::TORSO,
            _ => label::BACKGROUND,
        }
    }

    pub fn render_gt(&self, s: &DrivingSignals, camera: &Camera, background: [f64; 3]) -> GtFrame {
        let k = camera.intrinsics;
        let bg = background.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        let mut rgb = Vec::with_capacity(k.width * k.height * 3);
        let mut labels = Vec::with_capacity(k.width * k.height);
        let to_cam = |row: usize, col: usize| {
            crate::render::normalize([(col as f64 + 0.5 - k.cx) / k.fx, -(row as f64 + 0.5 - k.cy) / k.fy, -1.0])
        };
        for row in 0..k.height {
            for col in 0..k.width {
                let d = camera.c2w.rotate(to_cam(row, col));
                let l = self.trace(camera.c2w.translation, d, s);
                labels.push(l);
                rgb.extend_from_slice(&self.palette.color(l).unwrap_or(bg));
            }
        }
        GtFrame { width: k.width, height: k.height, rgb, labels }
    }

    /// Frame at neutral signals.
    pub fn canonical_frame(&self, dims: SignalDims, camera: &Camera, background: [f64; 3]) -> GtFrame {
        self.render_gt(&self.neutral_signals(dims), camera, background)
    }

    fn surface(&self, u: f64, v: f64) -> Vec3 {
        let r = self.head_radius;
        let w = (r * r - u * u - v * v).max(0.0).sqrt();
        add3(self.head_center, [u, v, w])
    }

    /// World positions of the named keypoints.
    pub fn keypoints_3d(&self, s: &DrivingSignals) -> BTreeMap<String, Vec3> {
        let h = self.head_pose(s);
        let half = 0.5 * self.lip_opening(s);
        let lv = -self.lip_height;
        let head = [
            ("eye_left", -self.eye_separation, self.eye_height),
            ("eye_right", self.eye_separation, self.eye_height),
            ("lip_left", -self.lip_half_width, lv),
            ("lip_right", self.lip_half_width, lv),
            ("lip_top", 0.0, lv + half),
            ("lip_bottom", 0.0, lv - half),
            ("lip_center", 0.0, lv),
            ("chin", 0.0, -0.85 * self.head_radius),
        ];
        let mut out: BTreeMap<String, Vec3> = head.iter().map(|&(n, u, v)| (n.to_string(), h.apply(self.surface(u, v)))).collect();
        let c = self.torso_world_center(s);
        out.insert("shoulder_left".into(), sub3(c, [self.torso_size[0], 0.0, 0.0]));
        out.insert("shoulder_right".into(), add3(c, [self.torso_size[0], 0.0, 0.0]));
        out
    }

    pub fn keypoints(&self, s: &DrivingSignals, world: &Camera) -> Keypoints {
        self.keypoints_3d(s).into_iter().map(|(k, p)| {
            let (c, r) = world.project(p);
            (k, [c, r])
        }).collect()
    }
}

/// Smooth per-frame driving signals with known causal structure.
pub fn generate_signals(identity: &SyntheticIdentity, frames: usize, dims: SignalDims, seed: u64) -> Vec<DrivingSignals> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ identity.seed.rotate_left(17) ^ 0x519a);
    let rho: f64 = 0.85;
    let innov = (1.0 - rho * rho).sqrt();
    let mut z: Vec<f64> = (0..dims.audio).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let period = rng.gen_range(24.0..40.0);
    let phase = rng.gen_range(0.0..period);
    let rot_periods: Vec<f64> = (0..6).map(|_| rng.gen_range(40.0..90.0)).collect();
    let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let tf = t as f64;
        for v in z.iter_mut() {
            let e: f64 = rng.gen_range(-1.0..1.0) * 3f64.sqrt();
            *v = rho * *v + innov * e;
        }
        let mut audio: Vec<f64> = z.iter().map(|v| 0.5 * v).collect();
        if let Some(a0) = audio.first_mut() {
            *a0 = 0.5 * (1.0 + (1.5 * z[0]).tanh());
        }
        // Blink train: a Gaussian dip once per period.
        let mut blink = 0.0;
        let k0 = ((tf - phase) / period).floor();
        for k in [k0 - 1.0, k0, k0 + 1.0] {
            let centre = phase + k * period;
            blink += (-((tf - centre) / 1.2).powi(2)).exp();
        }
        let ear = identity.eye_open * (1.0 - blink.min(1.0));
        let mut pose = [0.0; 6];
        for k in 0..6 {
            let amp = if k < 3 { 0.06 } else { 0.02 };
            pose[k] = amp * (std::f64::consts::TAU * tf / rot_periods[k] + phases[k]).sin();
        }
        out.push(DrivingSignals { audio, eye: vec![ear; dims.eye], pose });
    }
    out
}
