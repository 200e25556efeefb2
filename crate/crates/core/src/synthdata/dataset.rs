//! On-disk dataset layout:
//!
//! ```text
//! manifest.json
//! idN/frames/%05d.ppm   8-bit RGB
//! idN/masks/%05d.pgm    8-bit labels
//! idN/signals.json      one entry per frame
//! idN/cameras.json      head-space camera-to-world pose per frame
//! idN/keypoints.json    named pixel positions per frame
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::{generate_signals, world_camera, Keypoints, SyntheticIdentity};
use crate::deform::{DrivingSignals, SignalDims};
use crate::error::{Error, Result};
use crate::image::{encode_pgm8, encode_ppm, read_file, read_pgm8, read_ppm, write_file, Image};
use crate::render::{Camera, Intrinsics, Pose};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub name: String,
    pub frames: usize,
    pub params: SyntheticIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub identities: Vec<IdentityEntry>,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub signal_dims: SignalDims,
    /// Training frames per validation frame.
    pub split_ratio: usize,
    pub background: [f64; 3],
}

impl DatasetManifest {
    /// Validation frames of a clip of `frames`: the final `frames / (split_ratio + 1)`
    /// frames, rounded to nearest.
    pub fn val_count(&self, frames: usize) -> usize {
        let period = self.split_ratio + 1;
        (frames + period / 2) / period
    }

    /// Contiguous split: training frames first, the held-out tail last.
    pub fn split_indices(&self, frames: usize, val: bool) -> Vec<usize> {
        let first_val = frames - self.val_count(frames);
        if val {
            (first_val..frames).collect()
        } else {
            (0..first_val).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
    pub signals: DrivingSignals,
    /// Head-space camera-to-world pose.
    pub camera: Pose,
    pub keypoints: Keypoints,
}

impl Frame {
    pub fn image(&self, width: usize, height: usize) -> Image {
        Image::from_bytes(width, height, &self.rgb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityData {
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub identities: Vec<IdentityData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train or val"))),
        }
    }
}

/// Seed of identity `i` in a dataset generated from `seed`.
pub fn identity_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64 * 7919 + 1)
}

impl Dataset {
    /// Generates `ids` identities with `frames` frames each.
    pub fn generate(ids: usize, frames: usize, width: usize, height: usize, seed: u64) -> Result<Self> {
        let seeds: Vec<u64> = (0..ids).map(|i| identity_seed(seed, i)).collect();
        Self::generate_with_seeds(&seeds, frames, width, height, seed)
    }

    pub fn generate_with_seeds(seeds: &[u64], frames: usize, width: usize, height: usize, seed: u64) -> Result<Self> {
        if seeds.is_empty() || frames == 0 || width < 8 || height < 8 {
            return Err(Error::Config(format!("cannot generate {} identities x {frames} frames at {width}x{height}", seeds.len())));
        }
        let dims = SignalDims::default();
        let world = world_camera(width, height);
        let background = [0.5; 3];
        let mut entries = Vec::new();
        let mut identities = Vec::new();
        for (i, &s) in seeds.iter().enumerate() {
            let id = SyntheticIdentity::generate(s);
            let signals = generate_signals(&id, frames, dims, seed);
            let frames_data = signals
                .into_iter()
                .map(|sig| {
                    let gt = id.render_gt(&sig, &world, background);
                    let camera = id.head_camera(&sig, &world).c2w;
                    let keypoints = id.keypoints(&sig, &world);
                    Frame { rgb: gt.rgb, labels: gt.labels, signals: sig, camera, keypoints }
                })
                .collect();
            entries.push(IdentityEntry { name: format!("id{i}"), frames, params: id });
            identities.push(IdentityData { frames: frames_data });
        }
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            identities: entries,
            width,
            height,
            intrinsics: world.intrinsics,
            signal_dims: dims,
            split_ratio: 10,
            background,
        };
        Ok(Self { manifest, identities })
    }

    pub fn camera(&self, identity: usize, frame: usize) -> Camera {
        Camera { intrinsics: self.manifest.intrinsics, c2w: self.identities[identity].frames[frame].camera }
    }

    pub fn frame(&self, identity: usize, frame: usize) -> &Frame {
        &self.identities[identity].frames[frame]
    }

    pub fn split(&self, identity: usize, split: Split) -> Vec<usize> {
        self.manifest.split_indices(self.identities[identity].frames.len(), split == Split::Val)
    }

    /// A dataset holding only the listed identities, renamed `id0..`.
    pub fn subset(&self, identities: &[usize]) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.identities = identities.iter().enumerate().map(|(k, &i)| {
            let mut e = self.manifest.identities[i].clone();
            e.name = format!("id{k}");
            e
        }).collect();
        Self { manifest, identities: identities.iter().map(|&i| self.identities[i].clone()).collect() }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = &self.manifest;
        write_json(&dir.join("manifest.json"), m)?;
        for (entry, data) in m.identities.iter().zip(&self.identities) {
            let root = dir.join(&entry.name);
            for (i, f) in data.frames.iter().enumerate() {
                write_file(&root.join("frames").join(format!("{i:05}.ppm")), &encode_ppm(m.width, m.height, &f.rgb))?;
                write_file(&root.join("masks").join(format!("{i:05}.pgm")), &encode_pgm8(m.width, m.height, &f.labels))?;
            }
            let signals: Vec<&DrivingSignals> = data.frames.iter().map(|f| &f.signals).collect();
            let cameras: Vec<&Pose> = data.frames.iter().map(|f| &f.camera).collect();
            let keypoints: Vec<&Keypoints> = data.frames.iter().map(|f| &f.keypoints).collect();
            write_json(&root.join("signals.json"), &signals)?;
            write_json(&root.join("cameras.json"), &cameras)?;
            write_json(&root.join("keypoints.json"), &keypoints)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        let mpath = dir.join("manifest.json");
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&mpath, format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.identities.is_empty() {
            return Err(Error::format(&mpath, "no identities listed"));
        }
        let mut identities = Vec::new();
        for entry in &manifest.identities {
            let root = dir.join(&entry.name);
            let n = entry.frames;
            for sub in ["frames", "masks"] {
                let d = root.join(sub);
                let count = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?.count();
                if count != n {
                    return Err(Error::format(&d, format!("manifest lists {n} frames but the directory holds {count} files")));
                }
            }
            let signals: Vec<DrivingSignals> = read_json(&root.join("signals.json"))?;
            let cameras: Vec<Pose> = read_json(&root.join("cameras.json"))?;
            let keypoints: Vec<Keypoints> = read_json(&root.join("keypoints.json"))?;
            for (file, len) in [("signals.json", signals.len()), ("cameras.json", cameras.len()), ("keypoints.json", keypoints.len())] {
                if len != n {
                    return Err(Error::format(root.join(file), format!("{len} entries for {n} frames")));
                }
            }
            let mut frames = Vec::with_capacity(n);
            for (i, ((s, c), k)) in signals.into_iter().zip(cameras).zip(keypoints).enumerate() {
                s.validate(manifest.signal_dims).map_err(|e| Error::format(root.join("signals.json"), format!("frame {i}: {e}")))?;
                let fp = root.join("frames").join(format!("{i:05}.ppm"));
                let (w, h, rgb) = read_ppm(&fp)?;
                let mp = root.join("masks").join(format!("{i:05}.pgm"));
                let (mw, mh, labels) = read_pgm8(&mp)?;
                for (p, (ww, hh)) in [(&fp, (w, h)), (&mp, (mw, mh))] {
                    if (ww, hh) != (manifest.width, manifest.height) {
                        return Err(Error::format(p, format!("size {ww}x{hh} differs from the manifest")));
                    }
                }
                if let Some(bad) = labels.iter().find(|&&l| l > 4) {
                    return Err(Error::format(&mp, format!("unknown label {bad}")));
                }
                frames.push(Frame { rgb, labels, signals: s, camera: c, keypoints: k });
            }
            identities.push(IdentityData { frames });
        }
        Ok(Self { manifest, identities })
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Every file below `dir`, sorted, with its bytes.
pub fn snapshot_tree(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("below root").to_path_buf();
                out.push((rel, read_file(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_write_is_byte_identical() {
        let ds = Dataset::generate(2, 5, 16, 16, 3).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        ds.write(a.path()).unwrap();
        let back = Dataset::read(a.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back, ds);
        back.write(b.path()).unwrap();
        assert_eq!(snapshot_tree(a.path()).unwrap(), snapshot_tree(b.path()).unwrap());
    }

    #[test]
    fn tampered_frame_count_names_the_file() {
        let ds = Dataset::generate(1, 4, 16, 16, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let mut m: serde_json::Value = read_json(&dir.path().join("manifest.json")).unwrap();
        m["identities"][0]["frames"] = serde_json::json!(5);
        write_json(&dir.path().join("manifest.json"), &m).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frames"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let sig = dir.path().join("id0").join("signals.json");
        let mut s: Vec<serde_json::Value> = read_json(&sig).unwrap();
        s.pop();
        write_json(&sig, &s).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err().to_string();
        assert!(err.contains("signals.json"), "{err}");
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Dataset::read(dir.path()).unwrap_err().to_string().contains("manifest.json"));
        let ds = Dataset::generate(1, 3, 16, 16, 1).unwrap();
        ds.write(dir.path()).unwrap();
        fs::remove_file(dir.path().join("id0").join("keypoints.json")).unwrap();
        assert!(Dataset::read(dir.path()).unwrap_err().to_string().contains("keypoints.json"));
    }

    #[test]
    fn ten_to_one_tail_split() {
        let ds = Dataset::generate(1, 22, 8, 8, 0).unwrap();
        assert_eq!(ds.split(0, Split::Val), vec![20, 21]);
        assert_eq!(ds.split(0, Split::Train), (0..20).collect::<Vec<_>>());
        let m = &ds.manifest;
        assert_eq!((m.val_count(120), m.val_count(12), m.val_count(5), m.val_count(1)), (11, 1, 0, 0));
    }

    #[test]
    fn three_identity_dataset_writes_quickly() {
        let start = std::time::Instant::now();
        let ds = Dataset::generate(3, 60, 64, 64, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        assert!(start.elapsed().as_secs_f64() < 10.0);
    }
}
