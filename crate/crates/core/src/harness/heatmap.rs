use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::image::{encode_pgm16, label, to_u16_full_range, write_file};
use crate::model::Model;
use crate::synthdata::Dataset;

/// Mean statistics of the accumulated maps inside and outside the region masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeatStats {
    pub face_inside: f64,
    pub face_outside: f64,
    pub torso_inside: f64,
    pub torso_outside: f64,
    /// Expected lip attention on lip pixels and on the other foreground pixels.
    pub lip_attention_inside: f64,
    pub lip_attention_outside: f64,
}

impl HeatStats {
    pub fn face_ratio(&self) -> f64 {
        self.face_inside / self.face_outside
    }

    pub fn torso_ratio(&self) -> f64 {
        self.torso_inside / self.torso_outside
    }

    pub fn lip_attention_ratio(&self) -> f64 {
        self.lip_attention_inside / self.lip_attention_outside
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub width: usize,
    pub height: usize,
    pub face: Vec<f64>,
    pub torso: Vec<f64>,
    pub stats: HeatStats,
}

impl Heatmaps {
    /// Writes `face_heat.pgm` and `torso_heat.pgm`, each normalised to 16 bits.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("face_heat.pgm"), &encode_pgm16(self.width, self.height, &to_u16_full_range(&self.face)))?;
        write_file(&dir.join("torso_heat.pgm"), &encode_pgm16(self.width, self.height, &to_u16_full_range(&self.torso)))
    }
}

#[derive(Default)]
struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Accumulates deformation magnitudes per pixel over the given frames.
pub fn emit_heatmap(model: &Model, ds: &Dataset, identity: usize, frames: &[usize]) -> Result<Heatmaps> {
    let (w, h) = (ds.manifest.width, ds.manifest.height);
    let mut face = vec![0.0; w * h];
    let mut torso = vec![0.0; w * h];
    let mut acc: [MeanAcc; 6] = Default::default();
    for &fi in frames {
        let f = ds.frame(identity, fi);
        let r = model.render_frame(&ds.camera(identity, fi), &f.signals, None)?;
        for p in 0..w * h {
            face[p] += r.face_heat[p];
            torso[p] += r.torso_heat[p];
            let l = f.labels[p];
            acc[usize::from(!label::is_face(l))].push(r.face_heat[p]);
            acc[2 + usize::from(l != label::TORSO)].push(r.torso_heat[p]);
            if l == label::LIP {
                acc[4].push(r.attention[p][0]);
            } else if l != label::BACKGROUND {
                acc[5].push(r.attention[p][0]);
            }
        }
    }
    let stats = HeatStats {
        face_inside: acc[0].mean(),
        face_outside: acc[1].mean(),
        torso_inside: acc[2].mean(),
        torso_outside: acc[3].mean(),
        lip_attention_inside: acc[4].mean(),
        lip_attention_outside: acc[5].mean(),
    };
    Ok(Heatmaps { width: w, height: h, face, torso, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::read_pgm16;
    use crate::model::{ModelConfig, Variant};
    use crate::synthdata::Split;

    #[test]
    fn untrained_model_gives_black_heatmaps() {
        let ds = Dataset::generate(1, 12, 8, 8, 3).unwrap();
        let model = Model::new(ModelConfig::tiny(Variant::ODR, 8, 8), false).unwrap();
        let h = emit_heatmap(&model, &ds, 0, &ds.split(0, Split::Val)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        h.write(dir.path()).unwrap();
        for f in ["face_heat.pgm", "torso_heat.pgm"] {
            let (_, _, v) = read_pgm16(&dir.path().join(f)).unwrap();
            assert!(v.iter().all(|&x| x == 0));
        }
    }
}
