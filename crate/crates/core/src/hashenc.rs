//! Multiresolution hash-grid positional encoding.
//!
//! Each level is a grid of resolution `floor(base * scale^l)` over the unit cube.
//! Its `(res+1)^3` vertices index a trainable feature table, directly when the
//! dense grid fits in `2^T` entries and through a spatial hash otherwise. A point
//! is encoded by trilinear interpolation of its cell's 8 corner features at each
//! level, concatenated level after level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Optimiser group of the canonical field's hash tables.
pub const HASH_GROUP: &str = "hash";

pub const PRIME_1: u32 = 1;
pub const PRIME_2: u32 = 2_654_435_761;
pub const PRIME_3: u32 = 805_459_861;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashGridSpec {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size_log2: u32,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub seed: u64,
}

impl Default for HashGridSpec {
    fn default() -> Self {
        Self { levels: 8, features_per_level: 2, table_size_log2: 16, base_resolution: 16, per_level_scale: 1.382, seed: 0 }
    }
}

impl HashGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(Error::Config("hash grid needs at least one level and one feature".into()));
        }
        if !(1..=26).contains(&self.table_size_log2) {
            return Err(Error::Config(format!("table_size_log2 {} outside 1..=26", self.table_size_log2)));
        }
        if self.base_resolution == 0 {
            return Err(Error::Config("base resolution must be positive".into()));
        }
        if !(self.per_level_scale > 1.0) || !self.per_level_scale.is_finite() {
            return Err(Error::Config(format!("per-level scale {} must exceed 1", self.per_level_scale)));
        }
        Ok(())
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as usize
    }

    /// Whether the level's dense vertex grid fits the table without hashing.
    pub fn is_dense(&self, level: usize) -> bool {
        let side = self.resolution(level) as u128 + 1;
        side * side * side <= 1u128 << self.table_size_log2
    }

    /// Entries stored for `level`: the dense vertex count or `2^T`.
    pub fn level_entries(&self, level: usize) -> usize {
        if self.is_dense(level) {
            (self.resolution(level) + 1).pow(3)
        } else {
            1 << self.table_size_log2
        }
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// Row offsets of each level inside the concatenated table.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.levels + 1);
        let mut acc = 0;
        for l in 0..self.levels {
            off.push(acc);
            acc += self.level_entries(l);
        }
        off.push(acc);
        off
    }

    /// Table row of vertex `(i,j,k)` at `level`, relative to the level's offset.
    pub fn vertex_index(&self, level: usize, i: usize, j: usize, k: usize) -> usize {
        if self.is_dense(level) {
            let side = self.resolution(level) + 1;
            i + j * side + k * side * side
        } else {
            spatial_hash(i, j, k, self.table_size_log2)
        }
    }
}

/// `(i*p1 xor j*p2 xor k*p3) mod 2^T` in wrapping 32-bit arithmetic.
pub fn spatial_hash(i: usize, j: usize, k: usize, table_size_log2: u32) -> usize {
    let h = (i as u32).wrapping_mul(PRIME_1) ^ (j as u32).wrapping_mul(PRIME_2) ^ (k as u32).wrapping_mul(PRIME_3);
    (h & ((1u64 << table_size_log2) - 1) as u32) as usize
}

/// Result of encoding a batch: features plus the number of clamped points.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub features: Var,
    pub clamped: usize,
}

/// Per-point interpolation stencil at one level.
#[derive(Clone, Copy)]
struct Cell {
    /// Absolute table rows of the 8 corners, corner bit order `(dx, dy, dz)`.
    rows: [u32; 8],
    frac: [f64; 3],
    res: f64,
}

impl Cell {
    fn weight(&self, corner: usize) -> f64 {
        let mut w = 1.0;
        for d in 0..3 {
            w *= if corner >> d & 1 == 1 { self.frac[d] } else { 1.0 - self.frac[d] };
        }
        w
    }

    /// d(weight)/d(x_d).
    fn weight_grad(&self, corner: usize, d: usize) -> f64 {
        let mut w = self.res * if corner >> d & 1 == 1 { 1.0 } else { -1.0 };
        for e in 0..3 {
            if e != d {
                w *= if corner >> e & 1 == 1 { self.frac[e] } else { 1.0 - self.frac[e] };
            }
        }
        w
    }
}

#[derive(Debug, Clone)]
pub struct HashEncoder {
    pub name: String,
    pub spec: HashGridSpec,
    pub table: ParamId,
    offsets: Vec<usize>,
}

impl HashEncoder {
    /// Registers the concatenated `[entries, F]` table, initialised uniformly in
    /// `[-1e-4, 1e-4]`.
    pub fn new(store: &mut ParamStore, name: &str, group: &str, spec: HashGridSpec) -> Result<Self> {
        spec.validate()?;
        let offsets = spec.offsets();
        let total = *offsets.last().unwrap();
        let f = spec.features_per_level;
        let mut data = Vec::with_capacity(total * f);
        for l in 0..spec.levels {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(l as u64);
            data.extend((0..spec.level_entries(l) * f).map(|_| rng.gen_range(-1e-4..=1e-4)));
        }
        let table = store.add(format!("{name}.table"), group, Tensor::new(vec![total, f], data)?);
        Ok(Self { name: name.to_string(), spec, table, offsets })
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn cell(&self, level: usize, x: &[f64; 3]) -> Cell {
        let res = self.spec.resolution(level);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            let p = x[d] * res as f64;
            let i = (p.floor() as usize).min(res - 1);
            base[d] = i;
            frac[d] = p - i as f64;
        }
        let mut rows = [0u32; 8];
        for (c, row) in rows.iter_mut().enumerate() {
            let idx = self.spec.vertex_index(level, base[0] + (c & 1), base[1] + (c >> 1 & 1), base[2] + (c >> 2 & 1));
            *row = (self.offsets[level] + idx) as u32;
        }
        Cell { rows, frac, res: res as f64 }
    }

    /// Clamps into the unit cube; returns the per-axis in-range mask.
    fn clamp(p: &[f64]) -> ([f64; 3], [bool; 3]) {
        let mut x = [0.0; 3];
        let mut inside = [true; 3];
        for d in 0..3 {
            let v = if p[d].is_nan() { 0.5 } else { p[d] };
            x[d] = v.clamp(0.0, 1.0);
            inside[d] = (0.0..=1.0).contains(&v);
        }
        (x, inside)
    }

    /// Encodes an `[N,3]` batch. Out-of-cube points are clamped and counted; the
    /// gradient along a clamped axis is zero.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Encoded> {
        let xv = g.value(x);
        if xv.cols() != 3 {
            return Err(Error::dimension(format!("{} input", self.name), "3 columns", format!("{}", xv.cols())));
        }
        let table = g.store().value(self.table);
        let (n, levels, f) = (xv.rows(), self.spec.levels, self.spec.features_per_level);
        let mut cells = Vec::with_capacity(n * levels);
        let mut inside = Vec::with_capacity(n);
        let mut out = vec![0.0; n * levels * f];
        let mut clamped = 0;
        let td = table.data();
        for p in 0..n {
            let (pt, ins) = Self::clamp(xv.row_slice(p));
            if ins.iter().any(|b| !b) {
                clamped += 1;
            }
            inside.push(ins);
            for l in 0..levels {
                let cell = self.cell(l, &pt);
                let dst = &mut out[(p * levels + l) * f..(p * levels + l + 1) * f];
                for c in 0..8 {
                    let w = cell.weight(c);
                    let row = cell.rows[c] as usize * f;
                    for k in 0..f {
                        dst[k] += w * td[row + k];
                    }
                }
                cells.push(cell);
            }
        }
        let op = HashEncodeOp { levels, features: f, table_rows: table.rows(), cells, inside };
        let t = g.param(self.table);
        let features = g.custom(&[x, t], Tensor::new(vec![n, levels * f], out)?, Box::new(op));
        Ok(Encoded { features, clamped })
    }

    /// Graph-free encoding of a single point.
    pub fn encode_point(&self, store: &ParamStore, x: [f64; 3]) -> (Vec<f64>, bool) {
        let mut g = Graph::new(store);
        let xi = g.input(Tensor::row(&x));
        let e = self.encode(&mut g, xi).expect("3 columns");
        (g.value(e.features).data().to_vec(), e.clamped > 0)
    }
}

struct HashEncodeOp {
    levels: usize,
    features: usize,
    table_rows: usize,
    cells: Vec<Cell>,
    inside: Vec<[bool; 3]>,
}

impl CustomOp for HashEncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (levels, f) = (self.levels, self.features);
        let n = self.inside.len();
        let table = inputs[1].data();
        let mut dx = needs[0].then(|| vec![0.0; n * 3]);
        let mut dt = needs[1].then(|| vec![0.0; self.table_rows * f]);
        for p in 0..n {
            for l in 0..levels {
                let cell = &self.cells[p * levels + l];
                let go = &grad_out[(p * levels + l) * f..(p * levels + l + 1) * f];
                if let Some(dt) = dt.as_mut() {
                    for c in 0..8 {
                        let w = cell.weight(c);
                        let row = cell.rows[c] as usize * f;
                        for k in 0..f {
                            dt[row + k] += w * go[k];
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    for d in 0..3 {
                        if !self.inside[p][d] {
                            continue;
                        }
                        let mut acc = 0.0;
                        for c in 0..8 {
                            let row = cell.rows[c] as usize * f;
                            let dot: f64 = (0..f).map(|k| go[k] * table[row + k]).sum();
                            acc += cell.weight_grad(c, d) * dot;
                        }
                        dx[p * 3 + d] += acc;
                    }
                }
            }
        }
        vec![dx, dt]
    }
}
