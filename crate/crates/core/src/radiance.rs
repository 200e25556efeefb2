//! Canonical-space radiance field.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Mlp, MlpSpec, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::hashenc::{HashEncoder, HashGridSpec, HASH_GROUP};
use crate::render::RadianceSample;

static NORMALIZED_DIRECTIONS: AtomicU64 = AtomicU64::new(0);

/// How many query directions had to be renormalised so far in this process.
pub fn normalized_direction_count() -> u64 {
    NORMALIZED_DIRECTIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadianceConfig {
    pub hash: HashGridSpec,
    pub width: usize,
    pub geo_features: usize,
    pub dir_frequencies: usize,
}

impl Default for RadianceConfig {
    fn default() -> Self {
        Self { hash: HashGridSpec::default(), width: 64, geo_features: 15, dir_frequencies: 4 }
    }
}

/// `sin(2^k pi d), cos(2^k pi d)` for each frequency and axis.
pub fn encode_direction(d: [f64; 3], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * frequencies);
    for k in 0..frequencies {
        let f = std::f64::consts::PI * (1u64 << k) as f64;
        for c in d {
            out.push((f * c).sin());
            out.push((f * c).cos());
        }
    }
    out
}

/// Identity-specific inputs, each `[1, *]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StaticIdentity {
    pub geometry: Option<Var>,
    pub appearance: Option<Var>,
    pub offset: Option<Var>,
}

pub struct RadianceOutput {
    pub sigma: Var,
    pub color: Var,
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct RadianceField {
    pub encoder: HashEncoder,
    pub density: Mlp,
    pub color: Mlp,
    pub config: RadianceConfig,
    pub geo_dim: usize,
    pub app_dim: usize,
    pub extra_dim: usize,
}

impl RadianceField {
    /// `extra_dim` columns of per-sample conditioning are appended to the density
    /// input (used when signals bypass deformation).
    pub fn new(store: &mut ParamStore, cfg: &RadianceConfig, geo_dim: usize, app_dim: usize, extra_dim: usize, seed: u64) -> Result<Self> {
        let encoder = HashEncoder::new(store, "canon.enc", HASH_GROUP, HashGridSpec { seed: seed ^ 0xc0, ..cfg.hash })?;
        let din = encoder.output_dim() + geo_dim + extra_dim;
        let density = Mlp::new(store, "density", "mlp", MlpSpec::uniform(din, cfg.width, 1, 1 + cfg.geo_features, Activation::Relu, seed ^ 0xd))?;
        let cin = cfg.geo_features + 6 * cfg.dir_frequencies + app_dim;
        let color = Mlp::new(store, "color", "mlp", MlpSpec::uniform(cin, cfg.width, 1, 3, Activation::Relu, seed ^ 0xc))?;
        Ok(Self { encoder, density, color, config: cfg.clone(), geo_dim, app_dim, extra_dim })
    }

    /// `x_prime [N,3]`, `dirs [N, 6*frequencies]` (already encoded).
    pub fn forward(&self, g: &mut Graph<'_>, x_prime: Var, dirs: Var, id: StaticIdentity, extra: Option<Var>) -> Result<RadianceOutput> {
        let n = g.shape(x_prime)[0];
        let x = match id.offset {
            Some(o) => g.add_row(x_prime, o)?,
            None => x_prime,
        };
        let enc = self.encoder.encode(g, x)?;
        let mut parts = vec![enc.features];
        if let Some(geo) = id.geometry {
            parts.push(g.broadcast_rows(geo, n)?);
        }
        if let Some(e) = extra {
            parts.push(e);
        }
        let din = g.concat(&parts)?;
        let dens = self.density.forward(g, din).map_err(|e| self.wrap(e, "density"))?;
        let raw_sigma = g.slice_cols(dens, 0, 1)?;
        let sigma = g.softplus(raw_sigma);
        let geo = g.slice_cols(dens, 1, self.config.geo_features)?;
        let mut parts = vec![geo, dirs];
        if let Some(app) = id.appearance {
            parts.push(g.broadcast_rows(app, n)?);
        }
        let cin = g.concat(&parts)?;
        let logits = self.color.forward(g, cin).map_err(|e| self.wrap(e, "color"))?;
        let color = g.sigmoid(logits);
        Ok(RadianceOutput { sigma, color, clamped: enc.clamped })
    }

    fn wrap(&self, e: Error, head: &str) -> Error {
        match e {
            Error::Dimension { context, expected, got } => Error::contract(format!("{head} head ({context}): expected {expected}, got {got}")),
            other => other,
        }
    }

    /// Single-point query. `static_id` is `(geometry, appearance)`.
    pub fn query(
        &self,
        store: &ParamStore,
        x_prime: [f64; 3],
        d: [f64; 3],
        static_id: Option<(&[f64], &[f64])>,
        offset: Option<[f64; 3]>,
    ) -> Result<RadianceSample> {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::contract(format!("view direction {d:?} cannot be normalised")));
        }
        let d = if (norm - 1.0).abs() > 1e-6 {
            NORMALIZED_DIRECTIONS.fetch_add(1, Ordering::Relaxed);
            [d[0] / norm, d[1] / norm, d[2] / norm]
        } else {
            d
        };
        let mut g = Graph::new(store);
        let x = g.input(Tensor::row(&x_prime));
        let dirs = g.input(Tensor::row(&encode_direction(d, self.config.dir_frequencies)));
        let mut id = StaticIdentity::default();
        if let Some((geo, app)) = static_id {
            id.geometry = Some(g.input(Tensor::row(geo)));
            id.appearance = Some(g.input(Tensor::row(app)));
        }
        if let Some(o) = offset {
            id.offset = Some(g.input(Tensor::row(&o)));
        }
        let extra = (self.extra_dim > 0).then(|| g.input(Tensor::zeros(&[1, self.extra_dim])));
        let out = self.forward(&mut g, x, dirs, id, extra)?;
        let c = g.value(out.color).data();
        Ok(RadianceSample { color: [c[0], c[1], c[2]], sigma: g.value(out.sigma).item() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> RadianceConfig {
        RadianceConfig {
            hash: HashGridSpec { levels: 3, features_per_level: 2, table_size_log2: 10, base_resolution: 4, per_level_scale: 2.0, seed: 0 },
            width: 8,
            geo_features: 4,
            dir_frequencies: 2,
        }
    }

    fn field(seed: u64, geo: usize, app: usize) -> (ParamStore, RadianceField) {
        let mut store = ParamStore::new();
        let f = RadianceField::new(&mut store, &small(), geo, app, 0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = store.value_mut(f.encoder.table);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        (store, f)
    }

    fn dense(store: &ParamStore, mlp: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        for l in 0..mlp.weights.len() {
            let w = store.value(mlp.weights[l]);
            let (fi, fo) = (w.shape()[0], w.shape()[1]);
            let mut out = store.value(mlp.biases[l]).data().to_vec();
            for j in 0..fo {
                for i in 0..fi {
                    out[j] += h[i] * w.data()[i * fo + j];
                }
            }
            if l + 1 < mlp.weights.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    #[test]
    fn hand_evaluation_at_box_centre() {
        let (store, f) = field(5, 0, 0);
        let got = f.query(&store, [0.5; 3], [0.0, 0.0, 1.0], None, None).unwrap();
        let (feat, _) = f.encoder.encode_point(&store, [0.5; 3]);
        let dens = dense(&store, &f.density, &feat);
        let sigma = dens[0].max(0.0) + (-dens[0].abs()).exp().ln_1p();
        let mut cin = dens[1..].to_vec();
        cin.extend(encode_direction([0.0, 0.0, 1.0], 2));
        let logits = dense(&store, &f.color, &cin);
        assert!((got.sigma - sigma).abs() < 1e-14);
        for k in 0..3 {
            assert!((got.color[k] - 1.0 / (1.0 + (-logits[k]).exp())).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_color_head_gives_grey_and_negative_density_vanishes() {
        let (mut store, f) = field(6, 0, 0);
        for id in f.color.weights.iter().chain(&f.color.biases) {
            store.value_mut(*id).data_mut().fill(0.0);
        }
        for id in &f.density.weights {
            store.value_mut(*id).data_mut().fill(0.0);
        }
        store.value_mut(*f.density.biases.last().unwrap()).data_mut()[0] = -800.0;
        let s = f.query(&store, [0.2, 0.9, 0.4], [1.0, 0.0, 0.0], None, None).unwrap();
        assert_eq!(s.color, [0.5; 3]);
        assert!(s.sigma < 1e-300);
    }

    #[test]
    fn zero_identity_matches_shared_query_with_absent_features() {
        let mut store = ParamStore::new();
        let f = RadianceField::new(&mut store, &small(), 3, 2, 0, 9).unwrap();
        // Zero rows for the identity inputs make them inert.
        let shared = f.query(&store, [0.3, 0.3, 0.6], [0.0, 1.0, 0.0], Some((&[0.0; 3], &[0.0; 2])), Some([0.0; 3])).unwrap();
        let w0 = store.value(f.density.weights[0]).clone();
        let rows = w0.shape()[0];
        assert_eq!(rows, f.encoder.output_dim() + 3);
        let direct = f.query(&store, [0.3, 0.3, 0.6], [0.0, 1.0, 0.0], Some((&[0.0; 3], &[0.0; 2])), None).unwrap();
        assert_eq!(shared, direct);
    }

    #[test]
    fn non_unit_direction_is_normalised_and_counted() {
        let (store, f) = field(7, 0, 0);
        let before = normalized_direction_count();
        let a = f.query(&store, [0.5; 3], [0.0, 0.0, 3.0], None, None).unwrap();
        let b = f.query(&store, [0.5; 3], [0.0, 0.0, 1.0], None, None).unwrap();
        assert_eq!(a, b);
        assert!(normalized_direction_count() > before);
        assert!(f.query(&store, [0.5; 3], [0.0; 3], None, None).is_err());
    }

    #[test]
    fn offset_shifts_the_query_point() {
        let (store, f) = field(8, 0, 0);
        let a = f.query(&store, [0.2, 0.3, 0.4], [0.0, 0.0, 1.0], None, Some([0.1, 0.1, 0.1])).unwrap();
        let b = f.query(&store, [0.3, 0.4, 0.5], [0.0, 0.0, 1.0], None, None).unwrap();
        for k in 0..3 {
            assert!((a.color[k] - b.color[k]).abs() < 1e-12);
        }
        assert!((a.sigma - b.sigma).abs() < 1e-12);
    }

    #[test]
    fn direction_encoding_layout() {
        let e = encode_direction([0.0, 0.5, 1.0], 1);
        let pi = std::f64::consts::PI;
        let expect = [0.0, 1.0, (pi * 0.5).sin(), (pi * 0.5).cos(), pi.sin(), pi.cos()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(encode_direction([1.0, 0.0, 0.0], 4).len(), 24);
    }

    proptest! {
        #[test]
        fn outputs_in_range(x in proptest::array::uniform3(-0.5f64..1.5), d in proptest::array::uniform3(-1.0f64..1.0)) {
            prop_assume!(d.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let (store, f) = field(10, 0, 0);
            let s = f.query(&store, x, d, None, None).unwrap();
            prop_assert!(s.sigma >= 0.0 && s.sigma.is_finite());
            prop_assert!(s.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}
