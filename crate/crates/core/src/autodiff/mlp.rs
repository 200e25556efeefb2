use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Unary, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

/// Layer widths (input first, output last), one activation per layer and the
/// initialization seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    /// `hidden` layers of `width` units with `act`, and a linear output layer.
    pub fn uniform(input: usize, width: usize, hidden: usize, output: usize, act: Activation, seed: u64) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend(std::iter::repeat(width).take(hidden));
        layer_widths.push(output);
        let mut activations = vec![act; hidden];
        activations.push(Activation::None);
        Self { layer_widths, activations, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("MLP widths must be positive: {:?}", self.layer_widths)));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.layer_widths.len() - 1
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and biases for one layer,
/// drawn from a ChaCha stream keyed by `(seed, layer)`.
pub fn init_layer(seed: u64, layer: usize, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    let b: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    (Tensor::from_parts(vec![fan_in, fan_out], w), Tensor::from_parts(vec![1, fan_out], b))
}

fn activate(g: &mut Graph<'_>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.unary(x, Unary::Relu),
        Activation::Tanh => g.unary(x, Unary::Tanh),
        Activation::Sigmoid => g.unary(x, Unary::Sigmoid),
        Activation::None => x,
    }
}

/// A fully connected network whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub spec: MlpSpec,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.num_layers() {
            let (w, b) = init_layer(spec.seed, l, spec.layer_widths[l], spec.layer_widths[l + 1]);
            weights.push(store.add(format!("{name}.w{l}"), group, w));
            biases.push(store.add(format!("{name}.b{l}"), group, b));
        }
        Ok(Self { name: name.to_string(), spec, weights, biases })
    }

    pub fn zero_last_layer(&self, store: &mut ParamStore) {
        store.value_mut(*self.weights.last().unwrap()).data_mut().fill(0.0);
        store.value_mut(*self.biases.last().unwrap()).data_mut().fill(0.0);
    }

    /// `(fan_in, fan_out)` of the final layer.
    pub fn last_layer_shape(&self) -> (usize, usize) {
        let n = self.spec.layer_widths.len();
        (self.spec.layer_widths[n - 2], self.spec.layer_widths[n - 1])
    }

    fn check_input(&self, g: &Graph<'_>, x: Var) -> Result<()> {
        let got = g.value(x).cols();
        if got != self.spec.input_width() {
            return Err(Error::dimension(
                format!("{} layer 0", self.name),
                format!("input width {}", self.spec.input_width()),
                format!("{got}"),
            ));
        }
        Ok(())
    }

    /// Runs every layer except the last one.
    pub fn forward_hidden(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for l in 0..self.spec.num_layers() - 1 {
            let (w, b) = (g.param(self.weights[l]), g.param(self.biases[l]));
            h = g.linear(h, w, Some(b))?;
            h = activate(g, h, self.spec.activations[l]);
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let l = self.spec.num_layers() - 1;
        let (w, b) = (g.param(self.weights[l]), g.param(self.biases[l]));
        self.forward_with_last(g, x, w, b)
    }

    /// Forward pass with the final layer's weights supplied by the caller, e.g. a
    /// hypernetwork output.
    pub fn forward_with_last(&self, g: &mut Graph<'_>, x: Var, w_last: Var, b_last: Var) -> Result<Var> {
        let (fan_in, fan_out) = self.last_layer_shape();
        if g.shape(w_last) != [fan_in, fan_out] {
            return Err(Error::dimension(
                format!("{} final layer", self.name),
                format!("[{fan_in}, {fan_out}]"),
                format!("{:?}", g.shape(w_last)),
            ));
        }
        let h = self.forward_hidden(g, x)?;
        let y = g.linear(h, w_last, Some(b_last))?;
        Ok(activate(g, y, *self.spec.activations.last().unwrap()))
    }

    /// Graph-free evaluation.
    pub fn eval(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let x = g.input(input.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}
