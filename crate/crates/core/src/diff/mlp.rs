//! Small fully-connected networks described by a layer grammar such as
//! `"FC. 32. Tanh. FC. 1."`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Linear(usize),
    Tanh,
    Relu,
    Sigmoid,
    Softmax,
}

/// Parses the dotted layer grammar. `FC` must be followed by its width.
pub fn parse_arch(spec: &str) -> Result<Vec<Layer>> {
    let tokens: Vec<&str> = spec.split('.').map(str::trim).filter(|t| !t.is_empty()).collect();
    let mut layers = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let layer = match tokens[i].to_ascii_lowercase().as_str() {
            "fc" => {
                let width = tokens
                    .get(i + 1)
                    .and_then(|t| t.parse::<usize>().ok())
                    .filter(|&w| w > 0)
                    .ok_or_else(|| Error::Argument(format!("`FC` at token {i} needs a positive width")))?;
                i += 1;
                Layer::Linear(width)
            }
            "tanh" => Layer::Tanh,
            "relu" => Layer::Relu,
            "sigmoid" => Layer::Sigmoid,
            "softmax" => Layer::Softmax,
            other => return Err(Error::Argument(format!("unknown layer `{other}`"))),
        };
        layers.push(layer);
        i += 1;
    }
    if layers.is_empty() {
        return Err(Error::Argument("empty architecture".into()));
    }
    Ok(layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Xavier-uniform weights, zero biases.
    #[default]
    Xavier,
    /// As `Xavier`, but the last linear layer starts at zero.
    ZeroLast,
}

/// A network whose parameters live in a [`ParamStore`] under
/// `<name>.<layer>.w` (`in×out`) and `<name>.<layer>.b` (`1×out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    name: String,
    input: usize,
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(name: impl Into<String>, input: usize, layers: Vec<Layer>) -> Self {
        Self { name: name.into(), input, layers }
    }

    pub fn from_spec(name: impl Into<String>, input: usize, spec: &str) -> Result<Self> {
        Ok(Self::new(name, input, parse_arch(spec)?))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn output_width(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| if let Layer::Linear(w) = l { Some(*w) } else { None })
            .unwrap_or(self.input)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn weight_name(&self, i: usize) -> String {
        format!("{}.{i}.w", self.name)
    }

    fn bias_name(&self, i: usize) -> String {
        format!("{}.{i}.b", self.name)
    }

    /// Adds this network's parameters to `store`.
    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, init: Init, rng: &mut R) -> Result<()> {
        let last = self.layers.iter().rposition(|l| matches!(l, Layer::Linear(_)));
        let mut width = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Linear(out) = *layer {
                let zero = init == Init::ZeroLast && Some(i) == last;
                let bound = (6.0 / (width + out) as f64).sqrt();
                let data = (0..width * out)
                    .map(|_| if zero { S::zero() } else { S::c(rng.gen_range(-bound..bound)) })
                    .collect();
                store.insert(self.weight_name(i), Tensor::from_vec(width, out, data))?;
                store.insert(self.bias_name(i), Tensor::zeros(1, out))?;
                width = out;
            }
        }
        Ok(())
    }

    /// Applies the network row-wise to a `batch × input` node.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let mut h = x;
        let mut width = self.input;
        if tape.shape(x).1 != width {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("input width {} but network expects {width}", tape.shape(x).1),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            h = match *layer {
                Layer::Linear(out) => {
                    let w = tape.param(store, &self.weight_name(i))?;
                    let b = tape.param(store, &self.bias_name(i))?;
                    if tape.shape(w) != (width, out) || tape.shape(b) != (1, out) {
                        return Err(Error::Shape {
                            layer: i,
                            detail: format!("stored weight {:?} does not match {width}x{out}", tape.shape(w)),
                        });
                    }
                    width = out;
                    let z = tape.matmul(h, w);
                    tape.add(z, b)
                }
                Layer::Tanh => tape.tanh(h),
                Layer::Relu => tape.relu(h),
                Layer::Sigmoid => tape.sigmoid(h),
                Layer::Softmax => tape.softmax(h),
            };
        }
        Ok(h)
    }

    /// Forward pass on plain values, discarding the tape.
    pub fn eval<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(out).clone())
    }
}
