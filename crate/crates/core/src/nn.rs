//! Fully-connected networks over a single flat parameter vector.
//!
//! The samplers and optimizers see only `&[f64]`; a [`Network`] knows how
//! that vector splits into weight matrices (row-major `in × out`) and bias
//! rows, and how to bind it onto a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    input: usize,
    output: usize,
    offset: usize,
}

impl Dense {
    fn n_params(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// An activated trunk followed by one or more linear heads that all read the
/// trunk output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Network {
    name: &'static str,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
    activation: Activation,
    n_params: usize,
}

/// A parameter vector placed on a tape.
pub struct Bound {
    trunk: Vec<(Var, Var)>,
    heads: Vec<(Var, Var)>,
    n_params: usize,
}

impl Network {
    /// `sizes` runs input → hidden…; every head maps the last size to its width.
    pub fn new(
        name: &'static str,
        sizes: &[usize],
        head_widths: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if sizes.is_empty()
            || sizes.contains(&0)
            || head_widths.is_empty()
            || head_widths.contains(&0)
        {
            return Err(Error::Config(format!(
                "{name}: invalid layer sizes {sizes:?} / heads {head_widths:?}"
            )));
        }
        let mut offset = 0;
        let mut trunk = Vec::new();
        for w in sizes.windows(2) {
            let d = Dense {
                input: w[0],
                output: w[1],
                offset,
            };
            offset += d.n_params();
            trunk.push(d);
        }
        let last = *sizes.last().unwrap();
        let mut heads = Vec::new();
        for &width in head_widths {
            let d = Dense {
                input: last,
                output: width,
                offset,
            };
            offset += d.n_params();
            heads.push(d);
        }
        Ok(Network {
            name,
            trunk,
            heads,
            activation,
            n_params: offset,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.trunk
            .first()
            .or(self.heads.first())
            .map(|d| d.input)
            .unwrap_or(0)
    }

    /// Uniform(±1/√fan_in) weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        for d in self.trunk.iter().chain(&self.heads) {
            let bound = 1.0 / (d.input as f64).sqrt();
            for w in &mut p[d.offset..d.offset + d.input * d.output] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    fn bind_layer(tape: &mut Tape, d: &Dense, params: &[f64], trainable: bool) -> (Var, Var) {
        let nw = d.input * d.output;
        let w = Tensor::matrix(d.input, d.output, params[d.offset..d.offset + nw].to_vec())
            .expect("layer sizes are consistent by construction");
        let b = Tensor::vector(params[d.offset + nw..d.offset + nw + d.output].to_vec())
            .expect("layer sizes are consistent by construction");
        if trainable {
            (tape.leaf(w), tape.leaf(b))
        } else {
            (tape.constant(w), tape.constant(b))
        }
    }

    pub fn bind(&self, tape: &mut Tape, params: &[f64], trainable: bool) -> Result<Bound> {
        if params.len() != self.n_params {
            return Err(Error::Shape {
                op: "bind",
                left: vec![self.n_params],
                right: vec![params.len()],
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} parameters", self.name)));
        }
        let trunk = self
            .trunk
            .iter()
            .map(|d| Self::bind_layer(tape, d, params, trainable))
            .collect();
        let heads = self
            .heads
            .iter()
            .map(|d| Self::bind_layer(tape, d, params, trainable))
            .collect();
        Ok(Bound {
            trunk,
            heads,
            n_params: self.n_params,
        })
    }

    /// Forward pass of a `batch × input` matrix; returns one output per head.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        let name = self.name;
        let tag = |layer: usize| {
            move |e: Error| match e {
                Error::NonFinite(op) => Error::NonFinite(format!("{name} layer {layer} ({op})")),
                other => other,
            }
        };
        let mut h = x;
        for (i, &(w, b)) in bound.trunk.iter().enumerate() {
            let z = tape.matmul(h, w).map_err(tag(i))?;
            let z = tape.add_row(z, b).map_err(tag(i))?;
            h = match self.activation {
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
            }
            .map_err(tag(i))?;
        }
        let depth = bound.trunk.len();
        bound
            .heads
            .iter()
            .enumerate()
            .map(|(j, &(w, b))| {
                let z = tape.matmul(h, w).map_err(tag(depth + j))?;
                tape.add_row(z, b).map_err(tag(depth + j))
            })
            .collect()
    }
}

impl Bound {
    /// Parameter gradients gathered back into flat layout (zeros where unreached).
    pub fn gradient(&self, tape: &Tape) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.n_params);
        for &(w, b) in self.trunk.iter().chain(&self.heads) {
            for v in [w, b] {
                match tape.grad(v) {
                    Some(gv) => g.extend_from_slice(gv),
                    None => g.extend(std::iter::repeat_n(0.0, tape.value(v).numel())),
                }
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn layout_counts() {
        let net = Network::new("enc", &[784, 256], &[32, 32], Activation::Tanh).unwrap();
        assert_eq!(net.n_params(), 784 * 256 + 256 + 2 * (256 * 32 + 32));
        let lin = Network::new("lin", &[3], &[2], Activation::Tanh).unwrap();
        assert_eq!(lin.n_params(), 8);
        assert!(Network::new("bad", &[3, 0], &[2], Activation::Tanh).is_err());
    }

    #[test]
    fn gradient_roundtrips_layout() {
        let net = Network::new("n", &[3, 4], &[2], Activation::Relu).unwrap();
        let p = net.init(&mut seeded(1));
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, &p, true).unwrap();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap());
        let out = net.forward(&mut tape, &bound, x).unwrap();
        let s = tape.sum(out[0], None).unwrap();
        tape.backward(s).unwrap();
        let g = bound.gradient(&tape);
        assert_eq!(g.len(), net.n_params());
        // output bias gradient of a summed output is exactly one per unit
        assert_eq!(&g[g.len() - 2..], &[1.0, 1.0]);
    }
}
