//! Fully connected networks with hand-written reverse- and forward-mode
//! derivatives. Rows of every matrix are samples.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => h.tanh(),
            Activation::Relu => h.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `h` and output `a`.
    fn slope(self, h: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Hidden layers use `activation`; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub(crate) weights: Vec<DMatrix<f64>>,
    pub(crate) biases: Vec<DVector<f64>>,
    pub(crate) activation: Activation,
}

/// Everything the backward passes need from a forward pass.
pub(crate) struct Trace {
    /// Layer inputs `a_0 = x, a_1, …, a_{L−1}`.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations `h_1, …, h_L`; the last one is the network output.
    pre: Vec<DMatrix<f64>>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.pre.last().expect("at least one layer")
    }
}

impl Mlp {
    /// `sizes = [input, hidden…, output]`. Weights and biases are drawn
    /// uniformly from `±1/√fan_in`.
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)));
            biases.push(DVector::from_fn(w[1], |_, _| rng.random_range(-bound..bound)));
        }
        Mlp {
            weights,
            biases,
            activation,
        }
    }

    pub fn zeros_like(other: &Mlp) -> Self {
        Mlp {
            weights: other
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: other.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            activation: other.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_traced(x).pre.pop().expect("at least one layer")
    }

    pub(crate) fn forward_traced(&self, x: &DMatrix<f64>) -> Trace {
        let n_layers = self.weights.len();
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::with_capacity(n_layers);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = inputs.last().expect("nonempty") * w.transpose();
            for mut row in h.row_iter_mut() {
                row += b.transpose();
            }
            if l + 1 < n_layers {
                inputs.push(h.map(|v| self.activation.apply(v)));
            }
            pre.push(h);
        }
        Trace { inputs, pre }
    }

    /// Reverse pass: given `∂L/∂output`, accumulate parameter gradients into
    /// `grads` and return `∂L/∂input`.
    pub(crate) fn backward(&self, trace: &Trace, grad_out: &DMatrix<f64>, grads: &mut Mlp) -> DMatrix<f64> {
        let mut delta = grad_out.clone();
        for l in (0..self.weights.len()).rev() {
            grads.weights[l] += delta.transpose() * &trace.inputs[l];
            for row in delta.row_iter() {
                grads.biases[l] += row.transpose();
            }
            let mut upstream = &delta * &self.weights[l];
            if l > 0 {
                let (h, a) = (&trace.pre[l - 1], &trace.inputs[l]);
                for ((u, &hv), &av) in upstream.iter_mut().zip(h.iter()).zip(a.iter()) {
                    *u *= self.activation.slope(hv, av);
                }
            }
            delta = upstream;
        }
        delta
    }

    /// Forward-mode derivative along per-row input directions `dir`:
    /// returns the tangents of every layer input plus the output tangent
    /// `J(x)·dir`. Only meaningful for piecewise-linear activations, whose
    /// slopes do not depend on the parameters away from kinks.
    pub(crate) fn tangent(&self, trace: &Trace, dir: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        debug_assert_eq!(self.activation, Activation::Relu);
        let mut tangents = vec![dir.clone()];
        let n_layers = self.weights.len();
        for l in 0..n_layers {
            let mut dh = tangents.last().expect("nonempty") * self.weights[l].transpose();
            if l + 1 == n_layers {
                return (tangents, dh);
            }
            for (d, &hv) in dh.iter_mut().zip(trace.pre[l].iter()) {
                if hv <= 0.0 {
                    *d = 0.0;
                }
            }
            tangents.push(dh);
        }
        unreachable!("loop returns at the output layer")
    }

    /// Gradient of `Σ_rows ⟨r_out, J(x)·dir⟩` with respect to the weights,
    /// holding `dir` fixed. Biases only move kink locations, so their
    /// gradient is zero almost everywhere.
    pub(crate) fn tangent_backward(
        &self,
        trace: &Trace,
        tangents: &[DMatrix<f64>],
        r_out: &DMatrix<f64>,
        grads: &mut Mlp,
    ) {
        let mut r = r_out.clone();
        for l in (0..self.weights.len()).rev() {
            grads.weights[l] += r.transpose() * &tangents[l];
            if l == 0 {
                break;
            }
            let mut upstream = &r * &self.weights[l];
            for (u, &hv) in upstream.iter_mut().zip(trace.pre[l - 1].iter()) {
                if hv <= 0.0 {
                    *u = 0.0;
                }
            }
            r = upstream;
        }
    }

    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    /// `(name suffix, rows, cols)` for every tensor, in `tensors()` order.
    pub(crate) fn shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("w{l}"), w.nrows(), w.ncols()));
            out.push((format!("b{l}"), b.len(), 1));
        }
        out
    }
}
