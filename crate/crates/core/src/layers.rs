//! Fully connected layers, the GeLU activation, and the named-tensor view
//! shared by the optimizer, checkpoints and gradient checks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Uniform access to every learnable tensor of a parameter set, in a fixed
/// traversal order. Gradient containers share the type of the parameters
/// they differentiate, so the two traversals line up entry for entry.
pub trait ParamTensors {
    fn named_tensors(&self) -> Vec<(String, &Matrix)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.data().len()).sum()
    }
}

impl ParamTensors for Matrix {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![(String::new(), self)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![(String::new(), self)]
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Matrix)>) -> impl Iterator<Item = (String, &'a Matrix)> + use<'a> {
    let prefix = prefix.to_string();
    inner.into_iter().map(move |(n, t)| (join(&prefix, &n), t))
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    inner: Vec<(String, &'a mut Matrix)>,
) -> impl Iterator<Item = (String, &'a mut Matrix)> + use<'a> {
    let prefix = prefix.to_string();
    inner.into_iter().map(move |(n, t)| (join(&prefix, &n), t))
}

fn join(prefix: &str, name: &str) -> String {
    if name.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Sets every tensor of `params` to zero; used to allocate gradient buffers.
pub fn zero_like<P: ParamTensors + Clone>(params: &P) -> P {
    let mut z = params.clone();
    for (_, t) in z.named_tensors_mut() {
        t.fill(0.0);
    }
    z
}

/// `y = x · weight + bias`, weight stored `in × out`, bias `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Matrix::from_vec(inputs, outputs, data).expect("sized"),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        let b = self.bias.data();
        for i in 0..y.rows() {
            for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(y)
    }

    /// Accumulates `∂L/∂weight`, `∂L/∂bias` into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Result<Matrix> {
        if dy.cols() != self.outputs() || dy.rows() != x.rows() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match layer output ({}, {})",
                dy.shape(),
                x.rows(),
                self.outputs()
            )));
        }
        grad.weight.add_assign(&x.t_matmul(dy)?);
        grad.bias.add_assign(&dy.col_sums());
        dy.matmul_t(&self.weight)
    }
}

impl ParamTensors for Linear {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `t · Φ(t)` with Φ the standard normal CDF.
#[inline]
pub fn gelu(t: f64) -> f64 {
    0.5 * t * (1.0 + libm::erf(t * std::f64::consts::FRAC_1_SQRT_2))
}

/// `d/dt [t · Φ(t)] = Φ(t) + t · φ(t)`.
#[inline]
pub fn gelu_grad(t: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(t * std::f64::consts::FRAC_1_SQRT_2));
    cdf + t * FRAC_1_SQRT_2PI * (-0.5 * t * t).exp()
}
