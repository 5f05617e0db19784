//! Differentiable substrate: tensors, the autograd tape, seeded RNG and the
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod rng;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Grads, Graph, Var};
pub use rng::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Floor on vector norms inside cosine similarity.
pub const EPS_NORM: f64 = 1e-8;

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = std * rng.normal());
        t
    }

    /// Marks this tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

/// `a·b / (max(‖a‖, eps_norm) · max(‖b‖, eps_norm))`.
pub fn cosine_sim(a: &[f64], b: &[f64], eps_norm: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(contract(format!("cosine_sim needs equal non-zero lengths, got {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps_norm);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps_norm);
    Ok(dot / (na * nb))
}

/// Pairwise cosine similarities between the rows of `a` `[m, D]` and `b`
/// `[n, D]`, as a differentiable `[m, n]` value.
pub fn cosine_matrix<'g>(a: Var<'g>, b: Var<'g>, eps_norm: f64) -> Var<'g> {
    let an = a.row_normalize(eps_norm);
    let bn = if a.id() == b.id() { an } else { b.row_normalize(eps_norm) };
    an.matmul(bn.t())
}
