//! Eager, gradient-free versions of the graph operations.
//!
//! Each function records its work on a throwaway [`Graph`], so the values are
//! bit-identical to what the differentiable path produces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Tensor};
use crate::error::{DimeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

pub(crate) fn softmax_into(z: &[f64], tau: f64, out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = ((v - max) / tau).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b)?;
    Ok(g.value(c).clone())
}

pub fn softmax_with_temperature(z: &Tensor, tau: f64) -> Result<Tensor> {
    if z.is_empty() {
        return Err(DimeError::Input("softmax of an empty vector".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(z.clone());
    let y = g.softmax(x, tau)?;
    Ok(g.value(y).clone())
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gm, bt) = (
        g.constant(x.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
    );
    let y = g.layer_norm(x, gm, bt, eps)?;
    Ok(g.value(y).clone())
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = match kind {
        Activation::Relu => g.relu(v),
        Activation::Gelu => g.gelu(v),
    };
    g.value(y).clone()
}

pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.dropout(v, p, training, rng)?;
    Ok(g.value(y).clone())
}

pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.l2_normalize(v, eps)?;
    Ok(g.value(y).clone())
}

pub fn euclidean_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DimeError::dim("euclidean_distance", a.shape(), b.shape()));
    }
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let d = g.row_distance(x, y)?;
    Ok(g.value(d).item())
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor, eps: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DimeError::dim("cosine_similarity", a.shape(), b.shape()));
    }
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.row_cosine(x, y, eps)?;
    Ok(g.value(c).item())
}

pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, labels)?;
    Ok(g.value(loss).item())
}
