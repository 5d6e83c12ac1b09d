//! The split network: a small convolutional client sub-model that produces
//! smashed data and a pooled dense server sub-model with a softmax
//! cross-entropy head, with hand-written backward passes.
//!
//! Parameters and their gradients are exposed as ordered lists of tensors
//! through [`Parameters`], which is what [`sgd_step`], averaging and the
//! checkpoint code work on.

pub mod checkpoint;
mod client;
pub mod layers;
mod server;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use client::{client_backward, client_backward_tape, client_forward, client_forward_tape, ClientModel, ClientTape, Conv2d};
pub use server::{server_forward_backward, server_logits, Dense, ServerModel, ServerOutput};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ordered, named access to a model's trainable tensors.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// One gradient tensor per parameter, in [`Parameters::named_params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    /// Element-wise mean of several gradient sets, summed in slice order.
    pub fn mean(sets: &[Gradients]) -> Result<Gradients> {
        let first = sets.first().ok_or_else(|| Error::arg("no gradients to average"))?;
        let tensors = (0..first.0.len())
            .map(|i| {
                let parts: Vec<&Tensor> = sets.iter().map(|g| &g.0[i]).collect();
                mean_tensors(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        if sets.iter().any(|g| g.0.len() != first.0.len()) {
            return Err(Error::Shape("gradient sets differ in length".into()));
        }
        Ok(Gradients(tensors))
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `p − lr·g`.
pub fn sgd_update(p: &Tensor, g: &Tensor, lr: f64) -> Result<Tensor> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
    }
    let data: Vec<f64> = p.data().iter().zip(g.data()).map(|(&p, &g)| p - lr * g).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged(format!("non-finite parameter after step with lr {lr}")));
    }
    Ok(Tensor::from_parts(p.shape().to_vec(), data))
}

/// Plain SGD on every parameter of `model`.
pub fn sgd_step<M: Parameters>(model: &mut M, grads: &Gradients, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::arg(format!("learning rate {lr} must be finite and non-negative")));
    }
    let params = model.params_mut();
    if params.len() != grads.0.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.0.len()
        )));
    }
    let updated = params
        .iter()
        .zip(&grads.0)
        .map(|(p, g)| sgd_update(p, g, lr))
        .collect::<Result<Vec<_>>>()?;
    for (p, u) in params.into_iter().zip(updated) {
        *p = u;
    }
    Ok(())
}

/// Uniform parameter average of same-shaped models (FedAvg with equal weights).
pub fn average_models<M: Parameters + Clone>(models: &[M]) -> Result<M> {
    let first = models.first().ok_or_else(|| Error::arg("no models to average"))?;
    let count = first.params().len();
    if models.iter().any(|m| m.params().len() != count) {
        return Err(Error::Shape("models differ in parameter count".into()));
    }
    let averaged = (0..count)
        .map(|i| {
            let parts: Vec<&Tensor> = models.iter().map(|m| m.params()[i]).collect();
            mean_tensors(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = first.clone();
    for (p, a) in out.params_mut().into_iter().zip(averaged) {
        *p = a;
    }
    Ok(out)
}

fn mean_tensors(parts: &[&Tensor]) -> Result<Tensor> {
    let shape = parts[0].shape();
    if parts.iter().any(|t| t.shape() != shape) {
        return Err(Error::Shape("cannot average tensors of different shapes".into()));
    }
    let mut acc = vec![0.0; parts[0].len()];
    for t in parts {
        layers::add_assign(&mut acc, t.data());
    }
    let n = parts.len() as f64;
    Ok(Tensor::from_parts(shape.to_vec(), acc.into_iter().map(|v| v / n).collect()))
}

/// He-uniform draw: U(−√(6/fan_in), √(6/fan_in)).
pub(crate) fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape, data)
}
