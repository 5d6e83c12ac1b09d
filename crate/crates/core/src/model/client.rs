use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Direction, SmashedData, Tensor};

use super::layers::{conv_backward, conv_forward, relu, relu_backward};
use super::{he_uniform, Gradients, Parameters};

/// Square-kernel convolution, stride 1, "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Stack of conv → ReLU stages. Output of the last stage is the smashed data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub layers: Vec<Conv2d>,
}

impl ClientModel {
    /// `channels = [c_in, c_1, …, c_L]`; He-uniform weights, zero biases.
    pub fn new(channels: &[usize], kernel: usize, seed: u64) -> Result<Self> {
        if channels.len() < 2 || channels.contains(&0) {
            return Err(Error::arg(format!("client channel widths {channels:?} need ≥ 2 positive entries")));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::arg(format!("kernel size {kernel} must be odd")));
        }
        let mut r = rng::stream(seed, rng::streams::INIT_CLIENT);
        let layers = channels
            .windows(2)
            .map(|io| Conv2d {
                weight: he_uniform(vec![io[1], io[0], kernel, kernel], io[0] * kernel * kernel, &mut r),
                bias: Tensor::zeros(vec![io[1]]),
            })
            .collect();
        Ok(Self { layers })
    }

    /// Rebuilds a model from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Conv2d>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("client model needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 || l.bias.shape() != [s[0]] {
                return Err(Error::Shape(format!("layer {i}: weight {:?}, bias {:?}", s, l.bias.shape())));
            }
            if i > 0 && layers[i - 1].out_channels() != s[1] {
                return Err(Error::Shape(format!("layer {i} expects {} inputs", s[1])));
            }
        }
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").out_channels()
    }
}

impl Parameters for ClientModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("client.conv{i}.weight"), &l.weight), (format!("client.conv{i}.bias"), &l.bias)])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Activations saved by the forward pass for the backward pass.
#[derive(Debug, Clone, Serialize)]
pub struct ClientTape {
    dims: [usize; 4],
    /// Input, then the post-ReLU output of every layer.
    activations: Vec<Vec<f64>>,
}

pub fn client_forward(m: &ClientModel, batch: &Tensor) -> Result<SmashedData> {
    Ok(client_forward_tape(m, batch)?.0)
}

/// Forward pass that also records the activations needed for backward.
/// The result has round 0; callers tag it with [`SmashedData::with_round`].
pub fn client_forward_tape(m: &ClientModel, batch: &Tensor) -> Result<(SmashedData, ClientTape)> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != m.in_channels() {
        return Err(Error::Shape(format!(
            "client expects [B, {}, H, W], got {:?}",
            m.in_channels(),
            s
        )));
    }
    let dims = [s[0], s[1], s[2], s[3]];
    let mut activations = vec![batch.data().to_vec()];
    let mut d = dims;
    for l in &m.layers {
        let mut y = conv_forward(activations.last().unwrap(), d, l.weight.data(), l.bias.data(), l.kernel())?;
        relu(&mut y);
        d[1] = l.out_channels();
        activations.push(y);
    }
    let out = Tensor::from_parts(d.to_vec(), activations.last().unwrap().clone());
    Ok((SmashedData::new(out, 0, Direction::Activations)?, ClientTape { dims, activations }))
}

/// Gradients of every client parameter, recomputing the forward pass.
pub fn client_backward(m: &ClientModel, batch: &Tensor, grad_s: &SmashedData) -> Result<Gradients> {
    let (_, tape) = client_forward_tape(m, batch)?;
    client_backward_tape(m, &tape, grad_s)
}

pub fn client_backward_tape(m: &ClientModel, tape: &ClientTape, grad_s: &SmashedData) -> Result<Gradients> {
    if grad_s.direction() != Direction::Gradients {
        return Err(Error::arg("client backward needs gradient-direction smashed data"));
    }
    if tape.activations.len() != m.layers.len() + 1 {
        return Err(Error::State("tape was recorded for a different model".into()));
    }
    let [b, _, h, w] = tape.dims;
    let expected = [b, m.out_channels(), h, w];
    if grad_s.dims() != expected {
        return Err(Error::Shape(format!("grad_s {:?}, expected {:?}", grad_s.dims(), expected)));
    }
    let mut grads = vec![None; 2 * m.layers.len()];
    let mut g = grad_s.tensor().data().to_vec();
    for (i, l) in m.layers.iter().enumerate().rev() {
        relu_backward(&mut g, &tape.activations[i + 1]);
        let d = [b, l.in_channels(), h, w];
        let (gx, gw, gb) = conv_backward(&tape.activations[i], d, l.weight.data(), l.out_channels(), l.kernel(), &g, i > 0)?;
        grads[2 * i] = Some(Tensor::from_parts(l.weight.shape().to_vec(), gw));
        grads[2 * i + 1] = Some(Tensor::from_parts(l.bias.shape().to_vec(), gb));
        g = gx;
    }
    Ok(Gradients(grads.into_iter().map(|t| t.expect("filled")).collect()))
}
