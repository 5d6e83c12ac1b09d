use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Direction, SmashedData, Tensor};

use super::layers::{avg_pool2_backward, avg_pool2_forward, dense_backward, dense_forward, relu, relu_backward, softmax_cross_entropy};
use super::{he_uniform, Gradients, Parameters};

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// 2×2 average pool → flatten → dense → ReLU → dense → logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerModel {
    pub hidden: Dense,
    pub output: Dense,
}

impl ServerModel {
    /// Sized for smashed data `[·, channels, h, w]`.
    pub fn new(channels: usize, h: usize, w: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let features = channels * (h / 2) * (w / 2);
        if features == 0 || hidden == 0 || classes == 0 {
            return Err(Error::arg(format!(
                "server sizes must be positive: {features} features, {hidden} hidden, {classes} classes"
            )));
        }
        let mut r = rng::stream(seed, rng::streams::INIT_SERVER);
        Ok(Self {
            hidden: Dense {
                weight: he_uniform(vec![hidden, features], features, &mut r),
                bias: Tensor::zeros(vec![hidden]),
            },
            output: Dense {
                weight: he_uniform(vec![classes, hidden], hidden, &mut r),
                bias: Tensor::zeros(vec![classes]),
            },
        })
    }

    pub fn from_layers(hidden: Dense, output: Dense) -> Result<Self> {
        for d in [&hidden, &output] {
            if d.weight.rank() != 2 || d.bias.shape() != [d.outputs()] {
                return Err(Error::Shape(format!("dense weight {:?}, bias {:?}", d.weight.shape(), d.bias.shape())));
            }
        }
        if output.inputs() != hidden.outputs() {
            return Err(Error::Shape("output layer does not match hidden width".into()));
        }
        Ok(Self { hidden, output })
    }

    pub fn classes(&self) -> usize {
        self.output.outputs()
    }
}

impl Parameters for ServerModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("server.hidden.weight".into(), &self.hidden.weight),
            ("server.hidden.bias".into(), &self.hidden.bias),
            ("server.output.weight".into(), &self.output.weight),
            ("server.output.bias".into(), &self.output.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of the loss with respect to the smashed activations.
    pub grad_s: SmashedData,
    pub grads: Gradients,
    pub logits: Vec<f64>,
}

struct Forward {
    pooled_dims: [usize; 4],
    flat: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(m: &ServerModel, x: &Tensor) -> Result<Forward> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("server expects [B,C,H,W], got {s:?}")));
    }
    let dims = [s[0], s[1], s[2], s[3]];
    let (flat, pooled_dims) = avg_pool2_forward(x.data(), dims)?;
    let features: usize = pooled_dims[1..].iter().product();
    if features != m.hidden.inputs() {
        return Err(Error::Shape(format!(
            "pooled smashed data has {features} features, server expects {}",
            m.hidden.inputs()
        )));
    }
    let mut hidden = dense_forward(&flat, dims[0], m.hidden.weight.data(), m.hidden.bias.data())?;
    relu(&mut hidden);
    let logits = dense_forward(&hidden, dims[0], m.output.weight.data(), m.output.bias.data())?;
    Ok(Forward { pooled_dims, flat, hidden, logits })
}

/// Logits `[B × classes]` for a batch of smashed activations.
pub fn server_logits(m: &ServerModel, x: &Tensor) -> Result<Vec<f64>> {
    Ok(forward(m, x)?.logits)
}

/// Server forward pass, loss, and backward pass down to the smashed data.
pub fn server_forward_backward(m: &ServerModel, s: &SmashedData, labels: &[usize]) -> Result<ServerOutput> {
    if s.direction() != Direction::Activations {
        return Err(Error::arg("server forward needs activation-direction smashed data"));
    }
    let [b, c, h, w] = s.dims();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch {}", labels.len(), b)));
    }
    let f = forward(m, s.tensor())?;
    let (loss, g_logits) = softmax_cross_entropy(&f.logits, m.classes(), labels)?;
    let (mut g_hidden, g_ow, g_ob) = dense_backward(&f.hidden, b, m.output.weight.data(), m.classes(), &g_logits)?;
    relu_backward(&mut g_hidden, &f.hidden);
    let (g_flat, g_hw, g_hb) = dense_backward(&f.flat, b, m.hidden.weight.data(), m.hidden.outputs(), &g_hidden)?;
    debug_assert_eq!(g_flat.len(), f.pooled_dims.iter().product::<usize>());
    let g_s = avg_pool2_backward(&g_flat, [b, c, h, w])?;
    let grads = Gradients(vec![
        Tensor::from_parts(m.hidden.weight.shape().to_vec(), g_hw),
        Tensor::from_parts(m.hidden.bias.shape().to_vec(), g_hb),
        Tensor::from_parts(m.output.weight.shape().to_vec(), g_ow),
        Tensor::from_parts(m.output.bias.shape().to_vec(), g_ob),
    ]);
    let grad_s = SmashedData::new(Tensor::from_parts(vec![b, c, h, w], g_s), s.round(), Direction::Gradients)?;
    Ok(ServerOutput { loss, grad_s, grads, logits: f.logits })
}
