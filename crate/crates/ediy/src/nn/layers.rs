//! Declarative layer stacks: description, parameter init, and graph forward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, VarId};
use crate::nn::params::ParamSet;
use crate::nn::tensor::{Scalar, Tensor};

/// One layer of an acyclic stack. Parameterized layers carry the name under
/// which their tensors live in a [`ParamSet`] (joined with the stack prefix).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Layer {
    Conv2d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        features: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        name: String,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
}

impl Layer {
    fn describe(&self) -> String {
        match self {
            Layer::Conv2d { name, .. } => format!("conv2d {name}"),
            Layer::BatchNorm { name, .. } => format!("batch_norm {name}"),
            Layer::Relu => "relu".into(),
            Layer::MaxPool2d { .. } => "max_pool2d".into(),
            Layer::GlobalAvgPool => "global_avg_pool".into(),
            Layer::Linear { name, .. } => format!("linear {name}"),
        }
    }
}

/// How a layer stack's tensors enter a graph: trainable stacks register
/// named parameter leaves (gradients collected under those names); frozen
/// stacks enter values as stop-gradient constants.
pub enum Binding<'a, T> {
    Trainable(&'a ParamSet<T>),
    Frozen(&'a ParamSet<T>),
}

impl<'a, T: Scalar> Binding<'a, T> {
    pub fn params(&self) -> &'a ParamSet<T> {
        match self {
            Binding::Trainable(p) | Binding::Frozen(p) => p,
        }
    }

    fn leaf(&self, g: &mut Graph<T>, name: &str) -> Result<VarId> {
        let value = self.params().get(name)?.clone();
        Ok(match self {
            Binding::Trainable(_) => g.param(name, value),
            Binding::Frozen(_) => g.constant(value),
        })
    }
}

/// Runs `input` through the stack, reading tensors from the binding under
/// `prefix`. Training mode drives batch normalization from batch statistics
/// and queues running-stat updates on the graph.
pub fn forward_layers<T: Scalar>(
    g: &mut Graph<T>,
    binding: &Binding<T>,
    input: VarId,
    layers: &[Layer],
    prefix: &str,
    training: bool,
) -> Result<VarId> {
    let mut x = input;
    for (i, layer) in layers.iter().enumerate() {
        let ctx = |e: Error| match e {
            Error::Dimension { reason, .. } => Error::dim(
                format!("layer {} ({})", i, layer.describe()),
                reason,
            ),
            other => other,
        };
        x = match layer {
            Layer::Conv2d {
                name,
                stride,
                pad,
                bias,
                ..
            } => {
                let w = binding.leaf(g, &format!("{prefix}{name}.weight"))?;
                let b = if *bias {
                    Some(binding.leaf(g, &format!("{prefix}{name}.bias"))?)
                } else {
                    None
                };
                g.conv2d(x, w, b, *stride, *pad).map_err(ctx)?
            }
            Layer::BatchNorm {
                name,
                eps,
                momentum,
                ..
            } => {
                let full = format!("{prefix}{name}");
                let gamma = binding.leaf(g, &format!("{full}.gamma"))?;
                let beta = binding.leaf(g, &format!("{full}.beta"))?;
                let rm = binding.params().get(&format!("{full}.running_mean"))?.clone();
                let rv = binding.params().get(&format!("{full}.running_var"))?.clone();
                g.batch_norm(x, gamma, beta, &rm, &rv, *eps, *momentum, training, &full)
                    .map_err(ctx)?
            }
            Layer::Relu => g.relu(x),
            Layer::MaxPool2d { kernel, stride } => {
                g.max_pool2d(x, *kernel, *stride).map_err(ctx)?
            }
            Layer::GlobalAvgPool => g.global_avg_pool(x).map_err(ctx)?,
            Layer::Linear { name, bias, .. } => {
                let w = binding.leaf(g, &format!("{prefix}{name}.weight"))?;
                let b = if *bias {
                    Some(binding.leaf(g, &format!("{prefix}{name}.bias"))?)
                } else {
                    None
                };
                g.linear(x, w, b).map_err(ctx)?
            }
        };
    }
    Ok(x)
}

/// Kaiming-uniform fan-in init for conv/linear weights, zero biases, and
/// identity-at-init batch norm (gamma 1, beta 0, running mean 0 / var 1).
pub fn init_layer_params<T: Scalar>(
    params: &mut ParamSet<T>,
    layers: &[Layer],
    prefix: &str,
    rng: &mut ChaCha8Rng,
) {
    let kaiming = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<T> = (0..len)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    };
    for layer in layers {
        match layer {
            Layer::Conv2d {
                name,
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_ch * kernel * kernel;
                params.insert(
                    format!("{prefix}{name}.weight"),
                    kaiming(&[*out_ch, *in_ch, *kernel, *kernel], fan_in, rng),
                );
                if *bias {
                    params.insert(format!("{prefix}{name}.bias"), Tensor::zeros(&[*out_ch]));
                }
            }
            Layer::BatchNorm { name, features, .. } => {
                let full = format!("{prefix}{name}");
                params.insert(format!("{full}.gamma"), Tensor::filled(&[*features], T::one()));
                params.insert(format!("{full}.beta"), Tensor::zeros(&[*features]));
                params.insert(format!("{full}.running_mean"), Tensor::zeros(&[*features]));
                params.insert(
                    format!("{full}.running_var"),
                    Tensor::filled(&[*features], T::one()),
                );
            }
            Layer::Linear {
                name,
                in_dim,
                out_dim,
                bias,
            } => {
                params.insert(
                    format!("{prefix}{name}.weight"),
                    kaiming(&[*out_dim, *in_dim], *in_dim, rng),
                );
                if *bias {
                    params.insert(format!("{prefix}{name}.bias"), Tensor::zeros(&[*out_dim]));
                }
            }
            Layer::Relu | Layer::MaxPool2d { .. } | Layer::GlobalAvgPool => {}
        }
    }
}

/// Names of batch-norm running statistics in a stack; these are state, not
/// trainable parameters.
pub fn running_stat_names(layers: &[Layer], prefix: &str) -> Vec<String> {
    let mut names = Vec::new();
    for layer in layers {
        if let Layer::BatchNorm { name, .. } = layer {
            names.push(format!("{prefix}{name}.running_mean"));
            names.push(format!("{prefix}{name}.running_var"));
        }
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn empty_stack_is_identity() {
        let params: ParamSet<f64> = ParamSet::new();
        let binding = Binding::Trainable(&params);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = forward_layers(&mut g, &binding, x, &[], "", true).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn init_produces_expected_keys() {
        let layers = vec![
            Layer::Conv2d {
                name: "c".into(),
                in_ch: 3,
                out_ch: 4,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: false,
            },
            Layer::BatchNorm {
                name: "bn".into(),
                features: 4,
                eps: 1e-5,
                momentum: 0.9,
            },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear {
                name: "fc".into(),
                in_dim: 4,
                out_dim: 2,
                bias: true,
            },
        ];
        let mut params: ParamSet<f32> = ParamSet::new();
        init_layer_params(&mut params, &layers, "enc.", &mut rng_from(&[1]));
        let names: Vec<_> = params.names().cloned().collect();
        assert_eq!(
            names,
            vec![
                "enc.bn.beta",
                "enc.bn.gamma",
                "enc.bn.running_mean",
                "enc.bn.running_var",
                "enc.c.weight",
                "enc.fc.bias",
                "enc.fc.weight",
            ]
        );
        assert_eq!(
            running_stat_names(&layers, "enc."),
            vec!["enc.bn.running_mean", "enc.bn.running_var"]
        );
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let layers = vec![Layer::Linear {
            name: "fc".into(),
            in_dim: 4,
            out_dim: 2,
            bias: false,
        }];
        let mut params: ParamSet<f64> = ParamSet::new();
        init_layer_params(&mut params, &layers, "", &mut rng_from(&[2]));
        let binding = Binding::Trainable(&params);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3])); // wrong width
        let err = forward_layers(&mut g, &binding, x, &layers, "", false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("linear fc"), "{msg}");
    }

    #[test]
    fn stack_forward_is_deterministic() {
        let layers = vec![
            Layer::Conv2d {
                name: "c".into(),
                in_ch: 2,
                out_ch: 3,
                kernel: 3,
                stride: 2,
                pad: 1,
                bias: true,
            },
            Layer::BatchNorm {
                name: "bn".into(),
                features: 3,
                eps: 1e-5,
                momentum: 0.9,
            },
            Layer::Relu,
        ];
        let mut params: ParamSet<f32> = ParamSet::new();
        init_layer_params(&mut params, &layers, "", &mut rng_from(&[3]));
        let x = {
            let mut rng = rng_from(&[4]);
            let data = (0..2 * 2 * 8 * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Tensor::new(vec![2, 2, 8, 8], data).unwrap()
        };
        let run = || {
            let binding = Binding::Trainable(&params);
            let mut g = Graph::new();
            let xin = g.input(x.clone());
            let y = forward_layers(&mut g, &binding, xin, &layers, "", true).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
