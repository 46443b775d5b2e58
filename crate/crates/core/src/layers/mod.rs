//! Network layers and their shape rules.

mod classic;
mod kan;

pub use classic::{BatchNorm2d, Conv2d, Linear, MaxPool2d};
pub use kan::{
    extended_range, phi_forward, ActivationBank, GridUpdatePolicy, InputObserver, KanActivation, KanConv2d, KanLinear,
};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::spline::KnotGrid;
use crate::tensor::Tensor;

/// Spatial output size of a convolution: `⌊(n + 2p − k) / s⌋ + 1`.
pub fn conv_output_size(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let padded = n + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input {n} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Whether a forward pass is part of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Knot grid settings of a learnable-activation layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub grid_size: usize,
    pub degree: usize,
    pub range: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            grid_size: 10,
            degree: 3,
            range: (-1.0, 1.0),
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<KnotGrid> {
        KnotGrid::uniform(self.range.0, self.range.1, self.grid_size, self.degree)
    }
}

/// Architecture description of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    KanConv {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        grid: GridSpec,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    KanLinear {
        n_in: usize,
        n_out: usize,
        grid: GridSpec,
    },
    Linear {
        n_in: usize,
        n_out: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Flatten,
    LogSoftmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::KanConv { .. } => "kan_conv",
            Self::Conv { .. } => "conv",
            Self::KanLinear { .. } => "kan_linear",
            Self::Linear { .. } => "linear",
            Self::MaxPool { .. } => "maxpool",
            Self::BatchNorm { .. } => "batchnorm",
            Self::Relu => "relu",
            Self::Flatten => "flatten",
            Self::LogSoftmax => "log_softmax",
        }
    }

    pub fn build(&self, rng: &mut ChaCha8Rng) -> Result<Layer> {
        Ok(match *self {
            Self::KanConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                grid,
            } => Layer::KanConv(KanConv2d::new(
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                grid.build()?,
                rng,
            )?),
            Self::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv(Conv2d::new(in_channels, out_channels, kernel, stride, padding, rng)?),
            Self::KanLinear { n_in, n_out, grid } => Layer::KanLinear(KanLinear::new(n_in, n_out, grid.build()?, rng)?),
            Self::Linear { n_in, n_out } => Layer::Linear(Linear::new(n_in, n_out, rng)?),
            Self::MaxPool { window, stride } => Layer::MaxPool(MaxPool2d::new(window, stride)?),
            Self::BatchNorm { channels } => Layer::BatchNorm(BatchNorm2d::new(channels)?),
            Self::Relu => Layer::Relu,
            Self::Flatten => Layer::Flatten,
            Self::LogSoftmax => Layer::LogSoftmax,
        })
    }
}

/// A built layer with its parameters.
#[derive(Debug, Clone)]
pub enum Layer {
    KanConv(KanConv2d),
    Conv(Conv2d),
    KanLinear(KanLinear),
    Linear(Linear),
    MaxPool(MaxPool2d),
    BatchNorm(BatchNorm2d),
    Relu,
    Flatten,
    LogSoftmax,
}

impl Layer {
    /// Architecture of this layer, with the current grid of KAN layers.
    pub fn spec(&self) -> LayerSpec {
        let grid_spec = |g: &KnotGrid| GridSpec {
            grid_size: g.grid_size(),
            degree: g.degree(),
            range: g.range(),
        };
        match self {
            Self::KanConv(l) => LayerSpec::KanConv {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
                grid: grid_spec(&l.bank.grid),
            },
            Self::Conv(l) => LayerSpec::Conv {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
            },
            Self::KanLinear(l) => LayerSpec::KanLinear {
                n_in: l.n_in,
                n_out: l.n_out,
                grid: grid_spec(&l.bank.grid),
            },
            Self::Linear(l) => LayerSpec::Linear {
                n_in: l.n_in,
                n_out: l.n_out,
            },
            Self::MaxPool(p) => LayerSpec::MaxPool {
                window: p.window,
                stride: p.stride,
            },
            Self::BatchNorm(b) => LayerSpec::BatchNorm { channels: b.channels },
            Self::Relu => LayerSpec::Relu,
            Self::Flatten => LayerSpec::Flatten,
            Self::LogSoftmax => LayerSpec::LogSoftmax,
        }
    }

    pub fn kind(&self) -> &'static str {
        self.spec().kind()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Self::KanConv(l) => l.output_shape(input),
            Self::Conv(l) => l.output_shape(input),
            Self::KanLinear(l) => l.output_shape(input),
            Self::Linear(l) => l.output_shape(input),
            Self::MaxPool(p) => p.output_shape(input),
            Self::BatchNorm(b) => b.output_shape(input),
            Self::Relu => Ok(input.to_vec()),
            Self::Flatten => match input.split_first() {
                Some((&b, rest)) if !rest.is_empty() => Ok(vec![b, rest.iter().product()]),
                _ => Err(Error::Shape(format!("cannot flatten shape {input:?}"))),
            },
            Self::LogSoftmax => {
                if input.len() == 2 {
                    Ok(input.to_vec())
                } else {
                    Err(Error::Shape(format!("log_softmax expects [B, classes], got {input:?}")))
                }
            }
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Self::KanConv(l) => l.bank.params().to_vec(),
            Self::KanLinear(l) => l.bank.params().to_vec(),
            Self::Conv(l) => l.params().to_vec(),
            Self::Linear(l) => l.params().to_vec(),
            Self::BatchNorm(b) => b.params().to_vec(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::KanConv(l) => l.bank.params_mut().into_iter().collect(),
            Self::KanLinear(l) => l.bank.params_mut().into_iter().collect(),
            Self::Conv(l) => l.params_mut().into_iter().collect(),
            Self::Linear(l) => l.params_mut().into_iter().collect(),
            Self::BatchNorm(b) => b.params_mut().into_iter().collect(),
            _ => Vec::new(),
        }
    }

    pub fn bank(&self) -> Option<&ActivationBank> {
        match self {
            Self::KanConv(l) => Some(&l.bank),
            Self::KanLinear(l) => Some(&l.bank),
            _ => None,
        }
    }

    pub fn bank_mut(&mut self) -> Option<&mut ActivationBank> {
        match self {
            Self::KanConv(l) => Some(&mut l.bank),
            Self::KanLinear(l) => Some(&mut l.bank),
            _ => None,
        }
    }

    /// Forward pass with parameters already on the tape. Side effects of
    /// training (input observation, running statistics) happen in
    /// [`Layer::observe`].
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var], mode: Mode) -> Result<Var> {
        match self {
            Self::KanConv(l) => l.forward(tape, x, params),
            Self::KanLinear(l) => l.forward(tape, x, params),
            Self::Conv(l) => l.forward(tape, x, params),
            Self::Linear(l) => l.forward(tape, x, params),
            Self::MaxPool(p) => p.forward(tape, x),
            Self::BatchNorm(b) => b.forward(tape, x, params, mode == Mode::Train),
            Self::Relu => Ok(tape.relu(x)),
            Self::Flatten => {
                let shape = self.output_shape(tape.shape(x))?;
                tape.reshape(x, shape)
            }
            Self::LogSoftmax => tape.log_softmax(x),
        }
    }

    /// Records a training-time input.
    pub fn observe(&mut self, input: &Tensor) -> Result<()> {
        match self {
            Self::KanConv(l) => l.bank.observer.observe(input.data()),
            Self::KanLinear(l) => l.bank.observer.observe(input.data()),
            Self::BatchNorm(b) => b.update_running(input)?,
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_arithmetic() {
        assert_eq!(conv_output_size(28, 3, 1, 0).unwrap(), 26);
        assert_eq!(conv_output_size(28, 3, 2, 1).unwrap(), 14);
        assert_eq!(conv_output_size(5, 5, 1, 0).unwrap(), 1);
        assert!(conv_output_size(2, 3, 1, 0).is_err());
        assert!(conv_output_size(2, 3, 0, 1).is_err());
    }

    #[test]
    fn flatten_shape() {
        assert_eq!(Layer::Flatten.output_shape(&[4, 5, 5, 5]).unwrap(), vec![4, 125]);
        assert!(Layer::Flatten.output_shape(&[4]).is_err());
    }
}
