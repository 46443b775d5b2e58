//! Fixed-activation baselines: convolution, dense, pooling and batch norm.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::conv_output_size;
use crate::tensor::Tensor;

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
    .expect("sized above")
}

fn check_shape(op: &'static str, tape: &Tape, v: Var, expected: &[usize]) -> Result<()> {
    if tape.shape(v) != expected {
        return Err(Error::Dimension {
            op,
            lhs: tape.shape(v).to_vec(),
            rhs: expected.to_vec(),
        });
    }
    Ok(())
}

/// Ordinary 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, kh, kw]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
            return Err(Error::Config(
                "conv channels, kernel and stride must be positive".into(),
            ));
        }
        let bound = 1.0 / ((in_channels * kernel.0 * kernel.1) as f64).sqrt();
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: uniform(&[out_channels, in_channels, kernel.0, kernel.1], bound, rng),
            bias: uniform(&[out_channels], bound, rng),
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 || input[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects [B, {}, H, W], got {input:?}",
                self.in_channels
            )));
        }
        Ok(vec![
            input[0],
            self.out_channels,
            conv_output_size(input[2], self.kernel.0, self.stride, self.padding)?,
            conv_output_size(input[3], self.kernel.1, self.stride, self.padding)?,
        ])
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let in_shape = tape.shape(x).to_vec();
        let out_shape = self.output_shape(&in_shape)?;
        check_shape("conv weight", tape, params[0], self.weight.shape())?;
        check_shape("conv bias", tape, params[1], self.bias.shape())?;
        let geom = Geom {
            batch: in_shape[0],
            in_c: in_shape[1],
            out_c: out_shape[1],
            h: in_shape[2],
            w: in_shape[3],
            kh: self.kernel.0,
            kw: self.kernel.1,
            stride: self.stride,
            pad: self.padding,
            oh: out_shape[2],
            ow: out_shape[3],
        };
        let xd = tape.value(x).data();
        let wd = tape.value(params[0]).data();
        let bd = tape.value(params[1]).data();
        let plane = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.batch * geom.out_c * plane];
        for b in 0..geom.batch {
            for o in 0..geom.out_c {
                let dst = &mut out[(b * geom.out_c + o) * plane..][..plane];
                dst.fill(bd[o]);
                for c in 0..geom.in_c {
                    for k in 0..geom.kh {
                        for l in 0..geom.kw {
                            let wv = wd[((o * geom.in_c + c) * geom.kh + k) * geom.kw + l];
                            geom.for_each(b, c, k, l, |p, src| dst[p] += wv * xd[src]);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(tape.push(Box::new(ConvOp { geom }), &[x, params[0], params[1]], out))
    }
}

#[derive(Debug, Clone)]
struct Geom {
    batch: usize,
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    /// Calls `f(output_pixel, input_index)` for every in-bounds pixel read
    /// by kernel offset `(k, l)` of channel `c`; padding contributes zero.
    #[inline]
    fn for_each(&self, b: usize, c: usize, k: usize, l: usize, mut f: impl FnMut(usize, usize)) {
        let base = (b * self.in_c + c) * self.h;
        for i in 0..self.oh {
            let r = (i * self.stride + k) as isize - self.pad as isize;
            if r < 0 || r as usize >= self.h {
                continue;
            }
            let row = (base + r as usize) * self.w;
            for j in 0..self.ow {
                let q = (j * self.stride + l) as isize - self.pad as isize;
                if q < 0 || q as usize >= self.w {
                    continue;
                }
                f(i * self.ow + j, row + q as usize);
            }
        }
    }
}

struct ConvOp {
    geom: Geom,
}

impl Op for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geom = &self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; geom.out_c];
        let plane = geom.oh * geom.ow;
        for b in 0..geom.batch {
            for o in 0..geom.out_c {
                let gout = &g[(b * geom.out_c + o) * plane..][..plane];
                gb[o] += gout.iter().sum::<f64>();
                for c in 0..geom.in_c {
                    for k in 0..geom.kh {
                        for l in 0..geom.kw {
                            let wi = ((o * geom.in_c + c) * geom.kh + k) * geom.kw + l;
                            let wv = w[wi];
                            let mut acc = 0.0;
                            geom.for_each(b, c, k, l, |p, src| {
                                acc += gout[p] * x[src];
                                gx[src] += gout[p] * wv;
                            });
                            gw[wi] += acc;
                        }
                    }
                }
            }
        }
        vec![needs[0].then_some(gx), needs[1].then_some(gw), needs[2].then_some(gb)]
    }
}

/// Dense layer `y = x·W + b` with `W` stored `[n_in, n_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::Config("linear sizes must be positive".into()));
        }
        let bound = 1.0 / (n_in as f64).sqrt();
        Ok(Self {
            n_in,
            n_out,
            weight: uniform(&[n_in, n_out], bound, rng),
            bias: uniform(&[n_out], bound, rng),
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 2 || input[1] != self.n_in {
            return Err(Error::Shape(format!(
                "linear expects [B, {}], got {input:?}",
                self.n_in
            )));
        }
        Ok(vec![input[0], self.n_out])
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        self.output_shape(tape.shape(x))?;
        let y = tape.matmul(x, params[0])?;
        tape.add_bias(y, params[1])
    }
}

/// Max pooling over square windows; the gradient goes to the first maximum
/// of each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::Config("pool window and stride must be positive".into()));
        }
        Ok(Self { window, stride })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 {
            return Err(Error::Shape(format!("max pool expects [B, C, H, W], got {input:?}")));
        }
        if self.window > input[2] || self.window > input[3] {
            return Err(Error::Shape(format!(
                "pool window {} larger than input {}x{}",
                self.window, input[2], input[3]
            )));
        }
        Ok(vec![
            input[0],
            input[1],
            (input[2] - self.window) / self.stride + 1,
            (input[3] - self.window) / self.stride + 1,
        ])
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let in_shape = tape.shape(x).to_vec();
        let out_shape = self.output_shape(&in_shape)?;
        let (h, w) = (in_shape[2], in_shape[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let xd = tape.value(x).data();
        let planes = in_shape[0] * in_shape[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * self.stride * w + j * self.stride;
                    for k in 0..self.window {
                        for l in 0..self.window {
                            let idx = base + (i * self.stride + k) * w + j * self.stride + l;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(tape.push(
            Box::new(MaxPoolOp {
                argmax,
                input_len: xd.len(),
            }),
            &[x],
            out,
        ))
    }
}

struct MaxPoolOp {
    argmax: Vec<u32>,
    input_len: usize,
}

impl Op for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; self.input_len];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            gx[src as usize] += gv;
        }
        vec![Some(gx)]
    }
}

/// Per-channel batch normalization of `[B, C, H, W]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("batch norm needs at least one channel".into()));
        }
        Ok(Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 || input[1] != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects [B, {}, H, W], got {input:?}",
                self.channels
            )));
        }
        Ok(input.to_vec())
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    /// Per-channel mean and biased variance of `x`.
    fn batch_stats(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let s = x.shape();
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let n = (b * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..b).flat_map(|bi| &x.data()[(bi * c + ch) * plane..][..plane]);
            mean[ch] = vals.clone().sum::<f64>() / n;
            var[ch] = vals.map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n;
        }
        (mean, var)
    }

    /// Training mode normalizes with batch statistics, evaluation mode with
    /// the running estimates.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var], training: bool) -> Result<Var> {
        let shape = self.output_shape(tape.shape(x))?;
        if training && shape[0] < 2 {
            return Err(Error::Contract(
                "batch norm in training mode needs a batch of at least 2".into(),
            ));
        }
        check_shape("batch norm gamma", tape, params[0], &[self.channels])?;
        check_shape("batch norm beta", tape, params[1], &[self.channels])?;
        let xt = tape.value(x);
        let (mean, var) = if training {
            self.batch_stats(xt)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (gamma, beta) = (tape.value(params[0]).data(), tape.value(params[1]).data());
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let mut xhat = xt.data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (blk, (xh, o)) in xhat.chunks_mut(plane).zip(out.chunks_mut(plane)).enumerate() {
            let ch = blk % c;
            for (h, y) in xh.iter_mut().zip(o.iter_mut()) {
                *h = (*h - mean[ch]) * inv_std[ch];
                *y = gamma[ch] * *h + beta[ch];
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(tape.push(
            Box::new(BatchNormOp {
                xhat,
                inv_std,
                channels: c,
                plane,
                batch_stats: training,
            }),
            &[x, params[0], params[1]],
            out,
        ))
    }

    /// Folds the statistics of a training batch into the running estimates
    /// (unbiased variance).
    pub fn update_running(&mut self, x: &Tensor) -> Result<()> {
        self.output_shape(x.shape())?;
        let (mean, var) = self.batch_stats(x);
        let n = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        for ch in 0..self.channels {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (1.0 - m) * *rm + m * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (1.0 - m) * *rv + m * var[ch] * correction;
        }
        Ok(())
    }
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    plane: usize,
    batch_stats: bool,
}

impl Op for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let gamma = inputs[1].data();
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for (blk, (gs, xs)) in g.chunks(self.plane).zip(self.xhat.chunks(self.plane)).enumerate() {
            let ch = blk % c;
            for (gv, xh) in gs.iter().zip(xs) {
                gbeta[ch] += gv;
                ggamma[ch] += gv * xh;
            }
        }
        let gx = needs[0].then(|| {
            let n = (self.xhat.len() / c) as f64;
            let mut gx = vec![0.0; g.len()];
            for (blk, ((gs, xs), out)) in g
                .chunks(self.plane)
                .zip(self.xhat.chunks(self.plane))
                .zip(gx.chunks_mut(self.plane))
                .enumerate()
            {
                let ch = blk % c;
                let k = gamma[ch] * self.inv_std[ch];
                for ((gv, xh), o) in gs.iter().zip(xs).zip(out.iter_mut()) {
                    *o = if self.batch_stats {
                        k * (gv - gbeta[ch] / n - xh * ggamma[ch] / n)
                    } else {
                        k * gv
                    };
                }
            }
            gx
        });
        vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
    }
}
