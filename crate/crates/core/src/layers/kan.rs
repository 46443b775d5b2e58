//! Learnable-activation layers.
//!
//! Every kernel element (convolution) or edge (dense) carries its own
//! activation `φ(x) = w1·spline(x) + w2·silu(x)`. A layer owns one
//! [`KnotGrid`] shared by all of its activations, and stores the parameters
//! as flat tensors:
//!
//! * `coeffs`: `[out, in, (kh, kw,) G + k]`
//! * `w1`, `w2`: `[out, in, (kh, kw)]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{silu, silu_derivative, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::conv_output_size;
use crate::spline::{extend_grid_batch, spline_value, KnotGrid, SplineCoeffs};
use crate::tensor::Tensor;

/// One activation `φ(x) = w1·spline(x) + w2·silu(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KanActivation {
    pub w1: f64,
    pub w2: f64,
    pub coeffs: SplineCoeffs,
    pub grid: KnotGrid,
}

impl KanActivation {
    pub fn new(w1: f64, w2: f64, coeffs: SplineCoeffs, grid: KnotGrid) -> Result<Self> {
        coeffs.check(&grid)?;
        Ok(Self { w1, w2, coeffs, grid })
    }

    pub fn spline(&self, x: f64) -> f64 {
        spline_value(&self.coeffs.0, &self.grid, x)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.w1 * self.spline(x) + self.w2 * silu(x)
    }
}

/// Elementwise `φ(x)`.
pub fn phi_forward(act: &KanActivation, x: &Tensor) -> Tensor {
    x.map(|v| act.eval(v))
}

/// Per-element basis data for one input tensor, shared by every activation
/// that reads the element.
struct BasisCache {
    order: usize,
    /// Coefficient index of each local basis entry, clamped into range;
    /// entries that fall outside the grid carry value and derivative 0.
    idx: Vec<u32>,
    val: Vec<f64>,
    der: Vec<f64>,
    silu: Vec<f64>,
    dsilu: Vec<f64>,
}

impl BasisCache {
    /// Builds the cache for `xs`, followed by one extra entry for `tail`
    /// (the value used for padding).
    fn build(grid: &KnotGrid, xs: &[f64], tail: Option<f64>) -> Self {
        let order = grid.degree() + 1;
        let count = grid.basis_count();
        let n = xs.len() + usize::from(tail.is_some());
        let mut cache = Self {
            order,
            idx: vec![0; n * order],
            val: vec![0.0; n * order],
            der: vec![0.0; n * order],
            silu: Vec::with_capacity(n),
            dsilu: Vec::with_capacity(n),
        };
        for (e, &x) in xs.iter().chain(tail.iter()).enumerate() {
            cache.silu.push(silu(x));
            cache.dsilu.push(silu_derivative(x));
            if let Some(local) = grid.local_basis(x) {
                for r in 0..order {
                    let i = (local.first + r as isize).clamp(0, count as isize - 1);
                    cache.idx[e * order + r] = i as u32;
                    cache.val[e * order + r] = local.values[r];
                    cache.der[e * order + r] = local.derivs[r];
                }
            }
        }
        cache
    }

    #[inline]
    fn spline(&self, coeffs: &[f64], e: usize) -> f64 {
        let base = e * self.order;
        let mut s = 0.0;
        for r in 0..self.order {
            s += coeffs[self.idx[base + r] as usize] * self.val[base + r];
        }
        s
    }

    #[inline]
    fn spline_derivative(&self, coeffs: &[f64], e: usize) -> f64 {
        let base = e * self.order;
        let mut s = 0.0;
        for r in 0..self.order {
            s += coeffs[self.idx[base + r] as usize] * self.der[base + r];
        }
        s
    }

    #[inline]
    fn scatter(&self, gcoeffs: &mut [f64], e: usize, scale: f64) {
        let base = e * self.order;
        for r in 0..self.order {
            gcoeffs[self.idx[base + r] as usize] += scale * self.val[base + r];
        }
    }
}

fn scalar_param(tape: &Tape, v: Var, name: &str) -> Result<f64> {
    tape.value(v)
        .item()
        .map_err(|_| Error::Shape(format!("{name} must be a single value")))
}

impl Tape {
    /// Differentiable `w1·spline(x) + w2·silu(x)` applied elementwise; `w1`
    /// and `w2` are one-element tensors, `coeffs` has length `G + k`.
    pub fn phi(&mut self, coeffs: Var, w1: Var, w2: Var, grid: &KnotGrid, x: Var) -> Result<Var> {
        let a = scalar_param(self, w1, "w1")?;
        let b = scalar_param(self, w2, "w2")?;
        let c = self.value(coeffs);
        if c.len() != grid.basis_count() {
            return Err(Error::Contract(format!(
                "{} spline coefficients for a grid with {} basis functions",
                c.len(),
                grid.basis_count()
            )));
        }
        let out = self.value(x).map(|v| a * spline_value(c.data(), grid, v) + b * silu(v));
        Ok(self.push(Box::new(PhiOp { grid: grid.clone() }), &[coeffs, w1, w2, x], out))
    }
}

struct PhiOp {
    grid: KnotGrid,
}

impl Op for PhiOp {
    fn name(&self) -> &'static str {
        "phi"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = inputs[0].data();
        let (a, b) = (inputs[1].data()[0], inputs[2].data()[0]);
        let x = inputs[3].data();
        let cache = BasisCache::build(&self.grid, x, None);
        let mut gc = vec![0.0; c.len()];
        let (mut ga, mut gb) = (0.0, 0.0);
        let mut gx = vec![0.0; x.len()];
        for (e, &gv) in g.iter().enumerate() {
            cache.scatter(&mut gc, e, gv * a);
            ga += gv * cache.spline(c, e);
            gb += gv * cache.silu[e];
            gx[e] = gv * (a * cache.spline_derivative(c, e) + b * cache.dsilu[e]);
        }
        vec![
            needs[0].then_some(gc),
            needs[1].then(|| vec![ga]),
            needs[2].then(|| vec![gb]),
            needs[3].then_some(gx),
        ]
    }
}

/// Reservoir of observed layer inputs used to decide grid extensions.
#[derive(Debug, Clone)]
pub struct InputObserver {
    capacity: usize,
    seen: u64,
    samples: Vec<f64>,
    min: f64,
    max: f64,
    rng: ChaCha8Rng,
}

impl InputObserver {
    pub const DEFAULT_CAPACITY: usize = 10_000;

    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            seen: 0,
            samples: Vec::with_capacity(capacity.min(1024)),
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn observe(&mut self, values: &[f64]) {
        for &v in values {
            if !v.is_finite() {
                continue;
            }
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            self.seen += 1;
            if self.samples.len() < self.capacity {
                self.samples.push(v);
            } else {
                let j = self.rng.random_range(0..self.seen);
                if (j as usize) < self.capacity {
                    self.samples[j as usize] = v;
                }
            }
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Observed `(min, max)`, if anything was seen.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        (self.seen > 0).then_some((self.min, self.max))
    }

    pub fn reset(&mut self) {
        self.seen = 0;
        self.samples.clear();
        self.min = f64::INFINITY;
        self.max = f64::NEG_INFINITY;
    }
}

/// How a grid grows when inputs escape its range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridUpdatePolicy {
    /// Keep `G` and stretch the knots over the new range.
    #[default]
    FixedSize,
    /// Keep the knot spacing: the new grid extends the old knots by whole
    /// intervals, so `G` grows and the old spline is reproduced exactly.
    KeepResolution,
}

impl std::str::FromStr for GridUpdatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_size" => Ok(Self::FixedSize),
            "keep_resolution" => Ok(Self::KeepResolution),
            other => Err(Error::Config(format!(
                "unknown grid update policy `{other}` (fixed_size | keep_resolution)"
            ))),
        }
    }
}

impl std::fmt::Display for GridUpdatePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FixedSize => "fixed_size",
            Self::KeepResolution => "keep_resolution",
        })
    }
}

/// Target grid for observations in `[lo, hi]`, or `None` if they fit.
pub fn extended_range(grid: &KnotGrid, lo: f64, hi: f64, policy: GridUpdatePolicy) -> Option<((f64, f64), usize)> {
    let (old_lo, old_hi) = grid.range();
    if lo >= old_lo && hi <= old_hi {
        return None;
    }
    let r = 1.1 * lo.abs().max(hi.abs());
    let (new_lo, new_hi) = (old_lo.min(-r), old_hi.max(r));
    match policy {
        GridUpdatePolicy::FixedSize => Some(((new_lo, new_hi), grid.grid_size())),
        GridUpdatePolicy::KeepResolution => {
            let h = grid.spacing();
            let left = ((old_lo - new_lo) / h).ceil() as usize;
            let right = ((new_hi - old_hi) / h).ceil() as usize;
            let g = grid.grid_size() + left + right;
            Some(((old_lo - left as f64 * h, old_hi + right as f64 * h), g))
        }
    }
}

/// `4·nb + 1` evenly spaced points over `range`, `nb` basis functions.
///
/// Refits use them over the old range, to pin the learned shape, and over
/// the new one, where the old spline is zero outside its support; the
/// latter keeps every new basis function covered by samples.
fn anchor_points(range: (f64, f64), nb: usize) -> Vec<f64> {
    let n = 4 * nb;
    let (lo, hi) = range;
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Shared state of both learnable-activation layers.
#[derive(Debug, Clone)]
pub struct ActivationBank {
    pub grid: KnotGrid,
    /// `[n_out, slots, G + k]`
    pub coeffs: Tensor,
    /// `[n_out, slots]`
    pub w1: Tensor,
    pub w2: Tensor,
    pub observer: InputObserver,
}

impl ActivationBank {
    fn new(shape: &[usize], grid: KnotGrid, rng: &mut ChaCha8Rng) -> Self {
        let count: usize = shape.iter().product();
        let nb = grid.basis_count();
        let noise = Normal::new(0.0, 0.1 * grid.spacing()).expect("positive spacing");
        let coeffs: Vec<f64> = (0..count * nb).map(|_| noise.sample(rng)).collect();
        let mut cshape = shape.to_vec();
        cshape.push(nb);
        // Each output sums `fan_in` activations; scaling both weights by
        // 1/sqrt(fan_in) keeps the output magnitude independent of width.
        let fan_in: usize = shape[1..].iter().product();
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            grid,
            coeffs: Tensor::new(cshape, coeffs).expect("sized above"),
            w1: Tensor::full(shape, scale),
            w2: Tensor::full(shape, scale),
            observer: InputObserver::new(InputObserver::DEFAULT_CAPACITY, rng.random()),
        }
    }

    pub fn activation_count(&self) -> usize {
        self.w1.len()
    }

    pub fn activation(&self, a: usize) -> KanActivation {
        let nb = self.grid.basis_count();
        KanActivation {
            w1: self.w1.data()[a],
            w2: self.w2.data()[a],
            coeffs: SplineCoeffs(self.coeffs.data()[a * nb..(a + 1) * nb].to_vec()),
            grid: self.grid.clone(),
        }
    }

    /// Overwrites activation `a`; its grid must equal the bank's grid.
    pub fn set_activation(&mut self, a: usize, act: &KanActivation) -> Result<()> {
        if act.grid != self.grid {
            return Err(Error::Contract("activation grid differs from the layer grid".into()));
        }
        act.coeffs.check(&self.grid)?;
        let nb = self.grid.basis_count();
        self.w1.data_mut()[a] = act.w1;
        self.w2.data_mut()[a] = act.w2;
        self.coeffs.data_mut()[a * nb..(a + 1) * nb].copy_from_slice(&act.coeffs.0);
        Ok(())
    }

    pub fn params(&self) -> [&Tensor; 3] {
        [&self.coeffs, &self.w1, &self.w2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.coeffs, &mut self.w1, &mut self.w2]
    }

    /// Extends the grid when recorded inputs left it, refitting every
    /// activation so its shape on the old range is kept. The observer is
    /// cleared afterwards. Returns whether the grid changed.
    pub fn grid_update(&mut self, policy: GridUpdatePolicy) -> Result<bool> {
        let Some((lo, hi)) = self.observer.bounds() else {
            return Ok(false);
        };
        let Some((range, new_g)) = extended_range(&self.grid, lo, hi, policy) else {
            self.observer.reset();
            return Ok(false);
        };
        let mut xs = self.observer.samples().to_vec();
        xs.extend(anchor_points(self.grid.range(), self.grid.basis_count()));
        xs.extend(anchor_points(range, new_g + self.grid.degree()));
        let nb = self.grid.basis_count();
        let rows: Vec<&[f64]> = self.coeffs.data().chunks(nb).collect();
        let (grid, fitted) = extend_grid_batch(&self.grid, &rows, range, new_g, &xs)?;
        let mut shape = self.coeffs.shape().to_vec();
        *shape.last_mut().expect("coeff tensor has a basis axis") = grid.basis_count();
        self.coeffs = Tensor::new(shape, fitted.into_iter().flat_map(|c| c.0).collect())?;
        self.grid = grid;
        self.observer.reset();
        Ok(true)
    }
}

/// Convolution whose kernel elements are learnable activations.
///
/// `out[b, o, i, j] = Σ_c Σ_k Σ_l φ_{o,c,k,l}(in[b, c, i·s + k − p, j·s + l − p])`,
/// with zero padding fed through `φ` like any other pixel.
#[derive(Debug, Clone)]
pub struct KanConv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub bank: ActivationBank,
}

impl KanConv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        grid: KnotGrid,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
            return Err(Error::Config(
                "kan_conv channels, kernel and stride must be positive".into(),
            ));
        }
        let shape = [out_channels, in_channels, kernel.0, kernel.1];
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bank: ActivationBank::new(&shape, grid, rng),
        })
    }

    /// Flat activation index of `φ_{o,c,k,l}`.
    pub fn activation_index(&self, o: usize, c: usize, k: usize, l: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel.0 + k) * self.kernel.1 + l
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 || input[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "kan_conv expects [B, {}, H, W], got {input:?}",
                self.in_channels
            )));
        }
        let oh = conv_output_size(input[2], self.kernel.0, self.stride, self.padding)?;
        let ow = conv_output_size(input[3], self.kernel.1, self.stride, self.padding)?;
        Ok(vec![input[0], self.out_channels, oh, ow])
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let in_shape = tape.shape(x).to_vec();
        let out_shape = self.output_shape(&in_shape)?;
        let geom = ConvGeom::new(&in_shape, &out_shape, self.kernel, self.stride, self.padding);
        let (coeffs, w1, w2) = (params[0], params[1], params[2]);
        check_param_shape(tape, coeffs, self.bank.coeffs.shape())?;
        check_param_shape(tape, w1, self.bank.w1.shape())?;
        check_param_shape(tape, w2, self.bank.w2.shape())?;

        let cache = BasisCache::build(&self.bank.grid, tape.value(x).data(), Some(0.0));
        let out = kan_conv_forward(
            &geom,
            &cache,
            tape.value(coeffs).data(),
            tape.value(w1).data(),
            tape.value(w2).data(),
            self.bank.grid.basis_count(),
        );
        let out = Tensor::new(out_shape, out)?;
        Ok(tape.push(
            Box::new(KanConvOp {
                geom,
                grid: self.bank.grid.clone(),
            }),
            &[x, coeffs, w1, w2],
            out,
        ))
    }

    /// Mean `|φ|` of every activation over the batch and all positions,
    /// shape `[out, in, kh, kw]`.
    pub fn activation_l1(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let in_shape = tape.shape(x).to_vec();
        let out_shape = self.output_shape(&in_shape)?;
        let geom = ConvGeom::new(&in_shape, &out_shape, self.kernel, self.stride, self.padding);
        let usage = geom.slot_usage();
        activation_l1(tape, &self.bank, x, params, usage, Some(0.0))
    }
}

/// Dense layer whose edges are learnable activations:
/// `out[b, j] = Σ_i φ_{j,i}(x[b, i])`.
#[derive(Debug, Clone)]
pub struct KanLinear {
    pub n_in: usize,
    pub n_out: usize,
    pub bank: ActivationBank,
}

impl KanLinear {
    pub fn new(n_in: usize, n_out: usize, grid: KnotGrid, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::Config("kan_linear sizes must be positive".into()));
        }
        Ok(Self {
            n_in,
            n_out,
            bank: ActivationBank::new(&[n_out, n_in], grid, rng),
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 2 || input[1] != self.n_in {
            return Err(Error::Shape(format!(
                "kan_linear expects [B, {}], got {input:?}",
                self.n_in
            )));
        }
        Ok(vec![input[0], self.n_out])
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let out_shape = self.output_shape(tape.shape(x))?;
        let (coeffs, w1, w2) = (params[0], params[1], params[2]);
        check_param_shape(tape, coeffs, self.bank.coeffs.shape())?;
        check_param_shape(tape, w1, self.bank.w1.shape())?;
        check_param_shape(tape, w2, self.bank.w2.shape())?;
        let batch = out_shape[0];
        let nb = self.bank.grid.basis_count();
        let cache = BasisCache::build(&self.bank.grid, tape.value(x).data(), None);
        let (c, a, b) = (tape.value(coeffs).data(), tape.value(w1).data(), tape.value(w2).data());
        let mut out = vec![0.0; batch * self.n_out];
        for bi in 0..batch {
            for j in 0..self.n_out {
                let mut acc = 0.0;
                for i in 0..self.n_in {
                    let act = j * self.n_in + i;
                    let e = bi * self.n_in + i;
                    acc += a[act] * cache.spline(&c[act * nb..(act + 1) * nb], e) + b[act] * cache.silu[e];
                }
                out[bi * self.n_out + j] = acc;
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(tape.push(
            Box::new(KanLinearOp {
                n_in: self.n_in,
                n_out: self.n_out,
                grid: self.bank.grid.clone(),
            }),
            &[x, coeffs, w1, w2],
            out,
        ))
    }

    /// Mean `|φ_{j,i}|` over the batch, shape `[n_out, n_in]`.
    pub fn activation_l1(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        self.output_shape(&shape)?;
        let batch = shape[0];
        let usage = (0..self.n_in)
            .map(|i| (0..batch).map(|b| (b * self.n_in + i) as u32).collect())
            .collect();
        activation_l1(tape, &self.bank, x, params, usage, None)
    }
}

fn check_param_shape(tape: &Tape, v: Var, expected: &[usize]) -> Result<()> {
    if tape.shape(v) != expected {
        return Err(Error::Dimension {
            op: "kan parameter",
            lhs: tape.shape(v).to_vec(),
            rhs: expected.to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ConvGeom {
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

impl ConvGeom {
    fn new(input: &[usize], output: &[usize], kernel: (usize, usize), stride: usize, pad: usize) -> Self {
        Self {
            batch: input[0],
            in_c: input[1],
            out_c: output[1],
            h: input[2],
            w: input[3],
            kh: kernel.0,
            kw: kernel.1,
            stride,
            pad,
            oh: output[2],
            ow: output[3],
        }
    }

    fn input_len(&self) -> usize {
        self.batch * self.in_c * self.h * self.w
    }

    /// Flat input index read at output `(i, j)` by kernel offset `(k, l)`,
    /// or the padding sentinel `input_len()`.
    #[inline]
    fn source(&self, b: usize, c: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
        let r = (i * self.stride + k) as isize - self.pad as isize;
        let q = (j * self.stride + l) as isize - self.pad as isize;
        if r < 0 || q < 0 || r as usize >= self.h || q as usize >= self.w {
            self.input_len()
        } else {
            ((b * self.in_c + c) * self.h + r as usize) * self.w + q as usize
        }
    }

    /// For each slot `(c, k, l)`, every input index it is applied to.
    fn slot_usage(&self) -> Vec<Vec<u32>> {
        let mut usage = Vec::with_capacity(self.in_c * self.kh * self.kw);
        for c in 0..self.in_c {
            for k in 0..self.kh {
                for l in 0..self.kw {
                    let mut v = Vec::with_capacity(self.batch * self.oh * self.ow);
                    for b in 0..self.batch {
                        for i in 0..self.oh {
                            for j in 0..self.ow {
                                v.push(self.source(b, c, i, j, k, l) as u32);
                            }
                        }
                    }
                    usage.push(v);
                }
            }
        }
        usage
    }
}

fn kan_conv_forward(
    geom: &ConvGeom,
    cache: &BasisCache,
    coeffs: &[f64],
    w1: &[f64],
    w2: &[f64],
    nb: usize,
) -> Vec<f64> {
    let plane = geom.oh * geom.ow;
    let mut out = vec![0.0; geom.batch * geom.out_c * plane];
    for b in 0..geom.batch {
        for o in 0..geom.out_c {
            let dst = &mut out[(b * geom.out_c + o) * plane..(b * geom.out_c + o + 1) * plane];
            for c in 0..geom.in_c {
                for k in 0..geom.kh {
                    for l in 0..geom.kw {
                        let act = ((o * geom.in_c + c) * geom.kh + k) * geom.kw + l;
                        let cf = &coeffs[act * nb..(act + 1) * nb];
                        let (a, s) = (w1[act], w2[act]);
                        for i in 0..geom.oh {
                            for j in 0..geom.ow {
                                let e = geom.source(b, c, i, j, k, l);
                                dst[i * geom.ow + j] += a * cache.spline(cf, e) + s * cache.silu[e];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct KanConvOp {
    geom: ConvGeom,
    grid: KnotGrid,
}

impl Op for KanConvOp {
    fn name(&self) -> &'static str {
        "kan_conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geom = &self.geom;
        let nb = self.grid.basis_count();
        let x = inputs[0].data();
        let (coeffs, w1, w2) = (inputs[1].data(), inputs[2].data(), inputs[3].data());
        let cache = BasisCache::build(&self.grid, x, Some(0.0));
        let mut gx = vec![0.0; x.len() + 1];
        let mut gc = vec![0.0; coeffs.len()];
        let mut g1 = vec![0.0; w1.len()];
        let mut g2 = vec![0.0; w2.len()];
        let plane = geom.oh * geom.ow;
        for b in 0..geom.batch {
            for o in 0..geom.out_c {
                let gout = &g[(b * geom.out_c + o) * plane..(b * geom.out_c + o + 1) * plane];
                for c in 0..geom.in_c {
                    for k in 0..geom.kh {
                        for l in 0..geom.kw {
                            let act = ((o * geom.in_c + c) * geom.kh + k) * geom.kw + l;
                            let cf = &coeffs[act * nb..(act + 1) * nb];
                            let gcf = &mut gc[act * nb..(act + 1) * nb];
                            let (a, s) = (w1[act], w2[act]);
                            let (mut ga, mut gs) = (0.0, 0.0);
                            for i in 0..geom.oh {
                                for j in 0..geom.ow {
                                    let gv = gout[i * geom.ow + j];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let e = geom.source(b, c, i, j, k, l);
                                    ga += gv * cache.spline(cf, e);
                                    gs += gv * cache.silu[e];
                                    cache.scatter(gcf, e, gv * a);
                                    gx[e] += gv * (a * cache.spline_derivative(cf, e) + s * cache.dsilu[e]);
                                }
                            }
                            g1[act] += ga;
                            g2[act] += gs;
                        }
                    }
                }
            }
        }
        gx.pop();
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(gc),
            needs[2].then_some(g1),
            needs[3].then_some(g2),
        ]
    }
}

struct KanLinearOp {
    n_in: usize,
    n_out: usize,
    grid: KnotGrid,
}

impl Op for KanLinearOp {
    fn name(&self) -> &'static str {
        "kan_linear"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let nb = self.grid.basis_count();
        let x = inputs[0].data();
        let (coeffs, w1, w2) = (inputs[1].data(), inputs[2].data(), inputs[3].data());
        let cache = BasisCache::build(&self.grid, x, None);
        let batch = x.len() / self.n_in;
        let mut gx = vec![0.0; x.len()];
        let mut gc = vec![0.0; coeffs.len()];
        let mut g1 = vec![0.0; w1.len()];
        let mut g2 = vec![0.0; w2.len()];
        for b in 0..batch {
            for j in 0..self.n_out {
                let gv = g[b * self.n_out + j];
                for i in 0..self.n_in {
                    let act = j * self.n_in + i;
                    let e = b * self.n_in + i;
                    let cf = &coeffs[act * nb..(act + 1) * nb];
                    g1[act] += gv * cache.spline(cf, e);
                    g2[act] += gv * cache.silu[e];
                    cache.scatter(&mut gc[act * nb..(act + 1) * nb], e, gv * w1[act]);
                    gx[e] += gv * (w1[act] * cache.spline_derivative(cf, e) + w2[act] * cache.dsilu[e]);
                }
            }
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(gc),
            needs[2].then_some(g1),
            needs[3].then_some(g2),
        ]
    }
}

/// `mean_e |φ_a(x_e)|` for every activation `a = o·slots + s`, where slot `s`
/// reads the input elements `usage[s]` (index `x.len()` means `pad`).
fn activation_l1(
    tape: &mut Tape,
    bank: &ActivationBank,
    x: Var,
    params: &[Var],
    usage: Vec<Vec<u32>>,
    pad: Option<f64>,
) -> Result<Var> {
    let (coeffs, w1, w2) = (params[0], params[1], params[2]);
    let nb = bank.grid.basis_count();
    let cache = BasisCache::build(&bank.grid, tape.value(x).data(), pad);
    let (c, a, b) = (tape.value(coeffs).data(), tape.value(w1).data(), tape.value(w2).data());
    let slots = usage.len();
    let n_act = a.len();
    let mut out = vec![0.0; n_act];
    for (act, o) in out.iter_mut().enumerate() {
        let uses = &usage[act % slots];
        let cf = &c[act * nb..(act + 1) * nb];
        let total: f64 = uses
            .iter()
            .map(|&e| (a[act] * cache.spline(cf, e as usize) + b[act] * cache.silu[e as usize]).abs())
            .sum();
        *o = total / uses.len().max(1) as f64;
    }
    let out = Tensor::new(bank.w1.shape().to_vec(), out)?;
    Ok(tape.push(
        Box::new(ActivationL1Op {
            grid: bank.grid.clone(),
            usage,
            pad,
        }),
        &[x, coeffs, w1, w2],
        out,
    ))
}

struct ActivationL1Op {
    grid: KnotGrid,
    usage: Vec<Vec<u32>>,
    pad: Option<f64>,
}

impl Op for ActivationL1Op {
    fn name(&self) -> &'static str {
        "activation_l1"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let nb = self.grid.basis_count();
        let x = inputs[0].data();
        let (c, a, b) = (inputs[1].data(), inputs[2].data(), inputs[3].data());
        let cache = BasisCache::build(&self.grid, x, self.pad);
        let slots = self.usage.len();
        let mut gx = vec![0.0; x.len() + 1];
        let mut gc = vec![0.0; c.len()];
        let mut g1 = vec![0.0; a.len()];
        let mut g2 = vec![0.0; b.len()];
        for (act, &gv) in g.iter().enumerate() {
            let uses = &self.usage[act % slots];
            let scale = gv / uses.len().max(1) as f64;
            let cf = &c[act * nb..(act + 1) * nb];
            for &e in uses {
                let e = e as usize;
                let sp = cache.spline(cf, e);
                let phi = a[act] * sp + b[act] * cache.silu[e];
                let sign = if phi > 0.0 {
                    1.0
                } else if phi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let gs = scale * sign;
                if gs == 0.0 {
                    continue;
                }
                g1[act] += gs * sp;
                g2[act] += gs * cache.silu[e];
                cache.scatter(&mut gc[act * nb..(act + 1) * nb], e, gs * a[act]);
                gx[e] += gs * (a[act] * cache.spline_derivative(cf, e) + b[act] * cache.dsilu[e]);
            }
        }
        gx.truncate(x.len());
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(gc),
            needs[2].then_some(g1),
            needs[3].then_some(g2),
        ]
    }
}
