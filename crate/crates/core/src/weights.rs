//! Binary weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "KANC"  u32 version
//! u32 name_len  name bytes (UTF-8)
//! u32 ndim  u32 dims...            per-sample input shape
//! u32 layer_count
//! per layer:
//!   u32 kind
//!   u32 n  u64 ints[n]             architecture integers
//!   u32 n  f64 floats[n]           grid range, batch-norm constants
//!   u32 n  tensors[n]              u32 ndim, u32 dims..., f64 values...
//! ```
//!
//! The file alone is enough to rebuild the model.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{GridSpec, Layer, LayerSpec};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KANC";
const VERSION: u32 = 1;

mod tag {
    pub const KAN_CONV: u32 = 1;
    pub const CONV: u32 = 2;
    pub const KAN_LINEAR: u32 = 3;
    pub const LINEAR: u32 = 4;
    pub const MAX_POOL: u32 = 5;
    pub const BATCH_NORM: u32 = 6;
    pub const RELU: u32 = 7;
    pub const FLATTEN: u32 = 8;
    pub const LOG_SOFTMAX: u32 = 9;
}

struct Record {
    kind: u32,
    ints: Vec<u64>,
    floats: Vec<f64>,
    tensors: Vec<Tensor>,
}

fn record(layer: &Layer) -> Record {
    let u = |v: usize| v as u64;
    let (kind, ints, floats, tensors): (u32, Vec<u64>, Vec<f64>, Vec<Tensor>) = match layer {
        Layer::KanConv(l) => {
            let g = &l.bank.grid;
            (
                tag::KAN_CONV,
                [
                    l.in_channels,
                    l.out_channels,
                    l.kernel.0,
                    l.kernel.1,
                    l.stride,
                    l.padding,
                    g.grid_size(),
                    g.degree(),
                ]
                .map(u)
                .to_vec(),
                vec![g.range_min(), g.range_max()],
                l.bank.params().map(Tensor::clone).to_vec(),
            )
        }
        Layer::Conv(l) => (
            tag::CONV,
            [
                l.in_channels,
                l.out_channels,
                l.kernel.0,
                l.kernel.1,
                l.stride,
                l.padding,
            ]
            .map(u)
            .to_vec(),
            vec![],
            vec![l.weight.clone(), l.bias.clone()],
        ),
        Layer::KanLinear(l) => {
            let g = &l.bank.grid;
            (
                tag::KAN_LINEAR,
                [l.n_in, l.n_out, g.grid_size(), g.degree()].map(u).to_vec(),
                vec![g.range_min(), g.range_max()],
                l.bank.params().map(Tensor::clone).to_vec(),
            )
        }
        Layer::Linear(l) => (
            tag::LINEAR,
            vec![u(l.n_in), u(l.n_out)],
            vec![],
            vec![l.weight.clone(), l.bias.clone()],
        ),
        Layer::MaxPool(p) => (tag::MAX_POOL, vec![u(p.window), u(p.stride)], vec![], vec![]),
        Layer::BatchNorm(b) => (
            tag::BATCH_NORM,
            vec![u(b.channels)],
            vec![b.eps, b.momentum],
            vec![
                b.gamma.clone(),
                b.beta.clone(),
                b.running_mean.clone(),
                b.running_var.clone(),
            ],
        ),
        Layer::Relu => (tag::RELU, vec![], vec![], vec![]),
        Layer::Flatten => (tag::FLATTEN, vec![], vec![], vec![]),
        Layer::LogSoftmax => (tag::LOG_SOFTMAX, vec![], vec![], vec![]),
    };
    Record {
        kind,
        ints,
        floats,
        tensors,
    }
}

/// Serializes the architecture and every stored tensor.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend((v as u32).to_le_bytes());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    put_u32(&mut out, model.name.len());
    out.extend(model.name.as_bytes());
    put_u32(&mut out, model.input_shape.len());
    for &d in &model.input_shape {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, model.layers.len());
    for layer in &model.layers {
        let r = record(layer);
        out.extend(r.kind.to_le_bytes());
        put_u32(&mut out, r.ints.len());
        for v in r.ints {
            out.extend(v.to_le_bytes());
        }
        put_u32(&mut out, r.floats.len());
        for v in r.floats {
            out.extend(v.to_le_bytes());
        }
        put_u32(&mut out, r.tensors.len());
        for t in &r.tensors {
            put_u32(&mut out, t.ndim());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Blob(format!(
                "truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u32(what)? as usize;
        // Every counted item needs at least one byte, so a count beyond the
        // remaining length is corrupt rather than a huge allocation.
        if n > self.bytes.len() - self.pos {
            return Err(Error::Blob(format!(
                "{what} count {n} at byte {} exceeds the file",
                self.pos - 4
            )));
        }
        Ok(n)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.len("tensor rank")?;
        let shape = (0..ndim)
            .map(|_| self.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| Error::Blob(format!("tensor {shape:?} exceeds the file")))?;
        let data = (0..n).map(|_| self.f64("tensor values")).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
}

fn read_record(r: &mut Reader) -> Result<Record> {
    let kind = r.u32("layer kind")?;
    let n = r.len("integer")?;
    let ints = (0..n).map(|_| r.u64("integers")).collect::<Result<_>>()?;
    let n = r.len("float")?;
    let floats = (0..n).map(|_| r.f64("floats")).collect::<Result<_>>()?;
    let n = r.len("tensor")?;
    let tensors = (0..n).map(|_| r.tensor()).collect::<Result<_>>()?;
    Ok(Record {
        kind,
        ints,
        floats,
        tensors,
    })
}

fn expect_counts(r: &Record, ints: usize, floats: usize, tensors: usize) -> Result<()> {
    if r.ints.len() != ints || r.floats.len() != floats || r.tensors.len() != tensors {
        return Err(Error::Blob(format!(
            "layer kind {} has {}/{}/{} ints/floats/tensors, expected {ints}/{floats}/{tensors}",
            r.kind,
            r.ints.len(),
            r.floats.len(),
            r.tensors.len()
        )));
    }
    Ok(())
}

fn replace(slot: &mut Tensor, value: Tensor, what: &str) -> Result<()> {
    if slot.shape() != value.shape() {
        return Err(Error::Blob(format!(
            "{what} has shape {:?}, architecture needs {:?}",
            value.shape(),
            slot.shape()
        )));
    }
    *slot = value;
    Ok(())
}

fn layer_from(r: Record) -> Result<Layer> {
    let i = |k: usize| r.ints[k] as usize;
    let spec = match r.kind {
        tag::KAN_CONV => {
            expect_counts(&r, 8, 2, 3)?;
            LayerSpec::KanConv {
                in_channels: i(0),
                out_channels: i(1),
                kernel: (i(2), i(3)),
                stride: i(4),
                padding: i(5),
                grid: GridSpec {
                    grid_size: i(6),
                    degree: i(7),
                    range: (r.floats[0], r.floats[1]),
                },
            }
        }
        tag::CONV => {
            expect_counts(&r, 6, 0, 2)?;
            LayerSpec::Conv {
                in_channels: i(0),
                out_channels: i(1),
                kernel: (i(2), i(3)),
                stride: i(4),
                padding: i(5),
            }
        }
        tag::KAN_LINEAR => {
            expect_counts(&r, 4, 2, 3)?;
            LayerSpec::KanLinear {
                n_in: i(0),
                n_out: i(1),
                grid: GridSpec {
                    grid_size: i(2),
                    degree: i(3),
                    range: (r.floats[0], r.floats[1]),
                },
            }
        }
        tag::LINEAR => {
            expect_counts(&r, 2, 0, 2)?;
            LayerSpec::Linear {
                n_in: i(0),
                n_out: i(1),
            }
        }
        tag::MAX_POOL => {
            expect_counts(&r, 2, 0, 0)?;
            LayerSpec::MaxPool {
                window: i(0),
                stride: i(1),
            }
        }
        tag::BATCH_NORM => {
            expect_counts(&r, 1, 2, 4)?;
            LayerSpec::BatchNorm { channels: i(0) }
        }
        tag::RELU => LayerSpec::Relu,
        tag::FLATTEN => LayerSpec::Flatten,
        tag::LOG_SOFTMAX => LayerSpec::LogSoftmax,
        other => return Err(Error::Blob(format!("unknown layer kind {other}"))),
    };
    // Initialization is overwritten below, so any seed will do.
    let mut layer = spec
        .build(&mut rand::SeedableRng::seed_from_u64(0))
        .map_err(|e| Error::Blob(format!("invalid layer record: {e}")))?;
    let mut tensors = r.tensors.into_iter();
    match &mut layer {
        Layer::KanConv(_) | Layer::KanLinear(_) => {
            let bank = layer.bank_mut().expect("kan layer");
            for (slot, name) in bank.params_mut().into_iter().zip(["coeffs", "w1", "w2"]) {
                replace(slot, tensors.next().expect("counted"), name)?;
            }
        }
        Layer::BatchNorm(b) => {
            b.eps = r.floats[0];
            b.momentum = r.floats[1];
            for (slot, name) in [&mut b.gamma, &mut b.beta, &mut b.running_mean, &mut b.running_var]
                .into_iter()
                .zip(["gamma", "beta", "running mean", "running var"])
            {
                replace(slot, tensors.next().expect("counted"), name)?;
            }
        }
        other => {
            for (slot, t) in other.params_mut().into_iter().zip(tensors) {
                replace(slot, t, "weights")?;
            }
        }
    }
    Ok(layer)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Blob("not a weights file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Blob(format!("unsupported version {version}")));
    }
    let n = r.len("name")?;
    let name =
        String::from_utf8(r.take(n, "name")?.to_vec()).map_err(|_| Error::Blob("model name is not UTF-8".into()))?;
    let ndim = r.len("input rank")?;
    let input_shape = (0..ndim)
        .map(|_| r.u32("input shape").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = r.len("layer")?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        layers.push(layer_from(read_record(&mut r)?)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Blob(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    Model::from_layers(name, &input_shape, layers)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> Model {
        let specs = [
            LayerSpec::KanConv {
                in_channels: 1,
                out_channels: 2,
                kernel: (3, 3),
                stride: 1,
                padding: 1,
                grid: GridSpec {
                    grid_size: 7,
                    degree: 2,
                    range: (-1.5, 2.0),
                },
            },
            LayerSpec::BatchNorm { channels: 2 },
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: (2, 2),
                stride: 1,
                padding: 0,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::KanLinear {
                n_in: 12,
                n_out: 4,
                grid: GridSpec::default(),
            },
            LayerSpec::Linear { n_in: 4, n_out: 3 },
            LayerSpec::LogSoftmax,
        ];
        Model::from_specs("sample", &[1, 6, 6], &specs, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut m = sample_model();
        if let Layer::BatchNorm(b) = &mut m.layers[1] {
            b.running_mean.data_mut()[1] = 0.125;
        }
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.name, "sample");
        assert_eq!(back.specs(), m.specs());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.data(), b.data());
        }
        if let (Layer::BatchNorm(a), Layer::BatchNorm(b)) = (&m.layers[1], &back.layers[1]) {
            assert_eq!(a.running_mean, b.running_mean);
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&sample_model());
        assert!(matches!(from_bytes(b"NOPE\x01\0\0\0"), Err(Error::Blob(_))));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Blob(_))), "{cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert!(from_bytes(&wrong_version).is_err());
    }
}
