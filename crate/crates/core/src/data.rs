//! IDX image/label files, normalization, splitting and subsetting.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Environment variable naming the directory with the IDX files.
pub const DATA_DIR_ENV: &str = "KANCONV_DATA_DIR";

/// Labelled images, `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Data(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!("label {l} at index {i} outside [0, {classes})")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("sized above"), labels)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn parse_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Reads a whole file, inflating it if it starts with the gzip signature.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| parse_err(path, 0, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parsed IDX header: dimensions and payload offset.
fn idx_header(bytes: &[u8], path: &Path, magic: u32, ndim: usize) -> Result<Vec<usize>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| parse_err(path, (i * 4) as u64, "truncated header"))
    };
    let found = word(0)?;
    if found != magic {
        return Err(parse_err(path, 0, format!("wrong magic {found}, expected {magic}")));
    }
    let dims: Vec<usize> = (1..=ndim).map(|i| word(i).map(|d| d as usize)).collect::<Result<_>>()?;
    let header = 4 * (ndim + 1);
    let expected: usize = dims.iter().product();
    let payload = bytes.len() - header;
    if payload < expected {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated payload: {payload} of {expected} bytes present"),
        ));
    }
    if payload > expected {
        return Err(parse_err(
            path,
            (header + expected) as u64,
            format!("{} unexpected trailing bytes", payload - expected),
        ));
    }
    Ok(dims)
}

/// Loads an image file (magic 2051) and a label file (magic 2049); pixels
/// are scaled by 1/255 and images get a single channel.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let dims = idx_header(&img, images_path, IMAGE_MAGIC, 3)?;
    let lab = read_maybe_gz(labels_path)?;
    let ldims = idx_header(&lab, labels_path, LABEL_MAGIC, 1)?;
    if ldims[0] != dims[0] {
        return Err(parse_err(
            labels_path,
            4,
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    if let Some(i) = labels.iter().position(|&l| l >= 10) {
        return Err(parse_err(
            labels_path,
            (8 + i) as u64,
            format!("label {} outside [0, 10)", labels[i]),
        ));
    }
    let pixels = img[16..].iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], pixels)?;
    Dataset::new(images, labels, 10)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let file = std::fs::File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
    }
    Ok(())
}

/// Writes an IDX image file; `.gz` paths are compressed.
pub fn write_idx_images(path: &Path, count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Data(format!(
            "{} pixels for {count} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        bytes.extend(v.to_be_bytes());
    }
    bytes.extend(pixels);
    write_maybe_gz(path, &bytes)
}

/// Writes an IDX label file; `.gz` paths are compressed.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    for v in [LABEL_MAGIC, labels.len() as u32] {
        bytes.extend(v.to_be_bytes());
    }
    bytes.extend(labels);
    write_maybe_gz(path, &bytes)
}

/// Which half of the standard distribution to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("{stem}[.gz] not found in {}", dir.display())))
}

/// Loads `train-*` or `t10k-*` IDX files (optionally gzipped) from `dir`.
pub fn load_standard(dir: &Path, part: Part) -> Result<Dataset> {
    let prefix = match part {
        Part::Train => "train",
        Part::Test => "t10k",
    };
    load_idx(
        &find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?,
        &find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?,
    )
}

/// Mean and population standard deviation of every pixel.
pub fn pixel_stats(ds: &Dataset) -> (f64, f64) {
    let data = ds.images.data();
    let n = data.len().max(1) as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `pixel ← (pixel − mean) / std`.
pub fn normalize_standardize(ds: &Dataset, mean: f64, std: f64) -> Result<Dataset> {
    if std <= 0.0 || !std.is_finite() {
        return Err(Error::Data(format!("cannot standardize with standard deviation {std}")));
    }
    Ok(Dataset {
        images: ds.images.map(|p| (p - mean) / std),
        labels: ds.labels.clone(),
        classes: ds.classes,
    })
}

/// Train/validation split settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            valid_fraction: 1.0 / 6.0,
            seed: 0,
        }
    }
}

/// Index partition `(train, valid)` of `0..n`.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.valid_fraction > 0.0 && spec.valid_fraction < 1.0) {
        return Err(Error::Config(format!(
            "valid fraction {} outside (0, 1)",
            spec.valid_fraction
        )));
    }
    let n_valid = (n as f64 * spec.valid_fraction).round() as usize;
    if n_valid == 0 || n_valid == n {
        return Err(Error::Config(format!(
            "valid fraction {} of {n} examples leaves an empty split",
            spec.valid_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let valid = idx.split_off(n - n_valid);
    Ok((idx, valid))
}

pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, valid) = split_indices(ds.len(), spec)?;
    Ok((ds.select(&train), ds.select(&valid)))
}

/// Concatenates two datasets with the same sample shape.
pub fn recombine(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.sample_shape() != b.sample_shape() || a.classes != b.classes {
        return Err(Error::Data(format!(
            "cannot join samples {:?} with {:?}",
            a.sample_shape(),
            b.sample_shape()
        )));
    }
    let mut data = a.images.data().to_vec();
    data.extend_from_slice(b.images.data());
    let mut shape = a.images.shape().to_vec();
    shape[0] += b.len();
    let mut labels = a.labels.clone();
    labels.extend(&b.labels);
    Dataset::new(Tensor::new(shape, data)?, labels, a.classes)
}

/// Seeded class-stratified sample of `n` indices: per-class counts differ
/// by at most one wherever the classes have enough examples.
pub fn stratified_indices(labels: &[usize], classes: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > labels.len() {
        return Err(Error::Config(format!("subset of {n} from {} examples", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    // Hand out one example per class per round, classes in random order
    // within a round, until `n` are taken.
    let mut taken = vec![0usize; classes];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut order: Vec<usize> = (0..classes).filter(|&c| taken[c] < by_class[c].len()).collect();
        order.shuffle(&mut rng);
        for c in order {
            if out.len() == n {
                break;
            }
            out.push(by_class[c][taken[c]]);
            taken[c] += 1;
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    Ok(ds.select(&stratified_indices(&ds.labels, ds.classes, n, seed)?))
}
