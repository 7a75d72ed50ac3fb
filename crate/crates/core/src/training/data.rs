use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor4};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` stored as `f32`, `N × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Gathers the listed examples into a batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let d = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(
                self.images[i * d..(i + 1) * d]
                    .iter()
                    .map(|&v| T::lit(v as f64)),
            );
        }
        let x = Tensor4::from_vec(
            [indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("batch dims are consistent");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.item_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
        }
    }

    /// Splits off the last `n` examples.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let keep = self.len() - n;
        let mut tail = self.clone_header();
        tail.images = self.images.split_off(keep * self.item_len());
        tail.labels = self.labels.split_off(keep);
        (self, tail)
    }
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self
            .buf
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err(self.pos, format!("truncated while reading {what}")))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(
                self.buf.len(),
                format!(
                    "truncated {what}: expected {n} bytes from offset {}, file has {}",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Idx {
        path: path.to_path_buf(),
        offset: 0,
        msg: e.to_string(),
    })
}

/// Reads an IDX image file and its label file. Pixels are scaled to `[0, 1]`;
/// labels must be below `classes`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let ibuf = read_file(images)?;
    let mut r = Reader {
        path: images,
        buf: &ibuf,
        pos: 0,
    };
    let magic = r.u32("magic")?;
    if magic != IMAGES_MAGIC {
        return Err(r.err(0, format!("bad image magic {magic:#010x}")));
    }
    let n = r.u32("item count")? as usize;
    let h = r.u32("row count")? as usize;
    let w = r.u32("column count")? as usize;
    let pixels: Vec<f32> = r
        .bytes(n * h * w, "pixel data")?
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();

    let lbuf = read_file(labels)?;
    let mut r = Reader {
        path: labels,
        buf: &lbuf,
        pos: 0,
    };
    let magic = r.u32("magic")?;
    if magic != LABELS_MAGIC {
        return Err(r.err(0, format!("bad label magic {magic:#010x}")));
    }
    let m = r.u32("item count")? as usize;
    if m != n {
        return Err(r.err(4, format!("{m} labels for {n} images")));
    }
    let start = r.pos;
    let raw = r.bytes(n, "label data")?;
    let mut out = Vec::with_capacity(n);
    for (k, &b) in raw.iter().enumerate() {
        if b as usize >= classes {
            return Err(r.err(start + k, format!("label {b} outside {classes} classes")));
        }
        out.push(b as usize);
    }
    Ok(Dataset {
        images: pixels,
        labels: out,
        channels: 1,
        height: h,
        width: w,
        classes,
    })
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path) -> [(PathBuf, PathBuf); 2] {
    [
        (
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        ),
        (
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        ),
    ]
}

/// Train and test sets from an MNIST directory.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [(ti, tl), (vi, vl)] = mnist_paths(dir);
    Ok((load_idx(&ti, &tl, 10)?, load_idx(&vi, &vl, 10)?))
}

/// Gaussian-blob image classes: each class has a random prototype image and
/// examples are the prototype plus pixel noise, clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub test: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            channels: 1,
            height: 16,
            width: 16,
            train: 2048,
            test: 512,
            noise: 0.3,
        }
    }
}

/// Train and test sets drawn from the same class prototypes. Labels cycle
/// through the classes so both sets are balanced.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Config(
            "synthetic dataset needs >= 2 classes and nonzero dims".into(),
        ));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise must be finite and >= 0, got {}",
            spec.noise
        )));
    }
    let d = spec.channels * spec.height * spec.width;
    let mut rng = rng::stream(seed, Stream::Data);
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let protos: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise).expect("finite std");
    let mut make = |n: usize| {
        let mut images = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for k in 0..n {
            let c = k % spec.classes;
            images.extend(
                protos[c]
                    .iter()
                    .map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
            );
            labels.push(c);
        }
        Dataset {
            images,
            labels,
            channels: spec.channels,
            height: spec.height,
            width: spec.width,
            classes: spec.classes,
        }
    };
    let train = make(spec.train);
    let test = make(spec.test);
    Ok((train, test))
}
