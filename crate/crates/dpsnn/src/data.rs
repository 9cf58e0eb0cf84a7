//! Dataset handling: IDX image ingestion (plain or gzip), constant-current
//! input encoding over the time window, batch index streams, and a synthetic
//! separable corpus for fast deterministic tests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::bufread::GzDecoder;
use flate2::write::GzEncoder;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::real::{r, Real};
use crate::tensor::{Shape, Tensor};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("expected image magic 0x{IMAGE_MAGIC:08x}, found 0x{found:08x}")]
    BadImageMagic { found: u32 },
    #[error("expected label magic 0x{LABEL_MAGIC:08x}, found 0x{found:08x}")]
    BadLabelMagic { found: u32 },
    #[error("{field} truncated: need {expected} bytes, have {found}")]
    Truncated {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {value} at index {index} outside classes 0..=9")]
    LabelOutOfRange { index: usize, value: u8 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size {batch} exceeds dataset size {n}")]
    BatchTooLarge { batch: usize, n: usize },
}

/// Images scaled to [0,1] with class labels in 0..=9.
#[derive(Clone, Debug)]
pub struct LabeledImageSet<R: Real> {
    pub images: Vec<Tensor<R>>,
    pub labels: Vec<u8>,
    pub shape: Shape,
}

impl<R: Real> LabeledImageSet<R> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps only the first `n` samples (no-op if `n` exceeds the size).
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

/// Input currents over the time window. Direct encoding repeats one image,
/// which the `Constant` variant stores once; `PerStep` holds arbitrary
/// per-step currents.
#[derive(Clone, Debug)]
pub enum EncodedSample<R: Real> {
    Constant { current: Tensor<R>, time_steps: usize },
    PerStep(Vec<Tensor<R>>),
}

impl<R: Real> EncodedSample<R> {
    pub fn at(&self, t: usize) -> &Tensor<R> {
        match self {
            EncodedSample::Constant { current, time_steps } => {
                assert!(t < *time_steps, "time index {t} out of window");
                current
            }
            EncodedSample::PerStep(steps) => &steps[t],
        }
    }

    pub fn time_steps(&self) -> usize {
        match self {
            EncodedSample::Constant { time_steps, .. } => *time_steps,
            EncodedSample::PerStep(steps) => steps.len(),
        }
    }

    /// True when every step carries the same current.
    pub fn is_constant(&self) -> bool {
        matches!(self, EncodedSample::Constant { .. })
    }

    pub fn shape(&self) -> Shape {
        self.at(0).shape()
    }
}

/// Constant-current (direct) encoding: the image is the input at every step.
pub fn encode_direct<R: Real>(image: &Tensor<R>, time_steps: usize) -> EncodedSample<R> {
    assert!(time_steps >= 1, "need at least one time step");
    EncodedSample::Constant {
        current: image.clone(),
        time_steps,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(reader)
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
    } else {
        reader.read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32, DataError> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or(DataError::Truncated {
            field,
            expected: at + 4,
            found: bytes.len(),
        })?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Parses a big-endian IDX image/label file pair. Pixels are scaled by
/// 1/255; gzip compression is detected by a `.gz` suffix.
pub fn load_idx<R: Real>(
    images_path: &Path,
    labels_path: &Path,
) -> Result<LabeledImageSet<R>, DataError> {
    let img_bytes = read_file(images_path)?;
    let magic = be_u32(&img_bytes, 0, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadImageMagic { found: magic });
    }
    let n = be_u32(&img_bytes, 4, "image header")? as usize;
    let h = be_u32(&img_bytes, 8, "image header")? as usize;
    let w = be_u32(&img_bytes, 12, "image header")? as usize;
    let pixels = img_bytes
        .get(16..16 + n * h * w)
        .ok_or(DataError::Truncated {
            field: "image data",
            expected: 16 + n * h * w,
            found: img_bytes.len(),
        })?;

    let lbl_bytes = read_file(labels_path)?;
    let magic = be_u32(&lbl_bytes, 0, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadLabelMagic { found: magic });
    }
    let n_labels = be_u32(&lbl_bytes, 4, "label header")? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let labels = lbl_bytes
        .get(8..8 + n)
        .ok_or(DataError::Truncated {
            field: "label data",
            expected: 8 + n,
            found: lbl_bytes.len(),
        })?
        .to_vec();
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| v > 9) {
        return Err(DataError::LabelOutOfRange { index, value });
    }

    let shape = Shape::new(1, h, w);
    let scale = 1.0 / 255.0;
    let images = pixels
        .chunks_exact(h * w)
        .map(|chunk| {
            Tensor::from_vec(
                shape,
                chunk.iter().map(|&b| r(b as f64 * scale)).collect(),
            )
        })
        .collect();
    Ok(LabeledImageSet { images, labels, shape })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(writer, flate2::Compression::default());
        enc.write_all(bytes).map_err(io_err)?;
        enc.finish().map_err(io_err)?;
    } else {
        writer.write_all(bytes).map_err(io_err)?;
        writer.flush().map_err(io_err)?;
    }
    Ok(())
}

/// Writes the set back to the IDX pair format; inverse of [`load_idx`] at
/// byte level for k/255-quantized pixel values.
pub fn write_idx<R: Real>(
    set: &LabeledImageSet<R>,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let (h, w) = (set.shape.h, set.shape.w);
    let mut img = Vec::with_capacity(16 + set.len() * h * w);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for image in &set.images {
        img.extend(
            image
                .data()
                .iter()
                .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    write_file(images_path, &img)?;

    let mut lbl = Vec::with_capacity(8 + set.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lbl.extend_from_slice(&set.labels);
    write_file(labels_path, &lbl)
}

/// Train/test halves of an IDX-format dataset directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads the conventional MNIST-style file pair from a directory, accepting
/// either plain or `.gz` files.
pub fn load_split<R: Real>(dir: &Path, split: Split) -> Result<LabeledImageSet<R>, DataError> {
    let (images, labels) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let pick = |name: &str| {
        let plain = dir.join(name);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{name}.gz"))
        }
    };
    load_idx(&pick(images), &pick(labels))
}

/// How sample indices are grouped into optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchMode {
    /// Seeded permutation partitioned into fixed-size batches; the final
    /// partial batch is kept.
    Shuffle,
    /// Each sample joins each batch independently with probability q;
    /// ceil(N/B) batches per epoch.
    Poisson { q: f64 },
}

/// Produces one epoch of batch index lists.
pub fn make_batches(
    n: usize,
    batch_size: usize,
    mode: BatchMode,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>, DataError> {
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    match mode {
        BatchMode::Shuffle => {
            if batch_size > n {
                return Err(DataError::BatchTooLarge { batch: batch_size, n });
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
        }
        BatchMode::Poisson { q } => {
            let batches = n.div_ceil(batch_size);
            Ok((0..batches)
                .map(|_| (0..n).filter(|_| rng.gen::<f64>() < q).collect())
                .collect())
        }
    }
}

/// Noise-free class template: an oriented bar through the image center,
/// one orientation per class. Exposed so tests can verify separability
/// against the generated corpus.
pub fn class_pattern<R: Real>(class: usize) -> Tensor<R> {
    let shape = Shape::new(1, 28, 28);
    let mut img = Tensor::zeros(shape);
    let theta = class as f64 * std::f64::consts::PI / 10.0;
    let (sin, cos) = theta.sin_cos();
    for y in 0..28 {
        for x in 0..28 {
            let dx = x as f64 - 13.5;
            let dy = y as f64 - 13.5;
            // Distance from the line through the center at angle theta.
            let dist = (dx * sin - dy * cos).abs();
            if dist <= 1.8 {
                *img.at_mut(0, y, x) = R::one();
            }
        }
    }
    img
}

/// Deterministic 10-class corpus of oriented bars with seeded pixel noise,
/// quantized to k/255 so IDX round trips are lossless.
pub fn synth_dataset<R: Real>(n_per_class: usize, seed: u64, rng_noise: f64) -> LabeledImageSet<R> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let patterns: Vec<Tensor<f64>> = (0..10).map(class_pattern).collect();
    let shape = Shape::new(1, 28, 28);
    let mut images = Vec::with_capacity(10 * n_per_class);
    let mut labels = Vec::with_capacity(10 * n_per_class);
    for _ in 0..n_per_class {
        for class in 0..10usize {
            let data = patterns[class]
                .data()
                .iter()
                .map(|&p| {
                    let noisy = (p + rng.gen_range(-rng_noise..=rng_noise)).clamp(0.0, 1.0);
                    r((noisy * 255.0).round() / 255.0)
                })
                .collect();
            images.push(Tensor::from_vec(shape, data));
            labels.push(class as u8);
        }
    }
    LabeledImageSet { images, labels, shape }
}
