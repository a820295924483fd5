//! Datasets: IDX files on disk and a seeded synthetic blob generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// In-memory labelled images, stored normalized in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        [channels, height, width]: [usize; 3],
        num_classes: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} values cannot hold {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            channels,
            height,
            width,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given samples into an `(n, c, h, w)` batch.
    pub fn batch(&self, indices: &[usize]) -> (FloatTensor, Vec<usize>) {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (
            FloatTensor::from_vec(vec![indices.len(), self.channels, self.height, self.width], data),
            labels,
        )
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per = self.channels * self.height * self.width;
        Self {
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }
}

/// Raw bytes of an IDX image file: `(pixels, count, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let header = read_header(bytes, IDX_IMAGES_MAGIC, 4)?;
    let (n, h, w) = (header[0], header[1], header[2]);
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::Dataset(format!(
            "image payload is {} bytes, header promises {n}x{h}x{w}",
            body.len()
        )));
    }
    Ok((body.to_vec(), n, h, w))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let header = read_header(bytes, IDX_LABELS_MAGIC, 2)?;
    let body = &bytes[8..];
    if body.len() != header[0] {
        return Err(Error::Dataset(format!(
            "label payload is {} bytes, header promises {}",
            body.len(),
            header[0]
        )));
    }
    Ok(body.to_vec())
}

fn read_header(bytes: &[u8], magic: u32, words: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 * words {
        return Err(Error::Dataset("truncated IDX header".into()));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(Error::Dataset(format!(
            "bad IDX magic {:#010x}, expected {magic:#010x}",
            word(0)
        )));
    }
    Ok((1..words).map(|i| word(i) as usize).collect())
}

pub fn encode_idx_images(pixels: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pixel normalization: `(byte / 255 - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    /// Statistics of the bundled digits set.
    fn default() -> Self {
        Self {
            mean: 0.305,
            std: 0.323,
        }
    }
}

pub fn load_idx(images: &Path, labels: &Path, norm: Normalization, num_classes: usize) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())));
    let (pixels, n, h, w) = parse_idx_images(&read(images)?)?;
    let raw_labels = parse_idx_labels(&read(labels)?)?;
    if raw_labels.len() != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", raw_labels.len())));
    }
    let data = pixels
        .iter()
        .map(|&b| (b as f32 / 255.0 - norm.mean) / norm.std)
        .collect();
    Dataset::new(
        data,
        raw_labels.into_iter().map(usize::from).collect(),
        [1, h, w],
        num_classes,
    )
}

/// Seeded Gaussian clusters around class prototypes. Each class is an
/// oriented grating with its own angle and period; every sample gets a
/// random phase and i.i.d. Gaussian pixel noise. Classes differ by local
/// texture rather than position, so pooled conv features can tell them apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train: 1024,
            test: 256,
            channels: 1,
            size: 32,
            noise: 0.5,
            seed: 0,
        }
    }
}

pub fn synthetic_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.size < 4 || spec.channels == 0 {
        return Err(Error::Dataset("blob spec needs classes, channels and size >= 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tau = std::f32::consts::TAU;
    let gratings: Vec<(f32, f32)> = (0..spec.classes)
        .map(|c| {
            let angle = std::f32::consts::PI * c as f32 / spec.classes as f32;
            let period = 4.0 + (c % 3) as f32 * 2.0;
            (tau * angle.cos() / period, tau * angle.sin() / period)
        })
        .collect();
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| Error::Dataset(format!("noise: {e}")))?;
    let mut make = |count: usize| {
        let per = spec.channels * spec.size * spec.size;
        let mut images = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % spec.classes;
            let (fy, fx) = gratings[label];
            let phase = rng.gen_range(0.0..tau);
            for _ in 0..spec.channels {
                for y in 0..spec.size {
                    for x in 0..spec.size {
                        let v = (fy * y as f32 + fx * x as f32 + phase).cos();
                        images.push(v + noise.sample(&mut rng));
                    }
                }
            }
            labels.push(label);
        }
        Dataset::new(images, labels, [spec.channels, spec.size, spec.size], spec.classes)
    };
    let train = make(spec.train)?;
    let test = make(spec.test)?;
    Ok((train, test))
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// A directory holding `{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
    Idx {
        dir: PathBuf,
        norm: Normalization,
        classes: usize,
    },
    Synthetic(BlobSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(BlobSpec::default())
    }
}

impl DatasetSpec {
    /// Returns `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Idx { dir, norm, classes } => {
                let train = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                    *norm,
                    *classes,
                )?;
                let test = load_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                    *norm,
                    *classes,
                )?;
                Ok((train, test))
            }
            DatasetSpec::Synthetic(spec) => synthetic_blobs(spec),
        }
    }
}
