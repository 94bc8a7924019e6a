//! Dataset loading: IDX image/label files, CIFAR-10/100 binary batches, a
//! seeded synthetic generator, and per-channel normalization.
//!
//! Pixels are scaled to `[0, 1]` by dividing by 255 at load time; optional
//! mean/std normalization is applied afterwards and driven by configuration.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled image set. `images` is `[N, C, H, W]`; `labels[i] < num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies rows `start..start+count` into a standalone batch tensor.
    pub fn batch(&self, start: usize, count: usize) -> Result<Tensor> {
        let s = self.images.shape();
        if start + count > s[0] || count == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch {start}..{} out of range for {} samples",
                start + count,
                s[0]
            )));
        }
        let row = s[1] * s[2] * s[3];
        let mut shape = s.to_vec();
        shape[0] = count;
        Tensor::new(
            shape,
            self.images.data()[start * row..(start + count) * row].to_vec(),
        )
    }

    /// Copies the rows at `indices` (in the order given).
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset> {
        let s = self.images.shape();
        let row = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= s[0] {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {} samples",
                    s[0]
                )));
            }
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        Dataset::new(Tensor::new(shape, data)?, labels, self.num_classes)
    }

    /// In-place per-channel normalization: `x = (x - mean[c]) / std[c]`.
    pub fn normalize(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        let c = self.images.shape()[1];
        if mean.len() != c || std.len() != c {
            return Err(Error::InvalidArgument(format!(
                "normalization wants {c} per-channel values, got mean {} / std {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "non-positive std {s} in normalization"
            )));
        }
        let plane: usize = self.images.shape()[2] * self.images.shape()[3];
        let data = self.images.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            let ci = (i / plane) % c;
            *v = (*v - mean[ci]) / std[ci];
        }
        Ok(())
    }
}

/// Draws `count` distinct samples (seeded, without replacement), in ascending
/// index order.
pub fn calibration_subset(ds: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || count > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration size {count} out of range 1..={}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, ds.len(), count).into_vec();
    idx.sort_unstable();
    ds.gather(&idx)
}

// --- IDX ------------------------------------------------------------------

const IDX_UBYTE: u8 = 0x08;

fn idx_err(path: &Path, detail: String) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        detail,
    }
}

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 4 {
        return Err(idx_err(path, "file shorter than the 4-byte magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(idx_err(
            path,
            format!(
                "magic mismatch: leading bytes {:02x}{:02x}, expected 0000",
                bytes[0], bytes[1]
            ),
        ));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(idx_err(
            path,
            format!("unsupported element type 0x{:02x} (only ubyte 0x08)", bytes[2]),
        ));
    }
    let ndim = bytes[3] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(idx_err(path, format!("{ndim} dimensions not supported")));
    }
    if bytes.len() < 4 + 4 * ndim {
        return Err(idx_err(path, "header truncated before dimension sizes".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let data = &bytes[4 + 4 * ndim..];
    if data.len() != count {
        return Err(idx_err(
            path,
            format!("dimensions {dims:?} imply {count} bytes of data, found {}", data.len()),
        ));
    }
    Ok((dims, data.to_vec()))
}

/// Loads an IDX image file as `[N, C, H, W]` scaled to `[0, 1]`. 3-d files
/// are treated as single-channel.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let (dims, data) = read_idx(path)?;
    let shape = match dims.len() {
        3 => vec![dims[0], 1, dims[1], dims[2]],
        4 => dims,
        n => {
            return Err(idx_err(
                path,
                format!("image file must be 3-d or 4-d, got {n}-d"),
            ))
        }
    };
    Tensor::new(shape, data.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Loads an IDX label file (1-d ubyte).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (dims, data) = read_idx(path)?;
    if dims.len() != 1 {
        return Err(idx_err(
            path,
            format!("label file must be 1-d, got {}-d", dims.len()),
        ));
    }
    Ok(data.into_iter().map(|b| b as usize).collect())
}

/// Loads an IDX image/label pair into a dataset.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let imgs = load_idx_images(images)?;
    let lbls = load_idx_labels(labels)?;
    if imgs.shape()[0] != lbls.len() {
        return Err(idx_err(
            labels,
            format!("{} labels for {} images", lbls.len(), imgs.shape()[0]),
        ));
    }
    if let Some(&bad) = lbls.iter().find(|&&l| l >= num_classes) {
        return Err(idx_err(
            labels,
            format!("label {bad} out of range for {num_classes} classes"),
        ));
    }
    Dataset::new(imgs, lbls, num_classes)
}

/// Writes `[N, C, H, W]` images as an IDX ubyte file (3-d when C == 1),
/// quantizing with `round(x · 255)` clamped to `0..=255`.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "images must be [N, C, H, W], got {s:?}"
        )));
    }
    let dims: Vec<usize> = if s[1] == 1 {
        vec![s[0], s[2], s[3]]
    } else {
        s.to_vec()
    };
    let mut bytes = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for d in &dims {
        bytes.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    bytes.extend(
        images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes labels as a 1-d IDX ubyte file.
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} does not fit in a ubyte"
        )));
    }
    let mut bytes = vec![0, 0, IDX_UBYTE, 1];
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&l| l as u8));
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// --- CIFAR ----------------------------------------------------------------

/// Which CIFAR binary record layout to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// 3073-byte records: label, 3072 pixels.
    Cifar10,
    /// 3074-byte records: coarse label, fine label, 3072 pixels. The fine
    /// label is used.
    Cifar100,
}

impl CifarVariant {
    fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,
            CifarVariant::Cifar100 => 3074,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Loads one or more CIFAR binary batch files as `[N, 3, 32, 32]` in
/// `[0, 1]`. Pixel planes are stored R, G, B row-major, matching the tensor
/// layout directly.
pub fn load_cifar(paths: &[std::path::PathBuf], variant: CifarVariant) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR files given".into()));
    }
    let rec = variant.record_len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        if bytes.is_empty() || bytes.len() % rec != 0 {
            return Err(Error::Dataset {
                path: path.clone(),
                detail: format!(
                    "file size {} is not a positive multiple of the {rec}-byte record",
                    bytes.len()
                ),
            });
        }
        for chunk in bytes.chunks_exact(rec) {
            let label = match variant {
                CifarVariant::Cifar10 => chunk[0] as usize,
                CifarVariant::Cifar100 => chunk[1] as usize,
            };
            if label >= variant.classes() {
                return Err(Error::Dataset {
                    path: path.clone(),
                    detail: format!(
                        "label {label} out of range for {} classes",
                        variant.classes()
                    ),
                });
            }
            labels.push(label);
            data.extend(chunk[rec - 3072..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        variant.classes(),
    )
}

// --- Synthetic ------------------------------------------------------------

/// Seeded synthetic classification task: one smooth random template per
/// class, samples are the template plus pixel noise, quantized to u8 levels
/// so a round-trip through IDX files is exact.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    /// Noise standard deviation in pixel units (`[0, 1]` scale).
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 5,
            train: 2000,
            test: 500,
            height: 12,
            width: 12,
            noise: 0.12,
            seed: 1,
        }
    }
}

/// Generates `(train, test)` splits. Labels cycle through the classes so both
/// splits are balanced.
pub fn synthetic(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.height < 2 || spec.width < 2 {
        return Err(Error::InvalidArgument(
            "synthetic task needs >=2 classes and >=2x2 images".into(),
        ));
    }
    if spec.train == 0 || spec.test == 0 {
        return Err(Error::InvalidArgument("empty synthetic split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    const GRID: usize = 4;
    let templates: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            let coarse: Vec<f32> = (0..GRID * GRID)
                .map(|_| 0.1 + 0.8 * rng.random::<f32>())
                .collect();
            upsample_bilinear(&coarse, GRID, spec.height, spec.width)
        })
        .collect();
    let mut make_split = |count: usize| -> Result<Dataset> {
        let mut data = Vec::with_capacity(count * spec.height * spec.width);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % spec.classes;
            labels.push(class);
            for &t in &templates[class] {
                // Irwin–Hall(12) approximates a unit Gaussian without
                // pulling in a distributions dependency.
                let g: f32 = (0..12).map(|_| rng.random::<f32>()).sum::<f32>() - 6.0;
                let v = (t + spec.noise * g).clamp(0.0, 1.0);
                // Quantize to the u8 grid so IDX round-trips are exact.
                data.push((v * 255.0).round() / 255.0);
            }
        }
        Dataset::new(
            Tensor::new(vec![count, 1, spec.height, spec.width], data)?,
            labels,
            spec.classes,
        )
    };
    let train = make_split(spec.train)?;
    let test = make_split(spec.test)?;
    Ok((train, test))
}

fn upsample_bilinear(coarse: &[f32], grid: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 * (grid - 1) as f32 / (h - 1) as f32;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(grid - 1);
        let ty = fy - y0 as f32;
        for x in 0..w {
            let fx = x as f32 * (grid - 1) as f32 / (w - 1) as f32;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(grid - 1);
            let tx = fx - x0 as f32;
            let top = coarse[y0 * grid + x0] * (1.0 - tx) + coarse[y0 * grid + x1] * tx;
            let bot = coarse[y1 * grid + x0] * (1.0 - tx) + coarse[y1 * grid + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}
