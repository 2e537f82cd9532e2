//! Real labeled datasets and benchmark readers.
//!
//! Images are kept as 8-bit planar (`C x H x W`) buffers at their native size;
//! normalization to a [`DatasetProfile`] happens when they are fed to a model.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{resize_crop_planar, CropBox};
use crate::error::{DeltError, Result};
use crate::types::{DatasetProfile, ImageBuffer};

/// Environment variable naming the root directory for benchmark datasets.
pub const DATA_ROOT_ENV: &str = "DELT_DATA_ROOT";

const DIGITS_GZ: &[u8] = include_bytes!("../data/digits.csv.gz");

#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Planar `C x H x W` pixels.
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(DeltError::Shape(format!(
                "{} pixels cannot be {channels}x{height}x{width}",
                pixels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn full_box(&self) -> CropBox {
        CropBox {
            x: 0,
            y: 0,
            w: self.width,
            h: self.height,
        }
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn unit_pixels(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// Crops `region`, resizes it bilinearly to the profile resolution and
    /// normalizes.
    pub fn crop_normalized(&self, region: CropBox, profile: &DatasetProfile) -> Result<ImageBuffer> {
        if self.channels != profile.channels() {
            return Err(DeltError::Shape(format!(
                "{}-channel image for a {}-channel profile",
                self.channels,
                profile.channels()
            )));
        }
        let r = profile.resolution;
        let mut data = resize_crop_planar(
            &self.unit_pixels(),
            self.channels,
            self.height,
            self.width,
            region,
            r,
            r,
        );
        let plane = r * r;
        for (i, v) in data.iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v - profile.channel_mean[c]) / profile.channel_std[c];
        }
        ImageBuffer::new(self.channels, r, r, data)
    }

    /// Evaluation view: center square crop (when not square), resized to the
    /// profile resolution.
    pub fn eval_view(&self, profile: &DatasetProfile) -> Result<ImageBuffer> {
        let side = self.width.min(self.height);
        let region = CropBox {
            x: (self.width - side) / 2,
            y: (self.height - side) / 2,
            w: side,
            h: side,
        };
        self.crop_normalized(region, profile)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LabeledDataset {
    pub images: Vec<RawImage>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<RawImage>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DeltError::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DeltError::Data(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of the images labeled `class_id`, ascending.
    pub fn class_indices(&self, class_id: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Stratified split: `holdout` images of every class go to the second set.
    pub fn stratified_split(&self, holdout: usize, seed: u64) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for c in 0..self.num_classes {
            let mut idx = self.class_indices(c);
            idx.shuffle(&mut rng);
            let n = holdout.min(idx.len());
            held.extend_from_slice(&idx[..n]);
            keep.extend_from_slice(&idx[n..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        (self.subset(&keep), self.subset(&held))
    }

    /// `count` random images per class (the random-real baseline).
    pub fn random_per_class(&self, count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::new();
        for c in 0..self.num_classes {
            let mut idx = self.class_indices(c);
            if idx.len() < count {
                return Err(DeltError::Data(format!(
                    "class {c} has {} images, {count} requested",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            chosen.extend_from_slice(&idx[..count]);
        }
        Ok(self.subset(&chosen))
    }

    /// All images as evaluation views, normalized to `profile`.
    pub fn eval_views(&self, profile: &DatasetProfile) -> Result<Vec<ImageBuffer>> {
        self.images.iter().map(|im| im.eval_view(profile)).collect()
    }
}

/// The bundled 8x8 handwritten digits (1797 images, 10 classes, 17 gray
/// levels rescaled to 0..=255).
pub fn load_digits() -> Result<LabeledDataset> {
    let mut text = String::new();
    GzDecoder::new(DIGITS_GZ).read_to_string(&mut text)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f32> = line
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DeltError::Data(format!("digits line {}: {e}", line_no + 1)))?;
        if values.len() != 65 {
            return Err(DeltError::Data(format!("digits line {}: expected 65 fields", line_no + 1)));
        }
        let pixels = values[..64]
            .iter()
            .map(|&v| (v * 255.0 / 16.0).round() as u8)
            .collect();
        images.push(RawImage::new(1, 8, 8, pixels)?);
        labels.push(values[64] as usize);
    }
    LabeledDataset::new(images, labels, 10)
}

/// Reads one CIFAR-10 binary batch file (`<label u8><3072 pixel bytes>` records).
pub fn read_cifar10_batch(bytes: &[u8]) -> Result<(Vec<RawImage>, Vec<usize>)> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    if bytes.len() % RECORD != 0 {
        return Err(DeltError::Data(format!(
            "CIFAR-10 batch of {} bytes is not a whole number of records",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] >= 10 {
            return Err(DeltError::Data(format!("CIFAR-10 label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.push(RawImage::new(3, 32, 32, rec[1..].to_vec())?);
    }
    Ok((images, labels))
}

/// Loads `cifar-10-batches-bin` (train = data_batch_1..5, val = test_batch).
pub fn load_cifar10(root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = if root.join("cifar-10-batches-bin").is_dir() {
        root.join("cifar-10-batches-bin")
    } else {
        root.to_path_buf()
    };
    let read = |name: &str| -> Result<(Vec<RawImage>, Vec<usize>)> {
        let p = dir.join(name);
        let bytes = fs::read(&p)
            .map_err(|e| DeltError::Data(format!("cannot read {}: {e}", p.display())))?;
        read_cifar10_batch(&bytes)
    };
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let (im, lb) = read(&format!("data_batch_{i}.bin"))?;
        train_images.extend(im);
        train_labels.extend(lb);
    }
    let (val_images, val_labels) = read("test_batch.bin")?;
    Ok((
        LabeledDataset::new(train_images, train_labels, 10)?,
        LabeledDataset::new(val_images, val_labels, 10)?,
    ))
}

fn decode_image_file(path: &Path, channels: usize) -> Result<RawImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        other => return Err(DeltError::Data(format!("unsupported channel count {other}"))),
    };
    let plane = w * h;
    let mut planar = vec![0u8; channels * plane];
    for c in 0..channels {
        for p in 0..plane {
            planar[c * plane + p] = interleaved[p * channels + c];
        }
    }
    RawImage::new(channels, h, w, planar)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads a standard class-folder layout (`<root>/<class>/<image>`), with
/// classes numbered in sorted directory-name order. Returns the class names.
pub fn load_image_folder(root: &Path, channels: usize) -> Result<(LabeledDataset, Vec<String>)> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(DeltError::Data(format!("{} has no class directories", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (c, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in walk_images(dir)? {
            images.push(decode_image_file(&file, channels)?);
            labels.push(c);
        }
    }
    let n = names.len();
    Ok((LabeledDataset::new(images, labels, n)?, names))
}

fn walk_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in sorted_entries(dir)? {
        if p.is_dir() {
            out.extend(walk_images(&p)?);
        } else if is_image_file(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Loads the `tiny-imagenet-200` layout: `train/<wnid>/images/*` and
/// `val/images/*` labeled by `val/val_annotations.txt`.
pub fn load_tiny_imagenet(root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let base = if root.join("tiny-imagenet-200").is_dir() {
        root.join("tiny-imagenet-200")
    } else {
        root.to_path_buf()
    };
    let (train, names) = load_image_folder(&base.join("train"), 3)?;
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let annotations = fs::read_to_string(base.join("val/val_annotations.txt"))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for line in annotations.lines() {
        let mut parts = line.split('\t');
        let (Some(file), Some(wnid)) = (parts.next(), parts.next()) else {
            continue;
        };
        let label = *index
            .get(wnid)
            .ok_or_else(|| DeltError::Data(format!("unknown class {wnid} in val annotations")))?;
        images.push(decode_image_file(&base.join("val/images").join(file), 3)?);
        labels.push(label);
    }
    let n = names.len();
    Ok((train, LabeledDataset::new(images, labels, n)?))
}

pub const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
pub const TINY_IMAGENET_URL: &str = "http://cs231n.stanford.edu/tiny-imagenet-200.zip";

fn download(url: &str) -> Result<Vec<u8>> {
    log::info!("downloading {url}");
    let mut body = ureq::get(url)
        .call()
        .map_err(|e| DeltError::Data(format!("download of {url} failed: {e}")))?
        .into_body();
    let mut bytes = Vec::new();
    body.as_reader().read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Downloads and unpacks CIFAR-10 (binary version) under `root` unless present.
pub fn fetch_cifar10(root: &Path) -> Result<PathBuf> {
    let target = root.join("cifar-10-batches-bin");
    if target.join("test_batch.bin").is_file() {
        return Ok(target);
    }
    fs::create_dir_all(root)?;
    let bytes = download(CIFAR10_URL)?;
    tar::Archive::new(GzDecoder::new(bytes.as_slice())).unpack(root)?;
    Ok(target)
}

/// Downloads and unpacks Tiny-ImageNet under `root` unless present.
pub fn fetch_tiny_imagenet(root: &Path) -> Result<PathBuf> {
    let target = root.join("tiny-imagenet-200");
    if target.join("val/val_annotations.txt").is_file() {
        return Ok(target);
    }
    fs::create_dir_all(root)?;
    let bytes = download(TINY_IMAGENET_URL)?;
    let mut archive = zip::ZipArchive::new(std::io::Cursor::new(bytes))
        .map_err(|e| DeltError::Data(format!("bad archive: {e}")))?;
    archive
        .extract(root)
        .map_err(|e| DeltError::Data(format!("extraction failed: {e}")))?;
    Ok(target)
}

/// Train/validation splits for a named benchmark.
///
/// `digits` is bundled (50 images per class held out for validation); the
/// other profiles read from `root` (usually `$DELT_DATA_ROOT`).
pub fn load_benchmark(
    profile: &DatasetProfile,
    root: Option<&Path>,
) -> Result<(LabeledDataset, LabeledDataset)> {
    match profile.name.as_str() {
        "digits" => Ok(load_digits()?.stratified_split(50, 0)),
        name => {
            let root = root.ok_or_else(|| {
                DeltError::Data(format!("dataset `{name}` needs a data root (set {DATA_ROOT_ENV})"))
            })?;
            match name {
                "cifar10" => load_cifar10(root),
                "tiny_imagenet" => load_tiny_imagenet(root),
                _ => {
                    let (train, _) = load_image_folder(&root.join("train"), 3)?;
                    let (val, _) = load_image_folder(&root.join("val"), 3)?;
                    Ok((train, val))
                }
            }
        }
    }
}
