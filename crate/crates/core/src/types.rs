//! Shared domain types and the configuration schema.
//!
//! Images live in channel-normalized space (`(pixel - mean) / std` per channel)
//! everywhere except on disk, where they are de-normalized, clamped to `[0, 1]`
//! and quantized to 8 bits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DeltError, Result};

/// A `channels x height x width` image stored row-major per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(DeltError::Shape(format!(
                "buffer of {} values cannot be {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    /// Checks that the buffer has the shape a profile expects.
    pub fn check_profile(&self, profile: &DatasetProfile) -> Result<()> {
        let expected = (profile.channels(), profile.resolution, profile.resolution);
        if self.shape() != expected {
            return Err(DeltError::Shape(format!(
                "image is {:?}, profile `{}` expects {:?}",
                self.shape(),
                profile.name,
                expected
            )));
        }
        Ok(())
    }

    /// De-normalizes, clamps to `[0, 1]` and quantizes to 8 bits (channel-major).
    pub fn to_pixels(&self, profile: &DatasetProfile) -> Vec<u8> {
        let plane = self.height * self.width;
        self.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                let p = v * profile.channel_std[c] + profile.channel_mean[c];
                (p.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect()
    }

    /// Inverse of [`ImageBuffer::to_pixels`] up to quantization.
    pub fn from_pixels(
        profile: &DatasetProfile,
        height: usize,
        width: usize,
        pixels: &[u8],
    ) -> Result<Self> {
        let channels = profile.channels();
        let plane = height * width;
        if pixels.len() != channels * plane {
            return Err(DeltError::Shape(format!(
                "{} pixels cannot be {channels}x{height}x{width}",
                pixels.len()
            )));
        }
        let data = pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = i / plane;
                (p as f32 / 255.0 - profile.channel_mean[c]) / profile.channel_std[c]
            })
            .collect();
        Self::new(channels, height, width, data)
    }
}

/// Per-dataset constants: class count, resolution, normalization and the
/// RandAugment parameters used in post-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub num_classes: usize,
    pub resolution: usize,
    pub channel_mean: Vec<f32>,
    pub channel_std: Vec<f32>,
    pub randaugment_m: f32,
    pub randaugment_n: f32,
    pub randaugment_mstd: f32,
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

impl DatasetProfile {
    pub fn channels(&self) -> usize {
        self.channel_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DeltError::Config(format!(
                "profile `{}`: num_classes must be >= 2",
                self.name
            )));
        }
        if self.resolution == 0 {
            return Err(DeltError::Config(format!(
                "profile `{}`: resolution must be > 0",
                self.name
            )));
        }
        if !(self.randaugment_mstd > 0.0) {
            return Err(DeltError::Config(format!(
                "profile `{}`: randaugment_mstd must be > 0",
                self.name
            )));
        }
        if self.channel_mean.is_empty() || self.channel_mean.len() != self.channel_std.len() {
            return Err(DeltError::Config(format!(
                "profile `{}`: channel_mean/channel_std must be non-empty and equal length",
                self.name
            )));
        }
        if self.channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(DeltError::Config(format!(
                "profile `{}`: channel_std entries must be > 0",
                self.name
            )));
        }
        Ok(())
    }

    pub fn cifar10() -> Self {
        Self {
            name: "cifar10".into(),
            num_classes: 10,
            resolution: 32,
            channel_mean: vec![0.4914, 0.4822, 0.4465],
            channel_std: vec![0.2023, 0.1994, 0.2010],
            randaugment_m: 5.0,
            randaugment_n: 4.0,
            randaugment_mstd: 1.0,
        }
    }

    pub fn tiny_imagenet() -> Self {
        Self {
            name: "tiny_imagenet".into(),
            num_classes: 200,
            resolution: 64,
            channel_mean: vec![0.4802, 0.4481, 0.3975],
            channel_std: vec![0.2302, 0.2265, 0.2262],
            randaugment_m: 4.0,
            randaugment_n: 3.0,
            randaugment_mstd: 1.0,
        }
    }

    pub fn imagenette() -> Self {
        Self::imagenet_like("imagenette", 10)
    }

    pub fn imagenet100() -> Self {
        Self::imagenet_like("imagenet100", 100)
    }

    pub fn imagenet1k() -> Self {
        Self::imagenet_like("imagenet1k", 1000)
    }

    fn imagenet_like(name: &str, num_classes: usize) -> Self {
        Self {
            name: name.into(),
            num_classes,
            resolution: 224,
            channel_mean: IMAGENET_MEAN.to_vec(),
            channel_std: IMAGENET_STD.to_vec(),
            randaugment_m: 6.0,
            randaugment_n: 2.0,
            randaugment_mstd: 1.0,
        }
    }

    /// The bundled 8x8 handwritten-digit set used for desk-scale runs.
    pub fn digits() -> Self {
        Self {
            name: "digits".into(),
            num_classes: 10,
            resolution: 8,
            channel_mean: vec![0.3053],
            channel_std: vec![0.3759],
            randaugment_m: 5.0,
            randaugment_n: 2.0,
            randaugment_mstd: 1.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "cifar10" => Ok(Self::cifar10()),
            "tiny_imagenet" => Ok(Self::tiny_imagenet()),
            "imagenette" => Ok(Self::imagenette()),
            "imagenet100" => Ok(Self::imagenet100()),
            "imagenet1k" => Ok(Self::imagenet1k()),
            "digits" => Ok(Self::digits()),
            other => Err(DeltError::Config(format!("unknown dataset profile `{other}`"))),
        }
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = DeltError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(DeltError::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(LrSchedule { CosineDecay => "cosine_decay" });
string_enum!(
    /// How synthetic images are initialized before recovery.
    InitMode { RealPatch => "real_patch", Gaussian => "gaussian" }
);
string_enum!(
    /// Which part of the scored pool is used for initialization.
    Selection { Median => "median", Lowest => "lowest", Highest => "highest" }
);
string_enum!(
    /// Order in which selected patches are handed to the initializer.
    Ordering {
        MedianOut => "median_out",
        Ascending => "ascending",
        Descending => "descending",
        Random => "random",
    }
);
string_enum!(EvalOptimizer { AdamW => "adamw" });
string_enum!(Augmentation {
    RandAugment => "rand_augment",
    RandomResizedCrop => "random_resized_crop",
    RandomHorizontalFlip => "random_horizontal_flip",
});

/// All synthesis hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub ipc: usize,
    pub num_subbatches: usize,
    pub max_iterations: usize,
    pub round_iterations: usize,
    pub alpha_bn: f32,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub synthesis_batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub crop_scale_min: f32,
    pub crop_scale_max: f32,
    pub init_mode: InitMode,
    pub mosaic_grid: usize,
    pub selection: Selection,
    pub ordering: Ordering,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    /// Recovery settings for IPC 50 at 4K iterations with 500-iteration rounds.
    fn default() -> Self {
        Self {
            ipc: 50,
            num_subbatches: 5,
            max_iterations: 4000,
            round_iterations: 500,
            alpha_bn: 0.01,
            learning_rate: 0.25,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            synthesis_batch_size: 100,
            lr_schedule: LrSchedule::CosineDecay,
            crop_scale_min: 0.08,
            crop_scale_max: 1.0,
            init_mode: InitMode::RealPatch,
            mosaic_grid: 1,
            selection: Selection::Median,
            ordering: Ordering::MedianOut,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    /// Sub-batch size `k = ipc / M`.
    pub fn subbatch_size(&self) -> usize {
        self.ipc / self.num_subbatches.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DeltError::Config(msg));
        if self.ipc == 0 {
            return bad("ipc must be >= 1".into());
        }
        if self.num_subbatches == 0 {
            return bad("num_subbatches must be >= 1".into());
        }
        if self.ipc % self.num_subbatches != 0 {
            return bad(format!(
                "ipc {} is not divisible by num_subbatches {}",
                self.ipc, self.num_subbatches
            ));
        }
        let consumed = (self.num_subbatches - 1) * self.round_iterations;
        if self.max_iterations <= consumed {
            return Err(DeltError::EmptyLastSubbatch {
                max_iterations: self.max_iterations,
                consumed,
            });
        }
        if !(0.0 < self.crop_scale_min
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return bad(format!(
                "crop scale range ({}, {}) must satisfy 0 < min <= max <= 1",
                self.crop_scale_min, self.crop_scale_max
            ));
        }
        if !(self.alpha_bn >= 0.0) || !self.alpha_bn.is_finite() {
            return bad(format!("alpha_bn {} must be finite and >= 0", self.alpha_bn));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if self.synthesis_batch_size == 0 {
            return bad("synthesis_batch_size must be >= 1".into());
        }
        if self.mosaic_grid == 0 {
            return bad("mosaic_grid must be >= 1".into());
        }
        Ok(())
    }
}

/// Post-training (student) hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub optimizer: EvalOptimizer,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub augmentations: Vec<Augmentation>,
    pub seed: u64,
    #[serde(default = "default_crop_min")]
    pub crop_scale_min: f32,
    #[serde(default = "default_crop_max")]
    pub crop_scale_max: f32,
}

fn default_crop_min() -> f32 {
    0.08
}

fn default_crop_max() -> f32 {
    1.0
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            optimizer: EvalOptimizer::AdamW,
            learning_rate: 0.001,
            weight_decay: 0.01,
            epochs: 300,
            batch_size: 100,
            lr_schedule: LrSchedule::CosineDecay,
            augmentations: vec![
                Augmentation::RandAugment,
                Augmentation::RandomResizedCrop,
                Augmentation::RandomHorizontalFlip,
            ],
            seed: 0,
            crop_scale_min: default_crop_min(),
            crop_scale_max: default_crop_max(),
        }
    }
}

impl EvalConfig {
    /// Batch size by IPC: 100 at IPC 50, 50 at IPC 10, 10 at IPC 1.
    pub fn batch_size_for_ipc(ipc: usize) -> usize {
        match ipc {
            0..=1 => 10,
            2..=10 => 50,
            _ => 100,
        }
    }

    /// Base learning rate for a student architecture id.
    pub fn learning_rate_for(arch: &str) -> f32 {
        if arch.starts_with("mobilenet") {
            0.0025
        } else {
            0.001
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(DeltError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DeltError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DeltError::Config("learning_rate must be > 0".into()));
        }
        if !(0.0 < self.crop_scale_min
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(DeltError::Config("invalid crop scale range".into()));
        }
        Ok(())
    }
}

/// Reference to a real-image crop used during initialization.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchRef {
    pub source_id: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl fmt::Display for PatchRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{},{},{},{}", self.source_id, self.x, self.y, self.w, self.h)
    }
}

impl FromStr for PatchRef {
    type Err = DeltError;

    fn from_str(s: &str) -> Result<Self> {
        let err = || DeltError::Validation(format!("malformed patch reference `{s}`"));
        let (id, rest) = s.split_once('@').ok_or_else(err)?;
        let nums: Vec<usize> = rest
            .split(',')
            .map(|p| p.parse().map_err(|_| err()))
            .collect::<Result<_>>()?;
        if nums.len() != 4 {
            return Err(err());
        }
        Ok(Self {
            source_id: id.parse().map_err(|_| err())?,
            x: nums[0],
            y: nums[1],
            w: nums[2],
            h: nums[3],
        })
    }
}

/// Where a synthetic image's starting point came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitProvenance {
    Gaussian,
    /// Patches in grid order (row-major); one entry for a 1x1 mosaic.
    Patches(Vec<PatchRef>),
}

impl fmt::Display for InitProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitProvenance::Gaussian => f.write_str("gaussian"),
            InitProvenance::Patches(ps) => {
                for (i, p) in ps.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for InitProvenance {
    type Err = DeltError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "gaussian" {
            return Ok(InitProvenance::Gaussian);
        }
        s.split('+')
            .map(str::parse)
            .collect::<Result<Vec<_>>>()
            .map(InitProvenance::Patches)
    }
}

impl Serialize for InitProvenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InitProvenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: ImageBuffer,
    pub class_id: usize,
    pub ipc_index: usize,
    pub subbatch_index: usize,
    pub iterations_trained: usize,
    pub init_provenance: InitProvenance,
    /// Optional stored teacher soft label (one probability per class).
    pub soft_label: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub recovery: RecoveryConfig,
    /// Effective run configuration (everything beyond the recovery settings).
    #[serde(default)]
    pub effective_config: serde_json::Value,
    pub total_image_iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledDataset {
    pub profile: DatasetProfile,
    pub samples: Vec<SyntheticSample>,
    pub run_metadata: RunMetadata,
}

impl DistilledDataset {
    /// Puts samples in canonical (class, ipc_index) order.
    pub fn sort_samples(&mut self) {
        self.samples.sort_by_key(|s| (s.class_id, s.ipc_index));
    }

    pub fn ipc(&self) -> usize {
        self.run_metadata.recovery.ipc
    }

    /// Samples grouped by class in ipc order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<&SyntheticSample>> {
        let mut out: BTreeMap<usize, Vec<&SyntheticSample>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.class_id).or_default().push(s);
        }
        for v in out.values_mut() {
            v.sort_by_key(|s| s.ipc_index);
        }
        out
    }

    /// Checks every dataset invariant, naming the first offending sample.
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        let cfg = &self.run_metadata.recovery;
        cfg.validate()?;
        let m = cfg.num_subbatches;
        let k = cfg.subbatch_size();
        let mut per_class = vec![vec![false; cfg.ipc]; self.profile.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            let name = || format!("sample #{i} (class {}, ipc index {})", s.class_id, s.ipc_index);
            if s.class_id >= self.profile.num_classes {
                return Err(DeltError::Validation(format!("{}: class out of range", name())));
            }
            if s.ipc_index >= cfg.ipc {
                return Err(DeltError::Validation(format!("{}: ipc index out of range", name())));
            }
            if per_class[s.class_id][s.ipc_index] {
                return Err(DeltError::Validation(format!("{}: duplicate slot", name())));
            }
            per_class[s.class_id][s.ipc_index] = true;
            if s.subbatch_index >= m || s.subbatch_index != s.ipc_index / k {
                return Err(DeltError::Validation(format!(
                    "{}: sub-batch index {} inconsistent with k = {k}, M = {m}",
                    name(),
                    s.subbatch_index
                )));
            }
            let expected = cfg.max_iterations - s.subbatch_index * cfg.round_iterations;
            if s.iterations_trained != expected {
                return Err(DeltError::Validation(format!(
                    "{}: iterations_trained {} != MI - b*RI = {expected}",
                    name(),
                    s.iterations_trained
                )));
            }
            s.image.check_profile(&self.profile).map_err(|e| {
                DeltError::Validation(format!("{}: {e}", name()))
            })?;
            if let Some(label) = &s.soft_label {
                if label.len() != self.profile.num_classes {
                    return Err(DeltError::Validation(format!(
                        "{}: soft label has {} entries",
                        name(),
                        label.len()
                    )));
                }
            }
        }
        for (c, slots) in per_class.iter().enumerate() {
            let count = slots.iter().filter(|b| **b).count();
            if count != cfg.ipc {
                return Err(DeltError::Validation(format!(
                    "class {c} has {count} samples, expected ipc = {}",
                    cfg.ipc
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_round_trip_is_within_quantization() {
        let profile = DatasetProfile::cifar10();
        let data: Vec<f32> = (0..3 * 4 * 4).map(|i| (i as f32 * 0.37).sin() * 2.0).collect();
        let img = ImageBuffer::new(3, 4, 4, data).unwrap();
        let px = img.to_pixels(&profile);
        let back = ImageBuffer::from_pixels(&profile, 4, 4, &px).unwrap();
        for (i, (a, b)) in img.data().iter().zip(back.data()).enumerate() {
            let c = i / 16;
            let pa = (a * profile.channel_std[c] + profile.channel_mean[c]).clamp(0.0, 1.0);
            let pb = b * profile.channel_std[c] + profile.channel_mean[c];
            assert!((pa - pb).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn recovery_config_rejects_listed_combinations() {
        let ok = RecoveryConfig {
            ipc: 8,
            num_subbatches: 8,
            max_iterations: 4000,
            round_iterations: 500,
            ..RecoveryConfig::default()
        };
        ok.validate().unwrap();
        assert!(RecoveryConfig { max_iterations: 3500, ..ok.clone() }.validate().is_err());
        assert!(RecoveryConfig { ipc: 10, ..ok.clone() }.validate().is_err());
        assert!(RecoveryConfig { crop_scale_min: 0.0, ..ok.clone() }.validate().is_err());
        assert!(RecoveryConfig { crop_scale_min: 0.9, crop_scale_max: 0.5, ..ok.clone() }
            .validate()
            .is_err());
        assert!(RecoveryConfig { alpha_bn: -0.1, ..ok.clone() }.validate().is_err());
        assert!(RecoveryConfig { num_subbatches: 0, ..ok.clone() }.validate().is_err());
        RecoveryConfig { max_iterations: 3501, ..ok }.validate().unwrap();
    }

    #[test]
    fn provenance_string_round_trip() {
        let p = InitProvenance::Patches(vec![
            PatchRef { source_id: 3, x: 1, y: 2, w: 10, h: 12 },
            PatchRef { source_id: 7, x: 0, y: 0, w: 32, h: 32 },
        ]);
        assert_eq!(p.to_string(), "3@1,2,10,12+7@0,0,32,32");
        assert_eq!(p.to_string().parse::<InitProvenance>().unwrap(), p);
        assert_eq!("gaussian".parse::<InitProvenance>().unwrap(), InitProvenance::Gaussian);
    }

    #[test]
    fn config_json_uses_field_names() {
        let json = serde_json::to_value(RecoveryConfig::default()).unwrap();
        for key in [
            "ipc",
            "num_subbatches",
            "max_iterations",
            "round_iterations",
            "alpha_bn",
            "adam_beta1",
            "synthesis_batch_size",
            "crop_scale_min",
            "init_mode",
            "mosaic_grid",
            "selection",
            "ordering",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["ordering"], "median_out");
        assert_eq!(json["lr_schedule"], "cosine_decay");
    }
}
