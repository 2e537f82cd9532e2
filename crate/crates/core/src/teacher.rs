//! The frozen teacher ("squeeze" stage).

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{flip_horizontal, sample_resized_crop};
use crate::data::LabeledDataset;
use crate::error::{DeltError, Result};
use crate::nn::{ForwardOutput, NetSpec, Network, RunningStats};
use crate::relabel::evaluate_top1;
use crate::types::{DatasetProfile, ImageBuffer};

/// Stacks equally-shaped images into an `N x C x H x W` tensor.
pub fn stack_images(images: &[&ImageBuffer], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| DeltError::Shape("empty image batch".into()))?;
    let (c, h, w) = first.shape();
    let mut flat = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if im.shape() != (c, h, w) {
            return Err(DeltError::Shape(format!(
                "mixed image shapes {:?} and {:?}",
                first.shape(),
                im.shape()
            )));
        }
        flat.extend_from_slice(im.data());
    }
    Ok(Tensor::from_vec(flat, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// A frozen classifier whose BN running statistics are the matching target.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    network: Network,
}

impl TeacherSnapshot {
    /// Freezes `network`; fails when it has no BN layers or a non-positive
    /// running variance.
    pub fn new(network: &Network) -> Result<Self> {
        if network.num_bn_layers() == 0 {
            return Err(DeltError::MissingBatchNorm);
        }
        let network = network.frozen()?;
        for (i, rs) in network.running_stats().iter().enumerate() {
            let min = rs.var.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
            if !(min > 0.0) {
                return Err(DeltError::Validation(format!(
                    "BN layer {i} has non-positive running variance {min}"
                )));
            }
        }
        Ok(Self { network })
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Self::new(&Network::load(path, device)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.network.save(path)
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn spec(&self) -> &NetSpec {
        self.network.spec()
    }

    pub fn num_classes(&self) -> usize {
        self.network.spec().num_classes
    }

    pub fn num_bn_layers(&self) -> usize {
        self.network.num_bn_layers()
    }

    pub fn device(&self) -> &Device {
        self.network.device()
    }

    pub fn dtype(&self) -> DType {
        self.network.dtype()
    }

    pub fn running_stats(&self) -> Vec<RunningStats> {
        self.network.running_stats()
    }

    /// Logits, penultimate features and (with `capture`) per-BN-layer batch
    /// statistics of the pre-normalization activations. Gradients flow to
    /// `batch` when it is a variable.
    pub fn forward(&self, batch: &Tensor, capture: bool) -> Result<ForwardOutput> {
        self.network.forward(batch, capture)
    }

    /// Forward over buffers in chunks, returning logits and features as rows.
    pub fn infer(&self, images: &[&ImageBuffer], chunk: usize) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let mut logits = Vec::with_capacity(images.len());
        let mut feats = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let x = stack_images(part, self.dtype(), self.device())?;
            let out = self.forward(&x, false)?;
            logits.extend(out.logits.to_dtype(DType::F32)?.to_vec2::<f32>()?);
            feats.extend(out.features.to_dtype(DType::F32)?.to_vec2::<f32>()?);
        }
        Ok((logits, feats))
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.network.fingerprint()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SqueezeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub crop_scale_min: f32,
    pub crop_scale_max: f32,
    pub horizontal_flip: bool,
    pub seed: u64,
}

impl Default for SqueezeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.002,
            weight_decay: 0.01,
            crop_scale_min: 0.5,
            crop_scale_max: 1.0,
            horizontal_flip: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SqueezeReport {
    pub arch: String,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Trains a teacher with hard-label cross-entropy (AdamW, cosine decay,
/// random-resized-crop and optional flips) and freezes it.
pub fn squeeze(
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    profile: &DatasetProfile,
    spec: NetSpec,
    config: &SqueezeConfig,
    device: &Device,
) -> Result<(TeacherSnapshot, SqueezeReport)> {
    if train.is_empty() {
        return Err(DeltError::Data("empty training split".into()));
    }
    let mut net = Network::init(spec, config.seed, DType::F32, device)?;
    if net.num_bn_layers() == 0 {
        return Err(DeltError::MissingBatchNorm);
    }
    let vars = net.make_trainable()?;
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate as f64,
            weight_decay: config.weight_decay as f64,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7eac);
    let steps_per_epoch = train.len().div_ceil(config.batch_size.max(1));
    let total = steps_per_epoch * config.epochs;
    let scale = (config.crop_scale_min, config.crop_scale_max);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            if batch.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(batch.len());
            for &i in batch {
                let im = &train.images[i];
                let region = sample_resized_crop(&mut rng, im.height, im.width, scale);
                let mut view = im.crop_normalized(region, profile)?;
                if config.horizontal_flip && rng.random::<bool>() {
                    let (c, h, w) = view.shape();
                    flip_horizontal(view.data_mut(), c, h, w);
                }
                views.push(view);
            }
            let refs: Vec<&ImageBuffer> = views.iter().collect();
            let x = stack_images(&refs, DType::F32, device)?;
            let targets: Vec<u32> = batch.iter().map(|&i| train.labels[i] as u32).collect();
            let targets = Tensor::new(targets.as_slice(), device)?;
            opt.set_learning_rate(cosine_lr(config.learning_rate as f64, step, total));
            let (out, updates) = net.forward_train(&x)?;
            let loss = candle_nn::loss::cross_entropy(&out.logits, &targets)?;
            opt.backward_step(&loss)?;
            net.apply_running_updates(updates);
            loss_sum += loss.to_scalar::<f32>()? as f64;
            step += 1;
        }
        let mean = loss_sum / steps_per_epoch as f64;
        log::info!("squeeze epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let teacher = TeacherSnapshot::new(&net)?;
    let train_views = train.eval_views(profile)?;
    let train_accuracy = evaluate_top1(teacher.network(), &train_views, &train.labels)?;
    let val_accuracy = match val {
        Some(v) => Some(evaluate_top1(teacher.network(), &v.eval_views(profile)?, &v.labels)?),
        None => None,
    };
    log::info!("squeeze done: train acc {train_accuracy:.4}, val acc {val_accuracy:?}");
    let report = SqueezeReport {
        arch: teacher.spec().arch.to_string(),
        epochs: config.epochs,
        train_accuracy,
        val_accuracy,
        epoch_losses,
    };
    Ok((teacher, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_digits;

    #[test]
    fn architecture_without_bn_is_rejected() {
        let digits = load_digits().unwrap().subset(&[0, 1, 2, 3]);
        let spec = NetSpec::new("plainconv2".parse().unwrap(), 1, 10, 8).with_width(4);
        let err = squeeze(
            &digits,
            None,
            &DatasetProfile::digits(),
            spec,
            &SqueezeConfig { epochs: 1, ..Default::default() },
            &Device::Cpu,
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "batch-to-global matching requires normalization statistics");
    }

    #[test]
    fn zero_epochs_gives_untrained_snapshot() {
        let digits = load_digits().unwrap();
        let (train, val) = digits.stratified_split(20, 1);
        let spec = NetSpec::new("convnet2".parse().unwrap(), 1, 10, 8).with_width(8);
        let cfg = SqueezeConfig { epochs: 0, ..Default::default() };
        let (teacher, report) =
            squeeze(&train, Some(&val), &DatasetProfile::digits(), spec, &cfg, &Device::Cpu).unwrap();
        assert_eq!(teacher.num_bn_layers(), 2);
        // chance level for 10 classes, with slack for a random init
        assert!(report.val_accuracy.unwrap() < 0.35, "{report:?}");
    }

    #[test]
    fn forward_is_pure() {
        let spec = NetSpec::new("convnet2".parse().unwrap(), 1, 10, 8).with_width(8);
        let net = Network::init(spec, 3, DType::F32, &Device::Cpu).unwrap();
        let teacher = TeacherSnapshot::new(&net).unwrap();
        let x = Tensor::randn(0f32, 1.0, (4, 1, 8, 8), &Device::Cpu).unwrap();
        let a = teacher.forward(&x, true).unwrap();
        let b = teacher.forward(&x, true).unwrap();
        assert_eq!(a.logits.to_vec2::<f32>().unwrap(), b.logits.to_vec2::<f32>().unwrap());
        for (sa, sb) in a.bn_stats.iter().zip(&b.bn_stats) {
            assert_eq!(sa.var.to_vec1::<f32>().unwrap(), sb.var.to_vec1::<f32>().unwrap());
        }
    }
}
