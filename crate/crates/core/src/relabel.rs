//! Student post-training on distilled images with teacher soft labels.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{flip_horizontal, resize_crop_planar, sample_resized_crop, CropBox, Planar, RandAugment};
use crate::data::LabeledDataset;
use crate::error::{DeltError, Result};
use crate::nn::{NetSpec, Network};
use crate::teacher::{cosine_lr, stack_images, TeacherSnapshot};
use crate::types::{Augmentation, DatasetProfile, DistilledDataset, EvalConfig, ImageBuffer};

/// Row-wise softmax at temperature 1.
pub fn softmax_rows(logits: &[Vec<f32>]) -> Vec<Vec<f32>> {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exp: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
            let sum: f64 = exp.iter().sum();
            exp.iter().map(|&e| (e / sum) as f32).collect()
        })
        .collect()
}

/// Teacher class probabilities for each image.
pub fn soft_labels(teacher: &TeacherSnapshot, images: &[&ImageBuffer]) -> Result<Vec<Vec<f32>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let (logits, _) = teacher.infer(images, 256)?;
    Ok(softmax_rows(&logits))
}

/// Top-1 accuracy of `network` (running-statistics BN) on prepared views.
pub fn evaluate_top1(network: &Network, views: &[ImageBuffer], labels: &[usize]) -> Result<f64> {
    if views.is_empty() {
        return Err(DeltError::Data("empty evaluation split".into()));
    }
    if views.len() != labels.len() {
        return Err(DeltError::Shape(format!("{} views but {} labels", views.len(), labels.len())));
    }
    let mut correct = 0usize;
    for (part, part_labels) in views.chunks(256).zip(labels.chunks(256)) {
        let refs: Vec<&ImageBuffer> = part.iter().collect();
        let x = stack_images(&refs, network.dtype(), network.device())?;
        let pred = network.forward(&x, false)?.logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(part_labels).filter(|(&p, &l)| p as usize == l).count();
    }
    Ok(correct as f64 / views.len() as f64)
}

/// Images a student is post-trained on.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Short description recorded with results.
    pub source: String,
}

impl TrainSet {
    pub fn from_distilled(dataset: &DistilledDataset) -> Self {
        Self {
            images: dataset.samples.iter().map(|s| s.image.clone()).collect(),
            labels: dataset.samples.iter().map(|s| s.class_id).collect(),
            num_classes: dataset.profile.num_classes,
            source: format!("distilled:{}", dataset.run_metadata.run_id),
        }
    }

    /// `ipc` random real images per class, as evaluation views.
    pub fn random_real(train: &LabeledDataset, ipc: usize, profile: &DatasetProfile, seed: u64) -> Result<Self> {
        let subset = train.random_per_class(ipc, seed)?;
        Ok(Self {
            images: subset.eval_views(profile)?,
            labels: subset.labels.clone(),
            num_classes: train.num_classes,
            source: format!("random_real:seed{seed}"),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images_per_class(&self) -> usize {
        self.len() / self.num_classes.max(1)
    }
}

/// One post-training outcome, written as a line of JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub student: String,
    pub source: String,
    pub ipc: usize,
    pub epochs: usize,
    pub seed: u64,
    pub top1: f64,
    pub wall_seconds: f64,
}

pub fn append_result(path: &Path, result: &EvalResult) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(result)?)?;
    Ok(())
}

struct ViewAugmenter {
    rand_augment: Option<RandAugment>,
    crop: Option<(f32, f32)>,
    flip: bool,
}

impl ViewAugmenter {
    fn new(config: &EvalConfig, profile: &DatasetProfile) -> Self {
        let has = |a: Augmentation| config.augmentations.contains(&a);
        Self {
            rand_augment: has(Augmentation::RandAugment).then(|| RandAugment {
                num_ops: profile.randaugment_n.round().max(0.0) as usize,
                magnitude: profile.randaugment_m as f64,
                magnitude_std: profile.randaugment_mstd as f64,
                fill: profile.channel_mean.clone(),
            }),
            crop: has(Augmentation::RandomResizedCrop).then_some((config.crop_scale_min, config.crop_scale_max)),
            flip: has(Augmentation::RandomHorizontalFlip),
        }
    }

    fn view<R: Rng>(&self, rng: &mut R, image: &ImageBuffer, profile: &DatasetProfile) -> Result<ImageBuffer> {
        let (c, h, w) = image.shape();
        let plane = h * w;
        let mut data: Vec<f32> = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * profile.channel_std[i / plane] + profile.channel_mean[i / plane])
            .collect();
        if let Some(scale) = self.crop {
            let region: CropBox = sample_resized_crop(rng, h, w, scale);
            data = resize_crop_planar(&data, c, h, w, region, h, w);
        }
        if self.flip && rng.random::<bool>() {
            flip_horizontal(&mut data, c, h, w);
        }
        if let Some(ra) = &self.rand_augment {
            data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            ra.apply(
                rng,
                &mut Planar {
                    data: &mut data,
                    channels: c,
                    height: h,
                    width: w,
                },
            );
        }
        for (i, v) in data.iter_mut().enumerate() {
            let ch = i / plane;
            *v = (*v - profile.channel_mean[ch]) / profile.channel_std[ch];
        }
        ImageBuffer::new(c, h, w, data)
    }
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Trains a fresh student on `train` against the teacher's soft labels of
/// each augmented view, then reports top-1 on the validation views.
///
/// Teacher and student see the identical view. Only the validation split is
/// used for scoring; the real training split is never touched here.
#[allow(clippy::too_many_arguments)]
pub fn post_train(
    train: &TrainSet,
    teacher: &TeacherSnapshot,
    student_spec: NetSpec,
    val_views: &[ImageBuffer],
    val_labels: &[usize],
    profile: &DatasetProfile,
    config: &EvalConfig,
    device: &Device,
) -> Result<(Network, EvalResult)> {
    let classes = profile.num_classes;
    if teacher.num_classes() != classes || student_spec.num_classes != classes || train.num_classes != classes {
        return Err(DeltError::Validation(format!(
            "class count mismatch: profile {classes}, teacher {}, student {}, data {}",
            teacher.num_classes(),
            student_spec.num_classes,
            train.num_classes
        )));
    }
    if train.len() < 2 {
        return Err(DeltError::Data("post-training needs at least 2 images".into()));
    }
    let started = Instant::now();
    let mut student = Network::init(student_spec, config.seed, DType::F32, device)?;
    let vars = student.make_trainable()?;
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate as f64,
            weight_decay: config.weight_decay as f64,
            ..Default::default()
        },
    )?;
    let aug = ViewAugmenter::new(config, profile);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e1a_be15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = batches(&order, config.batch_size).len();
    let total = steps_per_epoch * config.epochs;
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in batches(&order, config.batch_size) {
            let views = batch
                .iter()
                .map(|&i| aug.view(&mut rng, &train.images[i], profile))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageBuffer> = views.iter().collect();
            let x = stack_images(&refs, DType::F32, device)?;
            let target = candle_nn::ops::softmax_last_dim(&teacher.forward(&x.to_dtype(teacher.dtype())?, false)?.logits)?
                .to_dtype(DType::F32)?
                .detach();
            opt.set_learning_rate(cosine_lr(config.learning_rate as f64, step, total));
            let (out, updates) = student.forward_train(&x)?;
            let log_p = candle_nn::ops::log_softmax(&out.logits, D::Minus1)?;
            let loss = (target * log_p)?.sum(D::Minus1)?.mean_all()?.neg()?;
            opt.backward_step(&loss)?;
            student.apply_running_updates(updates);
            loss_sum += loss.to_scalar::<f32>()? as f64;
            step += 1;
        }
        log::debug!("post-train epoch {epoch}: loss {:.4}", loss_sum / steps_per_epoch as f64);
    }
    let student = student.frozen()?;
    let top1 = evaluate_top1(&student, val_views, val_labels)?;
    let result = EvalResult {
        student: student.spec().arch.to_string(),
        source: train.source.clone(),
        ipc: train.images_per_class(),
        epochs: config.epochs,
        seed: config.seed,
        top1,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((student, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[vec![1.0, 2.0, 3.0], vec![1000.0, 0.0, -1000.0]]);
        for row in &p {
            assert_relative_eq!(row.iter().sum::<f32>(), 1.0, epsilon = 1e-6);
        }
        assert!(p[0][2] > p[0][1] && p[0][1] > p[0][0]);
        assert_relative_eq!(p[1][0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn empty_split_is_an_error() {
        let spec = NetSpec::new("convnet1".parse().unwrap(), 1, 3, 4).with_width(2);
        let net = Network::init(spec, 0, DType::F32, &Device::Cpu).unwrap();
        assert!(evaluate_top1(&net, &[], &[]).is_err());
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let profile = DatasetProfile::digits();
        let tspec = NetSpec::new("convnet2".parse().unwrap(), 1, 10, 8).with_width(4);
        let teacher = TeacherSnapshot::new(&Network::init(tspec, 0, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let train = TrainSet {
            images: vec![ImageBuffer::zeros(1, 8, 8); 4],
            labels: vec![0, 1, 2, 3],
            num_classes: 10,
            source: "t".into(),
        };
        let student = NetSpec::new("convnet2".parse().unwrap(), 1, 5, 8).with_width(4);
        let err = post_train(
            &train,
            &teacher,
            student,
            &[ImageBuffer::zeros(1, 8, 8)],
            &[0],
            &profile,
            &EvalConfig { epochs: 1, ..Default::default() },
            &Device::Cpu,
        )
        .unwrap_err();
        assert!(err.to_string().contains("class count mismatch"), "{err}");
    }

    #[test]
    fn view_augmenter_preserves_shape_and_identity_without_ops() {
        let profile = DatasetProfile::digits();
        let cfg = EvalConfig { augmentations: vec![], ..Default::default() };
        let aug = ViewAugmenter::new(&cfg, &profile);
        let im = ImageBuffer::new(1, 8, 8, (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = aug.view(&mut rng, &im, &profile).unwrap();
        for (a, b) in out.data().iter().zip(im.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-5);
        }
        let full = ViewAugmenter::new(&EvalConfig::default(), &profile);
        assert_eq!(full.view(&mut rng, &im, &profile).unwrap().shape(), (1, 8, 8));
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let b = batches(&[0, 1, 2, 3, 4], 2);
        assert_eq!(b, vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(batches(&[0, 1, 2, 3], 2).len(), 2);
    }
}
