//! Synthesis loop: synthetic images optimized against a frozen teacher with
//! cross-entropy plus BN statistic matching, sub-batches joining on schedule.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{interp_matrix, sample_resized_crop};
use crate::data::LabeledDataset;
use crate::error::{DeltError, Result};
use crate::init::{gaussian_init, mosaic_batch};
use crate::nn::{BatchStats, RunningStats};
use crate::patches::{build_pool, default_crops_per_image, score_pool, select_and_order};
use crate::schedule::EarlyLateSchedule;
use crate::teacher::{cosine_lr, TeacherSnapshot};
use crate::types::{
    DatasetProfile, DistilledDataset, ImageBuffer, InitMode, InitProvenance, RecoveryConfig, RunMetadata,
    SyntheticSample,
};

const ADAM_EPS: f64 = 1e-8;

/// Sum over layers of `||mu_l - RM_l||_2 + ||var_l - RV_l||_2`.
pub fn bn_regularizer(batch: &[BatchStats], running: &[RunningStats]) -> Result<Tensor> {
    if batch.len() != running.len() {
        return Err(DeltError::BnDimension {
            layer: batch.len().min(running.len()),
            detail: format!("{} batch-stat layers vs {} running-stat layers", batch.len(), running.len()),
        });
    }
    let first = batch
        .first()
        .ok_or_else(|| DeltError::Shape("no BN layers to regularize".into()))?;
    let mut total = Tensor::zeros((), first.mean.dtype(), first.mean.device())?;
    for (l, (b, r)) in batch.iter().zip(running).enumerate() {
        for (what, x, y) in [("mean", &b.mean, &r.mean), ("variance", &b.var, &r.var)] {
            if x.dims() != y.dims() {
                return Err(DeltError::BnDimension {
                    layer: l,
                    detail: format!("{what} {:?} vs {:?}", x.dims(), y.dims()),
                });
            }
            let y = y.to_dtype(x.dtype())?;
            total = (total + (x - y)?.sqr()?.sum_all()?.sqrt()?)?;
        }
    }
    Ok(total)
}

/// Per-sample cross-entropy of `logits` against hard `labels`.
pub fn per_sample_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(log_p.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?)
}

/// Mean cross-entropy plus `alpha_bn * bn_value`.
pub fn recovery_loss(logits: &Tensor, labels: &Tensor, bn_value: &Tensor, alpha_bn: f64) -> Result<Tensor> {
    let (rows, _) = logits.dims2()?;
    if labels.dims1()? != rows {
        return Err(DeltError::Shape(format!("{rows} logit rows but {} labels", labels.dims1()?)));
    }
    let ce = per_sample_cross_entropy(logits, labels)?.mean_all()?;
    if alpha_bn == 0.0 {
        return Ok(ce);
    }
    Ok((ce + (bn_value.to_dtype(logits.dtype())? * alpha_bn)?)?)
}

/// Initial contents of one synthetic image slot.
#[derive(Clone, Debug)]
pub struct SlotInit {
    pub class_id: usize,
    pub ipc_index: usize,
    pub image: ImageBuffer,
    pub provenance: InitProvenance,
}

/// One sequential optimization stream over a group of classes.
#[derive(Clone, Debug)]
pub struct RecoveryJob {
    pub group: usize,
    pub slots: Vec<SlotInit>,
    pub schedule: EarlyLateSchedule,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub group: usize,
    pub iteration: usize,
    pub active_subbatches: Vec<usize>,
    pub active_images: usize,
    pub loss: f64,
    pub ce: f64,
    pub bn: f64,
    /// Mean cross-entropy of the sub-batch 0 images.
    pub ce_first_subbatch: f64,
    pub wall_ms: f64,
}

pub fn write_iteration_log(records: &[IterationRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_iteration_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Classes per job: up to `synthesis_batch_size / k`, assigned round-robin.
pub fn group_classes(num_classes: usize, config: &RecoveryConfig) -> Vec<Vec<usize>> {
    let per_group = (config.synthesis_batch_size / config.subbatch_size().max(1)).max(1);
    let groups = num_classes.div_ceil(per_group).max(1);
    (0..groups)
        .map(|g| (g..num_classes).step_by(groups).collect())
        .collect()
}

/// Initial images for every (class, ipc index) slot.
///
/// Real-patch mode builds and scores a crop pool per class, selects
/// `ipc * grid^2` patches and splices them in order, so ipc index 0 (the
/// longest-trained sub-batch) receives the first patches of the ordering.
pub fn initialize_slots(
    train: &LabeledDataset,
    teacher: &TeacherSnapshot,
    profile: &DatasetProfile,
    config: &RecoveryConfig,
) -> Result<Vec<SlotInit>> {
    let mut slots = Vec::with_capacity(profile.num_classes * config.ipc);
    for class_id in 0..profile.num_classes {
        match config.init_mode {
            InitMode::Gaussian => {
                for ipc_index in 0..config.ipc {
                    let seed = config.seed ^ ((class_id as u64) << 32 | ipc_index as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
                    slots.push(SlotInit {
                        class_id,
                        ipc_index,
                        image: gaussian_init(profile, seed),
                        provenance: InitProvenance::Gaussian,
                    });
                }
            }
            InitMode::RealPatch => {
                let needed = config.ipc * config.mosaic_grid * config.mosaic_grid;
                let class_size = train.class_indices(class_id).len();
                let pool = build_pool(
                    train,
                    class_id,
                    default_crops_per_image(class_size, needed),
                    (config.crop_scale_min, config.crop_scale_max),
                    profile,
                    config.seed,
                )?;
                let pool = score_pool(pool, teacher)?;
                let chosen = select_and_order(&pool, needed, config.selection, config.ordering, config.seed)?;
                for (ipc_index, (image, provenance)) in mosaic_batch(&chosen, config.ipc, config.mosaic_grid, profile)?
                    .into_iter()
                    .enumerate()
                {
                    slots.push(SlotInit {
                        class_id,
                        ipc_index,
                        image,
                        provenance,
                    });
                }
            }
        }
    }
    Ok(slots)
}

/// Splits the initialized slots into per-group jobs.
pub fn make_jobs(slots: Vec<SlotInit>, num_classes: usize, config: &RecoveryConfig) -> Result<Vec<RecoveryJob>> {
    let schedule = EarlyLateSchedule::from_config(config)?;
    let groups = group_classes(num_classes, config);
    let mut jobs: Vec<RecoveryJob> = groups
        .iter()
        .enumerate()
        .map(|(g, _)| RecoveryJob {
            group: g,
            slots: Vec::new(),
            schedule: schedule.clone(),
            seed: config.seed.wrapping_add((g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        })
        .collect();
    let mut owner = vec![usize::MAX; num_classes];
    for (g, classes) in groups.iter().enumerate() {
        for &c in classes {
            owner[c] = g;
        }
    }
    for s in slots {
        let g = *owner
            .get(s.class_id)
            .ok_or_else(|| DeltError::Validation(format!("slot class {} out of range", s.class_id)))?;
        jobs[g].slots.push(s);
    }
    Ok(jobs)
}

struct Slot {
    init: SlotInit,
    subbatch: usize,
    join: usize,
    length: usize,
    data: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
    steps: usize,
}

impl Slot {
    fn adam_step(&mut self, grad: &[f32], lr: f64, beta1: f64, beta2: f64) {
        self.steps += 1;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for i in 0..self.data.len() {
            let g = grad[i] as f64;
            let m = beta1 * self.m[i] as f64 + (1.0 - beta1) * g;
            let v = beta2 * self.v[i] as f64 + (1.0 - beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            self.data[i] = (self.data[i] as f64 - update) as f32;
        }
    }
}

/// Sizes of `ceil(n / cap)` near-equal micro-batches, each of at least 2.
fn micro_batch_sizes(n: usize, cap: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut count = n.div_ceil(cap.max(1));
    if n >= 2 {
        count = count.min(n / 2);
    }
    let count = count.max(1);
    (0..count).map(|i| n / count + usize::from(i < n % count)).collect()
}

struct Augmenter {
    resolution: usize,
    scale: (f32, f32),
}

impl Augmenter {
    /// Interpolation matrices `(Ry, Rx^T)` of a fresh random-resized crop.
    fn sample(&self, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let r = self.resolution;
        let region = sample_resized_crop(rng, r, r, self.scale);
        let ry = Tensor::from_vec(interp_matrix(r, region.y, region.h, r), (r, r), device)?.to_dtype(dtype)?;
        let rx_t = Tensor::from_vec(interp_matrix(r, region.x, region.w, r), (r, r), device)?
            .t()?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok((ry, rx_t))
    }
}

fn crop(x: &Tensor, ry: &Tensor, rx_t: &Tensor) -> Result<Tensor> {
    Ok(ry.broadcast_matmul(&x.broadcast_matmul(rx_t)?)?)
}

struct StepOutcome {
    loss: f64,
    ce: f64,
    bn: f64,
    ce_first: f64,
    first_count: usize,
}

/// One gradient iteration over the given active slots (already ordered).
fn iterate(
    slots: &mut [Slot],
    active: &[usize],
    t: usize,
    teacher: &TeacherSnapshot,
    running: &[RunningStats],
    config: &RecoveryConfig,
    aug: &Augmenter,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let device = teacher.device().clone();
    let dtype = teacher.dtype();
    let (ry, rx_t) = aug.sample(rng, dtype, &device)?;
    let (c, h, w) = slots[active[0]].init.image.shape();
    let mut out = StepOutcome {
        loss: 0.0,
        ce: 0.0,
        bn: 0.0,
        ce_first: 0.0,
        first_count: 0,
    };
    let mut offset = 0;
    let mut grads: Vec<(usize, Vec<f32>)> = Vec::with_capacity(active.len());
    for size in micro_batch_sizes(active.len(), config.synthesis_batch_size) {
        let members = &active[offset..offset + size];
        offset += size;
        let mut flat = Vec::with_capacity(size * c * h * w);
        for &i in members {
            flat.extend_from_slice(&slots[i].data);
        }
        let x = Var::from_tensor(&Tensor::from_vec(flat, (size, c, h, w), &device)?.to_dtype(dtype)?)?;
        let labels: Vec<u32> = members.iter().map(|&i| slots[i].init.class_id as u32).collect();
        let labels = Tensor::new(labels.as_slice(), &device)?;
        let fwd = teacher.forward(&crop(x.as_tensor(), &ry, &rx_t)?, true)?;
        let ce_each = per_sample_cross_entropy(&fwd.logits, &labels)?;
        let ce = ce_each.mean_all()?;
        let bn = bn_regularizer(&fwd.bn_stats, running)?;
        let alpha = config.alpha_bn as f64;
        let loss = if alpha == 0.0 { ce.clone() } else { (&ce + (&bn * alpha)?)? };
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            return Err(DeltError::NonFiniteLoss(t));
        }
        let weight = size as f64 / active.len() as f64;
        out.loss += weight * loss_value;
        out.ce += weight * ce.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        out.bn += weight * bn.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let ce_rows = ce_each.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for (&i, ce_i) in members.iter().zip(ce_rows) {
            if slots[i].subbatch == 0 {
                out.ce_first += ce_i;
                out.first_count += 1;
            }
        }
        let g = loss.backward()?;
        let g = g
            .get(x.as_tensor())
            .ok_or_else(|| DeltError::Shape("no gradient reached the synthetic images".into()))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let per = c * h * w;
        for (j, &i) in members.iter().enumerate() {
            grads.push((i, g[j * per..(j + 1) * per].to_vec()));
        }
    }
    let (b1, b2) = (config.adam_beta1 as f64, config.adam_beta2 as f64);
    for (i, g) in grads {
        let s = &mut slots[i];
        let lr = cosine_lr(config.learning_rate as f64, t - s.join, s.length);
        s.adam_step(&g, lr, b1, b2);
    }
    if out.first_count > 0 {
        out.ce_first /= out.first_count as f64;
    }
    Ok(out)
}

/// Result of one job: samples in (class, ipc index) order and the iteration log.
pub struct RecoveryOutput {
    pub samples: Vec<SyntheticSample>,
    pub log: Vec<IterationRecord>,
}

fn check_job(job: &RecoveryJob, teacher: &TeacherSnapshot) -> Result<()> {
    if job.slots.is_empty() {
        return Err(DeltError::Validation(format!("job {} has no slots", job.group)));
    }
    let first = job.slots.iter().filter(|s| job.schedule.subbatch_of(s.ipc_index) == 0).count();
    if first < 2 {
        return Err(DeltError::Validation(format!(
            "job {} starts with {first} image(s); batch statistics need at least 2",
            job.group
        )));
    }
    let spec = teacher.spec();
    for s in &job.slots {
        if s.image.shape() != (spec.in_channels, spec.resolution, spec.resolution) {
            return Err(DeltError::Shape(format!(
                "slot (class {}, ipc {}) is {:?}, teacher expects {}x{}x{}",
                s.class_id,
                s.ipc_index,
                s.image.shape(),
                spec.in_channels,
                spec.resolution,
                spec.resolution
            )));
        }
        if s.class_id >= teacher.num_classes() {
            return Err(DeltError::Validation(format!("class {} unknown to the teacher", s.class_id)));
        }
    }
    Ok(())
}

fn make_slots(job: &RecoveryJob, all_from_start: bool) -> Vec<Slot> {
    let sched = &job.schedule;
    let mut slots: Vec<Slot> = job
        .slots
        .iter()
        .map(|init| {
            let (subbatch, join, length) = if all_from_start {
                (0, 0, sched.max_iterations)
            } else {
                let b = sched.subbatch_of(init.ipc_index);
                let e = sched.entries[b];
                (b, e.start_iteration, e.length)
            };
            Slot {
                init: init.clone(),
                subbatch,
                join,
                length,
                data: Vec::new(),
                m: Vec::new(),
                v: Vec::new(),
                steps: 0,
            }
        })
        .collect();
    // batch order interleaves classes so micro-batch statistics span them
    slots.sort_by_key(|s| (s.init.ipc_index, s.init.class_id));
    slots
}

fn activate(slot: &mut Slot) {
    slot.data = slot.init.image.data().to_vec();
    slot.m = vec![0.0; slot.data.len()];
    slot.v = vec![0.0; slot.data.len()];
}

fn finish(slots: Vec<Slot>, log: Vec<IterationRecord>) -> Result<RecoveryOutput> {
    let mut samples = slots
        .into_iter()
        .map(|s| {
            let (c, h, w) = s.init.image.shape();
            Ok(SyntheticSample {
                image: ImageBuffer::new(c, h, w, s.data)?,
                class_id: s.init.class_id,
                ipc_index: s.init.ipc_index,
                subbatch_index: s.subbatch,
                iterations_trained: s.steps,
                init_provenance: s.init.provenance,
                soft_label: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    samples.sort_by_key(|s| (s.class_id, s.ipc_index));
    Ok(RecoveryOutput { samples, log })
}

fn run_loop(job: &RecoveryJob, teacher: &TeacherSnapshot, config: &RecoveryConfig, all_from_start: bool) -> Result<RecoveryOutput> {
    check_job(job, teacher)?;
    let sched = &job.schedule;
    let running = teacher.running_stats();
    let aug = Augmenter {
        resolution: teacher.spec().resolution,
        scale: (config.crop_scale_min, config.crop_scale_max),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut slots = make_slots(job, all_from_start);
    let mut log = Vec::with_capacity(sched.max_iterations);
    for t in 0..sched.max_iterations {
        let started = Instant::now();
        for s in slots.iter_mut().filter(|s| s.join == t) {
            activate(s);
        }
        let active: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].join <= t).collect();
        let mut subbatches: Vec<usize> = active.iter().map(|&i| slots[i].subbatch).collect();
        subbatches.sort_unstable();
        subbatches.dedup();
        let o = iterate(&mut slots, &active, t, teacher, &running, config, &aug, &mut rng)?;
        log.push(IterationRecord {
            group: job.group,
            iteration: t,
            active_subbatches: subbatches,
            active_images: active.len(),
            loss: o.loss,
            ce: o.ce,
            bn: o.bn,
            ce_first_subbatch: o.ce_first,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if t % 100 == 0 || t + 1 == sched.max_iterations {
            log::debug!("group {} iteration {t}: loss {:.4} ({} images)", job.group, o.loss, active.len());
        }
    }
    finish(slots, log)
}

/// EarlyLate recovery: sub-batch `b` joins at `b * RI` with fresh optimizer
/// moments and a cosine learning rate over its own remaining length.
pub fn run_recovery(job: &RecoveryJob, teacher: &TeacherSnapshot, config: &RecoveryConfig) -> Result<RecoveryOutput> {
    run_loop(job, teacher, config, false)
}

/// Constant-iteration recovery: every slot is optimized for all `MI`
/// iterations from the start.
pub fn run_baseline(job: &RecoveryJob, teacher: &TeacherSnapshot, config: &RecoveryConfig) -> Result<RecoveryOutput> {
    run_loop(job, teacher, config, true)
}

#[derive(Clone, Debug)]
pub struct DistillOptions {
    pub run_id: String,
    pub workers: usize,
    /// Use the constant-iteration loop (every slot trains `MI` iterations).
    pub baseline: bool,
    pub effective_config: serde_json::Value,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            workers: 1,
            baseline: false,
            effective_config: serde_json::Value::Null,
        }
    }
}

/// Runs every job (up to `workers` concurrently) and assembles the dataset.
pub fn distill_slots(
    slots: Vec<SlotInit>,
    teacher: &TeacherSnapshot,
    profile: &DatasetProfile,
    config: &RecoveryConfig,
    options: &DistillOptions,
) -> Result<(DistilledDataset, Vec<IterationRecord>)> {
    config.validate()?;
    profile.validate()?;
    if teacher.num_classes() != profile.num_classes {
        return Err(DeltError::Validation(format!(
            "teacher has {} classes, profile {}",
            teacher.num_classes(),
            profile.num_classes
        )));
    }
    let mut config = config.clone();
    if options.baseline {
        config.num_subbatches = 1;
    }
    let jobs = make_jobs(slots, profile.num_classes, &config)?;
    let run = |job: &RecoveryJob| {
        if options.baseline {
            run_baseline(job, teacher, &config)
        } else {
            run_recovery(job, teacher, &config)
        }
    };
    let mut outputs: Vec<RecoveryOutput> = Vec::with_capacity(jobs.len());
    for wave in jobs.chunks(options.workers.max(1)) {
        if wave.len() == 1 {
            outputs.push(run(&wave[0])?);
            continue;
        }
        let results: Vec<Result<RecoveryOutput>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave.iter().map(|job| scope.spawn(|| run(job))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(DeltError::Data("recovery worker panicked".into()))))
                .collect()
        });
        for r in results {
            outputs.push(r?);
        }
    }
    let mut samples = Vec::new();
    let mut log = Vec::new();
    for o in outputs {
        samples.extend(o.samples);
        log.extend(o.log);
    }
    let schedule = EarlyLateSchedule::from_config(&config)?;
    let mut dataset = DistilledDataset {
        profile: profile.clone(),
        samples,
        run_metadata: RunMetadata {
            run_id: options.run_id.clone(),
            recovery: config,
            effective_config: options.effective_config.clone(),
            total_image_iterations: schedule.total_image_iterations() * profile.num_classes as u64,
        },
    };
    dataset.sort_samples();
    dataset.validate()?;
    Ok((dataset, log))
}

/// Initializes slots from `train` and runs recovery.
pub fn distill(
    train: &LabeledDataset,
    teacher: &TeacherSnapshot,
    profile: &DatasetProfile,
    config: &RecoveryConfig,
    options: &DistillOptions,
) -> Result<(DistilledDataset, Vec<IterationRecord>)> {
    config.validate()?;
    let slots = initialize_slots(train, teacher, profile, config)?;
    distill_slots(slots, teacher, profile, config, options)
}

/// Image-iterations recorded in a log.
pub fn logged_image_iterations(log: &[IterationRecord]) -> u64 {
    log.iter().map(|r| r.active_images as u64).sum()
}
