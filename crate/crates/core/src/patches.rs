//! Teacher-ranked pools of real-image crops and median-centred selection.

use std::cmp::Ordering as CmpOrdering;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_resized_crop, CropBox};
use crate::data::LabeledDataset;
use crate::error::{DeltError, Result};
use crate::relabel::softmax_rows;
use crate::teacher::TeacherSnapshot;
use crate::types::{DatasetProfile, ImageBuffer, Ordering, PatchRef, Selection};

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPatch {
    pub source_id: usize,
    pub crop: CropBox,
    /// Crop resized to the profile resolution, normalized.
    pub image: ImageBuffer,
    pub class_id: usize,
    /// Teacher softmax probability of `class_id`; `NaN` until scored.
    pub score: f32,
    /// Position in the ascending score order; `usize::MAX` until scored.
    pub rank: usize,
}

impl RankedPatch {
    pub fn patch_ref(&self) -> PatchRef {
        PatchRef {
            source_id: self.source_id,
            x: self.crop.x,
            y: self.crop.y,
            w: self.crop.w,
            h: self.crop.h,
        }
    }

    fn tie_key(&self) -> (usize, CropBox) {
        (self.source_id, self.crop)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPool {
    pub class_id: usize,
    pub patches: Vec<RankedPatch>,
    pub scored: bool,
}

impl PatchPool {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Crops per image giving a pool of at least `4 * ipc` patches.
pub fn default_crops_per_image(class_size: usize, ipc: usize) -> usize {
    if class_size == 0 {
        return 1;
    }
    (4 * ipc).div_ceil(class_size).max(1)
}

fn class_seed(seed: u64, class_id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (class_id as u64).wrapping_add(0xC1A5_5EED)
}

/// Draws `crops_per_image` random-resized crops from every training image
/// of `class_id` (ascending image order), resized to the profile resolution.
pub fn build_pool(
    train: &LabeledDataset,
    class_id: usize,
    crops_per_image: usize,
    crop_scale: (f32, f32),
    profile: &DatasetProfile,
    seed: u64,
) -> Result<PatchPool> {
    let indices = train.class_indices(class_id);
    if indices.is_empty() {
        return Err(DeltError::EmptyClass(class_id));
    }
    if !(0.0 < crop_scale.0 && crop_scale.0 <= crop_scale.1 && crop_scale.1 <= 1.0) {
        return Err(DeltError::Config(format!("invalid crop scale {crop_scale:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, class_id));
    let mut patches = Vec::with_capacity(indices.len() * crops_per_image);
    for &src in &indices {
        let im = &train.images[src];
        for _ in 0..crops_per_image {
            let crop = sample_resized_crop(&mut rng, im.height, im.width, crop_scale);
            patches.push(RankedPatch {
                source_id: src,
                crop,
                image: im.crop_normalized(crop, profile)?,
                class_id,
                score: f32::NAN,
                rank: usize::MAX,
            });
        }
    }
    Ok(PatchPool {
        class_id,
        patches,
        scored: false,
    })
}

/// Total order used for ranking: score ascending, then (source id, crop box).
pub fn rank_cmp(a: &RankedPatch, b: &RankedPatch) -> CmpOrdering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| a.tie_key().cmp(&b.tie_key()))
}

/// Scores every patch by the teacher's probability of the pool's class and
/// sorts ascending.
pub fn score_pool(pool: PatchPool, teacher: &TeacherSnapshot) -> Result<PatchPool> {
    let class_id = pool.class_id;
    score_pool_as(pool, teacher, class_id)
}

/// Like [`score_pool`] but reads the probability of `teacher_class`, for a
/// teacher whose label space differs (e.g. a subset inheriting rankings from
/// a 1000-class model).
pub fn score_pool_as(mut pool: PatchPool, teacher: &TeacherSnapshot, teacher_class: usize) -> Result<PatchPool> {
    if teacher_class >= teacher.num_classes() {
        return Err(DeltError::Validation(format!(
            "teacher has {} classes, cannot score class {teacher_class}",
            teacher.num_classes()
        )));
    }
    let images: Vec<&ImageBuffer> = pool.patches.iter().map(|p| &p.image).collect();
    let (logits, _) = teacher.infer(&images, 256)?;
    let probs = softmax_rows(&logits);
    for (p, row) in pool.patches.iter_mut().zip(&probs) {
        p.score = row[teacher_class];
    }
    Ok(rank_pool(pool))
}

/// Sorts patches whose scores are already set and assigns ranks.
pub fn rank_pool(mut pool: PatchPool) -> PatchPool {
    pool.patches.sort_by(rank_cmp);
    for (i, p) in pool.patches.iter_mut().enumerate() {
        p.rank = i;
    }
    pool.scored = true;
    pool
}

/// Ranks chosen by `selection`, in median-out order: by distance to the
/// pool median `P / 2`, lower rank first on ties.
fn selected_ranks(pool_size: usize, ipc: usize, selection: Selection) -> Vec<usize> {
    let m = pool_size / 2;
    let mut ranks: Vec<usize> = match selection {
        Selection::Median => {
            let mut seq = Vec::with_capacity(ipc);
            seq.push(m);
            let mut d = 1;
            while seq.len() < ipc {
                if d <= m {
                    seq.push(m - d);
                }
                if seq.len() < ipc && m + d < pool_size {
                    seq.push(m + d);
                }
                d += 1;
            }
            seq.truncate(ipc);
            return seq;
        }
        Selection::Lowest => (0..ipc).collect(),
        Selection::Highest => (pool_size - ipc..pool_size).collect(),
    };
    ranks.sort_by_key(|&r| (r.abs_diff(m), r));
    ranks
}

/// Picks `ipc` patches from a scored pool and orders them for initialization.
pub fn select_and_order(
    pool: &PatchPool,
    ipc: usize,
    selection: Selection,
    ordering: Ordering,
    seed: u64,
) -> Result<Vec<RankedPatch>> {
    if !pool.scored {
        return Err(DeltError::Validation(format!(
            "pool for class {} has not been scored",
            pool.class_id
        )));
    }
    let p = pool.len();
    if p < ipc {
        return Err(DeltError::PoolExhausted {
            class_id: pool.class_id,
            available: p,
            requested: ipc,
        });
    }
    let mut ranks = selected_ranks(p, ipc, selection);
    match ordering {
        Ordering::MedianOut => {}
        Ordering::Ascending => ranks.sort_unstable(),
        Ordering::Descending => ranks.sort_unstable_by(|a, b| b.cmp(a)),
        Ordering::Random => {
            ranks.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, pool.class_id));
            ranks.shuffle(&mut rng);
        }
    }
    Ok(ranks.into_iter().map(|r| pool.patches[r].clone()).collect())
}

#[derive(Serialize, Deserialize)]
struct CachedPatch {
    source_id: usize,
    crop: CropBox,
    score: f32,
}

#[derive(Serialize, Deserialize)]
struct PoolCache {
    class_id: usize,
    teacher: String,
    patches: Vec<CachedPatch>,
}

/// Persists a scored pool (crop boxes and scores, keyed by teacher fingerprint).
pub fn save_pool_cache(pool: &PatchPool, teacher_fingerprint: &str, path: &Path) -> Result<()> {
    let cache = PoolCache {
        class_id: pool.class_id,
        teacher: teacher_fingerprint.to_string(),
        patches: pool
            .patches
            .iter()
            .map(|p| CachedPatch {
                source_id: p.source_id,
                crop: p.crop,
                score: p.score,
            })
            .collect(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(&cache)?)?;
    Ok(())
}

/// Restores a cached pool; returns `None` when the cache belongs to a
/// different teacher or class.
pub fn load_pool_cache(
    path: &Path,
    train: &LabeledDataset,
    profile: &DatasetProfile,
    class_id: usize,
    teacher_fingerprint: &str,
) -> Result<Option<PatchPool>> {
    if !path.is_file() {
        return Ok(None);
    }
    let cache: PoolCache = serde_json::from_slice(&fs::read(path)?)?;
    if cache.class_id != class_id || cache.teacher != teacher_fingerprint {
        return Ok(None);
    }
    let mut patches = Vec::with_capacity(cache.patches.len());
    for (rank, c) in cache.patches.into_iter().enumerate() {
        let im = train
            .images
            .get(c.source_id)
            .ok_or_else(|| DeltError::Integrity(format!("cached source {} missing", c.source_id)))?;
        patches.push(RankedPatch {
            source_id: c.source_id,
            crop: c.crop,
            image: im.crop_normalized(c.crop, profile)?,
            class_id,
            score: c.score,
            rank,
        });
    }
    Ok(Some(PatchPool {
        class_id,
        patches,
        scored: true,
    }))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{LabeledDataset, RawImage};

    /// A scored pool with the given ascending scores and dummy images.
    pub(crate) fn scored_pool(scores: &[f32]) -> PatchPool {
        let patches = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| RankedPatch {
                source_id: i,
                crop: CropBox { x: 0, y: 0, w: 1, h: 1 },
                image: ImageBuffer::zeros(1, 1, 1),
                class_id: 0,
                score: s,
                rank: i,
            })
            .collect();
        PatchPool {
            class_id: 0,
            patches,
            scored: true,
        }
    }

    fn scores_of(v: &[RankedPatch]) -> Vec<f32> {
        v.iter().map(|p| p.score).collect()
    }

    #[test]
    fn median_out_worked_example() {
        let pool = scored_pool(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let got = select_and_order(&pool, 3, Selection::Median, Ordering::MedianOut, 0).unwrap();
        assert_eq!(got.iter().map(|p| p.rank).collect::<Vec<_>>(), vec![2, 1, 3]);
        assert_eq!(scores_of(&got), vec![0.3, 0.2, 0.4]);
    }

    #[test]
    fn full_pool_starts_at_median() {
        let pool = scored_pool(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let got = select_and_order(&pool, 6, Selection::Median, Ordering::MedianOut, 0).unwrap();
        assert_eq!(got[0].rank, 3);
        assert_eq!(got.iter().map(|p| p.rank).collect::<Vec<_>>(), vec![3, 2, 4, 1, 5, 0]);
    }

    #[test]
    fn highest_descending() {
        let pool = scored_pool(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let got = select_and_order(&pool, 2, Selection::Highest, Ordering::Descending, 0).unwrap();
        assert_eq!(scores_of(&got), vec![0.5, 0.4]);
    }

    #[test]
    fn exhausted_pool() {
        let pool = scored_pool(&[0.1, 0.2]);
        assert!(matches!(
            select_and_order(&pool, 3, Selection::Median, Ordering::MedianOut, 0),
            Err(DeltError::PoolExhausted { available: 2, requested: 3, .. })
        ));
    }

    fn toy_dataset() -> LabeledDataset {
        let images = (0..7)
            .map(|i| RawImage::new(1, 6, 6, (0..36).map(|p| (p * 7 + i * 31) as u8).collect()).unwrap())
            .collect();
        LabeledDataset::new(images, vec![0, 1, 0, 0, 1, 0, 0], 2).unwrap()
    }

    #[test]
    fn pool_counts_and_determinism() {
        let ds = toy_dataset();
        let profile = DatasetProfile { resolution: 4, ..DatasetProfile::digits() };
        let a = build_pool(&ds, 0, 4, (0.08, 1.0), &profile, 9).unwrap();
        assert_eq!(a.len(), 20);
        let b = build_pool(&ds, 0, 4, (0.08, 1.0), &profile, 9).unwrap();
        let boxes = |p: &PatchPool| p.patches.iter().map(|x| (x.source_id, x.crop)).collect::<Vec<_>>();
        assert_eq!(boxes(&a), boxes(&b));
        let full = build_pool(&ds, 1, 3, (1.0, 1.0), &profile, 9).unwrap();
        assert!(full.patches.iter().all(|p| p.crop == CropBox { x: 0, y: 0, w: 6, h: 6 }));
        assert!(matches!(
            build_pool(&LabeledDataset::new(vec![], vec![], 2).unwrap(), 0, 1, (0.5, 1.0), &profile, 0),
            Err(DeltError::EmptyClass(0))
        ));
    }

    #[test]
    fn default_pool_has_headroom() {
        assert_eq!(default_crops_per_image(5, 10), 8);
        assert_eq!(default_crops_per_image(1300, 50), 1);
        assert!(5 * default_crops_per_image(5, 10) >= 40);
    }
}
