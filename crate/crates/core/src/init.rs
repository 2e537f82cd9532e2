//! Initial synthetic images: patch mosaics or Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::{resize_crop_planar, CropBox};
use crate::error::{DeltError, Result};
use crate::patches::RankedPatch;
use crate::types::{DatasetProfile, ImageBuffer, InitProvenance};

/// Splices `grid * grid` patches (row-major, in the given order) into one
/// canvas at profile resolution.
pub fn mosaic_init(patches: &[RankedPatch], grid: usize, profile: &DatasetProfile) -> Result<ImageBuffer> {
    if grid == 0 {
        return Err(DeltError::Config("mosaic grid must be >= 1".into()));
    }
    let cells = grid * grid;
    if patches.len() < cells {
        return Err(DeltError::Validation(format!(
            "{grid}x{grid} mosaic needs {cells} patches, got {}",
            patches.len()
        )));
    }
    let r = profile.resolution;
    if r < grid {
        return Err(DeltError::Config(format!("resolution {r} too small for a {grid}x{grid} grid")));
    }
    let c = profile.channels();
    let mut canvas = ImageBuffer::zeros(c, r, r);
    let edge = |i: usize| i * r / grid;
    for (i, patch) in patches[..cells].iter().enumerate() {
        let (pc, ph, pw) = patch.image.shape();
        if pc != c {
            return Err(DeltError::Shape(format!("{pc}-channel patch for a {c}-channel profile")));
        }
        let (row, col) = (i / grid, i % grid);
        let (y0, y1, x0, x1) = (edge(row), edge(row + 1), edge(col), edge(col + 1));
        let (ch, cw) = (y1 - y0, x1 - x0);
        let cell = resize_crop_planar(patch.image.data(), c, ph, pw, CropBox { x: 0, y: 0, w: pw, h: ph }, ch, cw);
        for k in 0..c {
            for y in 0..ch {
                for x in 0..cw {
                    canvas.set(k, y0 + y, x0 + x, cell[(k * ch + y) * cw + x]);
                }
            }
        }
    }
    Ok(canvas)
}

/// Builds `count` mosaics, each consuming the next `grid * grid` patches.
pub fn mosaic_batch(
    patches: &[RankedPatch],
    count: usize,
    grid: usize,
    profile: &DatasetProfile,
) -> Result<Vec<(ImageBuffer, InitProvenance)>> {
    let per = grid * grid;
    if patches.len() < count * per {
        return Err(DeltError::Validation(format!(
            "{count} mosaics of {per} patches need {} patches, got {}",
            count * per,
            patches.len()
        )));
    }
    patches
        .chunks(per.max(1))
        .take(count)
        .map(|group| {
            let image = mosaic_init(group, grid, profile)?;
            let refs = group.iter().map(RankedPatch::patch_ref).collect();
            Ok((image, InitProvenance::Patches(refs)))
        })
        .collect()
}

/// I.i.d. standard normal values in normalized space.
pub fn gaussian_init(profile: &DatasetProfile, seed: u64) -> ImageBuffer {
    let (c, r) = (profile.channels(), profile.resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * r * r).map(|_| StandardNormal.sample(&mut rng)).collect();
    ImageBuffer::new(c, r, r, data).expect("shape matches by construction")
}
