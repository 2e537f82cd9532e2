//! On-disk layout of a distilled dataset.
//!
//! ```text
//! <run>/meta.json
//! <run>/images/<class_id:05d>/<ipc_index:04d>.png
//! <run>/labels/<class_id:05d>.f32      (optional, LE f32, [ipc x num_classes])
//! ```
//!
//! The digest in `meta.json` is a SHA-256 over every image and label file
//! (sorted by relative path, each contributing its path and bytes) followed by
//! the canonical metadata document with the digest field removed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DeltError, Result};
use crate::types::{
    DatasetProfile, DistilledDataset, ImageBuffer, InitProvenance, RunMetadata, SyntheticSample,
};

const FORMAT: &str = "delt-distilled/1";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Serialize, Deserialize)]
struct SampleRecord {
    class_id: usize,
    ipc_index: usize,
    subbatch_index: usize,
    iterations_trained: usize,
    init_provenance: InitProvenance,
}

#[derive(Clone, Serialize, Deserialize)]
struct Meta {
    format: String,
    profile: DatasetProfile,
    run_metadata: RunMetadata,
    samples: Vec<SampleRecord>,
    has_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    digest: Option<String>,
}

pub fn image_rel_path(class_id: usize, ipc_index: usize) -> String {
    format!("images/{class_id:05}/{ipc_index:04}.png")
}

pub fn labels_rel_path(class_id: usize) -> String {
    format!("labels/{class_id:05}.f32")
}

fn encode_png(image: &ImageBuffer, profile: &DatasetProfile) -> Result<Vec<u8>> {
    let (c, h, w) = image.shape();
    let planar = image.to_pixels(profile);
    let plane = h * w;
    let mut interleaved = vec![0u8; c * plane];
    for ch in 0..c {
        for p in 0..plane {
            interleaved[p * c + ch] = planar[ch * plane + p];
        }
    }
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, interleaved).expect("sized buffer"),
        ),
        3 => DynamicImage::ImageRgb8(
            RgbImage::from_raw(w as u32, h as u32, interleaved).expect("sized buffer"),
        ),
        other => {
            return Err(DeltError::Validation(format!(
                "cannot encode {other}-channel image as PNG"
            )))
        }
    };
    let mut bytes = Vec::new();
    dynamic.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

fn decode_png(bytes: &[u8], profile: &DatasetProfile) -> Result<ImageBuffer> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let c = profile.channels();
    let interleaved = match c {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        other => {
            return Err(DeltError::Validation(format!(
                "cannot decode {other}-channel image"
            )))
        }
    };
    let plane = h * w;
    let mut planar = vec![0u8; c * plane];
    for ch in 0..c {
        for p in 0..plane {
            planar[ch * plane + p] = interleaved[p * c + ch];
        }
    }
    ImageBuffer::from_pixels(profile, h, w, &planar)
}

fn compute_digest(files: &BTreeMap<String, Vec<u8>>, meta: &Meta) -> Result<String> {
    let mut hasher = Sha256::new();
    for (path, bytes) in files {
        hasher.update((path.len() as u64).to_le_bytes());
        hasher.update(path.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    let canonical = serde_json::to_vec(&Meta {
        digest: None,
        ..meta.clone()
    })?;
    hasher.update(&canonical);
    Ok(hex::encode(hasher.finalize()))
}

fn render(dataset: &DistilledDataset) -> Result<(BTreeMap<String, Vec<u8>>, Meta)> {
    let mut files = BTreeMap::new();
    let mut ordered: Vec<&SyntheticSample> = dataset.samples.iter().collect();
    ordered.sort_by_key(|s| (s.class_id, s.ipc_index));

    let has_labels = !ordered.is_empty() && ordered.iter().all(|s| s.soft_label.is_some());
    let mut labels: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
    for s in &ordered {
        files.insert(
            image_rel_path(s.class_id, s.ipc_index),
            encode_png(&s.image, &dataset.profile)?,
        );
        if has_labels {
            let row = labels.entry(s.class_id).or_default();
            for v in s.soft_label.as_ref().expect("checked above") {
                row.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for (class_id, bytes) in labels {
        files.insert(labels_rel_path(class_id), bytes);
    }
    let mut meta = Meta {
        format: FORMAT.into(),
        profile: dataset.profile.clone(),
        run_metadata: dataset.run_metadata.clone(),
        samples: ordered
            .iter()
            .map(|s| SampleRecord {
                class_id: s.class_id,
                ipc_index: s.ipc_index,
                subbatch_index: s.subbatch_index,
                iterations_trained: s.iterations_trained,
                init_provenance: s.init_provenance.clone(),
            })
            .collect(),
        has_labels,
        digest: None,
    };
    meta.digest = Some(compute_digest(&files, &meta)?);
    Ok((files, meta))
}

/// Content digest the dataset would be saved under, without touching disk.
pub fn dataset_digest(dataset: &DistilledDataset) -> Result<String> {
    dataset.validate()?;
    let (_, meta) = render(dataset)?;
    Ok(meta.digest.expect("render sets digest"))
}

fn staging_dir(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    path.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Writes `dataset` under `path` and returns its manifest digest.
///
/// Files are staged in a sibling directory and moved into place at the end;
/// on failure the staging directory is removed and `path` is left untouched.
pub fn save_distilled(dataset: &DistilledDataset, path: &Path) -> Result<String> {
    dataset.validate()?;
    let (files, meta) = render(dataset)?;
    let digest = meta.digest.clone().expect("render sets digest");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let staging = staging_dir(path);
    let write = || -> Result<()> {
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        for (rel, bytes) in &files {
            let full = staging.join(rel);
            fs::create_dir_all(full.parent().expect("relative file has a parent"))?;
            fs::write(full, bytes)?;
        }
        fs::write(staging.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
        if path.exists() {
            fs::remove_dir_all(path)?;
        }
        fs::rename(&staging, path)?;
        Ok(())
    };
    if let Err(e) = write() {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    Ok(digest)
}

/// Reads a dataset written by [`save_distilled`], verifying its digest.
pub fn load_distilled(path: &Path) -> Result<DistilledDataset> {
    let meta_path = path.join(META_FILE);
    if !meta_path.is_file() {
        return Err(DeltError::NotADataset(path.to_path_buf()));
    }
    let meta: Meta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| DeltError::Integrity(format!("unreadable {META_FILE}: {e}")))?;
    if meta.format != FORMAT {
        return Err(DeltError::Integrity(format!("unsupported format `{}`", meta.format)));
    }
    let stored = meta
        .digest
        .clone()
        .ok_or_else(|| DeltError::Integrity("manifest has no digest".into()))?;

    let mut files = BTreeMap::new();
    let read = |rel: &str| -> Result<Vec<u8>> {
        fs::read(path.join(rel))
            .map_err(|e| DeltError::Integrity(format!("cannot read {rel}: {e}")))
    };
    for s in &meta.samples {
        let rel = image_rel_path(s.class_id, s.ipc_index);
        let bytes = read(&rel)?;
        files.insert(rel, bytes);
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = meta.samples.iter().map(|s| s.class_id).collect();
        c.dedup();
        c
    };
    if meta.has_labels {
        for &c in &classes {
            let rel = labels_rel_path(c);
            let bytes = read(&rel)?;
            files.insert(rel, bytes);
        }
    }
    let actual = compute_digest(&files, &meta)?;
    if actual != stored {
        return Err(DeltError::Integrity(format!(
            "digest mismatch: manifest {stored}, content {actual}"
        )));
    }

    let profile = meta.profile.clone();
    let num_classes = profile.num_classes;
    let mut label_rows: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();
    if meta.has_labels {
        for &c in &classes {
            let bytes = &files[&labels_rel_path(c)];
            let floats: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            label_rows.insert(c, floats.chunks(num_classes).map(<[f32]>::to_vec).collect());
        }
    }
    let mut row_cursor: BTreeMap<usize, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(meta.samples.len());
    for s in &meta.samples {
        let image = decode_png(&files[&image_rel_path(s.class_id, s.ipc_index)], &profile)?;
        let soft_label = if meta.has_labels {
            let cursor = row_cursor.entry(s.class_id).or_insert(0);
            let row = label_rows[&s.class_id].get(*cursor).cloned().ok_or_else(|| {
                DeltError::Integrity(format!("labels for class {} are truncated", s.class_id))
            })?;
            *cursor += 1;
            Some(row)
        } else {
            None
        };
        samples.push(SyntheticSample {
            image,
            class_id: s.class_id,
            ipc_index: s.ipc_index,
            subbatch_index: s.subbatch_index,
            iterations_trained: s.iterations_trained,
            init_provenance: s.init_provenance.clone(),
            soft_label,
        });
    }
    let dataset = DistilledDataset {
        profile,
        samples,
        run_metadata: meta.run_metadata,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Quantizes every image through the 8-bit export path, as a save/load would.
pub fn quantize_dataset(dataset: &DistilledDataset) -> Result<DistilledDataset> {
    let mut out = dataset.clone();
    for s in &mut out.samples {
        let px = s.image.to_pixels(&dataset.profile);
        s.image = ImageBuffer::from_pixels(&dataset.profile, s.image.height(), s.image.width(), &px)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PatchRef, RecoveryConfig};

    fn toy_dataset(ipc: usize, labels: bool) -> DistilledDataset {
        let profile = DatasetProfile {
            num_classes: 3,
            resolution: 4,
            ..DatasetProfile::cifar10()
        };
        let recovery = RecoveryConfig {
            ipc,
            num_subbatches: 2,
            max_iterations: 10,
            round_iterations: 4,
            ..RecoveryConfig::default()
        };
        let k = recovery.subbatch_size();
        let mut samples = Vec::new();
        for class_id in 0..3 {
            for ipc_index in 0..ipc {
                let data = (0..48)
                    .map(|i| ((i * 7 + class_id * 3 + ipc_index) as f32 * 0.21).cos() * 1.5)
                    .collect();
                let b = ipc_index / k;
                samples.push(SyntheticSample {
                    image: ImageBuffer::new(3, 4, 4, data).unwrap(),
                    class_id,
                    ipc_index,
                    subbatch_index: b,
                    iterations_trained: 10 - b * 4,
                    init_provenance: InitProvenance::Patches(vec![PatchRef {
                        source_id: class_id * 10 + ipc_index,
                        x: 0,
                        y: 1,
                        w: 3,
                        h: 3,
                    }]),
                    soft_label: labels.then(|| vec![0.2, 0.3, 0.5]),
                });
            }
        }
        DistilledDataset {
            profile,
            samples,
            run_metadata: RunMetadata {
                run_id: "abc123".into(),
                recovery,
                effective_config: serde_json::json!({"teacher": "convnet2"}),
                total_image_iterations: 42,
            },
        }
    }

    #[test]
    fn save_load_round_trip_and_stable_digest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(4, true);
        let d1 = save_distilled(&ds, &dir.path().join("r1")).unwrap();
        let d2 = save_distilled(&ds, &dir.path().join("r2")).unwrap();
        assert_eq!(d1, d2);
        let loaded = load_distilled(&dir.path().join("r1")).unwrap();
        assert_eq!(loaded, quantize_dataset(&ds).unwrap());
        assert!(dir.path().join("r1/labels/00002.f32").is_file());
        assert!(dir.path().join("r1/images/00001/0003.png").is_file());
        // resaving the loaded dataset reproduces the digest
        let d3 = save_distilled(&loaded, &dir.path().join("r3")).unwrap();
        assert_eq!(d1, d3);
    }

    #[test]
    fn short_class_is_rejected() {
        let mut ds = toy_dataset(4, false);
        ds.samples.retain(|s| !(s.class_id == 1 && s.ipc_index == 3));
        let dir = tempfile::tempdir().unwrap();
        let err = save_distilled(&ds, &dir.path().join("r")).unwrap_err();
        assert!(matches!(err, DeltError::Validation(ref m) if m.contains("class 1")), "{err}");
        assert!(!dir.path().join("r").exists());
    }

    #[test]
    fn tampered_image_fails_digest() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        save_distilled(&toy_dataset(2, false), &run).unwrap();
        let other = fs::read(run.join(image_rel_path(0, 1))).unwrap();
        fs::write(run.join(image_rel_path(0, 0)), other).unwrap();
        let err = load_distilled(&run).unwrap_err();
        assert!(matches!(err, DeltError::Integrity(ref m) if m.contains("digest")), "{err}");
    }

    #[test]
    fn empty_directory_is_not_a_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_distilled(dir.path()),
            Err(DeltError::NotADataset(_))
        ));
    }
}
