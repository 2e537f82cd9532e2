//! Intra-class diversity and run-cost summaries, with plot-ready outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DeltError, Result};
use crate::recovery::{logged_image_iterations, IterationRecord};
use crate::schedule::EarlyLateSchedule;
use crate::teacher::TeacherSnapshot;
use crate::types::{DistilledDataset, ImageBuffer, RecoveryConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean cosine similarity to the class centroid, per class (lower is more diverse).
    pub per_class: Vec<f64>,
    pub mean: f64,
    /// Zero-norm feature vectors left out of the scores.
    pub excluded: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Diversity scores from precomputed features, one list of vectors per class.
pub fn diversity_from_features(classes: &[Vec<Vec<f32>>]) -> Result<DiversityReport> {
    let mut per_class = Vec::with_capacity(classes.len());
    let mut excluded = 0;
    for (c, feats) in classes.iter().enumerate() {
        if feats.len() < 2 {
            return Err(DeltError::Validation(format!(
                "class {c} has {} sample(s); diversity needs at least 2",
                feats.len()
            )));
        }
        let kept: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().map(|&x| x as f64).collect::<Vec<f64>>())
            .filter(|f| norm(f) > 0.0)
            .collect();
        if kept.len() < feats.len() {
            log::warn!("class {c}: {} zero-norm feature(s) excluded", feats.len() - kept.len());
            excluded += feats.len() - kept.len();
        }
        if kept.is_empty() {
            return Err(DeltError::Validation(format!("class {c}: every feature vector is zero")));
        }
        let dim = kept[0].len();
        let mut centroid = vec![0.0; dim];
        for f in &kept {
            if f.len() != dim {
                return Err(DeltError::Shape(format!("class {c}: ragged feature vectors")));
            }
            for (acc, x) in centroid.iter_mut().zip(f) {
                *acc += x;
            }
        }
        centroid.iter_mut().for_each(|x| *x /= kept.len() as f64);
        let cn = norm(&centroid);
        if cn == 0.0 {
            return Err(DeltError::Validation(format!("class {c}: centroid has zero norm")));
        }
        let score = kept
            .iter()
            .map(|f| f.iter().zip(&centroid).map(|(a, b)| a * b).sum::<f64>() / (norm(f) * cn))
            .sum::<f64>()
            / kept.len() as f64;
        per_class.push(score);
    }
    let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(DiversityReport {
        per_class,
        mean,
        excluded,
    })
}

/// Penultimate-feature diversity of a distilled set under `extractor`.
pub fn diversity_score(dataset: &DistilledDataset, extractor: &TeacherSnapshot) -> Result<DiversityReport> {
    let mut classes = Vec::with_capacity(dataset.profile.num_classes);
    for (_, samples) in dataset.by_class() {
        let images: Vec<&ImageBuffer> = samples.iter().map(|s| &s.image).collect();
        let (_, feats) = extractor.infer(&images, 256)?;
        classes.push(feats);
    }
    diversity_from_features(&classes)
}

/// One run's measured cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub label: String,
    pub profile: String,
    pub num_classes: usize,
    pub recovery: RecoveryConfig,
    pub image_iterations: u64,
    pub wall_hours: Option<f64>,
}

impl CostEntry {
    pub fn from_log(label: &str, profile: &str, num_classes: usize, recovery: &RecoveryConfig, log: &[IterationRecord]) -> Self {
        Self {
            label: label.to_string(),
            profile: profile.to_string(),
            num_classes,
            recovery: recovery.clone(),
            image_iterations: logged_image_iterations(log),
            wall_hours: Some(log.iter().map(|r| r.wall_ms).sum::<f64>() / 3.6e6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub label: String,
    pub round_iterations: usize,
    pub num_subbatches: usize,
    pub image_iterations: u64,
    pub wall_hours: Option<f64>,
    /// Wall-time reduction against the baseline, in percent (image-iterations
    /// when either run has no wall time).
    pub reduction_pct: f64,
}

/// Tabulates runs against `entries[baseline]`. Logged image-iterations must
/// equal the closed form for each configuration.
pub fn cost_report(entries: &[CostEntry], baseline: usize) -> Result<Vec<CostRow>> {
    let base = entries
        .get(baseline)
        .ok_or_else(|| DeltError::Validation(format!("baseline index {baseline} out of range")))?;
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        if e.profile != base.profile || e.num_classes != base.num_classes {
            return Err(DeltError::Validation(format!(
                "profile mismatch: `{}` is {} ({} classes), baseline is {} ({} classes)",
                e.label, e.profile, e.num_classes, base.profile, base.num_classes
            )));
        }
        let expected = EarlyLateSchedule::from_config(&e.recovery)?.total_image_iterations() * e.num_classes as u64;
        if e.image_iterations != expected {
            return Err(DeltError::Integrity(format!(
                "`{}` logged {} image-iterations, schedule gives {expected}",
                e.label, e.image_iterations
            )));
        }
        let reduction_pct = match (e.wall_hours, base.wall_hours) {
            (Some(w), Some(b)) if b > 0.0 => 100.0 * (1.0 - w / b),
            _ => 100.0 * (1.0 - e.image_iterations as f64 / base.image_iterations as f64),
        };
        rows.push(CostRow {
            label: e.label.clone(),
            round_iterations: e.recovery.round_iterations,
            num_subbatches: e.recovery.num_subbatches,
            image_iterations: e.image_iterations,
            wall_hours: e.wall_hours,
            reduction_pct,
        });
    }
    Ok(rows)
}

pub fn format_cost_table(rows: &[CostRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>4} {:>6} {:>16} {:>12} {:>10}", "run", "M", "RI", "image-iters", "wall h", "reduction");
    for r in rows {
        let wall = r.wall_hours.map_or("-".to_string(), |h| format!("{h:.4}"));
        let _ = writeln!(
            out,
            "{:<24} {:>4} {:>6} {:>16} {:>12} {:>9.1}%",
            r.label, r.num_subbatches, r.round_iterations, r.image_iterations, wall, r.reduction_pct
        );
    }
    out
}

/// Writes a two-or-more column CSV series.
pub fn write_series(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_diversity_series(report: &DiversityReport, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .per_class
        .iter()
        .enumerate()
        .map(|(c, s)| vec![c.to_string(), format!("{s:.6}")])
        .collect();
    write_series(path, &["class", "cosine_similarity"], &rows)
}

pub fn write_cost_series(rows: &[CostRow], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.num_subbatches.to_string(),
                r.round_iterations.to_string(),
                r.image_iterations.to_string(),
                r.wall_hours.map_or(String::new(), |h| format!("{h:.6}")),
            ]
        })
        .collect();
    write_series(path, &["run", "subbatches", "round_iterations", "image_iterations", "wall_hours"], &rows)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart_svg(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
    let (w, h, left, bottom, top) = (720.0, 360.0, 56.0, 40.0, 36.0);
    let plot_w = w - left - 16.0;
    let plot_h = h - bottom - top;
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, top + plot_h, w - 16.0, top + plot_h);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + plot_h);
    for tick in 0..=4 {
        let v = max * tick as f64 / 4.0;
        let y = top + plot_h - plot_h * tick as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, left - 4.0, y + 4.0);
    }
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + group_w * ci as f64 + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(0.0).max(0.0);
            let bh = plot_h * v / max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bar_w * si as f64,
                top + plot_h - bh,
                bar_w,
                bh,
                PALETTE[si % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            top + plot_h + 16.0,
            escape(cat)
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let y = top + 4.0 + 14.0 * si as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{y}" width="10" height="10" fill="{}"/>"#, w - 150.0, PALETTE[si % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - 135.0, y + 9.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}
