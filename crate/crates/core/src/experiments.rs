//! Named end-to-end experiments: squeeze a teacher, distill with and without
//! EarlyLate, post-train students and compare against simple baselines.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::{load_benchmark, LabeledDataset};
use crate::error::{DeltError, Result};
use crate::metrics::{
    bar_chart_svg, cost_report, diversity_score, write_cost_series, write_diversity_series, CostEntry, CostRow,
    DiversityReport,
};
use crate::nn::{Architecture, NetSpec};
use crate::recovery::{distill, write_iteration_log, DistillOptions, IterationRecord};
use crate::relabel::{append_result, post_train, EvalResult, TrainSet};
use crate::store::save_distilled;
use crate::teacher::{squeeze, SqueezeConfig, SqueezeReport, TeacherSnapshot};
use crate::types::{DatasetProfile, DistilledDataset, EvalConfig, ImageBuffer, InitMode, RecoveryConfig};

/// Loaded train/validation splits with prepared validation views.
pub struct Bench {
    pub profile: DatasetProfile,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub val_views: Vec<ImageBuffer>,
}

pub fn load_bench(profile: DatasetProfile, data_root: Option<&Path>) -> Result<Bench> {
    let (train, val) = load_benchmark(&profile, data_root)?;
    let val_views = val.eval_views(&profile)?;
    Ok(Bench {
        profile,
        train,
        val,
        val_views,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub profile: DatasetProfile,
    pub teacher_arch: Architecture,
    pub teacher_width: usize,
    pub squeeze: SqueezeConfig,
    /// Settings of the EarlyLate arm; the other arms derive from it.
    pub recovery: RecoveryConfig,
    pub eval: EvalConfig,
    pub student_arch: Architecture,
    pub student_width: usize,
    pub seeds: Vec<u64>,
}

pub const EXPERIMENTS: [&str; 2] = ["digits-ipc10", "cifar10-ipc10"];

/// The plan behind a named experiment.
pub fn plan(name: &str) -> Result<ExperimentPlan> {
    let eval = EvalConfig {
        batch_size: EvalConfig::batch_size_for_ipc(10),
        ..Default::default()
    };
    match name {
        "digits-ipc10" => Ok(ExperimentPlan {
            name: name.into(),
            profile: DatasetProfile::digits(),
            teacher_arch: Architecture::ConvNet { depth: 2 },
            teacher_width: 32,
            squeeze: SqueezeConfig {
                epochs: 30,
                ..Default::default()
            },
            recovery: RecoveryConfig {
                ipc: 10,
                num_subbatches: 10,
                max_iterations: 300,
                round_iterations: 30,
                ..Default::default()
            },
            eval,
            student_arch: Architecture::ConvNet { depth: 2 },
            student_width: 32,
            seeds: vec![0, 1, 2],
        }),
        "cifar10-ipc10" => Ok(ExperimentPlan {
            name: name.into(),
            profile: DatasetProfile::cifar10(),
            teacher_arch: Architecture::ResNet18,
            teacher_width: Architecture::ResNet18.default_width(),
            squeeze: SqueezeConfig {
                epochs: 50,
                ..Default::default()
            },
            recovery: RecoveryConfig {
                ipc: 10,
                num_subbatches: 10,
                max_iterations: 4000,
                round_iterations: 400,
                ..Default::default()
            },
            eval,
            student_arch: Architecture::ResNet18,
            student_width: Architecture::ResNet18.default_width(),
            seeds: vec![0, 1, 2],
        }),
        other => Err(DeltError::Config(format!(
            "unknown experiment `{other}` (known: {})",
            EXPERIMENTS.join(", ")
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Median-patch init with EarlyLate sub-batches.
    Delt,
    /// Median-patch init, every image trained for all iterations.
    InitOnly,
    /// Gaussian init, every image trained for all iterations.
    Gaussian,
    /// Random real images, no synthesis.
    RandomReal,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Delt, Arm::InitOnly, Arm::Gaussian, Arm::RandomReal];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Delt => "delt",
            Arm::InitOnly => "init_only",
            Arm::Gaussian => "gaussian",
            Arm::RandomReal => "random_real",
        }
    }

    /// Recovery settings and loop choice (`true` = constant-iteration).
    pub fn recovery(self, base: &RecoveryConfig, seed: u64) -> Option<(RecoveryConfig, bool)> {
        let cfg = RecoveryConfig { seed, ..base.clone() };
        match self {
            Arm::Delt => Some((cfg, false)),
            Arm::InitOnly => Some((RecoveryConfig { num_subbatches: 1, ..cfg }, true)),
            Arm::Gaussian => Some((
                RecoveryConfig {
                    num_subbatches: 1,
                    init_mode: InitMode::Gaussian,
                    ..cfg
                },
                true,
            )),
            Arm::RandomReal => None,
        }
    }
}

/// A synthesized set with its log and recovery wall time.
pub struct Synthesis {
    pub dataset: DistilledDataset,
    pub log: Vec<IterationRecord>,
    pub seconds: f64,
}

pub fn synthesize(
    bench: &Bench,
    teacher: &TeacherSnapshot,
    config: &RecoveryConfig,
    baseline: bool,
    run_id: &str,
    workers: usize,
) -> Result<Synthesis> {
    let started = Instant::now();
    let options = DistillOptions {
        run_id: run_id.into(),
        workers,
        baseline,
        effective_config: serde_json::json!({ "baseline_loop": baseline }),
    };
    let (dataset, log) = distill(&bench.train, teacher, &bench.profile, config, &options)?;
    Ok(Synthesis {
        dataset,
        log,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub seed: u64,
    pub top1: f64,
    pub diversity: Option<f64>,
    pub image_iterations: Option<u64>,
    /// Sum of per-iteration wall time of the recovery loop.
    pub recovery_seconds: Option<f64>,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_diversity: Option<f64>,
    pub mean_recovery_seconds: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub plan: ExperimentPlan,
    pub squeeze: SqueezeReport,
    pub outcomes: Vec<ArmOutcome>,
    pub arms: Vec<ArmSummary>,
    pub cost: Vec<CostRow>,
}

impl ExperimentSummary {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(outcomes: &[ArmOutcome]) -> Vec<ArmSummary> {
    Arm::ALL
        .iter()
        .filter_map(|&arm| {
            let rows: Vec<&ArmOutcome> = outcomes.iter().filter(|o| o.arm == arm).collect();
            if rows.is_empty() {
                return None;
            }
            let (mean_top1, std_top1) = mean_std(&rows.iter().map(|o| o.top1).collect::<Vec<_>>());
            let opt_mean = |f: &dyn Fn(&ArmOutcome) -> Option<f64>| {
                let vals: Vec<f64> = rows.iter().filter_map(|o| f(o)).collect();
                (!vals.is_empty()).then(|| mean_std(&vals).0)
            };
            Some(ArmSummary {
                arm,
                mean_top1,
                std_top1,
                mean_diversity: opt_mean(&|o| o.diversity),
                mean_recovery_seconds: opt_mean(&|o| o.recovery_seconds),
            })
        })
        .collect()
}

/// Where a run writes its artifacts (nothing is written when `None`).
pub struct ExperimentOutput {
    pub dir: PathBuf,
}

impl ExperimentOutput {
    fn results(&self) -> PathBuf {
        self.dir.join("results.jsonl")
    }
}

/// Squeezes the plan's teacher on `bench`.
pub fn train_teacher(bench: &Bench, plan: &ExperimentPlan, device: &Device) -> Result<(TeacherSnapshot, SqueezeReport)> {
    let spec = NetSpec::new(
        plan.teacher_arch,
        bench.profile.channels(),
        bench.profile.num_classes,
        bench.profile.resolution,
    )
    .with_width(plan.teacher_width);
    squeeze(&bench.train, Some(&bench.val), &bench.profile, spec, &plan.squeeze, device)
}

/// Runs `arms` for every seed of the plan with an existing teacher.
#[allow(clippy::too_many_arguments)]
pub fn run_arms(
    bench: &Bench,
    teacher: &TeacherSnapshot,
    squeeze_report: &SqueezeReport,
    plan: &ExperimentPlan,
    arms: &[Arm],
    workers: usize,
    device: &Device,
    output: Option<&ExperimentOutput>,
) -> Result<ExperimentSummary> {
    let student = NetSpec::new(
        plan.student_arch,
        bench.profile.channels(),
        bench.profile.num_classes,
        bench.profile.resolution,
    )
    .with_width(plan.student_width);
    let mut outcomes = Vec::new();
    let mut cost_entries: Vec<CostEntry> = Vec::new();
    let mut diversity_reports: Vec<(String, DiversityReport)> = Vec::new();
    for &seed in &plan.seeds {
        for &arm in arms {
            let label = format!("{}-s{seed}", arm.name());
            let (train_set, synth) = match arm.recovery(&plan.recovery, seed) {
                Some((cfg, baseline)) => {
                    let s = synthesize(bench, teacher, &cfg, baseline, &label, workers)?;
                    if let Some(out) = output {
                        let run_dir = out.dir.join("runs").join(&label);
                        if run_dir.exists() {
                            fs::remove_dir_all(&run_dir)?;
                        }
                        save_distilled(&s.dataset, &run_dir)?;
                        write_iteration_log(&s.log, &run_dir.join("iterations.jsonl"))?;
                    }
                    (TrainSet::from_distilled(&s.dataset), Some(s))
                }
                None => (TrainSet::random_real(&bench.train, plan.recovery.ipc, &bench.profile, seed)?, None),
            };
            let eval = EvalConfig { seed, ..plan.eval.clone() };
            let (_, result) = post_train(
                &train_set,
                teacher,
                student.clone(),
                &bench.val_views,
                &bench.val.labels,
                &bench.profile,
                &eval,
                device,
            )?;
            let result = EvalResult { source: label.clone(), ..result };
            if let Some(out) = output {
                append_result(&out.results(), &result)?;
            }
            let mut outcome = ArmOutcome {
                arm,
                seed,
                top1: result.top1,
                diversity: None,
                image_iterations: None,
                recovery_seconds: None,
                eval_seconds: result.wall_seconds,
            };
            if let Some(s) = synth {
                let div = diversity_score(&s.dataset, teacher)?;
                outcome.diversity = Some(div.mean);
                outcome.image_iterations = Some(s.log.iter().map(|r| r.active_images as u64).sum());
                outcome.recovery_seconds = Some(s.log.iter().map(|r| r.wall_ms).sum::<f64>() / 1e3);
                if seed == plan.seeds[0] {
                    diversity_reports.push((arm.name().to_string(), div));
                    cost_entries.push(CostEntry::from_log(
                        arm.name(),
                        &bench.profile.name,
                        bench.profile.num_classes,
                        &s.dataset.run_metadata.recovery,
                        &s.log,
                    ));
                }
            }
            log::info!(
                "{}: {label} top-1 {:.4} diversity {:?}",
                plan.name,
                outcome.top1,
                outcome.diversity
            );
            outcomes.push(outcome);
        }
    }
    let baseline = cost_entries
        .iter()
        .position(|e| e.label == Arm::InitOnly.name())
        .unwrap_or(0);
    let cost = if cost_entries.is_empty() {
        Vec::new()
    } else {
        cost_report(&cost_entries, baseline)?
    };
    let summary = ExperimentSummary {
        plan: plan.clone(),
        squeeze: squeeze_report.clone(),
        arms: summarize(&outcomes),
        outcomes,
        cost,
    };
    if let Some(out) = output {
        write_reports(out, &summary, &diversity_reports)?;
    }
    Ok(summary)
}

fn write_reports(out: &ExperimentOutput, summary: &ExperimentSummary, diversity: &[(String, DiversityReport)]) -> Result<()> {
    fs::create_dir_all(&out.dir)?;
    fs::write(out.dir.join("summary.json"), serde_json::to_vec_pretty(summary)?)?;
    for (name, report) in diversity {
        write_diversity_series(report, &out.dir.join(format!("diversity_{name}.csv")))?;
    }
    if !diversity.is_empty() {
        let classes = diversity[0].1.per_class.len();
        let cats: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = diversity.iter().map(|(n, r)| (n.clone(), r.per_class.clone())).collect();
        fs::write(
            out.dir.join("diversity.svg"),
            bar_chart_svg("Intra-class cosine similarity (lower is more diverse)", &cats, &series),
        )?;
    }
    if !summary.cost.is_empty() {
        write_cost_series(&summary.cost, &out.dir.join("cost.csv"))?;
        let cats: Vec<String> = summary.cost.iter().map(|r| r.label.clone()).collect();
        let hours: Vec<f64> = summary.cost.iter().map(|r| r.wall_hours.unwrap_or(0.0) * 3600.0).collect();
        fs::write(
            out.dir.join("cost.svg"),
            bar_chart_svg("Recovery wall time (s)", &cats, &[("wall s".into(), hours)]),
        )?;
    }
    let cats: Vec<String> = summary.arms.iter().map(|a| a.arm.name().to_string()).collect();
    let acc: Vec<f64> = summary.arms.iter().map(|a| 100.0 * a.mean_top1).collect();
    fs::write(
        out.dir.join("accuracy.svg"),
        bar_chart_svg("Student top-1 (%)", &cats, &[("top-1".into(), acc)]),
    )?;
    Ok(())
}

/// Runs a named experiment end to end.
pub fn reproduce(
    name: &str,
    data_root: Option<&Path>,
    workers: usize,
    device: &Device,
    output: Option<&ExperimentOutput>,
) -> Result<ExperimentSummary> {
    let plan = plan(name)?;
    let bench = load_bench(plan.profile.clone(), data_root)?;
    let (teacher, report) = train_teacher(&bench, &plan, device)?;
    if let Some(out) = output {
        fs::create_dir_all(&out.dir)?;
        teacher.save(&out.dir.join("teacher.safetensors"))?;
        fs::write(out.dir.join("squeeze.json"), serde_json::to_vec_pretty(&report)?)?;
        let results = out.results();
        if results.exists() {
            fs::remove_file(results)?;
        }
    }
    run_arms(&bench, &teacher, &report, &plan, &Arm::ALL, workers, device, output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_are_valid() {
        for name in EXPERIMENTS {
            let p = plan(name).unwrap();
            p.recovery.validate().unwrap();
            p.eval.validate().unwrap();
            for arm in Arm::ALL {
                if let Some((cfg, _)) = arm.recovery(&p.recovery, 1) {
                    cfg.validate().unwrap();
                    assert_eq!(cfg.seed, 1);
                }
            }
        }
        assert!(plan("mnist").is_err());
        let c = plan("cifar10-ipc10").unwrap();
        assert_eq!((c.recovery.max_iterations, c.recovery.alpha_bn, c.recovery.learning_rate), (4000, 0.01, 0.25));
        assert_eq!(c.eval.batch_size, 50);
        assert_eq!(c.eval.epochs, 300);
    }

    #[test]
    fn summary_statistics() {
        let o = |arm, top1| ArmOutcome {
            arm,
            seed: 0,
            top1,
            diversity: None,
            image_iterations: None,
            recovery_seconds: None,
            eval_seconds: 0.0,
        };
        let s = summarize(&[o(Arm::Delt, 0.4), o(Arm::Delt, 0.6), o(Arm::RandomReal, 0.3)]);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean_top1 - 0.5).abs() < 1e-12);
        assert!((s[0].std_top1 - 0.1).abs() < 1e-12);
    }
}
