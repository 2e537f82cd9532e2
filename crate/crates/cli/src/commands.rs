use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use delt_core::data::{fetch_cifar10, fetch_tiny_imagenet, load_benchmark};
use delt_core::experiments::{load_bench, reproduce, Bench, ExperimentOutput};
use delt_core::metrics::{
    bar_chart_svg, cost_report, diversity_score, format_cost_table, write_cost_series, write_diversity_series,
    CostEntry,
};
use delt_core::nn::parse_device;
use delt_core::patches::{
    build_pool, default_crops_per_image, load_pool_cache, save_pool_cache, score_pool, select_and_order,
};
use delt_core::recovery::{distill, read_iteration_log, write_iteration_log, DistillOptions};
use delt_core::relabel::{append_result, post_train, TrainSet};
use delt_core::schedule::EarlyLateSchedule;
use delt_core::store::{load_distilled, save_distilled};
use delt_core::teacher::{squeeze, TeacherSnapshot};
use delt_core::{DeltError, Device};
use serde_json::json;

use crate::config::{Overrides, RunConfig};
use crate::{Cli, Command, GlobalArgs};

const ITERATION_LOG: &str = "iterations.jsonl";

fn load_config(global: &GlobalArgs, teacher: Option<&PathBuf>) -> Result<RunConfig> {
    let overrides = Overrides {
        seed: global.seed,
        teacher: teacher.cloned(),
    };
    Ok(RunConfig::load(global.config.as_deref(), &overrides)?)
}

fn bench(cfg: &RunConfig, global: &GlobalArgs) -> Result<Bench> {
    Ok(load_bench(cfg.profile()?, global.data_root.as_deref())?)
}

fn teacher(cfg: &RunConfig, device: &Device) -> Result<TeacherSnapshot> {
    let path = cfg.teacher_path()?;
    TeacherSnapshot::load(path, device).with_context(|| format!("loading teacher {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let device = parse_device(&g.device)?;
    match &cli.command {
        Command::Squeeze { out } => {
            let cfg = load_config(g, None)?;
            let profile = cfg.profile()?;
            let (train, val) = load_benchmark(&profile, g.data_root.as_deref())?;
            let (snapshot, report) = squeeze(&train, Some(&val), &profile, cfg.teacher_spec()?, &cfg.squeeze, &device)?;
            snapshot.save(out)?;
            let report_path = out.with_extension("report.json");
            fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
            println!(
                "teacher {} saved to {} (train {:.4}, val {})",
                report.arch,
                out.display(),
                report.train_accuracy,
                report.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Rank { teacher: t, out } => {
            let cfg = load_config(g, t.as_ref())?;
            let snap = teacher(&cfg, &device)?;
            let b = bench(&cfg, g)?;
            let fingerprint = snap.fingerprint()?;
            let rc = &cfg.recovery;
            let needed = rc.ipc * rc.mosaic_grid * rc.mosaic_grid;
            fs::create_dir_all(out)?;
            let mut selection = Vec::new();
            for class_id in 0..b.profile.num_classes {
                let cache = out.join(format!("pool_{class_id:05}.json"));
                let pool = match load_pool_cache(&cache, &b.train, &b.profile, class_id, &fingerprint)? {
                    Some(p) => p,
                    None => {
                        let size = b.train.class_indices(class_id).len();
                        let pool = build_pool(
                            &b.train,
                            class_id,
                            default_crops_per_image(size, needed),
                            (rc.crop_scale_min, rc.crop_scale_max),
                            &b.profile,
                            rc.seed,
                        )?;
                        let pool = score_pool(pool, &snap)?;
                        save_pool_cache(&pool, &fingerprint, &cache)?;
                        pool
                    }
                };
                let chosen = select_and_order(&pool, needed, rc.selection, rc.ordering, rc.seed)?;
                selection.push(json!({
                    "class_id": class_id,
                    "pool_size": pool.len(),
                    "patches": chosen.iter().map(|p| json!({
                        "patch": p.patch_ref().to_string(),
                        "score": p.score,
                        "rank": p.rank,
                    })).collect::<Vec<_>>(),
                }));
            }
            fs::write(out.join("selection.json"), serde_json::to_vec_pretty(&selection)?)?;
            println!("ranked {} classes into {}", selection.len(), out.display());
        }
        Command::Distill {
            teacher: t,
            out,
            force,
            baseline,
        } => {
            let cfg = load_config(g, t.as_ref())?;
            if out.exists() && !force {
                return Err(DeltError::Validation(format!(
                    "run directory {} exists; pass --force to replace it",
                    out.display()
                ))
                .into());
            }
            cfg.recovery.validate()?;
            let snap = teacher(&cfg, &device)?;
            let b = bench(&cfg, g)?;
            let mut effective = cfg.to_value();
            effective["baseline_loop"] = json!(baseline);
            effective["workers"] = json!(g.workers);
            let options = DistillOptions {
                run_id: out
                    .file_name()
                    .map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()),
                workers: g.workers,
                baseline: *baseline,
                effective_config: effective,
            };
            let (dataset, log) = distill(&b.train, &snap, &b.profile, &cfg.recovery, &options)?;
            let digest = save_distilled(&dataset, out)?;
            write_iteration_log(&log, &out.join(ITERATION_LOG))?;
            println!(
                "distilled {} images into {} ({} image-iterations, digest {digest})",
                dataset.samples.len(),
                out.display(),
                dataset.run_metadata.total_image_iterations
            );
        }
        Command::Eval {
            teacher: t,
            run,
            random_real,
            out,
        } => {
            let cfg = load_config(g, t.as_ref())?;
            cfg.eval.validate().or_else(|e| if cfg.eval.epochs == 0 { Ok(()) } else { Err(e) })?;
            let snap = teacher(&cfg, &device)?;
            let b = bench(&cfg, g)?;
            let train = match (run, random_real) {
                (Some(dir), _) => {
                    let ds = load_distilled(dir)?;
                    if ds.profile.name != b.profile.name {
                        bail!(DeltError::Validation(format!(
                            "run profile {} does not match config profile {}",
                            ds.profile.name, b.profile.name
                        )));
                    }
                    TrainSet::from_distilled(&ds)
                }
                (None, Some(ipc)) => TrainSet::random_real(&b.train, *ipc, &b.profile, cfg.eval.seed)?,
                (None, None) => bail!(DeltError::Config("pass --run or --random-real".into())),
            };
            let (_, result) = post_train(
                &train,
                &snap,
                cfg.student_spec()?,
                &b.val_views,
                &b.val.labels,
                &b.profile,
                &cfg.eval,
                &device,
            )?;
            let results = match (out, run) {
                (Some(p), _) => Some(p.clone()),
                (None, Some(dir)) => Some(dir.join("results.jsonl")),
                (None, None) => None,
            };
            if let Some(p) = results {
                append_result(&p, &result)?;
            }
            println!("{}", serde_json::to_string(&result)?);
        }
        Command::Diversity { teacher: t, run, out } => {
            let cfg = load_config(g, t.as_ref())?;
            let snap = teacher(&cfg, &device)?;
            let ds = load_distilled(run)?;
            let report = diversity_score(&ds, &snap)?;
            for (c, s) in report.per_class.iter().enumerate() {
                println!("class {c:>4}: {s:.6}");
            }
            println!("mean: {:.6}", report.mean);
            if let Some(dir) = out {
                write_diversity_series(&report, &dir.join("diversity.csv"))?;
                let cats: Vec<String> = (0..report.per_class.len()).map(|c| c.to_string()).collect();
                fs::write(
                    dir.join("diversity.svg"),
                    bar_chart_svg("Intra-class cosine similarity", &cats, &[(ds.run_metadata.run_id.clone(), report.per_class.clone())]),
                )?;
            }
        }
        Command::Cost { run, baseline, out } => {
            if run.is_empty() {
                print_projection(g)?;
                return Ok(());
            }
            let mut entries = Vec::new();
            for dir in run {
                entries.push(cost_entry(dir)?);
            }
            let rows = cost_report(&entries, *baseline)?;
            print!("{}", format_cost_table(&rows));
            if let Some(dir) = out {
                write_cost_series(&rows, &dir.join("cost.csv"))?;
                let cats: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
                let secs: Vec<f64> = rows.iter().map(|r| r.wall_hours.unwrap_or(0.0) * 3600.0).collect();
                fs::write(dir.join("cost.svg"), bar_chart_svg("Recovery wall time (s)", &cats, &[("wall s".into(), secs)]))?;
            }
        }
        Command::Reproduce { name, out } => {
            let dir = out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
            let output = ExperimentOutput { dir: dir.clone() };
            let summary = reproduce(name, g.data_root.as_deref(), g.workers, &device, Some(&output))?;
            println!("teacher val top-1: {:?}", summary.squeeze.val_accuracy);
            println!("{:<12} {:>8} {:>8} {:>10} {:>12}", "arm", "top-1", "std", "diversity", "recovery s");
            for a in &summary.arms {
                println!(
                    "{:<12} {:>8.2} {:>8.2} {:>10} {:>12}",
                    a.arm.name(),
                    100.0 * a.mean_top1,
                    100.0 * a.std_top1,
                    a.mean_diversity.map_or("-".into(), |d| format!("{d:.4}")),
                    a.mean_recovery_seconds.map_or("-".into(), |s| format!("{s:.1}"))
                );
            }
            print!("{}", format_cost_table(&summary.cost));
            println!("results written to {}", dir.display());
        }
        Command::Fetch { dataset } => {
            let root = g
                .data_root
                .as_deref()
                .ok_or_else(|| DeltError::Config("set --data-root or DELT_DATA_ROOT".into()))?;
            let path = match dataset.as_str() {
                "cifar10" => fetch_cifar10(root)?,
                "tiny_imagenet" => fetch_tiny_imagenet(root)?,
                other => bail!(DeltError::Config(format!("no fetcher for `{other}`"))),
            };
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cost_entry(dir: &Path) -> Result<CostEntry> {
    let ds = load_distilled(dir)?;
    let log = read_iteration_log(&dir.join(ITERATION_LOG))
        .with_context(|| format!("reading iteration log of {}", dir.display()))?;
    Ok(CostEntry::from_log(
        &ds.run_metadata.run_id,
        &ds.profile.name,
        ds.profile.num_classes,
        &ds.run_metadata.recovery,
        &log,
    ))
}

fn print_projection(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g, None)?;
    let rc = &cfg.recovery;
    let classes = cfg.profile()?.num_classes as u64;
    let sched = EarlyLateSchedule::from_config(rc)?;
    println!("{:<24} {:>4} {:>6} {:>16} {:>10}", "run", "M", "RI", "image-iters", "reduction");
    println!("{:<24} {:>4} {:>6} {:>16} {:>9.1}%", "constant", 1, "-", sched.baseline_image_iterations() * classes, 0.0);
    println!(
        "{:<24} {:>4} {:>6} {:>16} {:>9.1}%",
        "earlylate",
        rc.num_subbatches,
        rc.round_iterations,
        sched.total_image_iterations() * classes,
        100.0 * sched.savings_ratio()
    );
    Ok(())
}
