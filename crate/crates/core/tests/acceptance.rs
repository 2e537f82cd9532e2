//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the verdict lines are always shown.
//! `DELT_ACCEPTANCE=1,2,8` restricts the run to the listed criteria.
//! Criteria 4 and 5 read CIFAR-10 from `$DELT_DATA_ROOT`.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use delt_core::augment::CropBox;
use delt_core::data::DATA_ROOT_ENV;
use delt_core::experiments::{
    load_bench, plan, reproduce, run_arms, train_teacher, Arm, Bench, ExperimentOutput, ExperimentSummary,
};
use delt_core::nn::{NetSpec, Network, RunningStats};
use delt_core::patches::{rank_pool, select_and_order, PatchPool, RankedPatch};
use delt_core::recovery::{bn_regularizer, distill, DistillOptions};
use delt_core::schedule::{make_schedule, EarlyLateSchedule};
use delt_core::teacher::TeacherSnapshot;
use delt_core::types::{ImageBuffer, Ordering, RecoveryConfig, Selection};

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {}: {}: {}", v.id, v.name, v.detail);
}

// ---------------------------------------------------------------- 1

fn schedule_arithmetic() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=12usize);
        let k = rng.random_range(1..=6usize);
        let ri = rng.random_range(0..=600usize);
        let mi = (m - 1) * ri + rng.random_range(1..=800usize);
        let s = make_schedule(m * k, m, mi, ri).expect("valid by construction");
        let mut brute = 0u64;
        for t in 0..mi {
            for b in 0..m {
                if b * ri <= t {
                    brute += k as u64;
                }
            }
        }
        if brute != s.total_image_iterations() {
            mismatches += 1;
        }
    }
    let s = make_schedule(8, 8, 4000, 500).unwrap();
    let total = s.total_image_iterations();
    let ratio = s.savings_ratio();
    let secs = started.elapsed().as_secs_f64();
    Verdict {
        id: 1,
        name: "schedule arithmetic",
        pass: mismatches == 0 && total == 18000 && ratio == 0.4375 && secs < 1.0,
        detail: format!(
            "{mismatches}/1000 closed-form mismatches; (M=8, MI=4000, RI=500, k=1) -> {total} image-iterations, savings {ratio}; {secs:.3}s (limit 1s)"
        ),
    }
}

// ---------------------------------------------------------------- 2

fn reference_regularizer(batch: &[(Vec<f64>, Vec<f64>)], running: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let mut total = 0.0;
    for ((bm, bv), (rm, rv)) in batch.iter().zip(running) {
        let mut sm = 0.0;
        for i in 0..bm.len() {
            sm += (bm[i] - rm[i]) * (bm[i] - rm[i]);
        }
        let mut sv = 0.0;
        for i in 0..bv.len() {
            sv += (bv[i] - rv[i]) * (bv[i] - rv[i]);
        }
        total += sm.sqrt() + sv.sqrt();
    }
    total
}

fn to_stats(v: &[(Vec<f64>, Vec<f64>)]) -> (Vec<delt_core::nn::BatchStats>, Vec<RunningStats>) {
    let t = |x: &Vec<f64>| Tensor::new(x.as_slice(), &Device::Cpu).unwrap();
    (
        v.iter().map(|(m, s)| delt_core::nn::BatchStats { mean: t(m), var: t(s) }).collect(),
        v.iter().map(|(m, s)| RunningStats { mean: t(m), var: t(s) }).collect(),
    )
}

fn bn_regularizer_checks() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut zero_ok = true;
    for _ in 0..100 {
        let layers = rng.random_range(1..=6usize);
        let mut batch = Vec::new();
        let mut running = Vec::new();
        for _ in 0..layers {
            let c = rng.random_range(1..=64usize);
            let mut v = |lo: f64, hi: f64| (0..c).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
            batch.push((v(-3.0, 3.0), v(0.01, 4.0)));
            running.push((v(-3.0, 3.0), v(0.01, 4.0)));
        }
        let (b, _) = to_stats(&batch);
        let (_, r) = to_stats(&running);
        let got = bn_regularizer(&b, &r).unwrap().to_scalar::<f64>().unwrap();
        worst = worst.max((got - reference_regularizer(&batch, &running)).abs());
        let (b_same, r_same) = to_stats(&running);
        zero_ok &= bn_regularizer(&b_same, &r_same).unwrap().to_scalar::<f64>().unwrap() == 0.0;
    }

    // gradient w.r.t. the input images on a two-BN-layer network
    let spec = NetSpec::new("convnet2".parse().unwrap(), 3, 5, 8).with_width(4);
    let mut net = Network::init(spec, 11, DType::F64, &Device::Cpu).unwrap();
    let names: Vec<String> = net.bn_layer_names().to_vec();
    for (i, n) in names.iter().enumerate() {
        let c = net.running_stats()[i].mean.dim(0).unwrap();
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        net.set_param(&format!("{n}.running_mean"), Tensor::new(mean.as_slice(), &Device::Cpu).unwrap()).unwrap();
        net.set_param(&format!("{n}.running_var"), Tensor::new(var.as_slice(), &Device::Cpu).unwrap()).unwrap();
    }
    let teacher = TeacherSnapshot::new(&net).unwrap();
    let running = teacher.running_stats();
    let loss_at = |x: &Tensor| -> Tensor {
        let out = teacher.forward(x, true).unwrap();
        bn_regularizer(&out.bn_stats, &running).unwrap()
    };
    let x0: Vec<f64> = (0..4 * 3 * 8 * 8).map(|_| rng.random_range(-1.5..1.5)).collect();
    let x = Var::from_tensor(&Tensor::from_vec(x0.clone(), (4, 3, 8, 8), &Device::Cpu).unwrap()).unwrap();
    let grads = loss_at(x.as_tensor()).backward().unwrap();
    let analytic = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus[i] += h;
        let mut minus = x0.clone();
        minus[i] -= h;
        let f = |v: Vec<f64>| {
            loss_at(&Tensor::from_vec(v, (4, 3, 8, 8), &Device::Cpu).unwrap())
                .to_scalar::<f64>()
                .unwrap()
        };
        numeric.push((f(plus) - f(minus)) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let rel = diff / scale;
    let secs = started.elapsed().as_secs_f64();
    Verdict {
        id: 2,
        name: "BN regularizer",
        pass: worst <= 1e-6 && zero_ok && rel <= 1e-3 && secs < 30.0,
        detail: format!(
            "max |lib - elementwise| over 100 sets {worst:.2e} (tol 1e-6); zero on coinciding stats: {zero_ok}; gradient rel. error vs central differences {rel:.2e} (tol 1e-3) on 4x3x8x8; {secs:.1}s (limit 30s)"
        ),
    }
}

// ---------------------------------------------------------------- 8

fn random_pool(rng: &mut ChaCha8Rng) -> PatchPool {
    let p = rng.random_range(1..=60usize);
    let levels = rng.random_range(1..=p + 1) as u32;
    let patches = (0..p)
        .map(|_| RankedPatch {
            source_id: rng.random_range(0..20),
            crop: CropBox {
                x: rng.random_range(0..4),
                y: rng.random_range(0..4),
                w: rng.random_range(1..5),
                h: rng.random_range(1..5),
            },
            image: ImageBuffer::zeros(1, 1, 1),
            class_id: 3,
            // few distinct levels so ties are common
            score: rng.random_range(0..levels) as f32 / levels as f32,
            rank: usize::MAX,
        })
        .collect();
    PatchPool {
        class_id: 3,
        patches,
        scored: false,
    }
}

type Key = (f32, usize, usize, usize, usize, usize);

fn key(p: &RankedPatch) -> Key {
    (p.score, p.source_id, p.crop.x, p.crop.y, p.crop.w, p.crop.h)
}

fn ordering_oracles() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    let mut checks = 0;
    for case in 0..1000 {
        let raw = random_pool(&mut rng);
        let mut expected_order: Vec<Key> = raw.patches.iter().map(key).collect();
        expected_order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pool = rank_pool(raw);
        let got_order: Vec<Key> = pool.patches.iter().map(key).collect();
        if got_order != expected_order {
            failures.push(format!("case {case}: pool sort"));
            continue;
        }
        let n = pool.len();
        let ipc = rng.random_range(1..=n);
        let m = n / 2;
        for selection in [Selection::Median, Selection::Lowest, Selection::Highest] {
            let mut by_distance: Vec<usize> = (0..n).collect();
            by_distance.sort_by_key(|&r| (r.abs_diff(m), r));
            let chosen: Vec<usize> = match selection {
                Selection::Median => by_distance[..ipc].to_vec(),
                Selection::Lowest => (0..ipc).collect(),
                Selection::Highest => (n - ipc..n).collect(),
            };
            let mut set: Vec<usize> = chosen.clone();
            set.sort_unstable();
            for ordering in [Ordering::MedianOut, Ordering::Ascending, Ordering::Descending, Ordering::Random] {
                checks += 1;
                let seed = rng.random::<u64>();
                let got = select_and_order(&pool, ipc, selection, ordering, seed).unwrap();
                let got_keys: Vec<Key> = got.iter().map(key).collect();
                let ok = match ordering {
                    Ordering::MedianOut => {
                        let mut want = set.clone();
                        want.sort_by_key(|&r| (r.abs_diff(m), r));
                        got_keys == want.iter().map(|&r| expected_order[r]).collect::<Vec<_>>()
                    }
                    Ordering::Ascending => got_keys == set.iter().map(|&r| expected_order[r]).collect::<Vec<_>>(),
                    Ordering::Descending => {
                        got_keys == set.iter().rev().map(|&r| expected_order[r]).collect::<Vec<_>>()
                    }
                    Ordering::Random => {
                        let mut sorted = got_keys.clone();
                        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let again: Vec<Key> = select_and_order(&pool, ipc, selection, ordering, seed)
                            .unwrap()
                            .iter()
                            .map(key)
                            .collect();
                        sorted == set.iter().map(|&r| expected_order[r]).collect::<Vec<_>>() && again == got_keys
                    }
                };
                let distinct: BTreeSet<usize> = got.iter().map(|p| p.rank).collect();
                if !ok || distinct.len() != ipc {
                    failures.push(format!("case {case}: {selection}/{ordering} (P={n}, ipc={ipc})"));
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Verdict {
        id: 8,
        name: "ordering/selection oracles",
        pass: failures.is_empty() && secs < 5.0,
        detail: format!(
            "{} of {checks} selection x ordering checks disagree with brute-force sorts on 1000 random pools{}; {secs:.2}s (limit 5s)",
            failures.len(),
            failures.first().map_or(String::new(), |f| format!(" (first: {f})"))
        ),
    }
}

// ---------------------------------------------------------------- desk-scale experiment

struct Desk {
    bench: Bench,
    teacher: TeacherSnapshot,
    summary: ExperimentSummary,
    secs: f64,
}

fn desk_experiment() -> Desk {
    let started = Instant::now();
    let plan = plan("digits-ipc10").unwrap();
    let bench = load_bench(plan.profile.clone(), None).unwrap();
    let (teacher, squeeze) = train_teacher(&bench, &plan, &Device::Cpu).unwrap();
    let out = ExperimentOutput {
        dir: PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-digits-ipc10"),
    };
    let _ = std::fs::remove_dir_all(&out.dir);
    let summary = run_arms(&bench, &teacher, &squeeze, &plan, &Arm::ALL, 1, &Device::Cpu, Some(&out)).unwrap();
    Desk {
        bench,
        teacher,
        summary,
        secs: started.elapsed().as_secs_f64(),
    }
}

fn top1(s: &ExperimentSummary, arm: Arm) -> f64 {
    100.0 * s.arm(arm).map_or(f64::NAN, |a| a.mean_top1)
}

fn desk_line(s: &ExperimentSummary) -> String {
    format!(
        "digits IPC10 (3 seeds): delt {:.2}, init_only {:.2}, gaussian {:.2}, random_real {:.2}",
        top1(s, Arm::Delt),
        top1(s, Arm::InitOnly),
        top1(s, Arm::Gaussian),
        top1(s, Arm::RandomReal)
    )
}

// ---------------------------------------------------------------- 3

fn degenerate_equivalence(desk: &Desk) -> Verdict {
    let started = Instant::now();
    let config = RecoveryConfig {
        num_subbatches: 1,
        max_iterations: 40,
        seed: 5,
        ..plan("digits-ipc10").unwrap().recovery
    };
    let opts = DistillOptions {
        run_id: "equivalence".into(),
        ..Default::default()
    };
    let (a, la) = distill(&desk.bench.train, &desk.teacher, &desk.bench.profile, &config, &opts).unwrap();
    let base = DistillOptions { baseline: true, ..opts };
    let (b, lb) = distill(&desk.bench.train, &desk.teacher, &desk.bench.profile, &config, &base).unwrap();
    let bits = |d: &delt_core::types::DistilledDataset| -> Vec<u32> {
        d.samples.iter().flat_map(|s| s.image.data().iter().map(|v| v.to_bits())).collect()
    };
    let images_equal = bits(&a) == bits(&b);
    let meta_equal = a
        .samples
        .iter()
        .zip(&b.samples)
        .all(|(x, y)| (x.class_id, x.ipc_index, x.iterations_trained) == (y.class_id, y.ipc_index, y.iterations_trained));
    let losses_equal = la.iter().map(|r| r.loss.to_bits()).eq(lb.iter().map(|r| r.loss.to_bits()));
    Verdict {
        id: 3,
        name: "degenerate equivalence",
        pass: images_equal && meta_equal && losses_equal,
        detail: format!(
            "M=1 EarlyLate loop vs constant-iteration loop on digits (100 images, 40 iterations): images bit-identical {images_equal}, slot metadata equal {meta_equal}, loss trace bit-identical {losses_equal}; {:.1}s",
            started.elapsed().as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------- 4, 5

fn cifar_summary() -> Result<ExperimentSummary, String> {
    let root = std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| format!("{DATA_ROOT_ENV} is not set"))?;
    if !root.join("cifar-10-batches-bin").join("test_batch.bin").is_file() {
        return Err(format!("no CIFAR-10 binary batches under {}", root.display()));
    }
    let out = ExperimentOutput {
        dir: PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cifar10-ipc10"),
    };
    reproduce("cifar10-ipc10", Some(&root), 1, &Device::Cpu, Some(&out)).map_err(|e| e.to_string())
}

fn cifar_reproduction(cifar: &Result<ExperimentSummary, String>, desk: Option<&Desk>) -> Verdict {
    let proxy = desk.map_or(String::new(), |d| {
        let s = &d.summary;
        let delt = top1(s, Arm::Delt);
        format!(
            " [for information, {}; fallback margins on digits: vs random_real {:+.2}, vs gaussian {:+.2} (need >= +2.0)]",
            desk_line(s),
            delt - top1(s, Arm::RandomReal),
            delt - top1(s, Arm::Gaussian)
        )
    });
    match cifar {
        Err(why) => Verdict {
            id: 4,
            name: "CIFAR-10 IPC10 ResNet-18 reproduction",
            pass: false,
            detail: format!("blocked: {why}; target 43.0 +/- 3.0 top-1 not evaluated{proxy}"),
        },
        Ok(s) => {
            let delt = top1(s, Arm::Delt);
            let in_band = (delt - 43.0).abs() <= 3.0;
            let fallback = delt >= top1(s, Arm::RandomReal) + 2.0 && delt >= top1(s, Arm::Gaussian) + 2.0;
            Verdict {
                id: 4,
                name: "CIFAR-10 IPC10 ResNet-18 reproduction",
                pass: in_band || fallback,
                detail: format!(
                    "delt {delt:.2} (band 40.0..46.0: {in_band}); random_real {:.2}, gaussian M=1 {:.2} (fallback margins >= 2.0: {fallback})",
                    top1(s, Arm::RandomReal),
                    top1(s, Arm::Gaussian)
                ),
            }
        }
    }
}

fn earlylate_gain(cifar: &Result<ExperimentSummary, String>, desk: Option<&Desk>) -> Verdict {
    let proxy = desk.map_or(String::new(), |d| {
        format!(
            " [for information, digits IPC10: delt {:.2} vs init_only {:.2}, margin {:+.2} (need >= +0.5)]",
            top1(&d.summary, Arm::Delt),
            top1(&d.summary, Arm::InitOnly),
            top1(&d.summary, Arm::Delt) - top1(&d.summary, Arm::InitOnly)
        )
    });
    match cifar {
        Err(why) => Verdict {
            id: 5,
            name: "EarlyLate vs constant-iteration (CIFAR-10 IPC10)",
            pass: false,
            detail: format!("blocked: {why}{proxy}"),
        },
        Ok(s) => {
            let (d, i) = (top1(s, Arm::Delt), top1(s, Arm::InitOnly));
            Verdict {
                id: 5,
                name: "EarlyLate vs constant-iteration (CIFAR-10 IPC10)",
                pass: d >= i + 0.5,
                detail: format!("init+EarlyLate {d:.2} vs init-only {i:.2} over 3 seeds (need +0.5)"),
            }
        }
    }
}

// ---------------------------------------------------------------- 6, 7

fn diversity(desk: &Desk) -> Verdict {
    let s = &desk.summary;
    let d = s.arm(Arm::Delt).and_then(|a| a.mean_diversity).unwrap_or(f64::NAN);
    let b = s.arm(Arm::InitOnly).and_then(|a| a.mean_diversity).unwrap_or(f64::NAN);
    let rel = (b - d) / b;
    Verdict {
        id: 6,
        name: "diversity",
        pass: rel >= 0.01,
        detail: format!(
            "mean intra-class cosine similarity (digits IPC10, 3 seeds): EarlyLate {d:.4} vs M=1 {b:.4}, relative reduction {:.2}% (need >= 1%)",
            100.0 * rel
        ),
    }
}

fn cost(desk: &Desk) -> Verdict {
    let s = &desk.summary;
    let mut exact = true;
    for o in &s.outcomes {
        if let Some(logged) = o.image_iterations {
            let (cfg, _) = o.arm.recovery(&s.plan.recovery, o.seed).unwrap();
            let closed = EarlyLateSchedule::from_config(&cfg).unwrap().total_image_iterations()
                * s.plan.profile.num_classes as u64;
            exact &= logged == closed;
        }
    }
    let wall = |arm: Arm| -> f64 {
        s.outcomes
            .iter()
            .filter(|o| o.arm == arm)
            .filter_map(|o| o.recovery_seconds)
            .sum()
    };
    let (d, b) = (wall(Arm::Delt), wall(Arm::InitOnly));
    let ratio = d / b;
    Verdict {
        id: 7,
        name: "cost",
        pass: exact && ratio <= 0.85,
        detail: format!(
            "logged image-iterations equal the closed form for every run: {exact}; recovery wall time EarlyLate {d:.1}s vs M=1 {b:.1}s at MI={} = {:.1}% (need <= 85%)",
            s.plan.recovery.max_iterations,
            100.0 * ratio
        ),
    }
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("DELT_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|s| s.contains(&id));
    // libtest-style flags (e.g. --nocapture) are accepted and ignored
    let mut verdicts = Vec::new();
    let mut run = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };
    if wanted(1) {
        run(schedule_arithmetic());
    }
    if wanted(2) {
        run(bn_regularizer_checks());
    }
    if wanted(8) {
        run(ordering_oracles());
    }
    let needs_desk = [3, 4, 5, 6, 7].iter().any(|&i| wanted(i));
    let desk = needs_desk.then(desk_experiment);
    if let Some(d) = &desk {
        println!(
            "desk experiment: teacher val top-1 {:.4}; {}; {:.0}s",
            d.summary.squeeze.val_accuracy.unwrap_or(f64::NAN),
            desk_line(&d.summary),
            d.secs
        );
    }
    if wanted(3) {
        run(degenerate_equivalence(desk.as_ref().unwrap()));
    }
    if wanted(4) || wanted(5) {
        let cifar = cifar_summary();
        if wanted(4) {
            run(cifar_reproduction(&cifar, desk.as_ref()));
        }
        if wanted(5) {
            run(earlylate_gain(&cifar, desk.as_ref()));
        }
    }
    if wanted(6) {
        run(diversity(desk.as_ref().unwrap()));
    }
    if wanted(7) {
        run(cost(desk.as_ref().unwrap()));
    }
    verdicts.sort_by_key(|v| v.id);
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        verdicts.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" (criteria {failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
