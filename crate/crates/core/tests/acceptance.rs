//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `FECIL_ACCEPT=1,4,9` runs a subset.
//!
//! The ablation criteria train 25 desk-scale runs (5 seeds × 5 modes) and
//! take hours on one core; `FECIL_THREADS` spreads seeds over more cores.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use fecil_core::ablation::{run_ablation, thread_budget, AblationRun};
use fecil_core::backbone::{bit_identical, expand, weight_align, Classifier};
use fecil_core::checkpoint::load_compact;
use fecil_core::config::Config;
use fecil_core::data::{load_cifar100, load_idx, Split};
use fecil_core::gradcheck::{run_suite, TOLERANCE};
use fecil_core::memory::herding_select;
use fecil_core::mixaug::{cutmix_apply, sample_box, sample_lambda, AugMode};
use fecil_core::nn::Param;
use fecil_core::protocol::build_incremental_dataset;
use fecil_core::report::AblationTable;
use fecil_core::trainer::{accuracy, compact_logits, median_epoch_seconds, train_expansion, Phase, Session, StepReport};
use fecil_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn desk_config() -> Config {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    Config::load(&path).expect("configs/desk.toml")
}

fn fail(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(20, 2024).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let cases: usize = reports.iter().map(|r| r.trials).sum();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let bad: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.primitive).collect();
    fail(bad.is_empty(), || format!("{bad:?} exceed {TOLERANCE:e}"))?;
    fail(cases >= 100, || format!("only {cases} cases"))?;
    fail(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} primitives, {cases} cases, max rel err {worst:.2e} < {TOLERANCE:e}, {secs:.1}s",
        reports.len()
    ))
}

fn c2_cutmix() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w, h) = (16, 16);
    let zeros = vec![0.0f32; w * h];
    let ones = vec![1.0f32; w * h];
    for plan in 0..10_000 {
        let lambda = sample_lambda(0.2, &mut rng).map_err(|e| e.to_string())?;
        let rect = sample_box(w, h, lambda, &mut rng).map_err(|e| e.to_string())?.clip(w, h);
        let (mixed, lambda_eff) = cutmix_apply(&zeros, &ones, [1, h, w], rect).map_err(|e| e.to_string())?;
        let from_j = mixed.iter().filter(|&&v| v == 1.0).count();
        let expected = (1.0 - lambda_eff) * 256.0;
        fail((from_j as f64 - expected).abs() < 1e-9, || {
            format!("plan {plan}: {from_j} pixels from x_j, (1-lambda_eff)*256 = {expected}")
        })?;
    }
    let n = 200_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_lambda(0.2, &mut rng).unwrap()).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    fail((mean - 0.5).abs() <= 0.01, || format!("Beta mean {mean:.4}"))?;
    fail((var - 0.1786).abs() <= 0.005, || format!("Beta variance {var:.4}"))?;
    Ok(format!("10000 plans exact; Beta(0.2,0.2) mean {mean:.4} var {var:.4}"))
}

/// Exhaustive greedy on integer points; exact, lowest index wins ties.
fn greedy(points: &[Vec<i64>], m: usize) -> Vec<usize> {
    let n = points.len() as i128;
    let d = points[0].len();
    let total: Vec<i128> = (0..d).map(|c| points.iter().map(|p| p[c] as i128).sum()).collect();
    let mut chosen = Vec::new();
    let mut sum = vec![0i128; d];
    for k in 1..=m.min(points.len()) as i128 {
        let mut best: Option<(i128, usize)> = None;
        for (j, p) in points.iter().enumerate() {
            if chosen.contains(&j) {
                continue;
            }
            let dist: i128 = (0..d).map(|c| (k * total[c] - n * (sum[c] + p[c] as i128)).pow(2)).sum();
            if best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, j));
            }
        }
        let (_, j) = best.unwrap();
        for c in 0..d {
            sum[c] += points[j][c] as i128;
        }
        chosen.push(j);
    }
    chosen
}

fn c3_herding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ties = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=4);
        let m = rng.random_range(1..=n);
        // narrow ranges make duplicate points and equal distances common
        let span = if trial % 2 == 0 { 1 } else { 9 };
        let points: Vec<Vec<i64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-span..=span)).collect()).collect();
        let distinct: BTreeSet<_> = points.iter().collect();
        ties += usize::from(distinct.len() < n);
        let t = Tensor::from_fn(&[n, d], |k| points[k / d][k % d] as f64);
        let got = herding_select(&t, m).map_err(|e| e.to_string())?;
        let want = greedy(&points, m);
        fail(got == want, || {
            format!("trial {trial}: {points:?} m={m}: got {got:?}, oracle {want:?}")
        })?;
    }
    Ok(format!("1000 trials match the exhaustive greedy ({ties} with duplicate points)"))
}

fn c4_freeze_and_align() -> Outcome {
    let mut cfg = desk_config();
    cfg.train.epochs_expand = 3;
    cfg.train.epochs_compress = 3;
    let session = Session::new(cfg).map_err(|e| e.to_string())?;
    let (state, _) = session.bootstrap().map_err(|e| e.to_string())?;
    let new_ids = session.sequence.tasks[1].clone();
    let task = session.train.filter_classes(&new_ids).map_err(|e| e.to_string())?;
    let data = build_incremental_dataset(&task, &state.memory).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut big = expand(&state.model, &new_ids, &mut rng).map_err(|e| e.to_string())?;
    let mut before = Vec::new();
    state.model.extractor.state("x", &mut before);
    let ctx = fecil_core::trainer::PhaseContext {
        seed: 0,
        step: 2,
        train: &session.config.train,
        norm: &session.norm,
        positions: &session.positions,
    };
    train_expansion(&mut big, &data, &ctx).map_err(|e| e.to_string())?;
    let mut after = Vec::new();
    big.prev.state("x", &mut after);
    fail(bit_identical(&before, &after), || "previous extractor or BN stats changed".into())?;
    let stats = after.iter().filter(|(k, _)| k.contains("running")).count();

    let norm_gap = |h: &Classifier, old: &[usize], new: &[usize]| {
        let mean = |rows: &[usize]| {
            rows.iter()
                .map(|&r| h.weight.value.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / rows.len() as f64
        };
        (mean(old) - mean(new)).abs()
    };
    let old_rows: Vec<usize> = (0..big.old_classes).collect();
    let new_rows: Vec<usize> = (big.old_classes..big.head_big.num_classes()).collect();
    let trained_gap = norm_gap(&big.head_big, &old_rows, &new_rows);
    fail(trained_gap < 1e-6, || format!("trained head norm gap {trained_gap:e}"))?;

    // random heads with unbalanced groups, 1000 random inputs each
    let mut worst_gap: f64 = 0.0;
    for trial in 0..20 {
        let (classes, dim, old) = (10, 32, 6);
        let mut w = Tensor::from_fn(&[classes, dim], |_| rng.random_range(-1.0f32..1.0));
        for r in old..classes {
            for v in w.row_mut(r) {
                *v *= 3.0;
            }
        }
        let b = Tensor::from_fn(&[classes], |_| rng.random_range(-1.0f32..1.0));
        let mut head = Classifier {
            weight: Param::new(w),
            bias: Param::new(b),
            class_ids: (0..classes as u32).collect(),
        };
        let original = head.clone();
        let ids: Vec<u32> = head.class_ids.clone();
        weight_align(&mut head, &ids[..old], &ids[old..]).map_err(|e| e.to_string())?;
        let rows_old: Vec<usize> = (0..old).collect();
        let rows_new: Vec<usize> = (old..classes).collect();
        worst_gap = worst_gap.max(norm_gap(&head, &rows_old, &rows_new));
        let logits = |h: &Classifier, x: &[f32]| -> Vec<f32> {
            (0..classes)
                .map(|r| h.weight.value.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f32>() + h.bias.value.data()[r])
                .collect()
        };
        let argmax = |v: &[f32]| v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
        for input in 0..1000 {
            let x: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let (a, b) = (logits(&original, &x), logits(&head, &x));
            fail(argmax(&a[..old]) == argmax(&b[..old]), || {
                format!("head {trial} input {input}: old-group argmax moved")
            })?;
            fail(argmax(&a[old..]) == argmax(&b[old..]), || {
                format!("head {trial} input {input}: new-group argmax moved")
            })?;
        }
    }
    fail(worst_gap < 1e-6, || format!("random head norm gap {worst_gap:e}"))?;
    Ok(format!(
        "frozen extractor bit-identical ({} tensors, {stats} BN stat tensors); norm gap {:.1e} trained, {:.1e} random; argmax invariant on 20×1000 inputs",
        after.len(),
        trained_gap,
        worst_gap
    ))
}

fn run_of(runs: &[AblationRun], seed: u64, mode: AugMode) -> &[StepReport] {
    &runs.iter().find(|r| r.seed == seed && r.mode == mode).unwrap().reports
}

fn c5_ablation(table: &AblationTable) -> Outcome {
    let last = |s, m| table.cell(s, m).unwrap().last;
    let wins = table
        .seeds
        .iter()
        .filter(|&&s| last(s, AugMode::RCutmix) > last(s, AugMode::None))
        .count();
    let mean = |m| table.mean(m).unwrap();
    let gap = mean(AugMode::RCutmix).1 - mean(AugMode::None).1;
    let (rc, c) = (mean(AugMode::RCutmix).0, mean(AugMode::Cutmix).0);
    let (rm, m) = (mean(AugMode::RMixup).0, mean(AugMode::Mixup).0);
    let detail = format!(
        "r_cutmix beats none on {wins}/{} seeds, last gap {gap:+.2}; avg r_cutmix {rc:.2} vs cutmix {c:.2}, r_mixup {rm:.2} vs mixup {m:.2}",
        table.seeds.len()
    );
    if wins >= 4 && gap > 0.0 && rc >= c && rm >= m {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c6_fidelity(runs: &[AblationRun], seeds: &[u64]) -> Outcome {
    let mut worst: f64 = 0.0;
    for &s in seeds {
        let reports = run_of(runs, s, AugMode::RCutmix);
        let params = reports[0].compact_extractor_params;
        for r in reports {
            let gap = (r.big.top1 - r.compact.top1).abs();
            worst = worst.max(gap);
            fail(gap <= 6.0, || {
                format!("seed {s} step {}: big {:.2} vs compact {:.2}", r.step, r.big.top1, r.compact.top1)
            })?;
            fail(r.compact_extractor_params == params, || {
                format!(
                    "seed {s} step {}: extractor has {} params, step 1 had {params}",
                    r.step, r.compact_extractor_params
                )
            })?;
        }
    }
    Ok(format!(
        "largest big/compact top-1 gap {worst:.2} points over {} seeds; extractor size constant",
        seeds.len()
    ))
}

fn c7_timing() -> Outcome {
    let mut cfg = desk_config();
    cfg.train.epochs_expand = 2;
    cfg.train.epochs_compress = 8;
    let base = Session::new(cfg).map_err(|e| e.to_string())?;
    let none = base.with_aug(AugMode::None);
    let rcut = base.with_aug(AugMode::RCutmix);
    let (mut a, _) = base.bootstrap().map_err(|e| e.to_string())?;
    let mut b = a.clone();
    let mut ratios = Vec::new();
    // interleave the two runs step by step so drift hits both equally
    while a.steps_done < base.steps() {
        let (na, ra, _) = none.advance(&a).map_err(|e| e.to_string())?;
        let (nb, rb, _) = rcut.advance(&b).map_err(|e| e.to_string())?;
        let ta = median_epoch_seconds(&ra.epochs, Phase::Compress).map_err(|e| e.to_string())?;
        let tb = median_epoch_seconds(&rb.epochs, Phase::Compress).map_err(|e| e.to_string())?;
        ratios.push(tb / ta);
        a = na;
        b = nb;
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    let detail = format!(
        "per-step r_cutmix/none compression epoch ratio [{}], mean {mean:.3}",
        shown.join(", ")
    );
    let flat = ratios.iter().all(|r| (r / mean - 1.0).abs() <= 0.10);
    if mean <= 1.5 && ratios.iter().all(|&r| r <= 1.5) && flat {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_to(dir: &Path, cfg: &Config) -> Result<Vec<StepReport>, String> {
    let session = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (_, reports) = session.run(Some(dir)).map_err(|e| e.to_string())?;
    let summary = fecil_core::report::RunSummary::new(
        &reports,
        cfg.run.seed,
        cfg.dataset.seed,
        cfg.train.compress_aug,
        cfg.run.record_epoch_time,
    )
    .map_err(|e| e.to_string())?;
    fecil_core::report::write_run(dir, &summary, &reports, cfg.run.record_epoch_time).map_err(|e| e.to_string())?;
    Ok(reports)
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn short_config() -> Config {
    let mut cfg = desk_config();
    cfg.train.epochs_expand = 4;
    cfg.train.epochs_compress = 4;
    cfg
}

fn c8_determinism() -> Outcome {
    let cfg = short_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_to(a.path(), &cfg)?;
    run_to(b.path(), &cfg)?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    fail(names(&fa) == names(&fb), || "output file sets differ".into())?;
    let mut compared = 0;
    for (x, y) in fa.iter().zip(&fb) {
        if x.file_name().unwrap() == "timing.csv" {
            continue;
        }
        fail(fs::read(x).unwrap() == fs::read(y).unwrap(), || {
            format!("{} differs", x.file_name().unwrap().to_string_lossy())
        })?;
        compared += 1;
    }
    Ok(format!(
        "{compared} files byte-identical across two runs (metrics.csv, checkpoints, memory snapshots)"
    ))
}

fn c9_formats() -> Outcome {
    let cfg = short_config();
    let dir = tempfile::tempdir().unwrap();
    let reports = run_to(dir.path(), &cfg)?;
    let last = reports.last().unwrap();
    let session = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (mut net, norm) = load_compact(&dir.path().join(format!("ckpt_step{}", last.step))).map_err(|e| e.to_string())?;
    let (images, labels) = session.seen_test(last.step).map_err(|e| e.to_string())?;
    let acc = accuracy(&compact_logits(&mut net, &images, &norm, cfg.run.eval_batch_size).unwrap(), &labels).unwrap();
    fail(acc == last.compact, || format!("reloaded {acc:?} vs in-run {:?}", last.compact))?;

    let fx = tempfile::tempdir().unwrap();
    let p = |name: &str| fx.path().join(name);
    let mut rejected = Vec::new();
    let mut expect_err = |what: &str, r: fecil_core::Result<fecil_core::data::LabeledDataset>| -> Result<(), String> {
        match r {
            Ok(_) => Err(format!("{what}: accepted")),
            Err(e) => {
                let msg = e.to_string();
                fail(msg.contains(fx.path().to_str().unwrap()), || format!("{what}: no path in '{msg}'"))?;
                rejected.push(what.to_string());
                Ok(())
            }
        }
    };
    // CIFAR-100: one good record, then malformed variants
    let mut rec = vec![3u8, 42];
    rec.extend((0..3072).map(|i| (i % 251) as u8));
    fs::write(p("good.bin"), &rec).unwrap();
    let good = load_cifar100(&p("good.bin"), true, Split::Test).map_err(|e| e.to_string())?;
    fail(good.labels == vec![42], || "good CIFAR record misread".into())?;
    fs::write(p("short.bin"), &rec[..3000]).unwrap();
    expect_err("cifar truncated", load_cifar100(&p("short.bin"), true, Split::Test))?;
    let mut bad_label = rec.clone();
    bad_label[1] = 100;
    fs::write(p("label.bin"), &bad_label).unwrap();
    expect_err("cifar label range", load_cifar100(&p("label.bin"), true, Split::Test))?;
    fs::write(p("c10.bin"), &rec[1..]).unwrap();
    expect_err("cifar-10 layout", load_cifar100(&p("c10.bin"), true, Split::Test))?;

    // IDX: two 2×2 images
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    img.extend([0u8, 64, 128, 255, 1, 2, 3, 4]);
    let lab = vec![0u8, 0, 8, 1, 0, 0, 0, 2, 1, 0];
    fs::write(p("img"), &img).unwrap();
    fs::write(p("lab"), &lab).unwrap();
    let ok = load_idx(&p("img"), &p("lab"), 2, Split::Train).map_err(|e| e.to_string())?;
    fail(ok.labels == vec![1, 0] && ok.images.data()[3] == 1.0, || "good IDX misread".into())?;
    let mut magic = img.clone();
    magic[3] = 1;
    fs::write(p("magic"), &magic).unwrap();
    expect_err("idx magic", load_idx(&p("magic"), &p("lab"), 2, Split::Train))?;
    fs::write(p("trunc"), &img[..20]).unwrap();
    expect_err("idx truncated", load_idx(&p("trunc"), &p("lab"), 2, Split::Train))?;
    let mut count = lab.clone();
    count[7] = 3;
    count.push(0);
    fs::write(p("count"), &count).unwrap();
    expect_err("idx count mismatch", load_idx(&p("img"), &p("count"), 2, Split::Train))?;
    expect_err("idx label range", load_idx(&p("img"), &p("lab"), 1, Split::Train))?;
    Ok(format!(
        "reloaded checkpoint reproduces top-1 {:.2} / top-5 {:.2}; rejected {} malformed fixtures with path diagnostics",
        acc.top1,
        acc.top5,
        rejected.len()
    ))
}

fn main() -> ExitCode {
    let wanted: Option<BTreeSet<u32>> = std::env::var("FECIL_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let on = |n: u32| wanted.as_ref().is_none_or(|w| w.contains(&n));
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        if on(n) {
            let start = Instant::now();
            let r = f();
            let line = match &r {
                Ok(d) => format!("criterion {n} PASS  {name}: {d}"),
                Err(d) => format!("criterion {n} FAIL  {name}: {d}"),
            };
            println!("{line}  [{:.0}s]", start.elapsed().as_secs_f64());
            results.push((n, name, r));
        }
    };
    record(1, "gradient suite", &c1_gradients);
    record(2, "cutmix mask law", &c2_cutmix);
    record(3, "herding oracle", &c3_herding);
    record(4, "freezing and weight alignment", &c4_freeze_and_align);
    if on(5) || on(6) {
        let cfg = desk_config();
        let seeds: Vec<u64> = (0..5).map(|s| cfg.run.seed + s).collect();
        let start = Instant::now();
        match run_ablation(&cfg, &seeds, &AugMode::ALL, thread_budget(), None) {
            Ok((table, runs)) => {
                println!("ablation ({:.0}s):\n{}", start.elapsed().as_secs_f64(), table.to_markdown());
                record(5, "desk-scale ablation", &|| c5_ablation(&table));
                record(6, "compression fidelity", &|| c6_fidelity(&runs, &seeds));
            }
            Err(e) => {
                let msg = e.to_string();
                record(5, "desk-scale ablation", &|| Err(msg.clone()));
                record(6, "compression fidelity", &|| Err(msg.clone()));
            }
        }
    }
    record(7, "epoch-time overhead", &c7_timing);
    record(8, "determinism", &c8_determinism);
    record(9, "format round-trips", &c9_formats);
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
