//! Acceptance checks for the whole toolkit. Each criterion prints one
//! `PASS` or `FAIL` line with the measured values; the process exits
//! nonzero when any criterion fails.
//!
//! Tolerances are fixed here and never adjusted at run time:
//! gradient relative error < 1e-3, DPO calibration ±1e-5, swap identity
//! ±1e-6, RM zero-gap ±1e-6, uniform SFT loss ±0.01.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use posttrain::audit::{contamination, Doc, IndexMode, NgramIndex};
use posttrain::cli::{replay, run_recorded, Invocation};
use posttrain::config::RunConfig;
use posttrain::sweep::{contour_csv, emit_contour, parse_contour, ratio_analysis, run_sweep, ContourRow, Stage, SweepGrid, TaskSizes};
use posttrain_core::data::{PreferencePair, SftExample};
use posttrain_core::dpo::{cache_ref_logprobs, dpo_batch_loss, dpo_loss, pair_stats, train_dpo, LogpPair};
use posttrain_core::gradcheck::{grad_check, GradCheck};
use posttrain_core::model::{ModelCheckpoint, ModelConfig, ModelVars, Role};
use posttrain_core::rm::{rm_accuracy, rm_batch_loss, rm_loss, train_rm, RewardModel, RewardVars};
use posttrain_core::sft::{sft_batch_loss, sft_loss, train_sft};
use posttrain_core::tasks::{evaluate, gen_task, separable_pairs, TaskKind, TaskSpec};
use posttrain_core::train::{lr_at, lr_bs_ratio, render_ratio, TrainConfig, TrainError};
use posttrain_core::{Graph, Tensor, TensorError};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tensor_err(e: TrainError) -> TensorError {
    match e {
        TrainError::Tensor(t) => t,
        other => panic!("loss construction failed: {other}"),
    }
}

// ---------------------------------------------------------------------------
// 1. LR/BS ratio cells of the published hyperparameter tables

fn ratio_tables() -> Outcome {
    // (lr, batch size, scale exponent, decimals, printed value)
    let cells: [(f64, usize, i32, usize, &str); 11] = [
        (9.0e-5, 8, 6, 2, "11.25"),
        (3.1e-6, 32, 6, 3, "0.097"),
        (5.0e-6, 128, 6, 3, "0.039"),
        (2.0e-6, 128, 6, 3, "0.016"),
        (8.0e-7, 12, 7, 3, "0.667"),
        (5.0e-7, 32, 7, 3, "0.156"),
        (5.0e-7, 128, 7, 3, "0.039"),
        (2.0e-7, 128, 7, 3, "0.016"),
        (4.0e-5, 4, 7, 0, "100"),
        (7.5e-7, 8, 7, 3, "0.938"),
        (5.0e-7, 128, 7, 3, "0.039"),
    ];
    let mut rendered = Vec::new();
    for (lr, bs, exp, decimals, printed) in cells {
        let got = render_ratio(lr_bs_ratio(lr, bs), exp, decimals);
        ensure(got == printed, || format!("lr {lr:e} / bs {bs}: rendered {got}, table prints {printed}"))?;
        rendered.push(got);
    }
    Ok(format!("{} cells match: {}", cells.len(), rendered.join(" ")))
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients of the three losses against finite differences

const GRAD_TOL: f64 = 1e-3;

fn grad_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 32,
        seed,
        ..ModelConfig::default()
    }
}

fn gradients() -> Outcome {
    let check = |seed: u64| GradCheck::sampled(1e-3, 4, seed);
    let train = TrainConfig {
        max_seq_len: 32,
        ..TrainConfig::default()
    };
    let mut worst = [0.0f64; 3];
    for seed in 0..10u64 {
        let cfg = grad_config(seed);
        let policy = ModelCheckpoint::init(cfg.clone()).map_err(err)?;

        let sft_data: Vec<SftExample> = gen_task(&TaskSpec::new(TaskKind::Copy, 2, 1, seed)).map_err(err)?.train_examples();
        let batch: Vec<&SftExample> = sft_data.iter().collect();
        let sft = grad_check(
            |g, vars| sft_batch_loss(g, &ModelVars::from_vars(cfg.clone(), vars), &batch, 32).map_err(tensor_err),
            policy.tensors(),
            check(seed),
        )
        .map_err(err)?;

        let pairs = separable_pairs(2, seed).map_err(err)?;
        let pair_refs: Vec<&PreferencePair> = pairs.iter().collect();
        let reference = ModelCheckpoint::init(grad_config(seed + 1000)).map_err(err)?.with_role(Role::Reference);
        let cache = cache_ref_logprobs(&reference, &pairs, train.length_normalize, 32).map_err(err)?;
        ensure(cache.len() == pairs.len(), || "reference cache dropped a pair".into())?;
        let dpo = grad_check(
            |g, vars| dpo_batch_loss(g, &ModelVars::from_vars(cfg.clone(), vars), &pair_refs, &cache, &train).map_err(tensor_err),
            policy.tensors(),
            check(seed),
        )
        .map_err(err)?;

        let mut rng = StdRng::seed_from_u64(seed);
        let head_w = Tensor::new(vec![32, 1], (0..32).map(|_| rng.gen_range(-0.5f32..0.5)).collect()).map_err(err)?;
        let head_b = Tensor::new(vec![1], vec![rng.gen_range(-0.5f32..0.5)]).map_err(err)?;
        let rm = RewardModel::from_parts(policy.clone(), head_w, head_b).map_err(err)?;
        let rm_report = grad_check(
            |g, vars| rm_batch_loss(g, &RewardVars::from_vars(cfg.clone(), vars), &pair_refs, 32).map_err(tensor_err),
            &rm.tensors(),
            check(seed),
        )
        .map_err(err)?;

        for (slot, (name, report)) in [("sft", &sft), ("dpo", &dpo), ("rm", &rm_report)].into_iter().enumerate() {
            ensure(report.checked > 0, || format!("{name}: no elements checked"))?;
            ensure(report.max_rel_err < GRAD_TOL, || format!("{name} seed {seed}: max rel err {:.3e} at {:?}", report.max_rel_err, report.worst))?;
            worst[slot] = worst[slot].max(report.max_rel_err);
        }
    }
    Ok(format!("10 seeds, max rel err sft {:.2e}, dpo {:.2e}, rm {:.2e} (< {GRAD_TOL:e})", worst[0], worst[1], worst[2]))
}

// ---------------------------------------------------------------------------
// 3. DPO loss calibration

fn dpo_calibration() -> Outcome {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 64,
        seed: 11,
        ..ModelConfig::default()
    };
    let model = ModelCheckpoint::init(cfg.clone()).map_err(err)?.with_role(Role::Policy);
    let pairs = separable_pairs(16, 3).map_err(err)?;
    let mut worst = 0.0f64;
    for normalize in [true, false] {
        let cache = cache_ref_logprobs(&model, &pairs, normalize, 64).map_err(err)?;
        for beta in [0.01, 0.1, 1.0, 5.0, 10.0, 100.0] {
            for size in [1usize, 2, 5, 16] {
                let train = TrainConfig {
                    beta,
                    length_normalize: normalize,
                    max_seq_len: 64,
                    ..TrainConfig::default()
                };
                let batch: Vec<&PreferencePair> = pairs.iter().take(size).collect();
                let mut g = Graph::<f32>::new();
                let mv = ModelVars::bind(&mut g, &model, false);
                let loss = dpo_batch_loss(&mut g, &mv, &batch, &cache, &train).map_err(err)?;
                let dev = (g.item(loss) as f64 - std::f64::consts::LN_2).abs();
                ensure(dev <= 1e-5, || format!("beta {beta}, batch {size}: |loss - ln 2| = {dev:e}"))?;
                worst = worst.max(dev);
            }
        }
    }

    let mut rng = StdRng::seed_from_u64(2024);
    let zero = LogpPair {
        chosen: 0.0,
        rejected: 0.0,
        normalized: true,
    };
    let mut worst_swap = 0.0f64;
    for _ in 0..1000 {
        let m: f64 = rng.gen_range(-30.0..30.0);
        let beta: f64 = rng.gen_range(0.01..10.0);
        let plus = dpo_loss(LogpPair { chosen: m, ..zero }, zero, beta).map_err(err)?;
        let minus = dpo_loss(LogpPair { rejected: m, ..zero }, zero, beta).map_err(err)?;
        let dev = ((plus - minus) + beta * m).abs();
        ensure(dev <= 1e-6, || format!("swap identity off by {dev:e} at m={m}, beta={beta}"))?;
        worst_swap = worst_swap.max(dev);
    }
    Ok(format!("policy = reference: max |loss - ln 2| {worst:.1e}; swap identity max dev {worst_swap:.1e} over 1000 margins"))
}

// ---------------------------------------------------------------------------
// 4 and 5. Preference learning on the separable synthetic set

fn preference_base() -> Result<(ModelCheckpoint, Vec<PreferencePair>, Vec<PreferencePair>), String> {
    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        ..ModelConfig::default()
    };
    let base = ModelCheckpoint::init(cfg).map_err(err)?.with_role(Role::Policy);
    let mut pairs = separable_pairs(2500, 7).map_err(err)?;
    let held = pairs.split_off(2000);
    Ok((base, pairs, held))
}

fn dpo_efficacy() -> Outcome {
    let (base, train, held) = preference_base()?;
    let cfg = TrainConfig::default();
    let held_cache = cache_ref_logprobs(&base, &held, cfg.length_normalize, cfg.max_seq_len).map_err(err)?;
    let before = pair_stats(&base, &held, &held_cache).map_err(err)?;
    let (policy, _, records) = train_dpo(&base, &train, &cfg, |_| {}).map_err(err)?;
    let after = pair_stats(&policy, &held, &held_cache).map_err(err)?;
    let summary = format!(
        "{} steps, held-out margin {:.2e} -> {:.3}, accuracy {:.3} -> {:.3} over {} pairs",
        records.len(),
        before.mean_margin,
        after.mean_margin,
        before.accuracy,
        after.accuracy,
        after.n
    );
    ensure(before.mean_margin.abs() < 1e-6, || format!("initial margin not ~0: {summary}"))?;
    ensure(after.mean_margin > 0.05 && after.accuracy >= 0.8, || summary.clone())?;
    Ok(summary)
}

fn rm_efficacy() -> Outcome {
    let (base, train, held) = preference_base()?;
    let cfg = TrainConfig::default();
    let (rm, records) = train_rm(&base, &train, &cfg, |_| {}).map_err(err)?;
    let report = rm_accuracy(&rm, &held, None, cfg.max_seq_len).map_err(err)?;
    let zero_gap = rm_loss(0.375, 0.375);
    ensure((zero_gap - std::f64::consts::LN_2).abs() <= 1e-6, || format!("rm_loss(x, x) = {zero_gap}"))?;
    // Dyadic values: every shifted sum is exact, so the loss must be too.
    for (c, r, s) in [(1.25, -0.5, 3.0), (-2.0, 0.75, -8.5), (0.0, 0.0, 1024.0), (7.5, 7.25, -0.125)] {
        ensure(rm_loss(c + s, r + s) == rm_loss(c, r), || format!("shift {s} changed rm_loss({c}, {r})"))?;
    }
    let summary = format!("{} steps, held-out accuracy {:.3} over {} pairs; zero-gap loss {zero_gap:.9}", records.len(), report.overall, report.n_pairs);
    ensure(report.overall >= 0.9, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 6. Supervised finetuning on the copy task

fn sft_efficacy() -> Outcome {
    let uniform = ModelCheckpoint::zeros(ModelConfig::default()).map_err(err)?;
    let data = gen_task(&TaskSpec::new(TaskKind::Copy, 6400, 200, 0)).map_err(err)?;
    let examples = data.train_examples();
    let probe: Vec<&SftExample> = examples.iter().take(32).collect();
    let start = sft_loss(&uniform, &probe, 256).map_err(err)?;
    let ln_vocab = (ModelConfig::default().vocab_size as f64).ln();
    ensure((start - ln_vocab).abs() <= 0.01, || format!("uniform-model loss {start}, expected ln 259 = {ln_vocab}"))?;

    let base = ModelCheckpoint::init(ModelConfig::default()).map_err(err)?;
    let (model, records) = train_sft(&base, &examples, &TrainConfig::default(), |_| {}).map_err(err)?;
    let acc = evaluate(&model, &data.eval).map_err(err)?;
    let summary = format!("uniform loss {start:.4} (ln 259 = {ln_vocab:.4}); {} steps, exact match {acc:.3} on {} items", records.len(), data.eval.len());
    ensure(acc >= 0.95, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 7. Warmup/decay schedule

fn schedule() -> Outcome {
    let peak = 1e-3;
    let cfg = TrainConfig {
        peak_lr: peak,
        ..TrainConfig::default()
    };
    let at = |k| lr_at(k, 100, &cfg);
    let apex = (0.1f64 * 100.0).round() as usize;
    let mid = (apex + 100) / 2;
    let values = [at(0), at(100), at(apex), at(mid)];
    ensure(values == [0.0, 0.0, peak, peak / 2.0], || format!("lr at 0/100/{apex}/{mid}: {values:?}"))?;
    Ok(format!("T=100: lr(0)=0, lr(100)=0, lr({apex})={peak:e}, lr({mid})={:e}", values[3]))
}

// ---------------------------------------------------------------------------
// 8. Contamination index against a brute-force oracle

fn random_docs(rng: &mut StdRng, n: usize, vocab: usize, max_len: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// Window-by-window comparison; no hashing, no index.
fn oracle_count(train: &[String], bench: &[String], n: usize) -> usize {
    let windows = |text: &str| -> Vec<Vec<String>> {
        let toks: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if toks.len() < n {
            vec![toks]
        } else {
            toks.windows(n).map(<[String]>::to_vec).collect()
        }
    };
    let train_windows: std::collections::HashSet<Vec<String>> = train.iter().flat_map(|d| windows(d)).collect();
    bench.iter().filter(|b| windows(b).iter().any(|w| train_windows.contains(w))).count()
}

/// Exact percent with two decimals; benchmark sizes divide 10 000, so no
/// rounding is involved.
fn oracle_percent(count: usize, total: usize) -> String {
    assert_eq!(10_000 % total, 0);
    let hundredths = count * 10_000 / total;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

fn as_docs(texts: &[String]) -> Vec<Doc> {
    texts.iter().enumerate().map(|(i, t)| Doc { id: i.to_string(), text: t.clone() }).collect()
}

fn percent_with_index(train: &[String], bench: &[String], n: usize, mode: IndexMode) -> Result<String, String> {
    let mut index = NgramIndex::new(n, mode).map_err(err)?;
    for t in train {
        index.insert_doc(t);
    }
    Ok(contamination(&index, "bench", &as_docs(bench)).map_err(err)?.percent)
}

fn contamination_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(8);
    let bench_sizes = [25usize, 50, 100, 200, 250, 400, 500];
    let mut nonzero = 0;
    for corpus in 0..20 {
        let n_train = rng.gen_range(100..=10_000);
        let n_bench = bench_sizes[corpus % bench_sizes.len()];
        let vocab = rng.gen_range(20..400);
        let n = rng.gen_range(1..=8);
        let train = random_docs(&mut rng, n_train, vocab, 16);
        let bench = random_docs(&mut rng, n_bench, vocab, 16);
        let expected = oracle_percent(oracle_count(&train, &bench, n), n_bench);
        let got = percent_with_index(&train, &bench, n, IndexMode::Exact)?;
        ensure(got == expected, || format!("corpus {corpus} (n={n}, {n_train} docs): index {got}%, oracle {expected}%"))?;
        nonzero += usize::from(expected != "0.00");
    }

    // Planted overlap: one of 50 items shares 8 consecutive words.
    let word = |ns: &str, doc: usize, k: usize| format!("{ns}{doc}x{k}");
    let text = |ns: &str, doc: usize, len: usize| (0..len).map(|k| word(ns, doc, k)).collect::<Vec<_>>().join(" ");
    let train: Vec<String> = (0..200).map(|i| text("train", i, 40)).collect();
    let mut bench: Vec<String> = (0..50).map(|i| text("bench", i, 30)).collect();
    let leak: Vec<String> = (10..18).map(|k| word("train", 5, k)).collect();
    bench[17] = format!("{} {} {}", text("bench", 17, 10), leak.join(" "), text("tail", 17, 10));
    let planted = percent_with_index(&train, &bench, 8, IndexMode::Exact)?;
    ensure(planted == "2.00", || format!("planted fixture: {planted}%"))?;

    let disjoint: Vec<String> = (0..50).map(|i| text("other", i, 30)).collect();
    let zero = percent_with_index(&train, &disjoint, 8, IndexMode::Exact)?;
    ensure(zero == "0.00", || format!("disjoint: {zero}%"))?;

    let subset: Vec<String> = train.iter().step_by(4).cloned().collect();
    let full = percent_with_index(&train, &subset, 8, IndexMode::Exact)?;
    ensure(full == "100.00", || format!("subset: {full}%"))?;
    Ok(format!("20 corpora match the oracle ({nonzero} nonzero); planted {planted}%, disjoint {zero}%, subset {full}%"))
}

// ---------------------------------------------------------------------------
// 9. Sweep shape, determinism and analysis

fn sweep_grid() -> SweepGrid {
    SweepGrid {
        stage: Stage::Sft,
        lr: vec![1e-3, 3e-3, 1e-2],
        batch_size: vec![4, 8, 16],
        seeds: vec![0, 1],
        tasks: vec![TaskKind::Copy, TaskKind::ModChain],
        task: TaskSizes {
            train_size: 32,
            eval_size: 8,
            ..TaskSizes::default()
        },
        model: ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_seq_len: 32,
            ..TrainConfig::default()
        },
    }
}

fn fixture_rows(value: impl Fn(f64, f64, usize) -> f64) -> Vec<ContourRow> {
    let mut rows = Vec::new();
    for lr in [1e-4, 1e-3, 1e-2] {
        for bs in [4usize, 16, 64] {
            for seed in 0..2u64 {
                rows.push(ContourRow {
                    lr,
                    batch_size: bs,
                    ratio: lr / bs as f64,
                    task: "copy".into(),
                    seed,
                    metric: "exact_match".into(),
                    value: value(lr / bs as f64, lr, bs),
                });
            }
        }
    }
    rows
}

fn sweep_checks() -> Outcome {
    let grid = sweep_grid();
    let base = ModelCheckpoint::init(grid.model.clone()).map_err(err)?;
    let first = run_sweep(&grid, &base, 2).map_err(err)?;
    let second = run_sweep(&grid, &base, 1).map_err(err)?;
    ensure(grid.n_cells() == 36 && first.cells.len() == 36, || format!("{} cells", first.cells.len()))?;
    let csv_a = contour_csv(&first.rows());
    let csv_b = contour_csv(&second.rows());
    ensure(csv_a == csv_b, || "rerun produced a different contour".into())?;
    ensure(csv_a.lines().count() == 37, || format!("{} CSV lines", csv_a.lines().count()))?;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("contour.csv");
    emit_contour(&first, &path).map_err(err)?;
    let back = parse_contour(&std::fs::read_to_string(&path).map_err(err)?).map_err(err)?;
    let rows = first.rows();
    ensure(back.len() == rows.len() && rows.iter().zip(&back).all(|(a, b)| a.same_as(b)), || "contour did not round-trip".into())?;

    let up = ratio_analysis(&fixture_rows(|ratio, _, _| ratio.ln())).map_err(err)?;
    let down = ratio_analysis(&fixture_rows(|ratio, _, _| -ratio)).map_err(err)?;
    ensure(up[0].correlation == 1.0 && down[0].correlation == -1.0, || format!("correlations {} / {}", up[0].correlation, down[0].correlation))?;

    // Ties on the mean metric go to the smaller lr, then the smaller batch.
    let tie_lr = ratio_analysis(&fixture_rows(|_, lr, bs| f64::from(u8::from((lr == 1e-3 && bs == 64) || (lr == 1e-2 && bs == 4))))).map_err(err)?;
    let tie_bs = ratio_analysis(&fixture_rows(|_, lr, bs| f64::from(u8::from(lr == 1e-2 && (bs == 16 || bs == 64))))).map_err(err)?;
    let best = |a: &[posttrain::sweep::TaskAnalysis]| a[0].best.as_ref().map(|b| (b.lr, b.batch_size));
    ensure(best(&tie_lr) == Some((1e-3, 64)), || format!("lr tie picked {:?}", best(&tie_lr)))?;
    ensure(best(&tie_bs) == Some((1e-2, 16)), || format!("bs tie picked {:?}", best(&tie_bs)))?;
    let flat = ratio_analysis(&fixture_rows(|_, _, _| 0.5)).map_err(err)?;
    ensure(flat[0].degenerate && flat[0].correlation == 0.0, || "constant metric not flagged degenerate".into())?;
    Ok("36 cells, rerun bit-identical, CSV round-trips, rho +1/-1 on monotone fixtures, ties resolved to smaller lr then batch".into())
}

// ---------------------------------------------------------------------------
// 10. Replay from run manifests

fn tiny_run_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            seed: 5,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            batch_size: 4,
            max_seq_len: 64,
            seed: 5,
            ..TrainConfig::default()
        },
    }
}

fn replay_and_compare(run_dir: &Path, artifact: &str) -> Result<(), String> {
    let out = run_dir.with_extension("replay");
    replay(&run_dir.join("manifest.json"), Some(&out)).map_err(|e| e.line())?;
    let a = std::fs::read(run_dir.join(artifact)).map_err(err)?;
    let b = std::fs::read(out.join(artifact)).map_err(err)?;
    ensure(a == b, || format!("{}: replayed {artifact} differs", run_dir.display()))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let spec = TaskSpec::new(TaskKind::Copy, 24, 8, 3);
    run_recorded(&Invocation::GenTask { spec }, Some(&d.join("task"))).map_err(|e| e.line())?;
    let config = tiny_run_config();

    let sft = Invocation::Sft {
        data: d.join("task/train_sft.jsonl"),
        init: None,
        config: config.clone(),
    };
    run_recorded(&sft, Some(&d.join("sft"))).map_err(|e| e.line())?;
    replay_and_compare(&d.join("sft"), "model.ckpt")?;

    let dpo = Invocation::Dpo {
        pairs: d.join("task/train_pairs.jsonl"),
        init: d.join("sft/model.ckpt"),
        config: config.clone(),
    };
    run_recorded(&dpo, Some(&d.join("dpo"))).map_err(|e| e.line())?;
    replay_and_compare(&d.join("dpo"), "model.ckpt")?;

    let rm = Invocation::Rm {
        pairs: d.join("task/train_pairs.jsonl"),
        init: Some(d.join("sft/model.ckpt")),
        config,
    };
    run_recorded(&rm, Some(&d.join("rm"))).map_err(|e| e.line())?;
    replay_and_compare(&d.join("rm"), "reward.ckpt")?;

    let mut grid = sweep_grid();
    grid.lr.truncate(1);
    grid.batch_size.truncate(1);
    grid.tasks.truncate(1);
    let sweep = Invocation::Sweep { grid, init: None, threads: 1 };
    run_recorded(&sweep, Some(&d.join("sweep"))).map_err(|e| e.line())?;
    replay_and_compare(&d.join("sweep"), "contour.csv")?;
    Ok("sft, dpo, rm checkpoints and the sweep contour are bit-identical on replay".into())
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("ratio-tables", ratio_tables),
        ("gradient-check", gradients),
        ("dpo-calibration", dpo_calibration),
        ("dpo-efficacy", dpo_efficacy),
        ("rm-efficacy", rm_efficacy),
        ("sft-efficacy", sft_efficacy),
        ("lr-schedule", schedule),
        ("contamination-oracle", contamination_oracle),
        ("sweep", sweep_checks),
        ("replay", reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
}
