//! Acceptance suite: every release criterion checked at its stated tolerance,
//! one printed pass/fail line per criterion.
//!
//! The criteria run sequentially inside a single test so the wall-clock
//! measurements (ablation budget, paradigm benchmark) are not perturbed by
//! sibling tests. Run with `cargo test --test acceptance -- --nocapture` to
//! see the lines; the test fails if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagalign::alignment::{
    decode_scores, reweight_descriptions, DecoderWeights, ModelParams, ReweightParams,
};
use tagalign::bench::{bench_paradigm, build_bench_setup, Paradigm};
use tagalign::encoders::{encode_image, ConceptWorld, WorldParams};
use tagalign::evaluation::{ablation_run, average_precision, evaluate, generate_test_set};
use tagalign::labels::EmbeddingCache;
use tagalign::losses::{asl, bce, AslConfig};
use tagalign::numerics::{grad_check, Array};
use tagalign::training::{
    assemble_batch, batch_loss_on_tape, build_setup, load_checkpoint, save_checkpoint,
    tape_model_from_vars, train, SupervisionMode, TrainConfig,
};
use tagalign::substream;

type CheckResult = Result<String, String>;

fn c1_gradient_correctness() -> CheckResult {
    let start = Instant::now();
    // 2 images, 3 tags, 2 descriptions per tag; tag branch with re-weighting
    // plus the in-batch text branch, both under ASL.
    let cfg = TrainConfig {
        batch_size: 2,
        num_tags: 3,
        holdout_fraction: 0.0,
        descriptions_per_tag: 2,
        embed_dim: 6,
        cells: 3,
        proj_dim: 4,
        mode: SupervisionMode::TagTextDescReweight,
        steps: 1,
        ..TrainConfig::with_seed(17)
    };
    let setup = build_setup(&cfg).map_err(|e| e.to_string())?;
    let batch = assemble_batch(&setup, &cfg, substream(cfg.seed, "data"), 0)
        .map_err(|e| e.to_string())?;
    let template = ModelParams::init(cfg.embed_dim, cfg.decoder_depth, cfg.proj_dim, 99);
    let arrays: Vec<Array> = template.named().iter().map(|(_, a)| (*a).clone()).collect();

    let err = grad_check(
        &arrays,
        |tape, vars| {
            let model = tape_model_from_vars(&template, vars);
            batch_loss_on_tape(tape, &model, &setup, &cfg, &batch).map(|(total, _, _)| total)
        },
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    if err < 1e-4 && secs < 10.0 {
        Ok(format!("max relative error {err:.2e} in {secs:.2} s"))
    } else {
        Err(format!("max relative error {err:.2e} in {secs:.2} s (need < 1e-4 in < 10 s)"))
    }
}

fn c2_per_query_independence() -> CheckResult {
    for instance in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let dim = 16;
        let world = ConceptWorld::generate(WorldParams {
            seed: instance,
            num_concepts: 3,
            embed_dim: dim,
            cells: 5,
            context_words_per_concept: 3,
            num_filler_words: 6,
        });
        let feat = encode_image(&[0, 1], &world, 0.05, instance).map_err(|e| e.to_string())?;
        let dw = DecoderWeights::init(dim, 2, &mut rng);
        let q_count = rng.gen_range(2..=6);
        let data: Vec<f64> = (0..q_count * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let queries = Array::new(vec![q_count, dim], data).map_err(|e| e.to_string())?;
        let joint = decode_scores(&feat, &queries, &dw).map_err(|e| e.to_string())?;

        // random strict subset, scored alone
        let take = rng.gen_range(1..=q_count);
        let mut subset_rows = Vec::with_capacity(take * dim);
        let mut cols = Vec::with_capacity(take);
        for _ in 0..take {
            let c = rng.gen_range(0..q_count);
            cols.push(c);
            subset_rows.extend_from_slice(queries.row(c));
        }
        let sub = Array::new(vec![take, dim], subset_rows).map_err(|e| e.to_string())?;
        let alone = decode_scores(&feat, &sub, &dw).map_err(|e| e.to_string())?;
        for (i, &c) in cols.iter().enumerate() {
            if alone.data()[i].to_bits() != joint.data()[c].to_bits() {
                return Err(format!(
                    "instance {instance}: subset query {i} (column {c}) differs: {} vs {}",
                    alone.data()[i],
                    joint.data()[c]
                ));
            }
        }
    }
    Ok("subset scoring bitwise-equal to column selection on 100 seeded instances".into())
}

fn c3_ensemble_reduction() -> CheckResult {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dim, proj, d_count) = (12, 7, 6);
        let mut rp = ReweightParams::init(dim, proj, &mut rng);
        rp.log_tau = Array::new(vec![1], vec![-80.0]).unwrap(); // exp -> 0, clamped to 1e-8
        let desc: Vec<f64> = (0..d_count * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let desc = Array::new(vec![d_count, dim], desc).unwrap();
        let global: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let global = Array::vector(global).normalized();
        let fused = reweight_descriptions(&global, &desc, &rp).map_err(|e| e.to_string())?;
        for j in 0..dim {
            let mean: f64 = (0..d_count).map(|i| desc.row(i)[j]).sum::<f64>() / d_count as f64;
            worst = worst.max((fused.data()[j] - mean).abs());
        }
    }
    if worst <= 1e-8 {
        Ok(format!("re-weighting at tau floor equals the description mean (max dev {worst:.2e})"))
    } else {
        Err(format!("max deviation from ensemble mean {worst:.2e} (need <= 1e-8)"))
    }
}

fn c4_loss_reductions() -> CheckResult {
    let zero = AslConfig::bce();
    let mut p = 0.01;
    let mut worst = 0.0f64;
    while p <= 0.99 {
        for y in [false, true] {
            worst = worst.max((asl(p, y, &zero) - bce(p, y)).abs());
        }
        p += 0.01;
    }
    if worst > 1e-12 {
        return Err(format!("ASL(0,0,0) vs BCE max deviation {worst:.2e} (need <= 1e-12)"));
    }
    let margin_cfg = AslConfig {
        gamma_pos: 0.0,
        gamma_neg: 4.0,
        margin: 0.05,
    };
    for p in [0.0, 0.01, 0.049, 0.05] {
        let l = asl(p, false, &margin_cfg);
        if l != 0.0 {
            return Err(format!("ASL negative loss at p={p} <= margin is {l}, not exactly 0"));
        }
    }
    Ok(format!("ASL(0,0,0) == BCE to {worst:.1e}; negative loss exactly 0 for p <= margin"))
}

fn c5_metric_oracle() -> CheckResult {
    // Independent oracle: precision@k recomputed from scratch at each rank.
    fn oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let p = labels.iter().filter(|&&l| l).count();
        if p == 0 {
            return None;
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut sum = 0.0;
        for k in 1..=order.len() {
            if labels[order[k - 1]] {
                let hits = order[..k].iter().filter(|&&i| labels[i]).count();
                sum += hits as f64 / k as f64;
            }
        }
        Some(sum / p as f64)
    }
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    for i in 0..1000 {
        let n = rng.gen_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
        let got = average_precision(&scores, &labels);
        let want = oracle(&scores, &labels);
        if got != want {
            return Err(format!("instance {i}: {got:?} != oracle {want:?} (exact match required)"));
        }
    }
    Ok("average precision equals the brute-force precision@k oracle on 1000 instances, exactly".into())
}

fn ablation_base() -> TrainConfig {
    TrainConfig {
        batch_size: 12,
        steps: 500,
        num_tags: 80,
        holdout_fraction: 0.2,
        ..TrainConfig::with_seed(42)
    }
}

fn c6_ablation_trend() -> CheckResult {
    let start = Instant::now();
    let base = ablation_base();
    let modes = [
        SupervisionMode::TagOnly,
        SupervisionMode::TagText,
        SupervisionMode::TagTextDesc,
        SupervisionMode::TagTextDescReweight,
    ];
    let seeds = [1u64, 2, 3, 4, 5];
    let rows = ablation_run(&modes, &seeds, &base, 500).map_err(|e| e.to_string())?;
    let mean_uncommon = |mode: SupervisionMode| -> f64 {
        let sel: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == mode.to_string())
            .map(|r| r.map_uncommon)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let tag_only = mean_uncommon(SupervisionMode::TagOnly);
    let tag_text = mean_uncommon(SupervisionMode::TagText);
    let desc = mean_uncommon(SupervisionMode::TagTextDesc);
    let reweight = mean_uncommon(SupervisionMode::TagTextDescReweight);
    let secs = start.elapsed().as_secs_f64();

    let detail = format!(
        "mean mAP-uncommon over 5 seeds: tag-only {tag_only:.4}, tag+text {tag_text:.4}, \
         +desc {desc:.4}, +reweight {reweight:.4} ({secs:.0} s)"
    );
    let mut failures = Vec::new();
    if !(tag_only < tag_text) {
        failures.push("tag-only >= tag+text");
    }
    if !(desc > tag_text) {
        failures.push("tag+text+desc <= tag+text");
    }
    if !(reweight >= desc - 0.005) {
        failures.push("reweight < desc - 0.5 points");
    }
    if secs >= 1800.0 {
        failures.push("runtime >= 30 min");
    }
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; violated: {}", failures.join(", ")))
    }
}

fn c7_score_distribution() -> CheckResult {
    let base = TrainConfig {
        mode: SupervisionMode::TagTextDescReweight,
        seed: 1,
        ..ablation_base()
    };
    let setup = build_setup(&base).map_err(|e| e.to_string())?;
    let test = generate_test_set(&setup, 500, substream(base.world_seed, "test"))
        .map_err(|e| e.to_string())?;
    let outcome = train(&base, &setup, None).map_err(|e| e.to_string())?;
    let report = evaluate(&outcome.params, &setup, &test, base.mode, 0.5)
        .map_err(|e| e.to_string())?;
    let gap = report.median_positive_score - report.median_negative_score;
    let detail = format!(
        "median positive {:.3} vs negative {:.3} on common categories (gap {gap:.3})",
        report.median_positive_score, report.median_negative_score
    );
    if gap >= 0.2 {
        Ok(detail)
    } else {
        Err(format!("{detail}; need gap >= 0.2"))
    }
}

fn c8_paradigm_cost() -> CheckResult {
    let start = Instant::now();
    let grid = [10usize, 100, 1000, 4000];
    let setup = build_bench_setup(4000, 7).map_err(|e| e.to_string())?;
    let mut itm_means = Vec::new();
    let mut itta_4000 = 0.0;
    let mut itm_4000 = 0.0;
    for &nc in &grid {
        let itm = bench_paradigm(&setup, Paradigm::Itm, nc, 10).map_err(|e| e.to_string())?;
        if nc == 4000 {
            itm_4000 = itm.mean_ms;
        }
        itm_means.push(itm.mean_ms);
        let itta = bench_paradigm(&setup, Paradigm::Itta, nc, 10).map_err(|e| e.to_string())?;
        if nc == 4000 {
            itta_4000 = itta.mean_ms;
        }
        bench_paradigm(&setup, Paradigm::Itc, nc, 10).map_err(|e| e.to_string())?;
    }
    let secs = start.elapsed().as_secs_f64();
    let ratio = itm_4000 / itta_4000;
    let monotone = itm_means.windows(2).all(|w| w[1] >= w[0] * 0.95);
    let detail = format!(
        "ITM {itm_4000:.0} ms vs ITTA {itta_4000:.1} ms at 4000 categories (ratio {ratio:.0}x); \
         ITM means across {grid:?}: {:?} ({secs:.0} s)",
        itm_means.iter().map(|m| (m * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
    let mut failures = Vec::new();
    if ratio < 50.0 {
        failures.push("ITM/ITTA ratio < 50");
    }
    if !monotone {
        failures.push("ITM means not monotonically nondecreasing (5% tolerance)");
    }
    if secs >= 600.0 {
        failures.push("bench run >= 10 min");
    }
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; violated: {}", failures.join(", ")))
    }
}

fn c9_determinism_and_formats() -> CheckResult {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 4,
        num_tags: 8,
        embed_dim: 16,
        cells: 6,
        proj_dim: 8,
        descriptions_per_tag: 3,
        warmup_steps: 5,
        mode: SupervisionMode::TagTextDescReweight,
        ..TrainConfig::with_seed(77)
    };
    let setup = build_setup(&cfg).map_err(|e| e.to_string())?;

    // same-seed training runs produce byte-identical checkpoints
    let p1 = dir.path().join("run1.rppw");
    let p2 = dir.path().join("run2.rppw");
    let o1 = train(&cfg, &setup, None).map_err(|e| e.to_string())?;
    let o2 = train(&cfg, &setup, None).map_err(|e| e.to_string())?;
    save_checkpoint(&o1.params, &p1).map_err(|e| e.to_string())?;
    save_checkpoint(&o2.params, &p2).map_err(|e| e.to_string())?;
    let b1 = std::fs::read(&p1).map_err(|e| e.to_string())?;
    let b2 = std::fs::read(&p2).map_err(|e| e.to_string())?;
    if b1 != b2 {
        return Err("same-seed training runs produced different checkpoints".into());
    }
    if o1.holdout_touches != 0 {
        return Err(format!("holdout hygiene violated: {} touches", o1.holdout_touches));
    }

    // RPPW round trip
    let p3 = dir.path().join("run3.rppw");
    let loaded = load_checkpoint(&p1).map_err(|e| e.to_string())?;
    save_checkpoint(&loaded, &p3).map_err(|e| e.to_string())?;
    if std::fs::read(&p3).map_err(|e| e.to_string())? != b1 {
        return Err("RPPW save->load->save changed bytes".into());
    }

    // RPPC round trip
    let c1 = dir.path().join("cache1.rppc");
    let c2 = dir.path().join("cache2.rppc");
    setup.cache.save(&c1).map_err(|e| e.to_string())?;
    let cache = EmbeddingCache::load(&c1).map_err(|e| e.to_string())?;
    cache.save(&c2).map_err(|e| e.to_string())?;
    if std::fs::read(&c1).map_err(|e| e.to_string())?
        != std::fs::read(&c2).map_err(|e| e.to_string())?
    {
        return Err("RPPC save->load->save changed bytes".into());
    }

    // magic/version violations rejected on both formats
    for (path, kind) in [(&p1, "RPPW"), (&c1, "RPPC")] {
        let good = std::fs::read(path).map_err(|e| e.to_string())?;
        let mut bad = good.clone();
        bad[0] ^= 0xFF;
        std::fs::write(path, &bad).map_err(|e| e.to_string())?;
        let rejected = match kind {
            "RPPW" => load_checkpoint(path).is_err(),
            _ => EmbeddingCache::load(path).is_err(),
        };
        if !rejected {
            return Err(format!("{kind} with corrupt magic was accepted"));
        }
        let mut bad = good.clone();
        bad[4] = 0xEE;
        std::fs::write(path, &bad).map_err(|e| e.to_string())?;
        let rejected = match kind {
            "RPPW" => load_checkpoint(path).is_err(),
            _ => EmbeddingCache::load(path).is_err(),
        };
        if !rejected {
            return Err(format!("{kind} with bad version was accepted"));
        }
        std::fs::write(path, &good).map_err(|e| e.to_string())?;
    }
    Ok("bitwise-deterministic checkpoints; RPPC/RPPW round-trip bitwise; bad magic/version rejected".into())
}

#[test]
fn acceptance() {
    // Slow-but-insensitive criteria run before the wall-clock benchmark.
    let checks: Vec<(&str, fn() -> CheckResult)> = vec![
        ("1 gradient correctness", c1_gradient_correctness),
        ("2 per-query independence", c2_per_query_independence),
        ("3 ensemble reduction", c3_ensemble_reduction),
        ("4 loss reductions", c4_loss_reductions),
        ("5 metric oracle", c5_metric_oracle),
        ("9 determinism and formats", c9_determinism_and_formats),
        ("6 ablation trend", c6_ablation_trend),
        ("7 score distribution", c7_score_distribution),
        ("8 paradigm cost", c8_paradigm_cost),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("criterion {name}: PASS — {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL — {detail}");
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
