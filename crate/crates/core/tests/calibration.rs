//! Temporary calibration probes (deleted before release).

use std::time::Instant;

use tagalign::bench::{bench_paradigm, build_bench_setup, Paradigm};
use tagalign::evaluation::{evaluate, generate_test_set};
use tagalign::training::{build_setup, train, SupervisionMode, TrainConfig};

#[test]
#[ignore]
fn probe_paradigm_ratio() {
    let t0 = Instant::now();
    let setup = build_bench_setup(4000, 7).unwrap();
    println!("setup build: {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let itta = bench_paradigm(&setup, Paradigm::Itta, 4000, 10).unwrap();
    println!(
        "ITTA@4000: mean {:.3} ms (std {:.3}), wall {:.1}s",
        itta.mean_ms,
        itta.std_ms,
        t0.elapsed().as_secs_f64()
    );

    let t0 = Instant::now();
    let itm = bench_paradigm(&setup, Paradigm::Itm, 4000, 10).unwrap();
    println!(
        "ITM@4000: mean {:.1} ms (std {:.1}), wall {:.1}s",
        itm.mean_ms,
        itm.std_ms,
        t0.elapsed().as_secs_f64()
    );
    let t0 = Instant::now();
    let itc = bench_paradigm(&setup, Paradigm::Itc, 4000, 10).unwrap();
    println!("ITC@4000: mean {:.4} ms, wall {:.1}s", itc.mean_ms, t0.elapsed().as_secs_f64());
    println!("ITM/ITTA ratio: {:.1}", itm.mean_ms / itta.mean_ms);
}

#[test]
#[ignore]
fn probe_training_speed_and_trend() {
    let lrs: Vec<f64> = std::env::var("PROBE_LRS")
        .unwrap_or_else(|_| "2e-3,3e-3".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    for lr in lrs {
        let base = TrainConfig {
            batch_size: 12,
            steps: 500,
            learning_rate: lr,
            ..TrainConfig::with_seed(42)
        };
        let setup = build_setup(&base).unwrap();
        let test = generate_test_set(&setup, 800, tagalign::substream(42, "test")).unwrap();
        println!("== lr {lr}");
        for mode in [
            SupervisionMode::TagText,
            SupervisionMode::TagTextDesc,
            SupervisionMode::TagTextDescReweight,
        ] {
            let mut uncommons = Vec::new();
            let mut commons = Vec::new();
            let mut med = (0.0, 0.0);
            let t0 = Instant::now();
            for seed in [1u64, 2, 3] {
                let cfg = TrainConfig {
                    mode,
                    seed,
                    ..base.clone()
                };
                let out = train(&cfg, &setup, None).unwrap();
                let report = evaluate(&out.params, &setup, &test, mode, 0.5).unwrap();
                uncommons.push(report.map_uncommon);
                commons.push(report.map_common);
                med = (report.median_positive_score, report.median_negative_score);
            }
            let wall = t0.elapsed().as_secs_f64();
            let mu = uncommons.iter().sum::<f64>() / 3.0;
            let mc = commons.iter().sum::<f64>() / 3.0;
            println!(
                "{mode}: {:.0}s/3runs, mAP common mean {mc:.3}, uncommon mean {mu:.3} {uncommons:.3?}, median pos {:.3} neg {:.3}",
                wall, med.0, med.1
            );
        }
    }
}
