//! Command-line driver wiring the library into reproducible experiments.
//!
//! All randomness flows from `--seed` through named substreams, so any stage
//! can be re-run on its own. Every output directory receives a
//! `manifest.json`; `--config` accepts either a plain config JSON or a
//! previous manifest.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use manifest::{overlay_config, RunManifest};
use tagalign::alignment::Reweighter;
use tagalign::bench::{bench_sweep, records_to_csv, DEFAULT_REPETITIONS};
use tagalign::encoders::encode_image;
use tagalign::evaluation::{
    ablation_to_csv, ablation_run, evaluate, generate_test_set, histogram_to_csv,
};
use tagalign::labels::{llm_prompts, DescriptionSet, EmbeddingCache};
use tagalign::numerics::Array;
use tagalign::training::{
    build_setup, gen_triplet_from_seed, load_checkpoint, save_checkpoint, trace_to_csv, train,
    SupervisionMode, TrainConfig,
};
use tagalign::{mix, substream};

#[derive(Parser)]
#[command(name = "tagalign", version, about = "Open-set tagging experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; every stage derives a named substream from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file overriding config defaults; a manifest.json also works.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the concept world, label system, and a triplet manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Number of example triplets to render.
        #[arg(long, default_value_t = 100)]
        images: usize,
    },
    /// Emit synthetic per-tag descriptions and the LLM prompt templates.
    BuildDescriptions {
        #[command(flatten)]
        common: Common,
    },
    /// Build the binary description-embedding cache (RPPC).
    EmbedCache {
        #[command(flatten)]
        common: Common,
        /// Ingest descriptions from a JSONL file instead of synthesizing.
        #[arg(long)]
        descriptions: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.rppw and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<SupervisionMode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Fine-tune from an existing checkpoint.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a trained run; writes report.json and histogram.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory produced by `train` (manifest.json + checkpoint.rppw).
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Test-set size.
        #[arg(long, default_value_t = 500)]
        images: usize,
    },
    /// Train and evaluate a grid of supervision modes and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated supervision modes.
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<SupervisionMode>,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 500)]
        images: usize,
    },
    /// Wall-clock comparison of ITC / ITM / ITTA across category counts.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 100, 500, 1000, 2000, 4000])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        reps: usize,
    },
    /// Score a synthetic image against every tag on a trained run.
    Score {
        #[command(flatten)]
        common: Common,
        /// Directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Probability cutoff for the printed list.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Render the image from concept names instead of a random scene.
        #[arg(long, value_delimiter = ',')]
        concepts: Option<Vec<String>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .context("--out DIR is required for this command")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let defaults = TrainConfig::with_seed(common.seed);
    let mut cfg = match &common.config {
        Some(path) => overlay_config(&defaults, path)?,
        None => defaults,
    };
    // An explicit --seed wins over a config file's seed.
    if common.seed != 0 {
        cfg.seed = common.seed;
        cfg.world_seed = common.seed;
    }
    Ok(cfg)
}

fn write_text(manifest: &mut RunManifest, path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.record(path);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common, images } => {
            let dir = out_dir(&common)?;
            let cfg = train_config(&common)?;
            let mut manifest =
                RunManifest::start("synth-data", cfg.seed, serde_json::to_value(&cfg)?);
            let setup = build_setup(&cfg)?;

            let world_json = serde_json::json!({
                "params": setup.world.params,
                "concepts": setup.world.concepts.iter().map(|c| {
                    serde_json::json!({
                        "id": c.id,
                        "name": c.name,
                        "context_words": c.context_words,
                    })
                }).collect::<Vec<_>>(),
                "filler_words": setup.world.filler_words,
                "holdout": setup.split.holdout,
            });
            let world_path = dir.join("world.json");
            write_text(&mut manifest, &world_path, &serde_json::to_string_pretty(&world_json)?)?;

            let labels_path = dir.join("labels.json");
            setup.labels.save(&labels_path)?;
            manifest.record(&labels_path);

            let data_seed = substream(cfg.seed, "data");
            let mut lines = String::new();
            for i in 0..images {
                let t = gen_triplet_from_seed(
                    &setup.world,
                    &setup.labels,
                    cfg.noise_sigma,
                    mix(data_seed, i as u64),
                )?;
                let mut tags: Vec<usize> = t.tags.iter().copied().collect();
                tags.sort_unstable();
                lines.push_str(&serde_json::to_string(&serde_json::json!({
                    "caption": t.caption,
                    "concepts": t.concepts,
                    "tags": tags,
                    "image_seed": t.image_seed,
                }))?);
                lines.push('\n');
            }
            write_text(&mut manifest, &dir.join("triplets.jsonl"), &lines)?;
            manifest.finish(&dir)?;
            println!(
                "world with {} concepts, {} triplets -> {}",
                setup.world.concepts.len(),
                images,
                dir.display()
            );
        }
        Command::BuildDescriptions { common } => {
            let dir = out_dir(&common)?;
            let cfg = train_config(&common)?;
            let mut manifest =
                RunManifest::start("build-descriptions", cfg.seed, serde_json::to_value(&cfg)?);
            let setup = build_setup(&cfg)?;

            let desc_path = dir.join("descriptions.jsonl");
            setup.descriptions.save_jsonl(&setup.labels, &desc_path)?;
            manifest.record(&desc_path);

            let mut prompts = String::new();
            for cat in setup.labels.categories() {
                prompts.push_str(&serde_json::to_string(&serde_json::json!({
                    "tag": cat.name,
                    "prompts": llm_prompts(&cat.name),
                }))?);
                prompts.push('\n');
            }
            write_text(&mut manifest, &dir.join("prompts.jsonl"), &prompts)?;
            manifest.finish(&dir)?;
            println!(
                "{} descriptions per tag for {} tags -> {}",
                cfg.descriptions_per_tag,
                setup.labels.len(),
                dir.display()
            );
        }
        Command::EmbedCache { common, descriptions } => {
            let dir = out_dir(&common)?;
            let cfg = train_config(&common)?;
            let mut manifest =
                RunManifest::start("embed-cache", cfg.seed, serde_json::to_value(&cfg)?);
            let setup = build_setup(&cfg)?;
            let cache = match descriptions {
                Some(path) => {
                    let ds = DescriptionSet::load_jsonl(&setup.labels, &path)?;
                    EmbeddingCache::build(&ds, &setup.labels, &setup.world)?
                }
                None => setup.cache,
            };
            let cache_path = dir.join("cache.rppc");
            cache.save(&cache_path)?;
            manifest.record(&cache_path);
            manifest.finish(&dir)?;
            println!(
                "cache: {} tags x {} descriptions x dim {} -> {}",
                cache.num_tags(),
                cache.per_tag_count(),
                cache.dim(),
                cache_path.display()
            );
        }
        Command::Train {
            common,
            mode,
            steps,
            batch,
            lr,
            init_checkpoint,
        } => {
            let dir = out_dir(&common)?;
            let mut cfg = train_config(&common)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(b) = batch {
                cfg.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.learning_rate = l;
            }
            let mut manifest = RunManifest::start("train", cfg.seed, serde_json::to_value(&cfg)?);
            let setup = build_setup(&cfg)?;
            let init = init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let outcome = train(&cfg, &setup, init)?;

            let ckpt_path = dir.join("checkpoint.rppw");
            save_checkpoint(&outcome.params, &ckpt_path)?;
            manifest.record(&ckpt_path);
            write_text(&mut manifest, &dir.join("loss.csv"), &trace_to_csv(&outcome.trace))?;
            manifest.finish(&dir)?;
            let last = outcome.trace.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
            println!(
                "trained {} steps (mode {}), final loss {last:.4} -> {}",
                cfg.steps,
                cfg.mode,
                dir.display()
            );
        }
        Command::Eval {
            common,
            run,
            threshold,
            images,
        } => {
            let dir = out_dir(&common)?;
            let (cfg, params) = load_run(&run)?;
            let mut manifest = RunManifest::start("eval", cfg.seed, serde_json::to_value(&cfg)?);
            let setup = build_setup(&cfg)?;
            let test = generate_test_set(&setup, images, substream(cfg.world_seed, "test"))?;
            let report = evaluate(&params, &setup, &test, cfg.mode, threshold)?;

            write_text(
                &mut manifest,
                &dir.join("report.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            write_text(
                &mut manifest,
                &dir.join("histogram.csv"),
                &histogram_to_csv(&report.histogram),
            )?;
            manifest.finish(&dir)?;
            println!(
                "mAP common {:.4}, uncommon {:.4}, F1@{threshold} {:.4} -> {}",
                report.map_common,
                report.map_uncommon,
                report.f1,
                dir.display()
            );
        }
        Command::Ablate {
            common,
            modes,
            seeds,
            images,
        } => {
            let dir = out_dir(&common)?;
            let cfg = train_config(&common)?;
            let mut manifest =
                RunManifest::start("ablate", cfg.seed, serde_json::to_value(&cfg)?);
            let rows = ablation_run(&modes, &seeds, &cfg, images)?;
            write_text(&mut manifest, &dir.join("ablation.csv"), &ablation_to_csv(&rows))?;
            manifest.finish(&dir)?;
            for r in &rows {
                println!(
                    "{:>24} seed {}: mAP common {:.4}, uncommon {:.4}",
                    r.mode, r.seed, r.map_common, r.map_uncommon
                );
            }
        }
        Command::Bench { common, counts, reps } => {
            let dir = out_dir(&common)?;
            let cfg_json = serde_json::json!({"counts": counts, "reps": reps});
            let mut manifest = RunManifest::start("bench", common.seed, cfg_json);
            let records = bench_sweep(&counts, reps, common.seed)?;
            write_text(&mut manifest, &dir.join("bench.csv"), &records_to_csv(&records))?;
            manifest.finish(&dir)?;
            for r in &records {
                println!(
                    "{:>4} @ {:>5} categories: {:>12.4} ms (std {:.4})",
                    r.paradigm.name(),
                    r.num_categories,
                    r.mean_ms,
                    r.std_ms
                );
            }
        }
        Command::Score {
            common,
            run,
            threshold,
            concepts,
        } => {
            let (cfg, params) = load_run(&run)?;
            let setup = build_setup(&cfg)?;
            let feat = match &concepts {
                Some(names) => {
                    let mut ids = Vec::with_capacity(names.len());
                    for name in names {
                        let id = setup
                            .labels
                            .categories()
                            .iter()
                            .find(|c| c.name == name.to_lowercase())
                            .map(|c| c.id);
                        match id {
                            Some(id) => ids.push(id),
                            None => bail!("unknown concept name {name:?}"),
                        }
                    }
                    encode_image(
                        &ids,
                        &setup.world,
                        cfg.noise_sigma,
                        substream(common.seed, "score-image"),
                    )?
                }
                None => {
                    let t = gen_triplet_from_seed(
                        &setup.world,
                        &setup.labels,
                        cfg.noise_sigma,
                        substream(common.seed, "score-image"),
                    )?;
                    let mut names: Vec<&str> =
                        t.concepts.iter().map(|&c| setup.labels.name(c)).collect();
                    names.sort_unstable();
                    println!("# scene concepts: {}", names.join(", "));
                    t.features
                }
            };
            score_and_print(&cfg, &params, &setup, &feat, threshold)?;
        }
    }
    Ok(())
}

/// Read a train run directory: manifest.json holds the resolved TrainConfig,
/// checkpoint.rppw the parameters.
fn load_run(run: &Path) -> Result<(TrainConfig, tagalign::alignment::ModelParams)> {
    let manifest = RunManifest::load(&run.join("manifest.json"))?;
    let cfg: TrainConfig = serde_json::from_value(manifest.config.clone())
        .context("run manifest does not hold a training config")?;
    let params = load_checkpoint(&run.join("checkpoint.rppw"))?;
    Ok((cfg, params))
}

fn score_and_print(
    cfg: &TrainConfig,
    params: &tagalign::alignment::ModelParams,
    setup: &tagalign::training::TrainSetup,
    feat: &tagalign::encoders::SpatialFeatures,
    threshold: f64,
) -> Result<()> {
    use tagalign::alignment::Scorer;
    use tagalign::numerics::sigmoid;
    use tagalign::training::TagQueryKind;

    let dim = setup.world.embed_dim();
    let n = setup.labels.len();
    let scorer = Scorer::new(&params.decoder);
    let reweight = cfg.mode.tag_queries() == TagQueryKind::Reweighted;
    let reweighter = Reweighter::new(&params.reweight);

    // Query all tags in id order; remember the top-weight description when
    // re-weighting is active.
    let mut queries = Vec::with_capacity(n * dim);
    let mut top_desc: Vec<Option<usize>> = vec![None; n];
    if reweight {
        for tag in 0..n {
            let (fused, weights) = reweighter.fuse(&feat.global, setup.cache.rows(tag)?)?;
            let best = weights
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i);
            top_desc[tag] = best;
            queries.extend_from_slice(fused.data());
        }
    } else {
        let means = setup.cache.ensemble_means();
        queries.extend_from_slice(means.data());
    }
    let q = Array::new(vec![n, dim], queries)?;
    let logits = scorer.logits(feat, &q)?;

    let mut ranked: Vec<(usize, f64)> = logits
        .data()
        .iter()
        .enumerate()
        .map(|(tag, &l)| (tag, sigmoid(l)))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (tag, p) in ranked {
        if p < threshold {
            continue;
        }
        let marker = if setup.split.holdout.contains(&tag) { " [held-out]" } else { "" };
        match top_desc[tag] {
            Some(j) => println!(
                "{:.4}  {}{marker}  | {}",
                p,
                setup.labels.name(tag),
                setup.descriptions.descriptions(tag)[j]
            ),
            None => println!("{:.4}  {}{marker}", p, setup.labels.name(tag)),
        }
    }
    Ok(())
}
