//! Wall-clock comparison of the ITC / ITM / ITTA alignment paradigms as the
//! category count grows.
//!
//! The three paradigms answer the same question for one image -- how well
//! does each category match -- at very different costs:
//! ITC does one global dot product per category against cached embeddings;
//! ITTA runs one batched pass of the shallow decoder over all categories
//! using cached per-image fused queries; ITM runs the deep decoder once per
//! category and must rebuild its fused query online every call, because the
//! paradigm processes a single pair at a time. Outputs are cross-checked
//! before any timing so the benchmark compares cost, not answers.

use std::time::Instant;

use crate::alignment::{
    itm_score_with, DecoderWeights, ModelParams, Reweighter, Scorer,
};
use crate::encoders::{encode_image, ConceptWorld, SpatialFeatures, WorldParams};
use crate::labels::{synth_descriptions, EmbeddingCache, LabelSystem};
use crate::numerics::{dot, Array};
use crate::{substream, Error, Result};

pub const WARMUP_ITERATIONS: usize = 10;
pub const MIN_REPETITIONS: usize = 10;
/// Default repetition count at desk scale.
pub const DEFAULT_REPETITIONS: usize = 100;
/// ITM baseline depth.
pub const ITM_DEPTH: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paradigm {
    Itc,
    Itm,
    Itta,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::Itc, Paradigm::Itm, Paradigm::Itta];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Itc => "ITC",
            Paradigm::Itm => "ITM",
            Paradigm::Itta => "ITTA",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ITC" => Ok(Paradigm::Itc),
            "ITM" => Ok(Paradigm::Itm),
            "ITTA" => Ok(Paradigm::Itta),
            other => Err(Error::Validation(format!("unknown paradigm {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub paradigm: Paradigm,
    pub num_categories: usize,
    pub repetitions: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// CSV with header `paradigm,num_categories,reps,mean_ms,std_ms`.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("paradigm,num_categories,reps,mean_ms,std_ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.paradigm.name(),
            r.num_categories,
            r.repetitions,
            r.mean_ms,
            r.std_ms
        ));
    }
    out
}

/// Prebuilt world, cache, weights, and the one probe image every paradigm
/// scores. Supports benchmarking any category count up to its capacity by
/// slicing the cache.
pub struct BenchSetup {
    pub world: ConceptWorld,
    pub labels: LabelSystem,
    pub cache: EmbeddingCache,
    pub feat: SpatialFeatures,
    pub params: ModelParams,
    pub deep: DecoderWeights,
    /// Per-category prompt-ensemble embeddings (the ITC side).
    pub ensemble: Array,
    /// Per-category fused queries for this image (the cached ITTA side).
    pub fused: Array,
}

/// Spatial cells used for timing: a 12x12 grid, matching what backbone
/// feature maps actually produce at 384px input. The coarser training
/// default exists to keep gradient checks fast, not to represent image
/// geometry, and the per-call image-side projection work is exactly what
/// separates the paradigms.
pub const BENCH_CELLS: usize = 144;

/// Build a bench context with `capacity` categories.
pub fn build_bench_setup(capacity: usize, seed: u64) -> Result<BenchSetup> {
    if capacity < 1 {
        return Err(Error::Validation("need at least one category".into()));
    }
    let world = ConceptWorld::generate(WorldParams {
        cells: BENCH_CELLS,
        ..WorldParams::new(substream(seed, "bench-world"), capacity)
    });
    let labels = LabelSystem::from_world(&world);
    let ds = synth_descriptions(&labels, &world, 8, substream(seed, "bench-desc"))?;
    let cache = EmbeddingCache::build(&ds, &labels, &world)?;
    let present: Vec<usize> = (0..capacity.min(4)).collect();
    let feat = encode_image(&present, &world, 0.05, substream(seed, "bench-image"))?;
    let params = ModelParams::init(
        world.embed_dim(),
        2,
        world.embed_dim(),
        substream(seed, "bench-init"),
    );
    use rand::SeedableRng;
    let mut deep_rng = rand_chacha::ChaCha8Rng::seed_from_u64(substream(seed, "bench-deep"));
    let deep = DecoderWeights::init(world.embed_dim(), ITM_DEPTH, &mut deep_rng);
    let ensemble = cache.ensemble_means();
    let reweighter = Reweighter::new(&params.reweight);
    let dim = world.embed_dim();
    let mut fused_data = Vec::with_capacity(capacity * dim);
    for tag in 0..capacity {
        let (fused, _) = reweighter.fuse(&feat.global, cache.rows(tag)?)?;
        fused_data.extend_from_slice(fused.data());
    }
    let fused = Array::from_raw(vec![capacity, dim], fused_data);
    Ok(BenchSetup {
        world,
        labels,
        cache,
        feat,
        params,
        deep,
        ensemble,
        fused,
    })
}

impl BenchSetup {
    pub fn capacity(&self) -> usize {
        self.cache.num_tags()
    }
}

fn timing_stats(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() < 2 {
        0.0
    } else {
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

/// Validate that ITM and ITTA compute identical logits at equal depth and
/// weights before anything is timed.
fn validate_outputs(setup: &BenchSetup, num_categories: usize) -> Result<()> {
    let shallow = Scorer::new(&setup.params.decoder);
    let sample = num_categories.min(3);
    let dim = setup.world.embed_dim();
    let queries = Array::from_raw(
        vec![sample, dim],
        setup.fused.data()[..sample * dim].to_vec(),
    );
    let joint = shallow.logits(&setup.feat, &queries)?;
    for i in 0..sample {
        let q = Array::vector(queries.row(i).to_vec());
        let single = itm_score_with(&shallow, &setup.feat, &q)?;
        if single.to_bits() != joint.data()[i].to_bits() {
            return Err(Error::Validation(format!(
                "paradigm outputs diverge at category {i}: {single} vs {}",
                joint.data()[i]
            )));
        }
    }
    Ok(())
}

/// Time one paradigm at `num_categories` over `reps` repetitions, after 10
/// warmup iterations. Single-threaded by design.
pub fn bench_paradigm(
    setup: &BenchSetup,
    paradigm: Paradigm,
    num_categories: usize,
    reps: usize,
) -> Result<BenchRecord> {
    if num_categories < 1 {
        return Err(Error::Validation("num_categories must be >= 1".into()));
    }
    if num_categories > setup.capacity() {
        return Err(Error::Validation(format!(
            "num_categories {num_categories} exceeds setup capacity {}",
            setup.capacity()
        )));
    }
    let reps = reps.max(MIN_REPETITIONS);
    validate_outputs(setup, num_categories)?;

    let dim = setup.world.embed_dim();
    let shallow = Scorer::new(&setup.params.decoder);
    let deep = Scorer::new(&setup.deep);
    let reweighter = Reweighter::new(&setup.params.reweight);
    let fused_slice = Array::from_raw(
        vec![num_categories, dim],
        setup.fused.data()[..num_categories * dim].to_vec(),
    );

    let mut sink = 0.0f64;
    let run = |sink: &mut f64| -> Result<f64> {
        let start = Instant::now();
        match paradigm {
            Paradigm::Itc => {
                for tag in 0..num_categories {
                    *sink += dot(setup.feat.global.data(), setup.ensemble.row(tag));
                }
            }
            Paradigm::Itta => {
                let logits = shallow.logits(&setup.feat, &fused_slice)?;
                *sink += logits.data()[num_categories - 1];
            }
            Paradigm::Itm => {
                for tag in 0..num_categories {
                    // the fused query cannot be cached across pairs; rebuild
                    // it from the offline description embeddings every call
                    let (query, _) =
                        reweighter.fuse(&setup.feat.global, setup.cache.rows(tag)?)?;
                    *sink += itm_score_with(&deep, &setup.feat, &query)?;
                }
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };

    for _ in 0..WARMUP_ITERATIONS {
        run(&mut sink)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        samples.push(run(&mut sink)?);
    }
    std::hint::black_box(sink);

    let (mean_ms, std_ms) = timing_stats(&samples);
    Ok(BenchRecord {
        paradigm,
        num_categories,
        repetitions: reps,
        mean_ms,
        std_ms,
    })
}

/// Run all three paradigms across a category-count grid on one shared setup
/// sized to the largest count.
pub fn bench_sweep(counts: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    let max = *counts
        .iter()
        .max()
        .ok_or_else(|| Error::Validation("empty category grid".into()))?;
    let setup = build_bench_setup(max, seed)?;
    let mut records = Vec::with_capacity(counts.len() * Paradigm::ALL.len());
    for paradigm in Paradigm::ALL {
        for &nc in counts {
            records.push(bench_paradigm(&setup, paradigm, nc, reps)?);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_category_all_paradigms_complete() {
        let setup = build_bench_setup(1, 5).unwrap();
        let mut means = Vec::new();
        for p in Paradigm::ALL {
            let r = bench_paradigm(&setup, p, 1, 10).unwrap();
            assert!(r.mean_ms >= 0.0);
            assert_eq!(r.repetitions, 10);
            means.push((p, r.mean_ms));
        }
        let itm = means.iter().find(|(p, _)| *p == Paradigm::Itm).unwrap().1;
        let itta = means.iter().find(|(p, _)| *p == Paradigm::Itta).unwrap().1;
        assert!(itm / itta >= 1.0, "ITM {itm} vs ITTA {itta}");
    }

    #[test]
    fn sweep_row_count_and_csv() {
        let records = bench_sweep(&[1, 2], 10, 6).unwrap();
        assert_eq!(records.len(), 6);
        let csv = records_to_csv(&records);
        assert!(csv.starts_with("paradigm,num_categories,reps,mean_ms,std_ms\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn zero_categories_rejected() {
        let setup = build_bench_setup(2, 7).unwrap();
        assert!(bench_paradigm(&setup, Paradigm::Itc, 0, 10).is_err());
        assert!(bench_paradigm(&setup, Paradigm::Itc, 3, 10).is_err());
    }

    #[test]
    fn repetitions_floor_applies() {
        let setup = build_bench_setup(1, 8).unwrap();
        let r = bench_paradigm(&setup, Paradigm::Itc, 1, 3).unwrap();
        assert_eq!(r.repetitions, MIN_REPETITIONS);
    }
}
