//! mAP, thresholded precision/recall/F1, score-distribution histograms, and
//! the supervision-mode ablation runner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{ModelParams, Reweighter, Scorer};
use crate::encoders::{embed_sentence, SpatialFeatures};
use crate::numerics::{sigmoid, Array};
use crate::parallel::map_ordered;
use crate::training::{
    build_setup, gen_triplet, train, SupervisionMode, TagQueryKind, TrainConfig, TrainSetup,
};
use crate::{mix, substream, Result};

pub const HISTOGRAM_BINS: usize = 64;

/// Average precision of one category: scores ranked descending (ties broken
/// by ascending index), AP = mean over positive ranks of precision@rank.
/// `None` when there are no positive labels (the category is undefined and
/// skipped from mAP).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Precision, recall and F1 at a score threshold, with 0/0 read as 0.
pub fn prf_at_threshold(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= t;
        match (predicted, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Positive/negative score histograms over fixed bin edges i/64 on [0, 1].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
}

pub fn score_histogram(scores: &[f64], labels: &[bool]) -> ScoreHistogram {
    let mut positive = vec![0u64; HISTOGRAM_BINS];
    let mut negative = vec![0u64; HISTOGRAM_BINS];
    for (&s, &l) in scores.iter().zip(labels) {
        let bin = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        if l {
            positive[bin] += 1;
        } else {
            negative[bin] += 1;
        }
    }
    ScoreHistogram { positive, negative }
}

/// Histogram CSV: `bin,lo,hi,positives,negatives`.
pub fn histogram_to_csv(h: &ScoreHistogram) -> String {
    let mut out = String::from("bin,lo,hi,positives,negatives\n");
    for i in 0..HISTOGRAM_BINS {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            i as f64 / HISTOGRAM_BINS as f64,
            (i + 1) as f64 / HISTOGRAM_BINS as f64,
            h.positive[i],
            h.negative[i]
        ));
    }
    out
}

/// Fixed evaluation set: images plus per-image ground-truth concept presence
/// over the full label range.
pub struct TestSet {
    pub feats: Vec<SpatialFeatures>,
    /// `images x num_tags` presence flags.
    pub truth: Vec<Vec<bool>>,
}

/// Seeded test images drawn from the same generator as training triplets,
/// labeled by generated concept presence (not caption parsing).
pub fn generate_test_set(setup: &TrainSetup, n_images: usize, seed: u64) -> Result<TestSet> {
    let num_tags = setup.labels.len();
    let noise = 0.1;
    let indices: Vec<u64> = (0..n_images as u64).collect();
    let items: Vec<Result<(SpatialFeatures, Vec<bool>)>> = map_ordered(&indices, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i));
        let t = gen_triplet(&setup.world, &setup.labels, noise, &mut rng)?;
        let mut row = vec![false; num_tags];
        for &c in &t.concepts {
            row[c] = true;
        }
        Ok((t.features, row))
    });
    let mut feats = Vec::with_capacity(n_images);
    let mut truth = Vec::with_capacity(n_images);
    for item in items {
        let (f, r) = item?;
        feats.push(f);
        truth.push(r);
    }
    Ok(TestSet { feats, truth })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub threshold: f64,
    /// AP per category id; null = undefined (no positives in the test set).
    pub per_category_ap: Vec<Option<f64>>,
    pub map_common: f64,
    pub map_uncommon: f64,
    pub skipped_common: usize,
    pub skipped_uncommon: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub median_positive_score: f64,
    pub median_negative_score: f64,
    pub histogram: ScoreHistogram,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Score every test image against every category and aggregate the metrics.
///
/// Common categories are queried the way the supervision mode trained them
/// (names, description means, or per-image re-weighted fusions); held-out
/// categories are always queried through their description embeddings,
/// re-weighted when the mode enables it.
pub fn evaluate(
    params: &ModelParams,
    setup: &TrainSetup,
    test: &TestSet,
    mode: SupervisionMode,
    threshold: f64,
) -> Result<EvalReport> {
    let num_tags = setup.labels.len();
    let dim = setup.world.embed_dim();
    let scorer = Scorer::new(&params.decoder);
    let reweighter = Reweighter::new(&params.reweight);
    let reweight_all = mode.tag_queries() == TagQueryKind::Reweighted;

    // Category order for scoring: all ids, common queried per mode, holdout
    // via descriptions.
    let common_queries: Array = match mode.tag_queries() {
        TagQueryKind::Name => {
            let mut data = Vec::with_capacity(setup.split.common.len() * dim);
            for &tag in &setup.split.common {
                data.extend_from_slice(embed_sentence(setup.labels.name(tag), &setup.world).data());
            }
            Array::from_raw(vec![setup.split.common.len(), dim], data)
        }
        TagQueryKind::DescriptionMean | TagQueryKind::Reweighted => {
            let means = setup.cache.ensemble_means();
            let mut data = Vec::with_capacity(setup.split.common.len() * dim);
            for &tag in &setup.split.common {
                data.extend_from_slice(means.row(tag));
            }
            Array::from_raw(vec![setup.split.common.len(), dim], data)
        }
    };
    let holdout_means: Array = {
        let means = setup.cache.ensemble_means();
        let mut data = Vec::with_capacity(setup.split.holdout.len() * dim);
        for &tag in &setup.split.holdout {
            data.extend_from_slice(means.row(tag));
        }
        Array::from_raw(vec![setup.split.holdout.len(), dim], data)
    };

    // Probability matrix rows, one per image, in (common ++ holdout) order.
    let prob_rows: Vec<Result<Vec<f64>>> = map_ordered(&test.feats, |feat| {
        let q_common;
        let q_holdout;
        if reweight_all {
            let mut data = Vec::with_capacity(setup.split.common.len() * dim);
            for &tag in &setup.split.common {
                let (fused, _) = reweighter.fuse(&feat.global, setup.cache.rows(tag)?)?;
                data.extend_from_slice(fused.data());
            }
            q_common = Array::from_raw(vec![setup.split.common.len(), dim], data);
            let mut data = Vec::with_capacity(setup.split.holdout.len() * dim);
            for &tag in &setup.split.holdout {
                let (fused, _) = reweighter.fuse(&feat.global, setup.cache.rows(tag)?)?;
                data.extend_from_slice(fused.data());
            }
            q_holdout = Array::from_raw(vec![setup.split.holdout.len(), dim], data);
        } else {
            q_common = common_queries.clone();
            q_holdout = holdout_means.clone();
        }
        let mut combined =
            Vec::with_capacity((q_common.rows() + q_holdout.rows()) * dim);
        combined.extend_from_slice(q_common.data());
        combined.extend_from_slice(q_holdout.data());
        let q = Array::from_raw(vec![q_common.rows() + q_holdout.rows(), dim], combined);
        let logits = scorer.logits(feat, &q)?;
        Ok(logits.data().iter().map(|&l| sigmoid(l)).collect())
    });
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(test.feats.len());
    for row in prob_rows {
        probs.push(row?);
    }

    // Column order -> category id.
    let col_tags: Vec<usize> = setup
        .split
        .common
        .iter()
        .chain(&setup.split.holdout)
        .copied()
        .collect();

    let mut per_category_ap: Vec<Option<f64>> = vec![None; num_tags];
    let mut sums = [(0.0, 0usize, 0usize); 2]; // (ap sum, defined, skipped) for common/holdout
    for (col, &tag) in col_tags.iter().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|r| r[col]).collect();
        let labels: Vec<bool> = test.truth.iter().map(|t| t[tag]).collect();
        let ap = average_precision(&scores, &labels);
        per_category_ap[tag] = ap;
        let group = if col < setup.split.common.len() { 0 } else { 1 };
        match ap {
            Some(v) => {
                sums[group].0 += v;
                sums[group].1 += 1;
            }
            None => sums[group].2 += 1,
        }
    }
    let map_of = |(sum, defined, _): (f64, usize, usize)| {
        if defined == 0 {
            0.0
        } else {
            sum / defined as f64
        }
    };

    let mut all_scores = Vec::with_capacity(test.feats.len() * col_tags.len());
    let mut all_labels = Vec::with_capacity(test.feats.len() * col_tags.len());
    for (img, row) in probs.iter().enumerate() {
        for (col, &tag) in col_tags.iter().enumerate() {
            all_scores.push(row[col]);
            all_labels.push(test.truth[img][tag]);
        }
    }
    let (precision, recall, f1) = prf_at_threshold(&all_scores, &all_labels, threshold);
    let histogram = score_histogram(&all_scores, &all_labels);

    // Median split on common categories only (the score-distribution view).
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (img, row) in probs.iter().enumerate() {
        for (col, &tag) in col_tags.iter().enumerate().take(setup.split.common.len()) {
            if test.truth[img][tag] {
                pos.push(row[col]);
            } else {
                neg.push(row[col]);
            }
        }
    }

    Ok(EvalReport {
        mode: mode.to_string(),
        threshold,
        per_category_ap,
        map_common: map_of(sums[0]),
        map_uncommon: map_of(sums[1]),
        skipped_common: sums[0].2,
        skipped_uncommon: sums[1].2,
        precision,
        recall,
        f1,
        median_positive_score: median(pos),
        median_negative_score: median(neg),
        histogram,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    pub map_common: f64,
    pub map_uncommon: f64,
}

/// Ablation CSV: `mode,seed,map_common,map_uncommon`.
pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,seed,map_common,map_uncommon\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.mode, r.seed, r.map_common, r.map_uncommon
        ));
    }
    out
}

/// Train and evaluate every (mode, seed) pair on one shared world, holdout
/// split, and test set. Initialization depends only on the seed, so modes
/// start from identical parameters.
pub fn ablation_run(
    modes: &[SupervisionMode],
    seeds: &[u64],
    base: &TrainConfig,
    test_images: usize,
) -> Result<Vec<AblationRow>> {
    let setup = build_setup(base)?;
    let test = generate_test_set(&setup, test_images, substream(base.world_seed, "test"))?;

    let mut jobs = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            jobs.push((mode, seed));
        }
    }
    let results: Vec<Result<AblationRow>> = map_ordered(&jobs, |&(mode, seed)| {
        let cfg = TrainConfig {
            mode,
            seed,
            ..base.clone()
        };
        let outcome = train(&cfg, &setup, None)?;
        let report = evaluate(&outcome.params, &setup, &test, mode, 0.5)?;
        Ok(AblationRow {
            mode: mode.to_string(),
            seed,
            map_common: report.map_common,
            map_uncommon: report.map_uncommon,
        })
    });
    results.into_iter().collect()
}
