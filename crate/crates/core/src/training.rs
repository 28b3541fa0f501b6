//! Synthetic triplet generation, batch assembly with the online/offline
//! split, the optimization loop, and checkpointing.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    decode_in, lift_decoder, lift_reweight, reweight_in, LiftedDecoder, LiftedReweight,
    ModelParams,
};
use crate::encoders::{
    embed_sentence, encode_scene, ConceptWorld, SceneConcept, SpatialFeatures, WorldParams,
};
use crate::labels::{parse_tags, synth_descriptions, DescriptionSet, EmbeddingCache, LabelSystem};
use crate::losses::{asl_mean_on_tape, batch_contrastive_on_tape, AslConfig};
use crate::numerics::{Array, Tape, Var};
use crate::parallel::map_ordered;
use crate::{mix, substream, Error, Result};

/// Which supervision signals reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionMode {
    TagOnly,
    TextOnly,
    TagText,
    TagTextDesc,
    TagTextDescReweight,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 5] = [
        SupervisionMode::TagOnly,
        SupervisionMode::TextOnly,
        SupervisionMode::TagText,
        SupervisionMode::TagTextDesc,
        SupervisionMode::TagTextDescReweight,
    ];

    pub fn uses_tags(self) -> bool {
        !matches!(self, SupervisionMode::TextOnly)
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, SupervisionMode::TagOnly)
    }

    /// How the tagging branch builds its queries.
    pub fn tag_queries(self) -> TagQueryKind {
        match self {
            SupervisionMode::TagOnly | SupervisionMode::TagText => TagQueryKind::Name,
            SupervisionMode::TagTextDesc => TagQueryKind::DescriptionMean,
            SupervisionMode::TagTextDescReweight => TagQueryKind::Reweighted,
            SupervisionMode::TextOnly => TagQueryKind::Name,
        }
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SupervisionMode::TagOnly => "tag-only",
            SupervisionMode::TextOnly => "text-only",
            SupervisionMode::TagText => "tag+text",
            SupervisionMode::TagTextDesc => "tag+text+desc",
            SupervisionMode::TagTextDescReweight => "tag+text+desc+reweight",
        };
        f.write_str(s)
    }
}

impl FromStr for SupervisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tag-only" => Ok(SupervisionMode::TagOnly),
            "text-only" => Ok(SupervisionMode::TextOnly),
            "tag+text" => Ok(SupervisionMode::TagText),
            "tag+text+desc" => Ok(SupervisionMode::TagTextDesc),
            "tag+text+desc+reweight" => Ok(SupervisionMode::TagTextDescReweight),
            other => Err(Error::Validation(format!(
                "unknown supervision mode {other:?} (expected tag-only, text-only, \
                 tag+text, tag+text+desc, tag+text+desc+reweight)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagQueryKind {
    Name,
    DescriptionMean,
    Reweighted,
}

/// Loss applied to the in-batch text matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextLossKind {
    Asl,
    Bce,
    /// Symmetric contrastive cross-entropy on the logit matrix.
    Ce,
}

fn default_true_weight() -> f64 {
    1.0
}

/// Training configuration. `seed` drives the data and init substreams;
/// `world_seed` (usually the same value) drives the world, holdout split,
/// descriptions, and test set, so ablations can vary one without the other.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub world_seed: u64,
    pub mode: SupervisionMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Steps per epoch-equivalent: the learning rate decays by 0.9 each time
    /// this many post-warmup steps elapse.
    pub decay_interval: usize,
    pub weight_decay: f64,
    pub num_tags: usize,
    pub holdout_fraction: f64,
    pub descriptions_per_tag: usize,
    pub embed_dim: usize,
    pub cells: usize,
    pub proj_dim: usize,
    pub decoder_depth: usize,
    pub noise_sigma: f64,
    pub asl_tag: AslConfig,
    pub asl_text: AslConfig,
    pub text_loss: TextLossKind,
    pub ce_temperature: f64,
    #[serde(default = "default_true_weight")]
    pub tag_loss_weight: f64,
    #[serde(default = "default_true_weight")]
    pub text_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_seed: 0,
            mode: SupervisionMode::TagTextDescReweight,
            steps: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 100,
            decay_interval: 100,
            weight_decay: 0.05,
            num_tags: 80,
            holdout_fraction: 0.2,
            descriptions_per_tag: 8,
            embed_dim: 64,
            cells: 16,
            proj_dim: 64,
            decoder_depth: 2,
            noise_sigma: 0.1,
            asl_tag: AslConfig::tagging(),
            asl_text: AslConfig::text(),
            text_loss: TextLossKind::Asl,
            ce_temperature: 1.0,
            tag_loss_weight: 1.0,
            text_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            world_seed: seed,
            ..Self::default()
        }
    }

    /// The large-scale hyperparameter preset (batch 720, warmup 3000,
    /// lr 1e-4, 50 descriptions per tag). Far beyond desk runtimes; kept as
    /// a named reference point.
    pub fn paper_scale(seed: u64) -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_steps: 3000,
            batch_size: 720,
            descriptions_per_tag: 50,
            ..Self::with_seed(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.num_tags == 0 {
            return Err(Error::Validation(
                "steps, batch_size and num_tags must be positive".into(),
            ));
        }
        if self.batch_size < 2 && self.mode.uses_text() {
            return Err(Error::Validation(
                "text supervision needs batch_size >= 2 for in-batch negatives".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Validation("holdout fraction must be in [0, 1)".into()));
        }
        if self.learning_rate <= 0.0 || self.warmup_steps == 0 || self.decay_interval == 0 {
            return Err(Error::Validation(
                "learning rate, warmup and decay interval must be positive".into(),
            ));
        }
        self.asl_tag.validate()?;
        self.asl_text.validate()
    }

    /// Linear warmup to the base rate, then multiplicative 0.9 decay per
    /// epoch-equivalent. `step` is 1-indexed.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            let epochs = (step - self.warmup_steps) / self.decay_interval;
            self.learning_rate * 0.9_f64.powi(epochs as i32)
        }
    }
}

/// Common/held-out tag split, derived from the world seed so it is shared
/// across every run on the same world.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSplit {
    pub common: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl LabelSplit {
    pub fn generate(num_tags: usize, fraction: f64, seed: u64) -> Self {
        let mut ids: Vec<usize> = (0..num_tags).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..ids.len()).rev() {
            let j = rng.gen_range(0..=i);
            ids.swap(i, j);
        }
        let n_hold = (num_tags as f64 * fraction).round() as usize;
        let holdout: Vec<usize> = {
            let mut h = ids[..n_hold].to_vec();
            h.sort_unstable();
            h
        };
        let common: Vec<usize> = {
            let mut c = ids[n_hold..].to_vec();
            c.sort_unstable();
            c
        };
        Self { common, holdout }
    }
}

/// Everything a run needs besides the trainable parameters: world, labels,
/// descriptions, the offline cache covering all tags, and the split.
pub struct TrainSetup {
    pub world: ConceptWorld,
    pub labels: LabelSystem,
    pub descriptions: DescriptionSet,
    pub cache: EmbeddingCache,
    pub split: LabelSplit,
}

/// Build the world and the offline artifacts from the config's `world_seed`
/// substreams.
pub fn build_setup(cfg: &TrainConfig) -> Result<TrainSetup> {
    let world = ConceptWorld::generate(WorldParams {
        seed: substream(cfg.world_seed, "world"),
        num_concepts: cfg.num_tags,
        embed_dim: cfg.embed_dim,
        cells: cfg.cells,
        ..WorldParams::new(0, cfg.num_tags)
    });
    let labels = LabelSystem::from_world(&world);
    let descriptions = synth_descriptions(
        &labels,
        &world,
        cfg.descriptions_per_tag,
        substream(cfg.world_seed, "descriptions"),
    )?;
    let cache = EmbeddingCache::build(&descriptions, &labels, &world)?;
    let split = LabelSplit::generate(
        cfg.num_tags,
        cfg.holdout_fraction,
        substream(cfg.world_seed, "holdout"),
    );
    Ok(TrainSetup {
        world,
        labels,
        descriptions,
        cache,
        split,
    })
}

/// One synthetic training example.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub concepts: Vec<usize>,
    pub caption: String,
    pub tags: HashSet<usize>,
    pub features: SpatialFeatures,
    pub image_seed: u64,
}

/// Probability that each appearance attribute of a sampled concept is
/// visible in a given scene.
pub const ATTRIBUTE_VISIBILITY: f64 = 0.5;

/// Sample 2-4 concepts with per-instance visible attributes, render a
/// caption that names each concept and mentions (some of) its visible
/// attribute words plus fillers, encode the scene, and parse the tags back
/// out of the caption.
pub fn gen_triplet(
    world: &ConceptWorld,
    ls: &LabelSystem,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Triplet> {
    let total = world.concepts.len();
    let n = rng.gen_range(2..=4.min(total));
    let mut ids: Vec<usize> = (0..total).collect();
    for i in 0..n {
        let j = rng.gen_range(i..total);
        ids.swap(i, j);
    }
    let mut concepts = ids[..n].to_vec();
    concepts.sort_unstable();

    let scene: Vec<SceneConcept> = concepts
        .iter()
        .map(|&id| {
            let attrs = world.concepts[id].context_words.len();
            SceneConcept {
                id,
                visible_attributes: (0..attrs)
                    .map(|_| rng.gen_bool(ATTRIBUTE_VISIBILITY))
                    .collect(),
            }
        })
        .collect();

    let mut caption = String::new();
    for (i, sc) in scene.iter().enumerate() {
        let c = &world.concepts[sc.id];
        if i > 0 {
            caption.push_str(" and ");
        }
        caption.push_str("a ");
        caption.push_str(&c.name);
        let visible: Vec<&String> = c
            .context_words
            .iter()
            .zip(&sc.visible_attributes)
            .filter(|(_, &v)| v)
            .map(|(w, _)| w)
            .collect();
        let mut joiner = " with ";
        for w in visible {
            if rng.gen_bool(0.7) {
                caption.push_str(joiner);
                caption.push_str(w);
                joiner = " and ";
            }
        }
    }
    caption.push_str(" near ");
    caption.push_str(&world.filler_words[rng.gen_range(0..world.filler_words.len())]);
    if rng.gen_bool(0.5) {
        caption.push(' ');
        caption.push_str(&world.filler_words[rng.gen_range(0..world.filler_words.len())]);
    }

    let image_seed = rng.gen();
    let features = encode_scene(&scene, world, noise_sigma, image_seed)?;
    let tags = parse_tags(&caption, ls);
    Ok(Triplet {
        concepts,
        caption,
        tags,
        features,
        image_seed,
    })
}

/// [`gen_triplet`] with a one-shot seed instead of a caller-managed RNG.
pub fn gen_triplet_from_seed(
    world: &ConceptWorld,
    ls: &LabelSystem,
    noise_sigma: f64,
    seed: u64,
) -> Result<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_triplet(world, ls, noise_sigma, &mut rng)
}

/// A fully assembled batch: features, frozen caption embeddings, and the
/// tag-target matrix over the training (common) label set.
pub struct Batch {
    pub feats: Vec<SpatialFeatures>,
    /// `B x dim`, frozen.
    pub caption_embeds: Array,
    /// `B x N_common` 0/1.
    pub tag_targets: Array,
    /// Instrumentation: how many held-out tag identities reached the tagging
    /// branch while building targets. Always zero by construction.
    pub holdout_touches: u64,
}

pub fn assemble_batch(
    setup: &TrainSetup,
    cfg: &TrainConfig,
    data_seed: u64,
    step: usize,
) -> Result<Batch> {
    let base = step * cfg.batch_size;
    let indices: Vec<u64> = (0..cfg.batch_size).map(|i| (base + i) as u64).collect();
    let triplets: Vec<Result<Triplet>> = map_ordered(&indices, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(data_seed, i));
        gen_triplet(&setup.world, &setup.labels, cfg.noise_sigma, &mut rng)
    });

    let n = setup.split.common.len();
    let dim = setup.world.embed_dim();
    let mut feats = Vec::with_capacity(cfg.batch_size);
    let mut embeds = Vec::with_capacity(cfg.batch_size * dim);
    let mut targets = vec![0.0; cfg.batch_size * n];
    let holdout: HashSet<usize> = setup.split.holdout.iter().copied().collect();
    let mut touches = 0u64;
    for (b, t) in triplets.into_iter().enumerate() {
        let t = t?;
        embeds.extend_from_slice(embed_sentence(&t.caption, &setup.world).data());
        for (col, &tag) in setup.split.common.iter().enumerate() {
            if t.tags.contains(&tag) {
                if holdout.contains(&tag) {
                    touches += 1; // unreachable: common and holdout are disjoint
                }
                targets[b * n + col] = 1.0;
            }
        }
        feats.push(t.features);
    }
    Ok(Batch {
        feats,
        caption_embeds: Array::from_raw(vec![cfg.batch_size, dim], embeds),
        tag_targets: Array::from_raw(vec![cfg.batch_size, n], targets),
        holdout_touches: touches,
    })
}

/// Model parameters lifted onto a tape, with the stable name order used for
/// gradient extraction.
pub struct TapeModel {
    pub dec: LiftedDecoder<Var>,
    pub rw: LiftedReweight<Var>,
    pub named: Vec<(String, Var)>,
}

/// Rebuild a [`TapeModel`] from parameter vars created elsewhere (the
/// gradient checker creates them), in the [`ModelParams::named`] order.
pub fn tape_model_from_vars(template: &ModelParams, vars: &[Var]) -> TapeModel {
    use crate::alignment::LiftedLayer;
    let depth = template.decoder.layers.len();
    assert_eq!(vars.len(), depth * 10 + 5, "parameter count mismatch");
    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("var list exhausted");
    let layers = (0..depth)
        .map(|_| LiftedLayer {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ff1: next(),
            ff2: next(),
            ln1_gain: next(),
            ln1_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
        })
        .collect();
    let dec = LiftedDecoder {
        layers,
        w_out: next(),
        b_out: next(),
        dim: template.decoder.dim(),
    };
    let rw = LiftedReweight {
        g_v: next(),
        g_w: next(),
        log_tau: next(),
    };
    let named = template
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .zip(vars.iter().copied())
        .map(|(n, v)| (n, v))
        .collect();
    TapeModel { dec, rw, named }
}

pub fn lift_params(tape: &mut Tape, params: &ModelParams) -> TapeModel {
    let mut named = Vec::new();
    let dec = lift_decoder(tape, &params.decoder, |t, a| t.param(a.clone()));
    let rw = lift_reweight(tape, &params.reweight, |t, a| t.param(a.clone()));
    // Recover names by walking the same order as ModelParams::named().
    let mut vars = Vec::new();
    for l in &dec.layers {
        vars.extend([
            l.wq, l.wk, l.wv, l.wo, l.ff1, l.ff2, l.ln1_gain, l.ln1_bias, l.ln2_gain,
            l.ln2_bias,
        ]);
    }
    vars.extend([dec.w_out, dec.b_out, rw.g_v, rw.g_w, rw.log_tau]);
    for ((name, _), var) in params.named().into_iter().zip(vars) {
        named.push((name, var));
    }
    TapeModel { dec, rw, named }
}

/// Per-branch losses of one batch, built on the tape. Returns
/// (total, tag, text) scalar nodes.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    model: &TapeModel,
    setup: &TrainSetup,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<(Var, Var, Var)> {
    let mode = cfg.mode;
    let b = batch.feats.len();
    let n = if mode.uses_tags() { setup.split.common.len() } else { 0 };
    let t = if mode.uses_text() { b } else { 0 };
    let dim = setup.world.embed_dim();

    // Offline side: constant query rows (tag names, description means, and
    // caption embeddings) are assembled once per step and lifted as a single
    // frozen input.
    let reweighted = mode.uses_tags() && mode.tag_queries() == TagQueryKind::Reweighted;
    let const_queries: Option<Var> = if reweighted {
        None
    } else {
        let mut data = Vec::with_capacity((n + t) * dim);
        if mode.uses_tags() {
            match mode.tag_queries() {
                TagQueryKind::Name => {
                    for &tag in &setup.split.common {
                        data.extend_from_slice(
                            embed_sentence(setup.labels.name(tag), &setup.world).data(),
                        );
                    }
                }
                TagQueryKind::DescriptionMean => {
                    let means = setup.cache.ensemble_means();
                    for &tag in &setup.split.common {
                        data.extend_from_slice(means.row(tag));
                    }
                }
                TagQueryKind::Reweighted => unreachable!(),
            }
        }
        if t > 0 {
            data.extend_from_slice(batch.caption_embeds.data());
        }
        Some(tape.input(Array::from_raw(vec![n + t, dim], data)))
    };

    // Reweighted queries need the descriptions projected through g_w once
    // per tag; the fusion itself is per image.
    let projected_desc: Option<Vec<(Var, Var)>> = if reweighted {
        let mut per_tag = Vec::with_capacity(n);
        for &tag in &setup.split.common {
            let desc = tape.input(setup.cache.rows(tag)?.clone());
            let pw = tape.matmul(desc, model.rw.g_w)?;
            per_tag.push((desc, pw));
        }
        Some(per_tag)
    } else {
        None
    };
    let caption_rows: Vec<Var> = if reweighted && t > 0 {
        (0..b)
            .map(|i| tape.input(Array::vector(batch.caption_embeds.row(i).to_vec())))
            .collect()
    } else {
        Vec::new()
    };

    // Per image: one decoder pass over tag queries followed by text queries.
    let mut tag_logit_rows = Vec::with_capacity(b);
    let mut text_logit_rows = Vec::with_capacity(b);
    for feat in &batch.feats {
        let cells = tape.input(feat.cells.clone());
        let queries: Var = match (&const_queries, &projected_desc) {
            (Some(cq), _) => *cq,
            (None, Some(per_tag)) => {
                let global = tape.input(Array::vector(feat.global.data().to_vec()));
                let mut rows = Vec::with_capacity(n + t);
                for (desc, pw) in per_tag {
                    let (fused, _) = reweight_in(tape, &global, desc, &model.rw, Some(pw))?;
                    rows.push(fused);
                }
                rows.extend(&caption_rows);
                tape.stack_rows(&rows)?
            }
            (None, None) => unreachable!("reweighted implies projected_desc"),
        };
        let logits = decode_in(tape, &cells, &queries, &model.dec)?;
        let flat = tape.flatten(logits);
        if n > 0 {
            tag_logit_rows.push(tape.slice(flat, 0, n)?);
        }
        if t > 0 {
            text_logit_rows.push(tape.slice(flat, n, t)?);
        }
    }

    let zero = tape.input(Array::scalar(0.0));
    let tag_loss = if n > 0 {
        let logits = tape.stack_rows(&tag_logit_rows)?;
        let probs = tape.sigmoid(logits);
        asl_mean_on_tape(tape, probs, &batch.tag_targets, &cfg.asl_tag)?
    } else {
        zero
    };
    let text_loss = if t > 0 {
        let logits = tape.stack_rows(&text_logit_rows)?;
        match cfg.text_loss {
            TextLossKind::Asl | TextLossKind::Bce => {
                let mut diag = Array::zeros(&[b, b]);
                for i in 0..b {
                    diag.data_mut()[i * b + i] = 1.0;
                }
                let asl_cfg = if cfg.text_loss == TextLossKind::Bce {
                    AslConfig::bce()
                } else {
                    cfg.asl_text
                };
                let probs = tape.sigmoid(logits);
                asl_mean_on_tape(tape, probs, &diag, &asl_cfg)?
            }
            TextLossKind::Ce => batch_contrastive_on_tape(tape, logits, cfg.ce_temperature)?,
        }
    } else {
        zero
    };

    let wt = tape.scale(tag_loss, if n > 0 { cfg.tag_loss_weight } else { 0.0 });
    let wx = tape.scale(text_loss, if t > 0 { cfg.text_loss_weight } else { 0.0 });
    let total = tape.add(wt, wx)?;
    Ok((total, tag_loss, text_loss))
}

/// Decoupled-weight-decay adaptive-moment optimizer.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let shapes: Vec<Array> = params
            .named()
            .iter()
            .map(|(_, a)| Array::zeros(a.shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.clone(),
            v: shapes,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss_tag: f64,
    pub loss_text: f64,
    pub loss_total: f64,
}

/// Loss trace as CSV (`step,loss_tag,loss_text,loss_total`).
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,loss_tag,loss_text,loss_total\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.loss_tag, r.loss_text, r.loss_total
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub holdout_touches: u64,
}

/// Run the optimization loop. `init` fine-tunes from an existing checkpoint
/// instead of fresh initialization.
pub fn train(cfg: &TrainConfig, setup: &TrainSetup, init: Option<ModelParams>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data_seed = substream(cfg.seed, "data");
    let init_seed = substream(cfg.seed, "init");
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(cfg.embed_dim, cfg.decoder_depth, cfg.proj_dim, init_seed),
    };
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut holdout_touches = 0;

    for step in 0..cfg.steps {
        let batch = assemble_batch(setup, cfg, data_seed, step)?;
        holdout_touches += batch.holdout_touches;

        let mut tape = Tape::new();
        let model = lift_params(&mut tape, &params);
        let (total, tag, text) = batch_loss_on_tape(&mut tape, &model, setup, cfg, &batch)?;
        let loss_total = tape.value(total).item();
        let loss_tag = tape.value(tag).item();
        let loss_text = tape.value(text).item();
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(total)?;
        let grads: Vec<Array> = model.named.iter().map(|&(_, v)| tape.grad(v)).collect();
        drop(tape);

        let lr = cfg.learning_rate_at(step + 1);
        opt.step(&mut params, &grads, lr);

        trace.push(TraceRow {
            step,
            loss_tag,
            loss_text,
            loss_total,
        });
    }
    Ok(TrainOutcome {
        params,
        trace,
        holdout_touches,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint format (RPPW)
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"RPPW";
const CKPT_VERSION: u32 = 1;

/// Binary, little-endian: magic "RPPW", u32 version, then for every named
/// parameter: u32 name length, UTF-8 name, u32 rank, u32 dims, f64 payload.
/// Parameters are written in the stable [`ModelParams::named`] order and read
/// until end of file.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for (name, a) in params.named() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
        for &d in a.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in a.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::labels::atomic_write(path, &buf)
}

/// Read every named parameter from an RPPW file.
pub fn load_checkpoint_entries(path: &Path) -> Result<Vec<(String, Array)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::io(path.display().to_string()))?;
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(fail("bad magic, expected RPPW".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    let mut off = 8;
    let need = |off: usize, len: usize, what: &str| -> Result<()> {
        if off + len > bytes.len() {
            Err(fail(format!(
                "truncated file: {what} needs bytes {off}..{} but file has {}",
                off + len,
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    while off < bytes.len() {
        need(off, 4, "name length")?;
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, name_len, "name")?;
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())
            .map_err(|e| fail(format!("bad name utf-8: {e}")))?;
        off += name_len;
        need(off, 4, "rank")?;
        let rank = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            need(off, 4, "dimension")?;
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let numel: usize = shape.iter().product();
        need(off, numel * 8, "payload")?;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(f64::from_le_bytes(
                bytes[off + i * 8..off + i * 8 + 8].try_into().unwrap(),
            ));
        }
        off += numel * 8;
        entries.push((name, Array::new(shape, data)?));
    }
    Ok(entries)
}

/// Load a checkpoint into [`ModelParams`], validating the complete name set.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let entries = load_checkpoint_entries(path)?;
    let map: std::collections::BTreeMap<String, Array> = entries.into_iter().collect();
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));

    let depth = (0..)
        .take_while(|l| map.contains_key(&format!("dec.l{l}.wq")))
        .count();
    if depth == 0 {
        return Err(fail("no decoder layers found".into()));
    }
    let get = |name: &str| -> Result<Array> {
        map.get(name)
            .cloned()
            .ok_or_else(|| fail(format!("missing parameter {name}")))
    };
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        layers.push(crate::alignment::LayerWeights {
            wq: get(&format!("dec.l{l}.wq"))?,
            wk: get(&format!("dec.l{l}.wk"))?,
            wv: get(&format!("dec.l{l}.wv"))?,
            wo: get(&format!("dec.l{l}.wo"))?,
            ff1: get(&format!("dec.l{l}.ff1"))?,
            ff2: get(&format!("dec.l{l}.ff2"))?,
            ln1_gain: get(&format!("dec.l{l}.ln1.gain"))?,
            ln1_bias: get(&format!("dec.l{l}.ln1.bias"))?,
            ln2_gain: get(&format!("dec.l{l}.ln2.gain"))?,
            ln2_bias: get(&format!("dec.l{l}.ln2.bias"))?,
        });
    }
    let params = ModelParams {
        decoder: crate::alignment::DecoderWeights {
            layers,
            w_out: get("dec.w_out")?,
            b_out: get("dec.b_out")?,
        },
        reweight: crate::alignment::ReweightParams {
            g_v: get("rw.g_v")?,
            g_w: get("rw.g_w")?,
            log_tau: get("rw.log_tau")?,
        },
    };
    let expected: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    if map.len() != expected.len() {
        let extra: Vec<&String> =
            map.keys().filter(|k| !expected.contains(k)).collect();
        return Err(fail(format!("unexpected parameters {extra:?}")));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 4,
            num_tags: 8,
            embed_dim: 16,
            cells: 6,
            proj_dim: 8,
            descriptions_per_tag: 3,
            warmup_steps: 2,
            ..TrainConfig::with_seed(seed)
        }
    }

    #[test]
    fn triplet_tags_subset_of_concepts() {
        let cfg = tiny_cfg(5);
        let setup = build_setup(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let t = gen_triplet(&setup.world, &setup.labels, 0.05, &mut rng).unwrap();
            for tag in &t.tags {
                assert!(t.concepts.contains(tag));
            }
            assert_eq!(t.tags, parse_tags(&t.caption, &setup.labels));
        }
    }

    #[test]
    fn triplet_deterministic_in_seed() {
        let cfg = tiny_cfg(6);
        let setup = build_setup(&cfg).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let ta = gen_triplet(&setup.world, &setup.labels, 0.05, &mut a).unwrap();
        let tb = gen_triplet(&setup.world, &setup.labels, 0.05, &mut b).unwrap();
        assert_eq!(ta.caption, tb.caption);
        assert_eq!(ta.features.cells.data(), tb.features.cells.data());
    }

    #[test]
    fn triplet_caption_names_every_concept() {
        // Exhaustive scan over 1000 seeded triplets.
        let cfg = tiny_cfg(7);
        let setup = build_setup(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let t = gen_triplet(&setup.world, &setup.labels, 0.0, &mut rng).unwrap();
            for &id in &t.concepts {
                let name = &setup.world.concepts[id].name;
                assert!(
                    t.caption.contains(name.as_str()),
                    "caption {:?} missing {name}",
                    t.caption
                );
                assert!(t.tags.contains(&id));
            }
        }
    }

    #[test]
    fn warmup_learning_rate_is_linear() {
        let cfg = TrainConfig {
            learning_rate: 2.0,
            warmup_steps: 100,
            ..TrainConfig::with_seed(0)
        };
        assert!((cfg.learning_rate_at(50) - 1.0).abs() < 1e-15);
        assert!((cfg.learning_rate_at(100) - 2.0).abs() < 1e-15);
        // after warmup: 0.9 decay per decay_interval
        assert!((cfg.learning_rate_at(100 + cfg.decay_interval) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = LabelSplit::generate(80, 0.2, 42);
        let b = LabelSplit::generate(80, 0.2, 42);
        assert_eq!(a, b);
        assert_eq!(a.holdout.len(), 16);
        assert_eq!(a.common.len(), 64);
        let inter: Vec<_> = a.common.iter().filter(|c| a.holdout.contains(c)).collect();
        assert!(inter.is_empty());
    }

    #[test]
    fn online_offline_equivalence_bitwise() {
        let cfg = tiny_cfg(8);
        let setup = build_setup(&cfg).unwrap();
        for tag in 0..setup.labels.len() {
            let rows = setup.cache.rows(tag).unwrap();
            for (j, desc) in setup.descriptions.descriptions(tag).iter().enumerate() {
                let online = embed_sentence(desc, &setup.world);
                assert_eq!(rows.row(j), online.data());
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let mut cfg = tiny_cfg(9);
        cfg.steps = 30;
        cfg.mode = SupervisionMode::TagText;
        let setup = build_setup(&cfg).unwrap();
        let a = train(&cfg, &setup, None).unwrap();
        let b = train(&cfg, &setup, None).unwrap();
        assert_eq!(a.holdout_touches, 0);
        for ((n1, p1), (_, p2)) in a.params.named().iter().zip(b.params.named()) {
            assert_eq!(p1.data(), p2.data(), "parameter {n1} diverged");
        }
        assert_eq!(a.trace.len(), 30);
        let first: f64 = a.trace[..5].iter().map(|r| r.loss_total).sum::<f64>() / 5.0;
        let last: f64 = a.trace[25..].iter().map(|r| r.loss_total).sum::<f64>() / 5.0;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn all_modes_run_one_step() {
        for mode in SupervisionMode::ALL {
            let mut cfg = tiny_cfg(10);
            cfg.steps = 1;
            cfg.mode = mode;
            let setup = build_setup(&cfg).unwrap();
            let out = train(&cfg, &setup, None).unwrap();
            assert!(out.trace[0].loss_total.is_finite(), "{mode}");
        }
    }

    #[test]
    fn text_loss_variants_run() {
        for kind in [TextLossKind::Asl, TextLossKind::Bce, TextLossKind::Ce] {
            let mut cfg = tiny_cfg(11);
            cfg.steps = 1;
            cfg.mode = SupervisionMode::TagText;
            cfg.text_loss = kind;
            let setup = build_setup(&cfg).unwrap();
            assert!(train(&cfg, &setup, None).is_ok(), "{kind:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let params = ModelParams::init(8, 2, 4, 77);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rppw");
        let p2 = dir.path().join("b.rppw");
        save_checkpoint(&params, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(&dir.path().join("missing.rppw")).is_err());

        let params = ModelParams::init(8, 2, 4, 78);
        let path = dir.path().join("c.rppw");
        save_checkpoint(&params, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'Q';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[4] = 3;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));

        std::fs::write(&path, &good[..good.len() - 11]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(err.contains("needs bytes"), "{err}");
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in SupervisionMode::ALL {
            assert_eq!(mode.to_string().parse::<SupervisionMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<SupervisionMode>().is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut cfg = tiny_cfg(12);
        cfg.steps = 40;
        cfg.learning_rate = 1e9; // drive the parameters to overflow
        cfg.warmup_steps = 1;
        let setup = build_setup(&cfg).unwrap();
        match train(&cfg, &setup, None) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected non-finite loss abort, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_header() {
        let csv = trace_to_csv(&[TraceRow {
            step: 0,
            loss_tag: 1.5,
            loss_text: 0.5,
            loss_total: 2.0,
        }]);
        assert!(csv.starts_with("step,loss_tag,loss_text,loss_total\n"));
        assert!(csv.contains("0,1.5,0.5,2"));
    }
}
