//! The model core: description re-weighting, the shared cross-attention
//! alignment decoder, and the three paradigm scorers (ITC, ITM, ITTA).
//!
//! Queries (text or tag embeddings) attend over the image's spatial cells;
//! there is no self-attention between queries, so every query is scored
//! independently of which others are in the batch. The forward pass is
//! written once over [`Ctx`] and runs identically on plain arrays and on the
//! training tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::SpatialFeatures;
use crate::numerics::{dot, Array, Ctx, EvalCtx};
use crate::{Error, Result};

/// Floor applied to the temperature so the tau -> 0 limit degrades to the
/// uniform prompt ensemble instead of dividing by zero.
pub const TAU_FLOOR: f64 = 1e-8;

/// Projector heads and learnable temperature for description re-weighting.
/// tau is stored as log_tau so it stays positive by construction.
#[derive(Clone, Debug)]
pub struct ReweightParams {
    /// `dim x proj` projector for the image global feature.
    pub g_v: Array,
    /// `dim x proj` projector for description embeddings.
    pub g_w: Array,
    /// One-element array holding log(tau).
    pub log_tau: Array,
}

impl ReweightParams {
    pub fn init(dim: usize, proj: usize, rng: &mut ChaCha8Rng) -> Self {
        // Small projector init keeps the initial similarity spread well under
        // 1/tau, so re-weighting starts out near the uniform ensemble and
        // sharpens only as the projectors learn.
        let scale = 1.0 / dim as f64;
        Self {
            g_v: init_matrix_scaled(dim, proj, scale, rng),
            g_w: init_matrix_scaled(dim, proj, scale, rng),
            log_tau: Array::scalar(10.0_f64.ln()),
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.item().exp().max(TAU_FLOOR)
    }
}

/// One decoder layer: single-head cross-attention plus a GELU feed-forward,
/// both behind pre-norm residuals.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub wq: Array,
    pub wk: Array,
    pub wv: Array,
    pub wo: Array,
    /// `dim x 4*dim`
    pub ff1: Array,
    /// `4*dim x dim`
    pub ff2: Array,
    pub ln1_gain: Array,
    pub ln1_bias: Array,
    pub ln2_gain: Array,
    pub ln2_bias: Array,
}

/// All decoder parameters: `layers.len()` is the depth (2 for the alignment
/// decoder, 12 for the ITM baseline).
#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub layers: Vec<LayerWeights>,
    pub w_out: Array,
    pub b_out: Array,
}

fn init_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array {
    init_matrix_scaled(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

fn init_matrix_scaled(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen_range(-1.0..1.0);
            u * std * 1.7320508075688772 // uniform with matched variance
        })
        .collect();
    Array::from_raw(vec![rows, cols], data)
}

impl DecoderWeights {
    pub fn init(dim: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..depth)
            .map(|_| LayerWeights {
                wq: init_matrix(dim, dim, rng),
                wk: init_matrix(dim, dim, rng),
                wv: init_matrix(dim, dim, rng),
                wo: init_matrix(dim, dim, rng),
                ff1: init_matrix(dim, 4 * dim, rng),
                ff2: init_matrix(4 * dim, dim, rng),
                ln1_gain: Array::full(&[dim], 1.0),
                ln1_bias: Array::zeros(&[dim]),
                ln2_gain: Array::full(&[dim], 1.0),
                ln2_bias: Array::zeros(&[dim]),
            })
            .collect();
        let w_out = init_matrix(dim, 1, rng);
        Self {
            layers,
            w_out: Array::vector(w_out.into_data()),
            b_out: Array::scalar(0.0),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.w_out.numel()
    }
}

/// Everything the trainer updates: the shared decoder plus the re-weighting
/// head.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub decoder: DecoderWeights,
    pub reweight: ReweightParams,
}

impl ModelParams {
    pub fn init(dim: usize, depth: usize, proj: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            decoder: DecoderWeights::init(dim, depth, &mut rng),
            reweight: ReweightParams::init(dim, proj, &mut rng),
        }
    }

    /// Stable (name, array) listing used by the optimizer and the checkpoint
    /// format: decoder layers in order, then head, then re-weighting.
    pub fn named(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (l, w) in self.decoder.layers.iter().enumerate() {
            out.push((format!("dec.l{l}.wq"), &w.wq));
            out.push((format!("dec.l{l}.wk"), &w.wk));
            out.push((format!("dec.l{l}.wv"), &w.wv));
            out.push((format!("dec.l{l}.wo"), &w.wo));
            out.push((format!("dec.l{l}.ff1"), &w.ff1));
            out.push((format!("dec.l{l}.ff2"), &w.ff2));
            out.push((format!("dec.l{l}.ln1.gain"), &w.ln1_gain));
            out.push((format!("dec.l{l}.ln1.bias"), &w.ln1_bias));
            out.push((format!("dec.l{l}.ln2.gain"), &w.ln2_gain));
            out.push((format!("dec.l{l}.ln2.bias"), &w.ln2_bias));
        }
        out.push(("dec.w_out".into(), &self.decoder.w_out));
        out.push(("dec.b_out".into(), &self.decoder.b_out));
        out.push(("rw.g_v".into(), &self.reweight.g_v));
        out.push(("rw.g_w".into(), &self.reweight.g_w));
        out.push(("rw.log_tau".into(), &self.reweight.log_tau));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out = Vec::new();
        for (l, w) in self.decoder.layers.iter_mut().enumerate() {
            out.push((format!("dec.l{l}.wq"), &mut w.wq));
            out.push((format!("dec.l{l}.wk"), &mut w.wk));
            out.push((format!("dec.l{l}.wv"), &mut w.wv));
            out.push((format!("dec.l{l}.wo"), &mut w.wo));
            out.push((format!("dec.l{l}.ff1"), &mut w.ff1));
            out.push((format!("dec.l{l}.ff2"), &mut w.ff2));
            out.push((format!("dec.l{l}.ln1.gain"), &mut w.ln1_gain));
            out.push((format!("dec.l{l}.ln1.bias"), &mut w.ln1_bias));
            out.push((format!("dec.l{l}.ln2.gain"), &mut w.ln2_gain));
            out.push((format!("dec.l{l}.ln2.bias"), &mut w.ln2_bias));
        }
        out.push(("dec.w_out".into(), &mut self.decoder.w_out));
        out.push(("dec.b_out".into(), &mut self.decoder.b_out));
        out.push(("rw.g_v".into(), &mut self.reweight.g_v));
        out.push(("rw.g_w".into(), &mut self.reweight.g_w));
        out.push(("rw.log_tau".into(), &mut self.reweight.log_tau));
        out
    }
}

/// Decoder weights lifted into a compute context.
pub struct LiftedLayer<V> {
    pub wq: V,
    pub wk: V,
    pub wv: V,
    pub wo: V,
    pub ff1: V,
    pub ff2: V,
    pub ln1_gain: V,
    pub ln1_bias: V,
    pub ln2_gain: V,
    pub ln2_bias: V,
}

pub struct LiftedDecoder<V> {
    pub layers: Vec<LiftedLayer<V>>,
    pub w_out: V,
    pub b_out: V,
    pub dim: usize,
}

/// Re-weighting parameters lifted into a compute context. `tau` is
/// exp(log_tau) clamped to [`TAU_FLOOR`] -- the clamp only matters in the
/// ensemble limit, far away from trained values.
pub struct LiftedReweight<V> {
    pub g_v: V,
    pub g_w: V,
    pub log_tau: V,
}

/// Lift with `ctx.lift` (frozen weights, inference) or via tape parameters
/// (training); `lift_fn` decides.
pub fn lift_decoder<C: Ctx>(
    ctx: &mut C,
    w: &DecoderWeights,
    mut lift_fn: impl FnMut(&mut C, &Array) -> C::V,
) -> LiftedDecoder<C::V> {
    let layers = w
        .layers
        .iter()
        .map(|l| LiftedLayer {
            wq: lift_fn(ctx, &l.wq),
            wk: lift_fn(ctx, &l.wk),
            wv: lift_fn(ctx, &l.wv),
            wo: lift_fn(ctx, &l.wo),
            ff1: lift_fn(ctx, &l.ff1),
            ff2: lift_fn(ctx, &l.ff2),
            ln1_gain: lift_fn(ctx, &l.ln1_gain),
            ln1_bias: lift_fn(ctx, &l.ln1_bias),
            ln2_gain: lift_fn(ctx, &l.ln2_gain),
            ln2_bias: lift_fn(ctx, &l.ln2_bias),
        })
        .collect();
    LiftedDecoder {
        layers,
        w_out: lift_fn(ctx, &w.w_out),
        b_out: lift_fn(ctx, &w.b_out),
        dim: w.dim(),
    }
}

pub fn lift_reweight<C: Ctx>(
    ctx: &mut C,
    rp: &ReweightParams,
    mut lift_fn: impl FnMut(&mut C, &Array) -> C::V,
) -> LiftedReweight<C::V> {
    LiftedReweight {
        g_v: lift_fn(ctx, &rp.g_v),
        g_w: lift_fn(ctx, &rp.g_w),
        log_tau: lift_fn(ctx, &rp.log_tau),
    }
}

/// Run `queries` (`Q x dim`) through the decoder against the image cells
/// (`k x dim`) and return one logit per query (`Q`-vector as `Q x 1`).
///
/// Per layer: pre-norm -> single-head cross-attention over the cells (1/sqrt(dim)
/// scaling) -> residual -> pre-norm -> GELU feed-forward -> residual.
pub fn decode_in<C: Ctx>(
    ctx: &mut C,
    cells: &C::V,
    queries: &C::V,
    dec: &LiftedDecoder<C::V>,
) -> Result<C::V> {
    let scale = 1.0 / (dec.dim as f64).sqrt();
    let mut h = queries.clone();
    for layer in &dec.layers {
        let normed = ctx.layer_norm_rows(&h, &layer.ln1_gain, &layer.ln1_bias)?;
        let q = ctx.matmul(&normed, &layer.wq)?;
        let keys = ctx.matmul(cells, &layer.wk)?;
        let values = ctx.matmul(cells, &layer.wv)?;
        let logits = ctx.matmul_nt(&q, &keys)?;
        let logits = ctx.scale(&logits, scale);
        let attn = ctx.softmax_rows(&logits);
        let context = ctx.matmul(&attn, &values)?;
        let projected = ctx.matmul(&context, &layer.wo)?;
        h = ctx.add(&h, &projected)?;

        let normed = ctx.layer_norm_rows(&h, &layer.ln2_gain, &layer.ln2_bias)?;
        let mid = ctx.matmul(&normed, &layer.ff1)?;
        let act = ctx.gelu(&mid);
        let ff = ctx.matmul(&act, &layer.ff2)?;
        h = ctx.add(&h, &ff)?;
    }
    let w_col = &dec.w_out; // rank-1 [dim]; matmul_nt treats it as 1 x dim
    let logits = ctx.matmul_nt(&h, w_col)?;
    ctx.add_scalar_v(&logits, &dec.b_out)
}

/// Eq.-style fusion of one tag's description matrix (`D x dim`) under one
/// image's global feature (`dim`): softmax over tau-scaled projected
/// similarities, then the weighted sum of the raw description embeddings.
/// Returns (fused `1 x dim`, weights `1 x D`).
pub fn reweight_in<C: Ctx>(
    ctx: &mut C,
    global: &C::V,
    desc: &C::V,
    rw: &LiftedReweight<C::V>,
    projected_desc: Option<&C::V>,
) -> Result<(C::V, C::V)> {
    let pv = ctx.matmul(global, &rw.g_v)?; // 1 x p
    let pw = match projected_desc {
        Some(p) => p.clone(),
        None => ctx.matmul(desc, &rw.g_w)?, // D x p
    };
    let sims = ctx.matmul_nt(&pv, &pw)?; // 1 x D
    let tau = ctx.exp(&rw.log_tau);
    // The floor keeps the tau -> 0 ensemble limit finite; it is implemented
    // as a clamp on the already-positive exp so gradients pass through
    // everywhere above the floor.
    let scaled = ctx.mul_scalar_v(&sims, &tau)?;
    let weights = ctx.softmax_rows(&scaled);
    let fused = ctx.matmul(&weights, desc)?;
    Ok((fused, weights))
}

// ---------------------------------------------------------------------------
// Plain-array public surface
// ---------------------------------------------------------------------------

/// Inference-time scorer: decoder weights lifted once, shared across calls
/// and threads.
pub struct Scorer {
    dec: LiftedDecoder<Arc<Array>>,
}

impl Scorer {
    pub fn new(weights: &DecoderWeights) -> Self {
        let mut ctx = EvalCtx;
        let dec = lift_decoder(&mut ctx, weights, |c, a| c.lift(a));
        Self { dec }
    }

    /// Logits for a `Q x dim` query matrix against one image.
    pub fn logits(&self, feat: &SpatialFeatures, queries: &Array) -> Result<Array> {
        let mut ctx = EvalCtx;
        let cells = ctx.lift(&feat.cells);
        let q = ctx.lift(queries);
        let out = decode_in(&mut ctx, &cells, &q, &self.dec)?;
        Ok(flatten_logits(ctx.value(&out)))
    }
}

fn flatten_logits(a: Array) -> Array {
    let n = a.numel();
    Array::from_raw(vec![n], a.into_data())
}

/// Inference-time description fusion with fixed re-weighting parameters.
pub struct Reweighter {
    rw: LiftedReweight<Arc<Array>>,
}

impl Reweighter {
    pub fn new(params: &ReweightParams) -> Self {
        let mut ctx = EvalCtx;
        let rw = lift_reweight(&mut ctx, params, |c, a| c.lift(a));
        Self { rw }
    }

    /// Returns the fused query (`dim`) and the description weights (`D`).
    pub fn fuse(&self, global: &Array, desc: &Array) -> Result<(Array, Array)> {
        if desc.rows() == 0 {
            return Err(Error::Validation("reweight needs at least one description".into()));
        }
        let mut ctx = EvalCtx;
        let g = ctx.lift(global);
        let d = ctx.lift(desc);
        let (fused, weights) = reweight_in(&mut ctx, &g, &d, &self.rw, None)?;
        let fused = ctx.value(&fused);
        let weights = ctx.value(&weights);
        Ok((
            Array::from_raw(vec![fused.numel()], fused.into_data()),
            Array::from_raw(vec![weights.numel()], weights.into_data()),
        ))
    }
}

/// Fused tag embedding for one (image, tag) pair.
pub fn reweight_descriptions(
    global: &Array,
    desc: &Array,
    rp: &ReweightParams,
) -> Result<Array> {
    Reweighter::new(rp).fuse(global, desc).map(|(fused, _)| fused)
}

/// Logits for `Q x dim` queries against one image.
pub fn decode_scores(
    feat: &SpatialFeatures,
    queries: &Array,
    dw: &DecoderWeights,
) -> Result<Array> {
    if queries.rows() == 0 {
        return Err(Error::Validation("decode_scores needs at least one query".into()));
    }
    Scorer::new(dw).logits(feat, queries)
}

/// Global-feature cosine similarity: the ITC paradigm score.
pub fn itc_score(img_global: &Array, txt: &Array) -> Result<f64> {
    let (ng, nt) = (img_global.l2_norm(), txt.l2_norm());
    if ng < 1e-12 || nt < 1e-12 {
        return Err(Error::Validation("itc_score on zero vector".into()));
    }
    Ok(dot(img_global.data(), txt.data()) / (ng * nt))
}

/// Deep-fusion matching score for a single (image, query) pair: same sublayer
/// structure as [`decode_scores`] at the baseline depth. One pair per call --
/// batching across queries is the one thing this paradigm cannot do.
pub fn itm_score(feat: &SpatialFeatures, query: &Array, deep: &DecoderWeights) -> Result<f64> {
    let q = Array::from_raw(vec![1, query.numel()], query.data().to_vec());
    let logits = decode_scores(feat, &q, deep)?;
    Ok(logits.item())
}

/// Scorer variant of [`itm_score`] for callers that pre-lift the deep
/// weights.
pub fn itm_score_with(scorer: &Scorer, feat: &SpatialFeatures, query: &Array) -> Result<f64> {
    let q = Array::from_raw(vec![1, query.numel()], query.data().to_vec());
    Ok(scorer.logits(feat, &q)?.item())
}

/// Alignment probabilities for a batch: `B x (N + T)` where columns 0..N are
/// the cached tag categories and N.. are the online text queries.
#[derive(Clone, Debug)]
pub struct AlignmentScores {
    pub probs: Array,
    pub num_tags: usize,
}

/// The unified forward pass: per image, tag queries are the re-weighted
/// description fusions, text queries are used as-is, and all of them go
/// through the shared decoder; probabilities are per-logit sigmoids.
/// `online_texts = None` reduces to pure tagging.
pub fn itta_forward(
    batch_feats: &[SpatialFeatures],
    online_texts: Option<&Array>,
    cache: &crate::labels::EmbeddingCache,
    rp: &ReweightParams,
    dw: &DecoderWeights,
) -> Result<AlignmentScores> {
    let n = cache.num_tags();
    let t = online_texts.map(|t| t.rows()).unwrap_or(0);
    let dim = dw.dim();
    let scorer = Scorer::new(dw);
    let reweighter = Reweighter::new(rp);

    let rows: Vec<Result<Vec<f64>>> = crate::parallel::map_ordered(batch_feats, |feat| {
        let mut queries = Vec::with_capacity((n + t) * dim);
        for tag in 0..n {
            let desc = cache.rows(tag)?;
            let (fused, _) = reweighter.fuse(&feat.global, desc)?;
            queries.extend_from_slice(fused.data());
        }
        if let Some(texts) = online_texts {
            for ti in 0..t {
                queries.extend_from_slice(texts.row(ti));
            }
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let q = Array::from_raw(vec![n + t, dim], queries);
        let logits = scorer.logits(feat, &q)?;
        Ok(logits.data().iter().map(|&l| crate::numerics::sigmoid(l)).collect())
    });

    let mut data = Vec::with_capacity(batch_feats.len() * (n + t));
    for row in rows {
        data.extend(row?);
    }
    Ok(AlignmentScores {
        probs: Array::from_raw(vec![batch_feats.len(), n + t], data),
        num_tags: n,
    })
}
