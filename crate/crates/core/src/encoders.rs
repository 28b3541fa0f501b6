//! Deterministic stub encoders and the synthetic concept world they encode.
//!
//! Real vision/text backbones are replaced by seeded constructions: every
//! word maps to a fixed pseudo-random unit vector through a 64-bit mixing
//! hash, a sentence embeds as the normalized mean of its word vectors, and an
//! image is a grid of feature cells into which the signature vectors of the
//! depicted concepts are added. All of it is a pure function of seeds, so
//! experiments run identically on any machine. Externally produced
//! embeddings can replace the stub through the cache file format in
//! [`crate::labels`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::Array;
use crate::{substream, Error, Result};

/// Tokenizer/encoder sequence cap.
pub const MAX_TOKENS: usize = 77;

/// One synthetic visual concept: a unique name word, a pool of context words
/// describing its appearance attributes, a unit-norm image-space signature,
/// and one sub-signature per attribute. A rendered instance of the concept
/// shows its name signature plus the sub-signatures of whichever attributes
/// are visible in that instance.
#[derive(Clone, Debug)]
pub struct Concept {
    pub id: usize,
    pub name: String,
    pub context_words: Vec<String>,
    pub signature: Array,
    pub context_signatures: Vec<Array>,
}

/// Generation parameters for a [`ConceptWorld`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldParams {
    pub seed: u64,
    pub num_concepts: usize,
    /// Embedding dimension shared by text and image features.
    pub embed_dim: usize,
    /// Number of spatial feature cells per image.
    pub cells: usize,
    pub context_words_per_concept: usize,
    pub num_filler_words: usize,
}

impl WorldParams {
    pub fn new(seed: u64, num_concepts: usize) -> Self {
        Self {
            seed,
            num_concepts,
            embed_dim: 64,
            cells: 16,
            context_words_per_concept: 4,
            num_filler_words: 24,
        }
    }
}

/// The synthetic stand-in for web image-text data: a fixed vocabulary of
/// concepts with signatures, plus shared filler words. Immutable after
/// construction and a deterministic function of its parameters.
#[derive(Clone, Debug)]
pub struct ConceptWorld {
    pub params: WorldParams,
    pub concepts: Vec<Concept>,
    pub filler_words: Vec<String>,
}

const SYLLABLES: [&str; 28] = [
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "na", "pe", "qi", "ro", "su", "ta",
    "ve", "wi", "xo", "yu", "za", "bren", "dola", "fima", "gork", "hesh", "jint", "krev", "lum",
];

/// Draws pronounceable pseudo-words, unique across every call on the same
/// generator.
struct WordGen {
    rng: ChaCha8Rng,
    used: std::collections::HashSet<String>,
}

impl WordGen {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: std::collections::HashSet::new(),
        }
    }

    fn next(&mut self) -> String {
        loop {
            let parts = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..parts {
                w.push_str(SYLLABLES[self.rng.gen_range(0..SYLLABLES.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

impl ConceptWorld {
    pub fn generate(params: WorldParams) -> Self {
        let mut words = WordGen::new(substream(params.seed, "words"));
        let mut sig_rng = ChaCha8Rng::seed_from_u64(substream(params.seed, "signatures"));
        let draw_unit = |rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..params.embed_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            Array::vector(data).normalized()
        };
        let concepts = (0..params.num_concepts)
            .map(|id| {
                let name = words.next();
                let context_words: Vec<String> = (0..params.context_words_per_concept)
                    .map(|_| words.next())
                    .collect();
                let signature = draw_unit(&mut sig_rng);
                let context_signatures =
                    (0..context_words.len()).map(|_| draw_unit(&mut sig_rng)).collect();
                Concept {
                    id,
                    name,
                    context_words,
                    signature,
                    context_signatures,
                }
            })
            .collect();
        let filler_words = (0..params.num_filler_words).map(|_| words.next()).collect();
        Self {
            params,
            concepts,
            filler_words,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.params.embed_dim
    }

    pub fn concept(&self, id: usize) -> Result<&Concept> {
        self.concepts.get(id).ok_or(Error::UnknownConcept(id))
    }

    /// Name plus context words: the pool a concept's captions and
    /// descriptions draw from.
    pub fn word_pool(&self, id: usize) -> Result<Vec<&str>> {
        let c = self.concept(id)?;
        let mut pool = vec![c.name.as_str()];
        pool.extend(c.context_words.iter().map(String::as_str));
        Ok(pool)
    }
}

/// Token sequence: lowercase words, at most [`MAX_TOKENS`] of them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercase, split on whitespace and punctuation, truncate to 77 tokens.
pub fn tokenize(text: &str) -> TokenSeq {
    let lower = text.to_lowercase();
    let tokens = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(MAX_TOKENS)
        .map(str::to_string)
        .collect();
    TokenSeq(tokens)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed pseudo-random unit vector for a word: an FNV-style hash of
/// `(seed, word)` seeds a splitmix64 stream expanded to `dim` floats in
/// [-1, 1), then L2-normalized. No dependencies, reproducible everywhere.
pub fn word_vector(seed: u64, word: &str, dim: usize) -> Array {
    let mut h = seed ^ 0xCBF2_9CE4_8422_2325;
    for b in word.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut state = h;
    let data: Vec<f64> = (0..dim)
        .map(|_| {
            let bits = splitmix64(&mut state) >> 11; // 53 random bits
            (bits as f64) / ((1u64 << 52) as f64) - 1.0
        })
        .collect();
    Array::vector(data).normalized()
}

/// Frozen text encoder: L2-normalized mean of per-word hash vectors. The
/// empty sequence maps to the zero vector. Gradients never flow through this.
pub fn embed_text(tokens: &TokenSeq, world: &ConceptWorld) -> Array {
    let dim = world.embed_dim();
    if tokens.is_empty() {
        return Array::zeros(&[dim]);
    }
    let mut acc = vec![0.0; dim];
    for t in tokens.tokens() {
        let wv = word_vector(world.params.seed, t, dim);
        for (a, v) in acc.iter_mut().zip(wv.data()) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Array::vector(acc).normalized()
}

/// Convenience: tokenize then embed.
pub fn embed_sentence(text: &str, world: &ConceptWorld) -> Array {
    embed_text(&tokenize(text), world)
}

/// Per-image feature grid plus its global vector.
#[derive(Clone, Debug)]
pub struct SpatialFeatures {
    /// `cells x dim` spatial features.
    pub cells: Array,
    /// Global feature: L2-normalized mean of the cells.
    pub global: Array,
}

impl SpatialFeatures {
    pub fn from_cells(cells: Array) -> Self {
        let (k, d) = (cells.rows(), cells.cols());
        let mut mean = vec![0.0; d];
        for i in 0..k {
            for (m, v) in mean.iter_mut().zip(cells.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= k as f64;
        }
        let global = Array::vector(mean).normalized();
        Self { cells, global }
    }
}

/// Amplitude of attribute sub-signatures relative to the concept signature.
pub const ATTRIBUTE_GAIN: f64 = 0.5;

/// One concept instance in a scene: which of its appearance attributes are
/// visible in this particular image.
#[derive(Clone, Debug)]
pub struct SceneConcept {
    pub id: usize,
    pub visible_attributes: Vec<bool>,
}

impl SceneConcept {
    /// Concept with no visible attributes (bare signature).
    pub fn bare(id: usize, world: &ConceptWorld) -> Result<Self> {
        let c = world.concept(id)?;
        Ok(Self {
            id,
            visible_attributes: vec![false; c.context_words.len()],
        })
    }
}

/// Stub image encoder. Each present concept's signature is added into a
/// seeded-random subset of ceil(cells/4) cells, then i.i.d. Gaussian noise of
/// std `noise_sigma` is added to every cell. Pure in all of its arguments;
/// concept ids are visited in sorted order.
pub fn encode_image(
    present_concepts: &[usize],
    world: &ConceptWorld,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<SpatialFeatures> {
    let mut ids: Vec<usize> = present_concepts.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let scene: Vec<SceneConcept> = ids
        .iter()
        .map(|&id| SceneConcept::bare(id, world))
        .collect::<Result<_>>()?;
    encode_scene(&scene, world, noise_sigma, rng_seed)
}

/// Scene encoder behind [`encode_image`]: concepts plus per-instance visible
/// attributes. Visible attribute sub-signatures are added into the same cell
/// subset as their concept, scaled by [`ATTRIBUTE_GAIN`].
pub fn encode_scene(
    scene: &[SceneConcept],
    world: &ConceptWorld,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<SpatialFeatures> {
    let k = world.params.cells;
    let d = world.embed_dim();
    let mut ordered: Vec<&SceneConcept> = scene.iter().collect();
    ordered.sort_by_key(|s| s.id);
    for s in &ordered {
        let c = world.concept(s.id)?;
        if s.visible_attributes.len() != c.context_words.len() {
            return Err(Error::Validation(format!(
                "concept {} has {} attributes, visibility mask has {}",
                s.id,
                c.context_words.len(),
                s.visible_attributes.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut cells = vec![0.0; k * d];
    let per_concept = k.div_ceil(4);
    for s in &ordered {
        let concept = &world.concepts[s.id];
        let mut slots: Vec<usize> = (0..k).collect();
        // Partial Fisher-Yates: the first per_concept entries are the subset.
        for i in 0..per_concept {
            let j = rng.gen_range(i..k);
            slots.swap(i, j);
        }
        for &slot in &slots[..per_concept] {
            let cell = &mut cells[slot * d..(slot + 1) * d];
            for (c, v) in cell.iter_mut().zip(concept.signature.data()) {
                *c += v;
            }
            for (ai, &vis) in s.visible_attributes.iter().enumerate() {
                if vis {
                    let sig = &concept.context_signatures[ai];
                    for (c, v) in cell.iter_mut().zip(sig.data()) {
                        *c += ATTRIBUTE_GAIN * v;
                    }
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        for c in cells.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *c += noise_sigma * n;
        }
    }
    Ok(SpatialFeatures::from_cells(Array::new(vec![k, d], cells)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    fn world(seed: u64, n: usize) -> ConceptWorld {
        ConceptWorld::generate(WorldParams::new(seed, n))
    }

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("A Dog sits.").tokens(),
            &["a".to_string(), "dog".to_string(), "sits".to_string()]
        );
    }

    #[test]
    fn tokenize_truncates_to_77() {
        let text = (0..100).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let toks = tokenize(&text);
        assert_eq!(toks.len(), 77);
        assert_eq!(toks.tokens()[76], "w76");
    }

    #[test]
    fn tokenize_empty_input() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn word_vector_matches_reference_generator() {
        // Standalone oracle: FNV-1a over the word bytes seeded by
        // (seed XOR offset-basis), expanded by splitmix64, mapped to [-1,1),
        // then L2-normalized. Written independently of the implementation.
        fn oracle(seed: u64, word: &str, dim: usize) -> Vec<f64> {
            let mut h = seed ^ 0xCBF2_9CE4_8422_2325u64;
            for b in word.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
            let mut raw = Vec::with_capacity(dim);
            let mut s = h;
            for _ in 0..dim {
                s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
                let mut z = s;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
                z ^= z >> 31;
                raw.push(((z >> 11) as f64) / ((1u64 << 52) as f64) - 1.0);
            }
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            raw.iter().map(|x| x / norm).collect()
        }
        let got = word_vector(42, "dog", 8);
        let expect = oracle(42, "dog", 8);
        assert_eq!(got.data(), expect.as_slice());
        // Frozen leading components from the oracle, pinned against drift.
        let frozen = [
            -0.5346500316792585,
            -0.3866440477213602,
            0.004476576525172031,
            0.28055954850211867,
        ];
        for (g, f) in got.data().iter().zip(frozen) {
            assert!((g - f).abs() < 1e-15, "got {g}, frozen {f}");
        }
    }

    #[test]
    fn embed_text_is_deterministic_and_unit_norm() {
        let w = world(9, 4);
        let a = embed_sentence("a dog on a mat", &w);
        let b = embed_sentence("a dog on a mat", &w);
        assert_eq!(a.data(), b.data());
        assert!((a.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embed_text_empty_is_zero() {
        let w = world(9, 4);
        let z = embed_sentence("", &w);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_image_empty_scene_zero_noise() {
        let w = world(5, 3);
        let feat = encode_image(&[], &w, 0.0, 77).unwrap();
        assert!(feat.cells.data().iter().all(|&v| v == 0.0));
        assert!(feat.global.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_image_single_concept_noise_free() {
        let w = world(5, 3);
        let feat = encode_image(&[1], &w, 0.0, 77).unwrap();
        let sig = &w.concepts[1].signature;
        let k = w.params.cells;
        let mut affected = 0;
        for i in 0..k {
            let row = feat.cells.row(i);
            if row.iter().any(|&v| v != 0.0) {
                affected += 1;
                assert_eq!(row, sig.data());
            }
        }
        assert_eq!(affected, k.div_ceil(4));
        assert!(dot(feat.global.data(), sig.data()) > 0.0);
    }

    #[test]
    fn encode_image_is_pure() {
        let w = world(5, 6);
        let a = encode_image(&[0, 3], &w, 0.1, 123).unwrap();
        let b = encode_image(&[0, 3], &w, 0.1, 123).unwrap();
        assert_eq!(a.cells.data(), b.cells.data());
        assert_eq!(a.global.data(), b.global.data());
    }

    #[test]
    fn encode_image_unknown_concept_errors() {
        let w = world(5, 2);
        assert!(matches!(
            encode_image(&[9], &w, 0.0, 1),
            Err(Error::UnknownConcept(9))
        ));
    }

    #[test]
    fn world_is_deterministic_with_unique_names() {
        let a = world(11, 20);
        let b = world(11, 20);
        for (x, y) in a.concepts.iter().zip(&b.concepts) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.signature.data(), y.signature.data());
        }
        let mut names: Vec<&str> = a.concepts.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 20);
        for c in &a.concepts {
            assert!((c.signature.l2_norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_pool_descriptions_are_closer_than_cross_pool() {
        // Sample sentences from concept word pools; same-concept pairs must
        // have strictly higher mean cosine than different-concept pairs.
        use rand::{Rng, SeedableRng};
        let w = world(13, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let sentence = |rng: &mut rand_chacha::ChaCha8Rng, id: usize, w: &ConceptWorld| {
            let pool = w.word_pool(id).unwrap();
            let a = pool[rng.gen_range(0..pool.len())];
            let b = pool[rng.gen_range(0..pool.len())];
            let filler = &w.filler_words[rng.gen_range(0..w.filler_words.len())];
            embed_sentence(&format!("a {a} with {b} {filler}"), w)
        };
        let mut same = 0.0;
        let mut diff = 0.0;
        let n = 120;
        for _ in 0..n {
            let id = rng.gen_range(0..6);
            let other = (id + 1 + rng.gen_range(0..5)) % 6;
            let e1 = sentence(&mut rng, id, &w);
            let e2 = sentence(&mut rng, id, &w);
            let e3 = sentence(&mut rng, other, &w);
            same += dot(e1.data(), e2.data());
            diff += dot(e1.data(), e3.data());
        }
        assert!(
            same / n as f64 > diff / n as f64,
            "same {} vs diff {}",
            same / n as f64,
            diff / n as f64
        );
    }
}
