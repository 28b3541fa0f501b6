//! Tag vocabulary with synonyms, caption parsing, LLM prompt templates,
//! description ingestion, and the offline description-embedding cache.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{embed_text, tokenize, ConceptWorld};
use crate::numerics::Array;
use crate::parallel::map_ordered;
use crate::{Error, Result};

/// One tag category.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Category {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

/// Ordered tag vocabulary. Ids are contiguous from zero and names are unique
/// after lowercasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSystem {
    categories: Vec<Category>,
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    version: u32,
    categories: Vec<Category>,
}

impl LabelSystem {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, c) in categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::Validation(format!(
                    "category ids must be contiguous from 0; found id {} at position {i}",
                    c.id
                )));
            }
            if c.name.trim().is_empty() {
                return Err(Error::Validation(format!("category {i} has empty name")));
            }
            if !seen.insert(c.name.to_lowercase()) {
                return Err(Error::Validation(format!(
                    "duplicate category name {:?} after lowercasing",
                    c.name
                )));
            }
            if c.synonyms.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::Validation(format!(
                    "category {:?} has an empty synonym",
                    c.name
                )));
            }
        }
        Ok(Self { categories })
    }

    /// One category per world concept, named by its name word.
    pub fn from_world(world: &ConceptWorld) -> Self {
        let categories = world
            .concepts
            .iter()
            .map(|c| Category {
                id: c.id,
                name: c.name.clone(),
                synonyms: Vec::new(),
            })
            .collect();
        Self { categories }
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.categories[id].name
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = LabelFile {
            version: 1,
            categories: self.categories.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(Error::io(path.display().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
        let file: LabelFile =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if file.version != 1 {
            return Err(Error::Format(format!(
                "unsupported label file version {}",
                file.version
            )));
        }
        Self::new(file.categories)
    }
}

/// Strip one trailing "s" so simple plurals match their category. Applied to
/// both caption tokens and lexicon phrases, so the comparison is symmetric.
fn normalize_token(t: &str) -> &str {
    if t.len() > 2 && t.ends_with('s') {
        &t[..t.len() - 1]
    } else {
        t
    }
}

/// Lexicon phrase matcher: category names and synonyms match as whole-word
/// phrases, longest match first; tokens consumed by a longer match suppress
/// shorter overlapping ones.
pub fn parse_tags(caption: &str, ls: &LabelSystem) -> HashSet<usize> {
    let tokens = tokenize(caption);
    let norm: Vec<&str> = tokens.tokens().iter().map(|t| normalize_token(t)).collect();

    // (normalized phrase tokens, category id), longest phrases first with id
    // as the deterministic tie-break.
    let mut phrases: Vec<(Vec<String>, usize)> = Vec::new();
    for c in ls.categories() {
        for text in std::iter::once(&c.name).chain(&c.synonyms) {
            let p: Vec<String> = tokenize(text)
                .tokens()
                .iter()
                .map(|t| normalize_token(t).to_string())
                .collect();
            if !p.is_empty() {
                phrases.push((p, c.id));
            }
        }
    }
    phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));

    let mut matched = HashSet::new();
    let mut pos = 0;
    while pos < norm.len() {
        let mut advance = 1;
        for (phrase, id) in &phrases {
            if pos + phrase.len() <= norm.len()
                && phrase.iter().zip(&norm[pos..]).all(|(p, t)| p == t)
            {
                matched.insert(*id);
                advance = phrase.len();
                break;
            }
        }
        pos += advance;
    }
    matched
}

/// The five concise-description prompt templates plus the diverse-appearance
/// variant, with `{}` replaced by the tag name.
pub fn llm_prompts(tag_name: &str) -> Vec<String> {
    [
        "Describe concisely what a(n) {} looks like",
        "How can you identify a(n) {} concisely?",
        "What does a(n) {} look like concisely?",
        "What are the identified characteristics of a(n) {}",
        "Please provide a concise description of the visual characteristics of {}",
        "Describe 50 different possible appearances of what a(n) {} looks like",
    ]
    .iter()
    .map(|t| t.replace("{}", tag_name))
    .collect()
}

/// Per-tag description lists, exactly `d` per tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptionSet {
    per_tag: Vec<Vec<String>>,
    d: usize,
}

impl DescriptionSet {
    pub fn new(per_tag: Vec<Vec<String>>, d: usize) -> Result<Self> {
        for (id, descs) in per_tag.iter().enumerate() {
            if descs.len() != d {
                return Err(Error::Validation(format!(
                    "tag {id} has {} descriptions, expected {d}",
                    descs.len()
                )));
            }
            if descs.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::Validation(format!("tag {id} has an empty description")));
            }
        }
        Ok(Self { per_tag, d })
    }

    pub fn descriptions(&self, tag: usize) -> &[String] {
        &self.per_tag[tag]
    }

    pub fn per_tag_count(&self) -> usize {
        self.d
    }

    pub fn num_tags(&self) -> usize {
        self.per_tag.len()
    }

    /// JSON Lines: one `{"tag": ..., "descriptions": [...]}` object per tag.
    pub fn save_jsonl(&self, ls: &LabelSystem, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, descs) in self.per_tag.iter().enumerate() {
            let row = serde_json::json!({"tag": ls.name(id), "descriptions": descs});
            out.push_str(&row.to_string());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(Error::io(path.display().to_string()))
    }

    pub fn load_jsonl(ls: &LabelSystem, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            tag: String,
            descriptions: Vec<String>,
        }
        let text =
            std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
        let mut per_tag: Vec<Option<Vec<String>>> = vec![None; ls.len()];
        let mut d = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            let id = ls
                .categories()
                .iter()
                .find(|c| c.name == row.tag)
                .map(|c| c.id)
                .ok_or_else(|| {
                    Error::Validation(format!("description for unknown tag {:?}", row.tag))
                })?;
            let dn = *d.get_or_insert(row.descriptions.len());
            if row.descriptions.len() != dn {
                return Err(Error::Validation(format!(
                    "tag {:?} has {} descriptions, expected {dn}",
                    row.tag,
                    row.descriptions.len()
                )));
            }
            per_tag[id] = Some(row.descriptions);
        }
        let missing: Vec<&str> = per_tag
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(id, _)| ls.name(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "missing descriptions for tags: {missing:?}"
            )));
        }
        Self::new(
            per_tag.into_iter().map(Option::unwrap).collect(),
            d.unwrap_or(0),
        )
    }
}

// Terse on purpose: shared function words dilute the bag-of-words stub
// embeddings, so the templates stay close to the signal words. Every
// description carries the name, two attribute words, and one filler.
const DESC_TEMPLATES: [&str; 8] = [
    "{name} with {c0} and {c1} {f0}",
    "{c0} {name} beside {c1} {f0}",
    "{name} showing {c0} {c1} {f0}",
    "{c0} shaped {name} with {c1} {f0}",
    "{name} bearing {c0} {c1} {f0}",
    "{c1} {c0} {name} {f0}",
    "small {name} with {c0} {c1} {f0}",
    "{name} over {c0} under {c1} {f0}",
];

/// Seeded offline substitute for LLM description generation. Every
/// description names the concept and draws at least one more word from its
/// context pool, plus filler words.
pub fn synth_descriptions(
    ls: &LabelSystem,
    world: &ConceptWorld,
    d: usize,
    rng_seed: u64,
) -> Result<DescriptionSet> {
    if ls.len() > world.concepts.len() {
        return Err(Error::Validation(format!(
            "label system has {} tags but world only {} concepts",
            ls.len(),
            world.concepts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut per_tag = Vec::with_capacity(ls.len());
    for cat in ls.categories() {
        let concept = world.concept(cat.id)?;
        let ctx = &concept.context_words;
        let mut descs = Vec::with_capacity(d);
        for j in 0..d {
            let template = DESC_TEMPLATES[j % DESC_TEMPLATES.len()];
            let c0 = &ctx[rng.gen_range(0..ctx.len())];
            let mut c1 = &ctx[rng.gen_range(0..ctx.len())];
            if c1 == c0 {
                c1 = &ctx[(ctx.iter().position(|w| w == c0).unwrap() + 1) % ctx.len()];
            }
            let f0 = &world.filler_words[rng.gen_range(0..world.filler_words.len())];
            descs.push(
                template
                    .replace("{name}", &concept.name)
                    .replace("{c0}", c0)
                    .replace("{c1}", c1)
                    .replace("{f0}", f0),
            );
        }
        per_tag.push(descs);
    }
    DescriptionSet::new(per_tag, d)
}

/// Offline-precomputed description embeddings: the Key side of the tagging
/// branch. Rows are kept in f64 exactly as the encoder produced them; the
/// on-disk format narrows to f32.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    dim: usize,
    d: usize,
    /// One `d x dim` matrix per tag, in tag-id order.
    per_tag: Vec<Array>,
    names: Vec<String>,
    pub provenance: String,
}

impl EmbeddingCache {
    /// Embed every description with the stub encoder. Rows equal
    /// `embed_text(tokenize(description))` bitwise.
    pub fn build(ds: &DescriptionSet, ls: &LabelSystem, world: &ConceptWorld) -> Result<Self> {
        if ds.num_tags() != ls.len() {
            return Err(Error::Validation(format!(
                "description set covers {} tags, label system has {}",
                ds.num_tags(),
                ls.len()
            )));
        }
        let ids: Vec<usize> = (0..ls.len()).collect();
        let per_tag = map_ordered(&ids, |&id| {
            let mut data = Vec::with_capacity(ds.per_tag_count() * world.embed_dim());
            for desc in ds.descriptions(id) {
                let e = embed_text(&tokenize(desc), world);
                data.extend_from_slice(e.data());
            }
            Array::from_raw(vec![ds.per_tag_count(), world.embed_dim()], data)
        });
        Ok(Self {
            dim: world.embed_dim(),
            d: ds.per_tag_count(),
            per_tag,
            names: ls.categories().iter().map(|c| c.name.clone()).collect(),
            provenance: format!("world-seed {}", world.params.seed),
        })
    }

    /// Assemble a cache from already-embedded rows (tests, category-count
    /// slicing in benchmarks).
    pub fn from_parts(dim: usize, d: usize, per_tag: Vec<Array>, names: Vec<String>) -> Self {
        debug_assert_eq!(per_tag.len(), names.len());
        Self {
            dim,
            d,
            per_tag,
            names,
            provenance: "derived".into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_tag_count(&self) -> usize {
        self.d
    }

    pub fn num_tags(&self) -> usize {
        self.per_tag.len()
    }

    pub fn rows(&self, tag: usize) -> Result<&Array> {
        self.per_tag.get(tag).ok_or(Error::MissingCacheEntry(tag))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Mean description embedding per tag (the prompt-ensemble query),
    /// stacked `num_tags x dim`.
    pub fn ensemble_means(&self) -> Array {
        let mut data = Vec::with_capacity(self.num_tags() * self.dim);
        for m in &self.per_tag {
            let mut mean = vec![0.0; self.dim];
            for i in 0..self.d {
                for (a, v) in mean.iter_mut().zip(m.row(i)) {
                    *a += v;
                }
            }
            for a in mean.iter_mut() {
                *a /= self.d as f64;
            }
            data.extend_from_slice(&mean);
        }
        Array::from_raw(vec![self.num_tags(), self.dim], data)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"RPPC";
const CACHE_VERSION: u32 = 1;

impl EmbeddingCache {
    /// Binary, little-endian: magic "RPPC", u32 version, u32 num_tags, u32 D,
    /// u32 dim, f32 payload row-major in tag-id order, a JSON name->id index,
    /// and the index byte length as a trailing u64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_tags() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for m in &self.per_tag {
            for &v in m.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let index: BTreeMap<&str, usize> = self
            .names
            .iter()
            .enumerate()
            .map(|(id, n)| (n.as_str(), id))
            .collect();
        let json = serde_json::to_vec(&index).map_err(|e| Error::Format(e.to_string()))?;
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        atomic_write(path, &buf)
    }

    /// Load and widen to f64. Values therefore carry f32 precision; rebuild
    /// with [`EmbeddingCache::build`] when bitwise parity with the encoder
    /// matters.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(Error::io(path.display().to_string()))?;
        let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
        if bytes.len() < 28 {
            return Err(fail(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != CACHE_MAGIC {
            return Err(fail("bad magic, expected RPPC".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CACHE_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let num_tags = u32_at(8) as usize;
        let d = u32_at(12) as usize;
        let dim = u32_at(16) as usize;
        let payload_len = num_tags * d * dim * 4;
        let index_len =
            u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
        let expected = 20 + payload_len + index_len + 8;
        if bytes.len() != expected {
            return Err(fail(format!(
                "expected {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let mut per_tag = Vec::with_capacity(num_tags);
        let mut off = 20;
        for _ in 0..num_tags {
            let mut data = Vec::with_capacity(d * dim);
            for _ in 0..d * dim {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(fail("non-finite embedding value".into()));
                }
                data.push(f64::from(v));
                off += 4;
            }
            per_tag.push(Array::from_raw(vec![d, dim], data));
        }
        let index: BTreeMap<String, usize> =
            serde_json::from_slice(&bytes[off..off + index_len])
                .map_err(|e| fail(format!("bad index json: {e}")))?;
        if index.len() != num_tags {
            return Err(fail(format!(
                "index has {} entries, expected {num_tags}",
                index.len()
            )));
        }
        let mut names = vec![String::new(); num_tags];
        for (name, id) in index {
            if id >= num_tags {
                return Err(fail(format!("index id {id} out of range")));
            }
            names[id] = name;
        }
        Ok(Self {
            dim,
            d,
            per_tag,
            names,
            provenance: "external".into(),
        })
    }
}

/// Write via temp file + rename so readers never observe partial files.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f =
        std::fs::File::create(&tmp).map_err(Error::io(tmp.display().to_string()))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(Error::io(tmp.display().to_string()))?;
    std::fs::rename(&tmp, path).map_err(Error::io(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::WorldParams;

    fn simple_labels() -> LabelSystem {
        LabelSystem::new(vec![
            Category {
                id: 0,
                name: "dog".into(),
                synonyms: vec!["puppy".into()],
            },
            Category {
                id: 1,
                name: "couch".into(),
                synonyms: vec![],
            },
            Category {
                id: 2,
                name: "table".into(),
                synonyms: vec![],
            },
            Category {
                id: 3,
                name: "cat".into(),
                synonyms: vec![],
            },
        ])
        .unwrap()
    }

    #[test]
    fn parse_tags_matches_fig_caption() {
        let ls = simple_labels();
        let got = parse_tags("a dog sits on a couch near a table", &ls);
        assert_eq!(got, HashSet::from([0, 1, 2]));
    }

    #[test]
    fn parse_tags_empty_caption() {
        assert!(parse_tags("", &simple_labels()).is_empty());
    }

    #[test]
    fn parse_tags_synonym_matches() {
        let got = parse_tags("a puppy barks", &simple_labels());
        assert_eq!(got, HashSet::from([0]));
    }

    #[test]
    fn parse_tags_plural_stripping() {
        let got = parse_tags("two dogs on tables", &simple_labels());
        assert_eq!(got, HashSet::from([0, 2]));
    }

    #[test]
    fn parse_tags_longest_phrase_wins() {
        let ls = LabelSystem::new(vec![
            Category {
                id: 0,
                name: "shower".into(),
                synonyms: vec![],
            },
            Category {
                id: 1,
                name: "meteor shower".into(),
                synonyms: vec![],
            },
        ])
        .unwrap();
        let got = parse_tags("watching a meteor shower outside", &ls);
        assert_eq!(got, HashSet::from([1]));
        let got = parse_tags("a shower in the bathroom", &ls);
        assert_eq!(got, HashSet::from([0]));
    }

    #[test]
    fn llm_prompts_exact_templates() {
        let p = llm_prompts("corgi");
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], "Describe concisely what a(n) corgi looks like");
        assert_eq!(p[1], "How can you identify a(n) corgi concisely?");
        assert_eq!(p[2], "What does a(n) corgi look like concisely?");
        assert_eq!(p[3], "What are the identified characteristics of a(n) corgi");
        assert_eq!(
            p[4],
            "Please provide a concise description of the visual characteristics of corgi"
        );
        assert_eq!(
            p[5],
            "Describe 50 different possible appearances of what a(n) corgi looks like"
        );
    }

    fn small_world() -> (ConceptWorld, LabelSystem) {
        let world = ConceptWorld::generate(WorldParams::new(21, 5));
        let ls = LabelSystem::from_world(&world);
        (world, ls)
    }

    #[test]
    fn synth_descriptions_counts_and_determinism() {
        let (world, ls) = small_world();
        let a = synth_descriptions(&ls, &world, 8, 3).unwrap();
        let b = synth_descriptions(&ls, &world, 8, 3).unwrap();
        assert_eq!(a, b);
        for id in 0..ls.len() {
            assert_eq!(a.descriptions(id).len(), 8);
        }
        let c = synth_descriptions(&ls, &world, 8, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_descriptions_every_description_names_pool_word() {
        // Exhaustive scan: every description of tag t contains a word from
        // t's pool.
        let (world, ls) = small_world();
        let ds = synth_descriptions(&ls, &world, 8, 3).unwrap();
        for id in 0..ls.len() {
            let pool = world.word_pool(id).unwrap();
            for desc in ds.descriptions(id) {
                let toks = tokenize(desc);
                assert!(
                    toks.tokens().iter().any(|t| pool.contains(&t.as_str())),
                    "description {desc:?} has no pool word of tag {id}"
                );
            }
        }
    }

    #[test]
    fn cache_rows_equal_encoder_output_bitwise() {
        let (world, ls) = small_world();
        let ds = synth_descriptions(&ls, &world, 4, 3).unwrap();
        let cache = EmbeddingCache::build(&ds, &ls, &world).unwrap();
        assert_eq!(cache.num_tags(), ls.len());
        for id in 0..ls.len() {
            let rows = cache.rows(id).unwrap();
            for (j, desc) in ds.descriptions(id).iter().enumerate() {
                let e = embed_text(&tokenize(desc), &world);
                assert_eq!(rows.row(j), e.data());
            }
        }
    }

    #[test]
    fn cache_round_trip_is_bitwise_stable() {
        let (world, ls) = small_world();
        let ds = synth_descriptions(&ls, &world, 4, 3).unwrap();
        let cache = EmbeddingCache::build(&ds, &ls, &world).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rppc");
        let p2 = dir.path().join("b.rppc");
        cache.save(&p1).unwrap();
        let loaded = EmbeddingCache::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.names(), cache.names());
    }

    #[test]
    fn cache_build_is_idempotent_bytes() {
        let (world, ls) = small_world();
        let ds = synth_descriptions(&ls, &world, 4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rppc");
        let p2 = dir.path().join("b.rppc");
        EmbeddingCache::build(&ds, &ls, &world).unwrap().save(&p1).unwrap();
        EmbeddingCache::build(&ds, &ls, &world).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn cache_rejects_bad_magic_version_truncation() {
        let (world, ls) = small_world();
        let ds = synth_descriptions(&ls, &world, 4, 3).unwrap();
        let cache = EmbeddingCache::build(&ds, &ls, &world).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.rppc");
        cache.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(EmbeddingCache::load(&path).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(EmbeddingCache::load(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));

        std::fs::write(&path, &good[..good.len() - 9]).unwrap();
        assert!(EmbeddingCache::load(&path).is_err());
    }

    #[test]
    fn descriptions_jsonl_round_trip() {
        let (world, ls) = small_world();
        let ds = synth_descriptions(&ls, &world, 4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.save_jsonl(&ls, &path).unwrap();
        let loaded = DescriptionSet::load_jsonl(&ls, &path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn label_file_round_trip_and_version_check() {
        let ls = simple_labels();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.json");
        ls.save(&path).unwrap();
        assert_eq!(LabelSystem::load(&path).unwrap(), ls);
        std::fs::write(&path, r#"{"version":2,"categories":[]}"#).unwrap();
        assert!(LabelSystem::load(&path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn label_system_validation() {
        assert!(LabelSystem::new(vec![Category {
            id: 1,
            name: "x".into(),
            synonyms: vec![]
        }])
        .is_err());
        assert!(LabelSystem::new(vec![
            Category {
                id: 0,
                name: "Dog".into(),
                synonyms: vec![]
            },
            Category {
                id: 1,
                name: "dog".into(),
                synonyms: vec![]
            }
        ])
        .is_err());
    }
}
