//! Mental-health knowledge graph: triplet storage, clinical-relevance
//! filtering, relation normalization, post-specific retrieval, and JSON
//! serialization.
//!
//! The graph file format is `{"contexts": [{"id", "sentence",
//! "triplets": [[source, relation, target], ...]}, ...]}`. Node and edge
//! embeddings are recomputed from text on load, never stored; since the
//! embedding provider is deterministic, a save/load round trip reproduces
//! them bit for bit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use ndarray::Array2;
use serde_json::Value;

use crate::corpus::{tokenize, Post};
use crate::embeddings::{EmbeddingProvider, EMBED_DIM};
use crate::error::{Error, Result};

/// One directed relation edge, tagged with the context sentence it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub source: String,
    pub relation: String,
    pub target: String,
    pub context_id: String,
}

/// A context sentence and the edges extracted from it (indices into
/// [`Mhkg::edges`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextEntry {
    pub id: String,
    pub sentence: String,
    pub triplet_ids: Vec<usize>,
}

/// The knowledge graph: entity nodes, relation-typed directed edges, source
/// contexts, and 300-d node/edge embeddings derived from their text.
#[derive(Debug, Clone, PartialEq)]
pub struct Mhkg {
    pub nodes: Vec<String>,
    pub edges: Vec<Triplet>,
    pub contexts: Vec<ContextEntry>,
    /// `(|V|, 300)`, row k = word-mean embedding of node k's text.
    pub node_embeddings: Array2<f64>,
    /// `(|E|, 300)`, row e = word-mean embedding of edge e's relation text.
    pub edge_embeddings: Array2<f64>,
}

/// Name of the sentinel node used for empty graphs, so downstream attention
/// always has at least one key.
pub const SENTINEL_NODE: &str = "∅";

/// Abstract semantic similarity in `[0, 1]`; must be symmetric and score a
/// string against itself as 1 (within 1e-6). Implementations must be safe
/// for concurrent scoring calls.
pub trait SimilarityClient {
    fn score(&self, a: &str, b: &str) -> f64;
}

/// Default backend: cosine similarity of mean-pooled token embeddings,
/// mapped to `[0, 1]` by `(1 + cos) / 2`. Texts are run through the standard
/// tokenizer; a text with no tokens scores 0 against everything.
pub struct CosineMeanEmbedding<'a> {
    provider: &'a EmbeddingProvider,
}

impl<'a> CosineMeanEmbedding<'a> {
    pub fn new(provider: &'a EmbeddingProvider) -> Self {
        Self { provider }
    }

    fn mean_vector(&self, text: &str) -> Option<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; EMBED_DIM];
        for t in &tokens {
            let v = self.provider.embed_token(t).expect("tokens are nonempty");
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        Some(acc)
    }
}

impl SimilarityClient for CosineMeanEmbedding<'_> {
    fn score(&self, a: &str, b: &str) -> f64 {
        let (Some(va), Some(vb)) = (self.mean_vector(a), self.mean_vector(b)) else {
            return 0.0;
        };
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
        (1.0 + cos) / 2.0
    }
}

/// Abstract triplet validity predicate; deterministic for a fixed
/// configuration.
pub trait ValidityClient {
    fn valid(&self, triplet: &Triplet) -> bool;
}

/// Accepts every triplet. Stands in for an external validation model.
pub struct AlwaysValid;

impl ValidityClient for AlwaysValid {
    fn valid(&self, _triplet: &Triplet) -> bool {
        true
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from",
    "has", "have", "he", "her", "his", "i", "in", "is", "it", "its", "me",
    "my", "no", "not", "of", "on", "or", "our", "she", "so", "that", "the",
    "their", "them", "they", "this", "to", "us", "was", "we", "were", "will",
    "with", "you", "your",
];

/// Rule-based validity: rejects a triplet when either entity is a stopword
/// or shorter than three characters.
pub struct RuleBasedValidity;

impl ValidityClient for RuleBasedValidity {
    fn valid(&self, triplet: &Triplet) -> bool {
        let bad = |s: &str| {
            let lowered = s.to_lowercase();
            lowered.chars().count() < 3 || STOPWORDS.contains(&lowered.as_str())
        };
        !bad(&triplet.source) && !bad(&triplet.target)
    }
}

/// Clinical-relevance filter: a triplet passes when the best similarity of
/// either endpoint against the eligible entity set exceeds `threshold` AND
/// the validity predicate accepts it.
pub fn validate_triplet(
    triplet: &Triplet,
    eligible: &[String],
    sim: &dyn SimilarityClient,
    validity: &dyn ValidityClient,
    threshold: f64,
) -> Result<bool> {
    if eligible.is_empty() {
        return Err(Error::Config("eligible entity set is empty".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    let best = |entity: &str| {
        eligible
            .iter()
            .map(|m| sim.score(entity, m))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let score = best(&triplet.source).max(best(&triplet.target));
    Ok(score > threshold && validity.valid(triplet))
}

/// Default similarity threshold for the clinical-relevance filter.
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.9;

/// Map every relation string to the lexicographically smallest member of its
/// cluster. Relations are embedded as whole strings through the subword
/// scheme, reduced with PCA, then clustered with average-linkage
/// agglomerative clustering cut at `distance_threshold`.
pub fn normalize_relations(
    relations: &[String],
    distance_threshold: f64,
    pca_dims: usize,
    provider: &EmbeddingProvider,
) -> Result<BTreeMap<String, String>> {
    if relations.is_empty() {
        return Err(Error::Config("relation list is empty".into()));
    }
    if pca_dims == 0 || pca_dims > EMBED_DIM {
        return Err(Error::Config(format!(
            "pca_dims must be in [1, {EMBED_DIM}], got {pca_dims}"
        )));
    }
    let mut unique: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for r in relations {
        if seen.insert(r.clone()) {
            unique.push(r.clone());
        }
    }
    if unique.len() == 1 {
        return Ok(BTreeMap::from([(unique[0].clone(), unique[0].clone())]));
    }

    let mut data = Array2::zeros((unique.len(), EMBED_DIM));
    for (i, r) in unique.iter().enumerate() {
        let v = provider.embed_token(r)?;
        for (j, x) in v.into_iter().enumerate() {
            data[[i, j]] = x;
        }
    }
    let projected = pca_project(&data, pca_dims);

    let n = unique.len();
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = (0..projected.ncols())
                .map(|c| (projected[[i, c]] - projected[[j, c]]).powi(2))
                .sum::<f64>()
                .sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let clusters = average_linkage_cut(&dist, distance_threshold);

    let mut map = BTreeMap::new();
    for cluster in clusters {
        let canonical = cluster
            .iter()
            .map(|&i| unique[i].clone())
            .min()
            .expect("clusters are nonempty");
        for &i in &cluster {
            map.insert(unique[i].clone(), canonical.clone());
        }
    }
    Ok(map)
}

/// PCA projection onto up to `dims` principal axes (fewer if the data rank
/// is lower). Centered, via SVD.
fn pca_project(data: &Array2<f64>, dims: usize) -> Array2<f64> {
    let (n, d) = data.dim();
    let mean = data.sum_axis(ndarray::Axis(0)) / n as f64;
    let centered = data - &mean.insert_axis(ndarray::Axis(0));
    let m = nalgebra::DMatrix::from_fn(n, d, |i, j| centered[[i, j]]);
    let mut svd = m.clone().svd(false, true);
    svd.sort_by_singular_values();
    let v_t = svd.v_t.expect("svd computed with v_t");
    let k = dims.min(v_t.nrows());
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        for c in 0..k {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centered[[i, j]] * v_t[(c, j)];
            }
            out[[i, c]] = acc;
        }
    }
    out
}

/// Average-linkage agglomerative clustering, cut when the closest pair of
/// clusters is farther than `threshold`. Ties merge the smallest index pair
/// first. Returns clusters as index sets.
fn average_linkage_cut(dist: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<f64> = vec![1.0; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !active[j] {
                    continue;
                }
                if best.is_none() || d[i][j] < best.unwrap().2 {
                    best = Some((i, j, d[i][j]));
                }
            }
        }
        let Some((i, j, min_d)) = best else { break };
        if min_d > threshold {
            break;
        }
        // Lance-Williams update for average linkage.
        for k in 0..n {
            if active[k] && k != i && k != j {
                let merged = (size[i] * d[i][k] + size[j] * d[j][k]) / (size[i] + size[j]);
                d[i][k] = merged;
                d[k][i] = merged;
            }
        }
        size[i] += size[j];
        active[j] = false;
        let taken = std::mem::take(&mut members[j]);
        members[i].extend(taken);
    }

    (0..n)
        .filter(|&i| active[i])
        .map(|i| {
            let mut m = members[i].clone();
            m.sort_unstable();
            m
        })
        .collect()
}

/// Retrieve the post-specific triplet list: score every context sentence
/// against the post text, take the top `k` contexts (ties broken by context
/// id ascending; `k` clamped to the context count), and return the union of
/// their triplets, de-duplicated by (source, relation, target), in
/// (context rank, triplet order) order.
pub fn retrieve_subgraph(
    post: &Post,
    kg: &Mhkg,
    k: usize,
    sim: &dyn SimilarityClient,
) -> Result<Vec<Triplet>> {
    if k == 0 {
        return Err(Error::Config("retrieval k must be >= 1".into()));
    }
    if kg.contexts.is_empty() {
        return Err(Error::Config("knowledge graph has no contexts".into()));
    }
    let mut scored: Vec<(&ContextEntry, f64)> = kg
        .contexts
        .iter()
        .map(|c| (c, sim.score(&post.text, &c.sentence)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("similarity scores are finite")
            .then_with(|| a.0.id.cmp(&b.0.id))
    });
    let take = k.min(scored.len());
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut out = Vec::new();
    for (context, _) in scored.into_iter().take(take) {
        for &ti in &context.triplet_ids {
            let t = &kg.edges[ti];
            let key = (t.source.clone(), t.relation.clone(), t.target.clone());
            if seen.insert(key) {
                out.push(t.clone());
            }
        }
    }
    Ok(out)
}

fn text_embedding(provider: &EmbeddingProvider, text: &str) -> Vec<f64> {
    provider.embed_text_mean(text)
}

/// Build a graph from a triplet list. Nodes appear in first-seen order;
/// node/edge embeddings are word-mean vectors of their (lowercased) text.
/// An empty triplet list yields the sentinel graph: one zero-embedded node
/// and no edges.
pub fn build_graph(triplets: &[Triplet], provider: &EmbeddingProvider) -> Mhkg {
    if triplets.is_empty() {
        return Mhkg {
            nodes: vec![SENTINEL_NODE.to_string()],
            edges: Vec::new(),
            contexts: Vec::new(),
            node_embeddings: Array2::zeros((1, EMBED_DIM)),
            edge_embeddings: Array2::zeros((0, EMBED_DIM)),
        };
    }
    let mut nodes: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for t in triplets {
        for endpoint in [&t.source, &t.target] {
            if !index.contains_key(endpoint) {
                index.insert(endpoint.clone(), nodes.len());
                nodes.push(endpoint.clone());
            }
        }
    }
    let mut node_embeddings = Array2::zeros((nodes.len(), EMBED_DIM));
    for (i, node) in nodes.iter().enumerate() {
        let v = text_embedding(provider, node);
        for (j, x) in v.into_iter().enumerate() {
            node_embeddings[[i, j]] = x;
        }
    }
    let mut edge_embeddings = Array2::zeros((triplets.len(), EMBED_DIM));
    for (e, t) in triplets.iter().enumerate() {
        let v = text_embedding(provider, &t.relation);
        for (j, x) in v.into_iter().enumerate() {
            edge_embeddings[[e, j]] = x;
        }
    }
    Mhkg {
        nodes,
        edges: triplets.to_vec(),
        contexts: Vec::new(),
        node_embeddings,
        edge_embeddings,
    }
}

fn schema_err(pointer: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::KgSchema {
        pointer: pointer.into(),
        reason: reason.into(),
    }
}

/// Parse a knowledge graph from its JSON text. Schema violations are
/// reported with a JSON pointer to the offending element.
pub fn load_kg_str(json: &str, provider: &EmbeddingProvider) -> Result<Mhkg> {
    let root: Value = serde_json::from_str(json)?;
    let obj = root
        .as_object()
        .ok_or_else(|| schema_err("", "root must be an object"))?;
    let contexts_val = obj
        .get("contexts")
        .ok_or_else(|| schema_err("/contexts", "missing required key"))?;
    let contexts_arr = contexts_val
        .as_array()
        .ok_or_else(|| schema_err("/contexts", "must be an array"))?;

    let mut edges: Vec<Triplet> = Vec::new();
    let mut contexts: Vec<ContextEntry> = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (ci, cval) in contexts_arr.iter().enumerate() {
        let cptr = format!("/contexts/{ci}");
        let cobj = cval
            .as_object()
            .ok_or_else(|| schema_err(&cptr, "context must be an object"))?;
        let id = cobj
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| schema_err(format!("{cptr}/id"), "must be a string"))?;
        if id.is_empty() {
            return Err(schema_err(format!("{cptr}/id"), "must be nonempty"));
        }
        if !seen_ids.insert(id.to_string()) {
            return Err(schema_err(format!("{cptr}/id"), "duplicate context id"));
        }
        let sentence = cobj
            .get("sentence")
            .and_then(Value::as_str)
            .ok_or_else(|| schema_err(format!("{cptr}/sentence"), "must be a string"))?;
        let triplets = cobj
            .get("triplets")
            .and_then(Value::as_array)
            .ok_or_else(|| schema_err(format!("{cptr}/triplets"), "must be an array"))?;
        let mut triplet_ids = Vec::with_capacity(triplets.len());
        for (ti, tval) in triplets.iter().enumerate() {
            let tptr = format!("{cptr}/triplets/{ti}");
            let arr = tval
                .as_array()
                .ok_or_else(|| schema_err(&tptr, "triplet must be a 3-element array"))?;
            if arr.len() != 3 {
                return Err(schema_err(&tptr, "triplet must have exactly 3 elements"));
            }
            let mut parts = [const { String::new() }; 3];
            for (pi, part) in arr.iter().enumerate() {
                let s = part
                    .as_str()
                    .ok_or_else(|| schema_err(format!("{tptr}/{pi}"), "must be a string"))?;
                if s.is_empty() {
                    return Err(schema_err(format!("{tptr}/{pi}"), "must be nonempty"));
                }
                parts[pi] = s.to_string();
            }
            let [source, relation, target] = parts;
            triplet_ids.push(edges.len());
            edges.push(Triplet {
                source,
                relation,
                target,
                context_id: id.to_string(),
            });
        }
        contexts.push(ContextEntry {
            id: id.to_string(),
            sentence: sentence.to_string(),
            triplet_ids,
        });
    }

    let base = build_graph(&edges, provider);
    Ok(Mhkg {
        nodes: base.nodes,
        edges,
        contexts,
        node_embeddings: base.node_embeddings,
        edge_embeddings: base.edge_embeddings,
    })
}

/// Load a knowledge graph from a JSON file; see [`load_kg_str`].
pub fn load_kg(path: impl AsRef<Path>, provider: &EmbeddingProvider) -> Result<Mhkg> {
    let json = std::fs::read_to_string(path)?;
    load_kg_str(&json, provider)
}

/// Serialize a knowledge graph to its JSON file format. Only contexts and
/// their triplets are stored; embeddings are recomputed on load. Errors if
/// an edge's context id does not name a context (such a graph cannot be
/// represented in the file format).
pub fn save_kg(kg: &Mhkg, path: impl AsRef<Path>) -> Result<()> {
    let known: HashSet<&str> = kg.contexts.iter().map(|c| c.id.as_str()).collect();
    for e in &kg.edges {
        if !known.contains(e.context_id.as_str()) {
            return Err(Error::Config(format!(
                "edge context id {:?} has no matching context entry",
                e.context_id
            )));
        }
    }
    let contexts: Vec<Value> = kg
        .contexts
        .iter()
        .map(|c| {
            let triplets: Vec<Value> = c
                .triplet_ids
                .iter()
                .map(|&ti| {
                    let t = &kg.edges[ti];
                    serde_json::json!([t.source, t.relation, t.target])
                })
                .collect();
            serde_json::json!({
                "id": c.id,
                "sentence": c.sentence,
                "triplets": triplets,
            })
        })
        .collect();
    let doc = serde_json::json!({ "contexts": contexts });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// The bundled sample knowledge graph (JSON text), a reduced-scale graph
/// over mental-health entities with the full normalized relation inventory.
pub fn bundled_sample_kg() -> &'static str {
    include_str!("../data/sample_kg.json")
}

/// The bundled sample eligible-entity list, one entity per line.
pub fn bundled_sample_eligible() -> &'static str {
    include_str!("../data/sample_eligible.txt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn provider() -> EmbeddingProvider {
        EmbeddingProvider::hashed()
    }

    fn t(s: &str, r: &str, o: &str) -> Triplet {
        Triplet {
            source: s.into(),
            relation: r.into(),
            target: o.into(),
            context_id: "c1".into(),
        }
    }

    #[test]
    fn similarity_identity_and_symmetry() {
        let p = provider();
        let sim = CosineMeanEmbedding::new(&p);
        let texts = ["depression", "chronic stress", "i feel fine today"];
        for a in &texts {
            assert!((sim.score(a, a) - 1.0).abs() < 1e-6);
            for b in &texts {
                assert!((sim.score(a, b) - sim.score(b, a)).abs() < 1e-6);
                let s = sim.score(a, b);
                assert!((0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn validate_exact_member_passes() {
        let p = provider();
        let sim = CosineMeanEmbedding::new(&p);
        let eligible = vec!["depression".to_string(), "anxiety".to_string()];
        let triplet = t("depression", "treats", "therapy");
        assert!(validate_triplet(&triplet, &eligible, &sim, &AlwaysValid, 0.9).unwrap());
    }

    #[test]
    fn validity_false_vetoes_any_similarity() {
        struct Never;
        impl ValidityClient for Never {
            fn valid(&self, _: &Triplet) -> bool {
                false
            }
        }
        let p = provider();
        let sim = CosineMeanEmbedding::new(&p);
        let eligible = vec!["depression".to_string()];
        let triplet = t("depression", "treats", "therapy");
        assert!(!validate_triplet(&triplet, &eligible, &sim, &Never, 0.9).unwrap());
    }

    #[test]
    fn low_similarity_rejected_with_default_backend() {
        // Brute-force the score table over a fixed 5-entity eligible set and
        // confirm both endpoints stay at or below the 0.9 threshold.
        let p = provider();
        let sim = CosineMeanEmbedding::new(&p);
        let eligible: Vec<String> = ["depression", "anxiety", "therapy", "insomnia", "stress"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let triplet = t("volcano", "erupts_in", "iceland");
        let best = |entity: &str| {
            eligible
                .iter()
                .map(|m| sim.score(entity, m))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let max_score = best("volcano").max(best("iceland"));
        assert!(
            max_score <= 0.9,
            "oracle precondition violated: max score {max_score}"
        );
        assert!(!validate_triplet(&triplet, &eligible, &sim, &AlwaysValid, 0.9).unwrap());
    }

    #[test]
    fn validate_rejects_bad_preconditions() {
        let p = provider();
        let sim = CosineMeanEmbedding::new(&p);
        let triplet = t("a", "b", "c");
        assert!(validate_triplet(&triplet, &[], &sim, &AlwaysValid, 0.9).is_err());
        assert!(
            validate_triplet(&triplet, &["x".into()], &sim, &AlwaysValid, 0.0).is_err()
        );
        assert!(
            validate_triplet(&triplet, &["x".into()], &sim, &AlwaysValid, 1.5).is_err()
        );
    }

    proptest! {
        #[test]
        fn filter_equals_literal_conjunction(
            seed in 0u64..1000,
            threshold in 0.05f64..1.0,
            validity_bit in proptest::bool::ANY,
        ) {
            // Randomized stub clients: a deterministic pseudo-score from the
            // string pair, and a parity-based validity.
            struct StubSim(u64);
            impl SimilarityClient for StubSim {
                fn score(&self, a: &str, b: &str) -> f64 {
                    let h = crate::embeddings::stable_hash(a)
                        ^ crate::embeddings::stable_hash(b)
                        ^ self.0;
                    (h % 1000) as f64 / 999.0
                }
            }
            struct StubValid(bool);
            impl ValidityClient for StubValid {
                fn valid(&self, _: &Triplet) -> bool {
                    self.0
                }
            }
            let sim = StubSim(seed);
            let validity = StubValid(validity_bit);
            let eligible: Vec<String> =
                vec!["m1".into(), "m2".into(), "m3".into()];
            let triplet = t("left", "rel", "right");

            let got = validate_triplet(&triplet, &eligible, &sim, &validity, threshold).unwrap();
            // Literal restatement of the conjunction.
            let s_best = eligible.iter().map(|m| sim.score("left", m)).fold(f64::MIN, f64::max);
            let t_best = eligible.iter().map(|m| sim.score("right", m)).fold(f64::MIN, f64::max);
            let expected = s_best.max(t_best) > threshold && validity_bit;
            prop_assert_eq!(got, expected);
        }
    }

    #[test]
    fn normalize_singleton_and_duplicates() {
        let p = provider();
        let single = normalize_relations(&["causes".into()], 0.5, 50, &p).unwrap();
        assert_eq!(single["causes"], "causes");

        let dup = normalize_relations(
            &["treats".into(), "treats".into()],
            1e-12,
            50,
            &p,
        )
        .unwrap();
        assert_eq!(dup.len(), 1);
        assert_eq!(dup["treats"], "treats");
    }

    #[test]
    fn normalize_merges_subword_neighbors() {
        // Oracle: exhaustive pairwise distances in the projected space pick a
        // threshold separating the close pair (shared "caus" subwords) from
        // the far one.
        let p = provider();
        let relations: Vec<String> = vec!["causes".into(), "causeto".into(), "treats".into()];
        let mut vecs = Vec::new();
        for r in &relations {
            vecs.push(p.embed_token(r).unwrap());
        }
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let d_close = dist(&vecs[0], &vecs[1]);
        let d_far = dist(&vecs[0], &vecs[2]).min(dist(&vecs[1], &vecs[2]));
        assert!(
            d_close < d_far,
            "oracle precondition: caus* pair ({d_close}) not closer than treats ({d_far})"
        );
        // With 3 points, PCA to rank <= 2 is distance-preserving, so the
        // embedding-space midpoint is a valid cut in the projected space.
        let threshold = (d_close + d_far) / 2.0;
        let map = normalize_relations(&relations, threshold, 50, &p).unwrap();
        assert_eq!(map["causes"], "causes");
        assert_eq!(map["causeto"], "causes");
        assert_eq!(map["treats"], "treats");
    }

    #[test]
    fn normalize_map_is_idempotent() {
        let p = provider();
        let relations: Vec<String> = [
            "causes", "causeto", "cause_to", "treats", "helps_manage",
            "prevents", "prevent_of",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let map = normalize_relations(&relations, 0.8, 20, &p).unwrap();
        for (k, v) in &map {
            assert!(map.contains_key(v), "canonical {v} of {k} must be mapped");
            assert_eq!(&map[v], v, "canonical form must map to itself");
        }
    }

    fn toy_kg(p: &EmbeddingProvider) -> Mhkg {
        let json = r#"{
            "contexts": [
                {"id": "c1", "sentence": "stress worsens depression",
                 "triplets": [["stress", "exacerbates", "depression"]]},
                {"id": "c2", "sentence": "therapy helps with anxiety",
                 "triplets": [["therapy", "helps_manage", "anxiety"],
                              ["stress", "exacerbates", "depression"]]},
                {"id": "c3", "sentence": "sleep restores mood",
                 "triplets": [["sleep", "improves", "mood"]]}
            ]
        }"#;
        load_kg_str(json, p).unwrap()
    }

    #[test]
    fn retrieve_all_contexts_is_deduplicated_union() {
        let p = provider();
        let kg = toy_kg(&p);
        let sim = CosineMeanEmbedding::new(&p);
        let post = Post::new("q", "anything at all", None).unwrap();
        let got = retrieve_subgraph(&post, &kg, kg.contexts.len(), &sim).unwrap();
        // Four stored triplets, one duplicated across c1/c2.
        assert_eq!(kg.edges.len(), 4);
        assert_eq!(got.len(), 3);
        let keys: HashSet<(String, String, String)> = got
            .iter()
            .map(|t| (t.source.clone(), t.relation.clone(), t.target.clone()))
            .collect();
        assert_eq!(keys.len(), 3);
    }

    #[test]
    fn retrieve_exact_sentence_match_wins() {
        let p = provider();
        let kg = toy_kg(&p);
        let sim = CosineMeanEmbedding::new(&p);
        let post = Post::new("q", "therapy helps with anxiety", None).unwrap();
        let got = retrieve_subgraph(&post, &kg, 1, &sim).unwrap();
        let expected: Vec<&Triplet> = kg
            .contexts
            .iter()
            .find(|c| c.id == "c2")
            .unwrap()
            .triplet_ids
            .iter()
            .map(|&i| &kg.edges[i])
            .collect();
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(expected) {
            assert_eq!(g, e);
        }
    }

    #[test]
    fn retrieve_top2_matches_brute_force_table() {
        let p = provider();
        let kg = toy_kg(&p);
        let sim = CosineMeanEmbedding::new(&p);
        let post = Post::new("q", "feeling low and stressed lately", None).unwrap();
        // Brute-force score table.
        let mut table: Vec<(String, f64)> = kg
            .contexts
            .iter()
            .map(|c| (c.id.clone(), sim.score(&post.text, &c.sentence)))
            .collect();
        table.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top2: HashSet<&str> = table[..2].iter().map(|(id, _)| id.as_str()).collect();

        let got = retrieve_subgraph(&post, &kg, 2, &sim).unwrap();
        for tr in &got {
            assert!(top2.contains(tr.context_id.as_str()));
        }
        // k > |contexts| clamps without error.
        let clamped = retrieve_subgraph(&post, &kg, 99, &sim).unwrap();
        assert_eq!(clamped.len(), 3);
    }

    #[test]
    fn retrieve_invariant_to_context_permutation() {
        let p = provider();
        let kg = toy_kg(&p);
        let sim = CosineMeanEmbedding::new(&p);
        let mut shuffled = kg.clone();
        shuffled.contexts.rotate_left(1);
        let post = Post::new("q", "stress and sleep", None).unwrap();
        let a = retrieve_subgraph(&post, &kg, 2, &sim).unwrap();
        let b = retrieve_subgraph(&post, &shuffled, 2, &sim).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_graph_basics() {
        let p = provider();
        let g = build_graph(&[t("a", "r", "b")], &p);
        assert_eq!(g.nodes, vec!["a", "b"]);
        assert_eq!(g.edges.len(), 1);

        let sentinel = build_graph(&[], &p);
        assert_eq!(sentinel.nodes, vec![SENTINEL_NODE]);
        assert!(sentinel.edges.is_empty());
        assert_eq!(sentinel.node_embeddings.dim(), (1, EMBED_DIM));
        assert!(sentinel.node_embeddings.iter().all(|&v| v == 0.0));

        let directed = build_graph(&[t("a", "r", "b"), t("b", "r", "a")], &p);
        assert_eq!(directed.nodes.len(), 2);
        assert_eq!(directed.edges.len(), 2);
    }

    #[test]
    fn build_graph_invariants() {
        let p = provider();
        let triplets = vec![
            t("a", "r", "b"),
            t("b", "s", "c"),
            t("a", "u", "c"),
            t("c", "v", "a"),
        ];
        let g = build_graph(&triplets, &p);
        assert!(g.nodes.len() <= 2 * triplets.len());
        for e in &g.edges {
            assert!(g.nodes.contains(&e.source));
            assert!(g.nodes.contains(&e.target));
        }
        // Multi-word entity embedding is the word mean.
        let g2 = build_graph(&[t("major depressive disorder", "is_a", "mood disorder")], &p);
        let expected = p.embed_text_mean("major depressive disorder");
        for (j, &want) in expected.iter().enumerate() {
            assert_eq!(g2.node_embeddings[[0, j]], want);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let p = provider();
        let kg = toy_kg(&p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kg.json");
        save_kg(&kg, &path).unwrap();
        let reloaded = load_kg(&path, &p).unwrap();
        assert_eq!(kg, reloaded);
    }

    #[test]
    fn schema_errors_carry_pointers() {
        let p = provider();
        match load_kg_str(r#"{"nothing": []}"#, &p) {
            Err(Error::KgSchema { pointer, .. }) => assert_eq!(pointer, "/contexts"),
            other => panic!("expected schema error, got {other:?}"),
        }
        match load_kg_str(
            r#"{"contexts": [{"id": "c1", "sentence": "s", "triplets": [["a", "", "b"]]}]}"#,
            &p,
        ) {
            Err(Error::KgSchema { pointer, .. }) => {
                assert_eq!(pointer, "/contexts/0/triplets/0/1");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
        match load_kg_str(
            r#"{"contexts": [{"id": "c1", "sentence": "s"}]}"#,
            &p,
        ) {
            Err(Error::KgSchema { pointer, .. }) => {
                assert_eq!(pointer, "/contexts/0/triplets");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bundled_sample_kg_loads_with_full_relation_inventory() {
        let p = provider();
        let kg = load_kg_str(bundled_sample_kg(), &p).unwrap();
        let relations: HashSet<&str> = kg.edges.iter().map(|e| e.relation.as_str()).collect();
        assert_eq!(relations.len(), 177);
        assert!(kg.edges.iter().all(|e| {
            !e.source.is_empty() && !e.relation.is_empty() && !e.target.is_empty()
        }));
        assert!(!bundled_sample_eligible().trim().is_empty());
    }
}
