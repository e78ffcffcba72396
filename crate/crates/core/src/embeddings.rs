//! Static 300-dimensional token embeddings.
//!
//! Two modes share one subword scheme: a word is decomposed into character
//! n-grams (lengths 3-6) of its boundary-marked form `<word>`, and the word
//! vector is the mean of the n-gram vectors. In vector-file mode an exact
//! vocabulary lookup takes precedence; any out-of-vocabulary word falls back
//! to the subword path, so embedding never fails on nonempty input.
//!
//! Fallback n-gram vectors are pseudorandom, seeded by a stable 64-bit hash
//! of the n-gram string, with per-coordinate variance 1/300 (unit expected
//! squared norm). The provider is immutable and safe to share across threads.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 300;
const NGRAM_MIN: usize = 3;
const NGRAM_MAX: usize = 6;

/// Stable FNV-1a 64-bit hash over UTF-8 bytes. Used to key n-gram vectors;
/// must never change or every stored model breaks.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Character n-grams (lengths 3-6) of `<word>`, deduplicated, in first-seen
/// order.
fn subword_ngrams(word: &str) -> Vec<String> {
    let marked: Vec<char> = std::iter::once('<')
        .chain(word.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut seen = std::collections::HashSet::new();
    let mut grams = Vec::new();
    for n in NGRAM_MIN..=NGRAM_MAX.min(marked.len()) {
        for start in 0..=(marked.len() - n) {
            let gram: String = marked[start..start + n].iter().collect();
            if seen.insert(gram.clone()) {
                grams.push(gram);
            }
        }
    }
    grams
}

fn ngram_vector(gram: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(gram));
    let scale = 1.0 / (EMBED_DIM as f64).sqrt();
    (0..EMBED_DIM)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// Provider of deterministic 300-d word vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    vocab: Option<HashMap<String, Vec<f64>>>,
}

impl EmbeddingProvider {
    /// Hashed-fallback mode: every word embedded via the subword scheme.
    pub fn hashed() -> Self {
        Self { vocab: None }
    }

    /// Vector-file mode over a preloaded vocabulary; missing words use the
    /// subword fallback.
    pub fn with_vocab(vocab: HashMap<String, Vec<f64>>) -> Self {
        Self { vocab: Some(vocab) }
    }

    pub fn dim(&self) -> usize {
        EMBED_DIM
    }

    /// Embed one nonempty word.
    pub fn embed_token(&self, word: &str) -> Result<Vec<f64>> {
        if word.is_empty() {
            return Err(Error::EmptyWord);
        }
        if let Some(vocab) = &self.vocab {
            if let Some(v) = vocab.get(word) {
                return Ok(v.clone());
            }
        }
        let grams = subword_ngrams(word);
        let mut acc = vec![0.0; EMBED_DIM];
        for gram in &grams {
            for (a, g) in acc.iter_mut().zip(ngram_vector(gram)) {
                *a += g;
            }
        }
        let inv = 1.0 / grams.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        Ok(acc)
    }

    /// Embed an ordered token sequence into an `(L, 300)` matrix.
    pub fn embed_sequence(&self, tokens: &[String]) -> Result<Array2<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        let mut out = Array2::zeros((tokens.len(), EMBED_DIM));
        for (i, tok) in tokens.iter().enumerate() {
            let v = self.embed_token(tok)?;
            for (j, x) in v.into_iter().enumerate() {
                out[[i, j]] = x;
            }
        }
        Ok(out)
    }

    /// Mean of the per-word embeddings of a whitespace-separated text,
    /// lowercased. Zero vector for whitespace-only input.
    pub fn embed_text_mean(&self, text: &str) -> Vec<f64> {
        let lowered = text.to_lowercase();
        let words: Vec<&str> = lowered.split_whitespace().collect();
        let mut acc = vec![0.0; EMBED_DIM];
        if words.is_empty() {
            return acc;
        }
        for w in &words {
            // Nonempty by construction of split_whitespace.
            let v = self.embed_token(w).expect("nonempty word");
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let inv = 1.0 / words.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        acc
    }
}

/// Stream a whitespace-separated vector file (`word v1 .. v300` per line)
/// into a vector-file provider. An optional first header line `N 300` is
/// skipped. Any line with the wrong number of values is an error naming its
/// 1-based line number.
pub fn load_vectors(path: impl AsRef<Path>) -> Result<EmbeddingProvider> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut vocab = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("nonempty line has a first field");
        let values: Vec<&str> = parts.collect();
        if i == 0 && values.len() == 1 {
            // Header "N 300".
            continue;
        }
        if values.len() != EMBED_DIM {
            return Err(Error::VectorDim {
                line: i + 1,
                expected: EMBED_DIM,
                found: values.len(),
            });
        }
        let mut vec = Vec::with_capacity(EMBED_DIM);
        for v in &values {
            let x: f64 = v.parse().map_err(|_| Error::VectorDim {
                line: i + 1,
                expected: EMBED_DIM,
                found: values.len(),
            })?;
            vec.push(x);
        }
        vocab.insert(word.to_string(), vec);
    }
    Ok(EmbeddingProvider::with_vocab(vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn embed_token_deterministic() {
        let p = EmbeddingProvider::hashed();
        let a = p.embed_token("tired").unwrap();
        let b = p.embed_token("tired").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
    }

    #[test]
    fn embed_token_oov_total() {
        let p = EmbeddingProvider::hashed();
        let v = p.embed_token("xqzzy").unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0);
    }

    #[test]
    fn single_ngram_word_equals_its_gram_vector() {
        // "<a>" has exactly one n-gram (the 3-gram "<a>"), so the mean is
        // that vector itself.
        let p = EmbeddingProvider::hashed();
        let v = p.embed_token("a").unwrap();
        assert_eq!(v, ngram_vector("<a>"));
    }

    #[test]
    fn embed_token_rejects_empty() {
        let p = EmbeddingProvider::hashed();
        assert!(matches!(p.embed_token(""), Err(Error::EmptyWord)));
    }

    #[test]
    fn embed_sequence_order_and_repeats() {
        let p = EmbeddingProvider::hashed();
        let two = p
            .embed_sequence(&["hello".into(), "hello".into()])
            .unwrap();
        assert_eq!(two.row(0), two.row(1));

        let one = p.embed_sequence(&["solo".into()]).unwrap();
        assert_eq!(one.dim(), (1, 300));

        let ab = p.embed_sequence(&["a".into(), "b".into()]).unwrap();
        let ba = p.embed_sequence(&["b".into(), "a".into()]).unwrap();
        assert_eq!(ab.row(0), ba.row(1));
        assert_eq!(ab.row(1), ba.row(0));

        assert!(matches!(p.embed_sequence(&[]), Err(Error::EmptyTokens)));
    }

    #[test]
    fn perturbed_word_changes_vector() {
        let p = EmbeddingProvider::hashed();
        let a = p.embed_token("tired").unwrap();
        let b = p.embed_token("tirad").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn load_vectors_lookup_and_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        let row = |start: f64| {
            (0..300)
                .map(|i| format!("{}", start + i as f64 * 0.001))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(f, "2 300").unwrap();
        writeln!(f, "hello {}", row(1.0)).unwrap();
        writeln!(f, "world {}", row(2.0)).unwrap();
        drop(f);

        let p = load_vectors(&path).unwrap();
        let hello = p.embed_token("hello").unwrap();
        assert_eq!(hello[0], 1.0);
        let world = p.embed_token("world").unwrap();
        assert_eq!(world[0], 2.0);

        // Absent word falls through to the deterministic subword path.
        let a = p.embed_token("absent").unwrap();
        let b = EmbeddingProvider::hashed().embed_token("absent").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_vectors_dimension_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        let good: String = (0..300).map(|_| "0.5 ").collect();
        let bad: String = (0..299).map(|_| "0.5 ").collect();
        writeln!(f, "ok {good}").unwrap();
        writeln!(f, "short {bad}").unwrap();
        drop(f);
        match load_vectors(&path) {
            Err(Error::VectorDim { line, found, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(found, 299);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn subword_ngrams_boundary_marking() {
        let grams = subword_ngrams("ab");
        // "<ab>" has 3-grams "<ab", "ab>" and the 4-gram "<ab>".
        assert_eq!(grams, vec!["<ab", "ab>", "<ab>"]);
    }
}
