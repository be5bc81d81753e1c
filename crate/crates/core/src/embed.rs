//! Per-template semantic vectors.
//!
//! The built-in provider hashes template tokens and adjacent-token bigrams
//! into signed buckets. Precomputed vectors (for example from a pretrained
//! sentence encoder) can be supplied through the text format:
//!
//! ```text
//! dim=4
//! 0 0.1 -0.2 0.3 0.05
//! 1 ...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parse::{EventTemplate, TemplateStore, WILDCARD};

pub const DEFAULT_DIM: usize = 64;
/// Dimension of the vectors produced by BERT-base style encoders.
pub const ENCODER_DIM: usize = 768;

const BUCKET_KEY: u64 = 0x51_7c_c1_b7_27_22_0a_95;
const SIGN_KEY: u64 = 0x2545_f491_4f6c_dd1d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Hashed,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<u32, Vec<f64>>,
    provider: Provider,
}

fn hash_feature(key: u64, feature: &str) -> u64 {
    let mut h = FnvHasher::with_key(key);
    h.write(feature.as_bytes());
    h.finish()
}

/// Feature-hashed unit vector for a template. A template made only of
/// wildcards maps to the first basis vector.
pub fn embed_template_hashed(template: &EventTemplate, dim: usize) -> Result<Vec<f64>> {
    embed_tokens_hashed(&template.tokens, dim)
}

pub fn embed_tokens_hashed<S: AsRef<str>>(tokens: &[S], dim: usize) -> Result<Vec<f64>> {
    if dim < 8 {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be >= 8, got {dim}"
        )));
    }
    let mut v = vec![0.0; dim];
    let mut add = |feature: &str| {
        let bucket = (hash_feature(BUCKET_KEY, feature) % dim as u64) as usize;
        let sign = if hash_feature(SIGN_KEY, feature) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        v[bucket] += sign;
    };
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    for t in toks.iter().filter(|t| **t != WILDCARD) {
        add(&t.to_lowercase());
    }
    for pair in toks.windows(2) {
        if pair[0] != WILDCARD && pair[1] != WILDCARD {
            add(&format!("{}\u{1f}{}", pair[0].to_lowercase(), pair[1].to_lowercase()));
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Only wildcards, or every feature cancelled out.
        v[0] = 1.0;
        return Ok(v);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

impl EmbeddingTable {
    pub fn hashed(store: &TemplateStore, dim: usize) -> Result<Self> {
        let vectors = store
            .templates()
            .iter()
            .map(|t| Ok((t.event_id, embed_template_hashed(t, dim)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            dim,
            vectors,
            provider: Provider::Hashed,
        })
    }

    pub fn from_vectors(dim: usize, vectors: BTreeMap<u32, Vec<f64>>) -> Result<Self> {
        for (id, v) in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                    context: format!("vector for event {id}"),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "vector for event {id} has non-finite entries"
                )));
            }
        }
        Ok(Self {
            dim,
            vectors,
            provider: Provider::File,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider(&self) -> Provider {
        self.provider
    }

    pub fn get(&self, event_id: u32) -> Option<&[f64]> {
        self.vectors.get(&event_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.vectors.keys().copied()
    }

    /// Fails listing every id of `required` that has no vector.
    pub fn require(&self, required: impl IntoIterator<Item = u32>) -> Result<()> {
        let missing: Vec<u32> = required
            .into_iter()
            .filter(|id| !self.vectors.contains_key(id))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingEmbeddings(missing))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for (id, v) in &self.vectors {
            write!(out, "{id}").unwrap();
            for x in v {
                write!(out, " {x:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses the text format, checking the declared dimension against
    /// `expected_dim` when given.
    pub fn parse(text: &str, expected_dim: Option<usize>, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(origin, "line 1", "missing `dim=` header"))?;
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::format(origin, "line 1", "expected `dim=<n>` header"))?;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: dim,
                    context: format!("{}", origin.display()),
                });
            }
        }
        let mut vectors = BTreeMap::new();
        for (i, line) in lines {
            let at = format!("line {}", i + 1);
            let mut fields = line.split_whitespace();
            let id: u32 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::format(origin, &at, "expected an event id"))?;
            let values = fields
                .map(|f| match f.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(Error::format(origin, &at, format!("invalid value `{f}`"))),
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: values.len(),
                    context: format!("{} {at}", origin.display()),
                });
            }
            if vectors.insert(id, values).is_some() {
                return Err(Error::format(origin, &at, format!("duplicate event id {id}")));
            }
        }
        Ok(Self {
            dim,
            vectors,
            provider: Provider::File,
        })
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, expected_dim, path)
    }

    /// Loads a vector file and checks it covers every template of `store`.
    pub fn load_for_store(path: &Path, dim: usize, store: &TemplateStore) -> Result<Self> {
        let table = Self::load(path, Some(dim))?;
        table.require(store.templates().iter().map(|t| t.event_id))?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn hashed_is_deterministic_and_unit() {
        let a = embed_tokens_hashed(&toks("Receiving block <*> src"), 64).unwrap();
        let b = embed_tokens_hashed(&toks("Receiving block <*> src"), 64).unwrap();
        assert_eq!(a, b);
        let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn related_templates_are_closer() {
        let recv = embed_tokens_hashed(&toks("Receiving block <*>"), 64).unwrap();
        let del = embed_tokens_hashed(&toks("Deleting block <*>"), 64).unwrap();
        let pkt = embed_tokens_hashed(&toks("PacketResponder failed"), 64).unwrap();
        let near = cos(&recv, &del);
        assert!(near > -1.0 && near < 1.0);
        assert!(near > cos(&recv, &pkt), "{near} vs {}", cos(&recv, &pkt));
    }

    #[test]
    fn wildcard_only_template_is_sentinel() {
        let v = embed_tokens_hashed(&toks("<*> <*>"), 16).unwrap();
        let mut e1 = vec![0.0; 16];
        e1[0] = 1.0;
        assert_eq!(v, e1);
        assert!(embed_tokens_hashed(&toks("a"), 4).is_err());
    }

    #[test]
    fn load_three_vectors() {
        let text = "dim=4\n0 1 2 3 4\n1 0.5 0.5 0.5 0.5\n2 -1 0 0 1e-3\n";
        let t = EmbeddingTable::parse(text, Some(4), Path::new("e.txt")).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.get(2).unwrap(), [-1.0, 0.0, 0.0, 1e-3]);
    }

    #[test]
    fn missing_id_is_named() {
        let text = "dim=2\n0 1 2\n1 3 4\n";
        let t = EmbeddingTable::parse(text, None, Path::new("e.txt")).unwrap();
        match t.require([0, 1, 2]) {
            Err(Error::MissingEmbeddings(ids)) => assert_eq!(ids, [2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatches_rejected() {
        assert!(matches!(
            EmbeddingTable::parse("dim=3\n0 1 2 3\n", Some(768), Path::new("e")),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            EmbeddingTable::parse("dim=3\n0 1 2\n", None, Path::new("e")),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        for bad in ["NaN", "inf", "-inf", "abc"] {
            let text = format!("dim=2\n0 1 {bad}\n");
            assert!(EmbeddingTable::parse(&text, None, Path::new("e")).is_err(), "{bad}");
        }
    }

    #[test]
    fn text_round_trip_is_bit_identical() {
        let mut vectors = BTreeMap::new();
        vectors.insert(0, vec![0.1, -1.0 / 3.0, 1e-300, 12345.678]);
        vectors.insert(5, vec![std::f64::consts::PI, 0.0, -0.0, 2.0f64.sqrt()]);
        let t = EmbeddingTable::from_vectors(4, vectors).unwrap();
        let back = EmbeddingTable::parse(&t.to_text(), Some(4), Path::new("e")).unwrap();
        for id in [0, 5] {
            let (a, b) = (t.get(id).unwrap(), back.get(id).unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
