//! Fixed-depth prefix tree template miner.
//!
//! Lines are routed first by token count and then by their leading tokens
//! (`depth - 2` levels). Each leaf holds a list of templates; an incoming
//! line joins the most similar template if the similarity reaches the
//! threshold, widening differing positions to [`WILDCARD`], otherwise it
//! founds a new template with the next dense id.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WILDCARD: &str = "<*>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrainParams {
    pub depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
}

impl Default for DrainParams {
    fn default() -> Self {
        Self {
            depth: 4,
            similarity_threshold: 0.4,
            max_children: 100,
        }
    }
}

impl DrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("drain depth must be >= 2, got {}", self.depth)));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) {
            return Err(Error::Config(format!(
                "drain similarity threshold must lie in (0, 1), got {}",
                self.similarity_threshold
            )));
        }
        if self.max_children < 2 {
            return Err(Error::Config("drain max_children must be >= 2".into()));
        }
        Ok(())
    }

    fn prefix_levels(&self) -> usize {
        self.depth - 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTemplate {
    pub event_id: u32,
    pub tokens: Vec<String>,
    pub match_count: u64,
    /// Prefix-tree keys below the length level that lead to this template's leaf.
    pub path: Vec<String>,
}

impl EventTemplate {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Default)]
struct TreeNode {
    children: BTreeMap<String, usize>,
    templates: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TemplateStore {
    params: DrainParams,
    templates: Vec<EventTemplate>,
    nodes: Vec<TreeNode>,
    by_length: BTreeMap<usize, usize>,
}

/// Fraction of positions where `template` and `tokens` agree, a wildcard in
/// the template matching anything.
///
/// # Panics
///
/// If the two lists differ in length.
pub fn similarity<S: AsRef<str>, U: AsRef<str>>(template: &[S], tokens: &[U]) -> f64 {
    assert_eq!(
        template.len(),
        tokens.len(),
        "similarity requires equal-length token lists"
    );
    if template.is_empty() {
        return 1.0;
    }
    let same = template
        .iter()
        .zip(tokens)
        .filter(|(t, s)| t.as_ref() == WILDCARD || t.as_ref() == s.as_ref())
        .count();
    same as f64 / template.len() as f64
}

fn is_numeric(token: &str) -> bool {
    let digits = token.strip_prefix(['-', '+']).unwrap_or(token);
    !digits.is_empty()
        && digits.chars().all(|c| c.is_ascii_digit() || c == '.')
        && digits.chars().any(|c| c.is_ascii_digit())
}

fn has_digit(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit())
}

/// Whitespace tokenization with purely numeric tokens replaced by the wildcard.
pub fn tokenize(content: &str) -> Vec<String> {
    content
        .split_whitespace()
        .map(|t| {
            if is_numeric(t) {
                WILDCARD.to_string()
            } else {
                t.to_string()
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    params: DrainParams,
    templates: Vec<EventTemplate>,
}

impl TemplateStore {
    pub fn new(params: DrainParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            templates: Vec::new(),
            nodes: vec![TreeNode::default()],
            by_length: BTreeMap::new(),
        })
    }

    pub fn params(&self) -> &DrainParams {
        &self.params
    }

    pub fn templates(&self) -> &[EventTemplate] {
        &self.templates
    }

    pub fn get(&self, event_id: u32) -> Option<&EventTemplate> {
        self.templates.get(event_id as usize)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Assigns `content` to a template, creating one if nothing is similar enough.
    pub fn parse(&mut self, content: &str) -> u32 {
        let tokens = tokenize(content);
        if let Some(id) = self.search(&tokens) {
            let tpl = &mut self.templates[id as usize];
            for (slot, tok) in tpl.tokens.iter_mut().zip(&tokens) {
                if slot != tok && slot != WILDCARD {
                    *slot = WILDCARD.to_string();
                }
            }
            tpl.match_count += 1;
            return id;
        }
        let id = self.templates.len() as u32;
        let (leaf, path) = self.insert_path(&tokens);
        self.nodes[leaf].templates.push(id);
        self.templates.push(EventTemplate {
            event_id: id,
            tokens,
            match_count: 1,
            path,
        });
        id
    }

    /// Read-only lookup against a frozen store.
    pub fn match_only(&self, content: &str) -> Option<u32> {
        self.search(&tokenize(content))
    }

    fn search(&self, tokens: &[String]) -> Option<u32> {
        let mut node = *self.by_length.get(&tokens.len())?;
        for tok in tokens.iter().take(self.params.prefix_levels()) {
            let children = &self.nodes[node].children;
            node = match children.get(tok).or_else(|| children.get(WILDCARD)) {
                Some(&child) => child,
                None => return None,
            };
        }
        let mut best: Option<(f64, usize, u32)> = None;
        for &id in &self.nodes[node].templates {
            let tpl = &self.templates[id as usize].tokens;
            let sim = similarity(tpl, tokens);
            let wild = tpl.iter().filter(|t| *t == WILDCARD).count();
            let better = match best {
                None => true,
                Some((s, w, _)) => sim > s || (sim == s && wild > w),
            };
            if better {
                best = Some((sim, wild, id));
            }
        }
        best.filter(|(s, _, _)| *s >= self.params.similarity_threshold)
            .map(|(_, _, id)| id)
    }

    fn child(&mut self, node: usize, key: &str) -> usize {
        if let Some(&c) = self.nodes[node].children.get(key) {
            return c;
        }
        let c = self.nodes.len();
        self.nodes.push(TreeNode::default());
        self.nodes[node].children.insert(key.to_string(), c);
        c
    }

    fn length_node(&mut self, len: usize) -> usize {
        if let Some(&n) = self.by_length.get(&len) {
            return n;
        }
        let n = self.child(0, &len.to_string());
        self.by_length.insert(len, n);
        n
    }

    fn insert_path(&mut self, tokens: &[String]) -> (usize, Vec<String>) {
        let mut node = self.length_node(tokens.len());
        let mut path = Vec::new();
        let max = self.params.max_children;
        for tok in tokens.iter().take(self.params.prefix_levels()) {
            let children = &self.nodes[node].children;
            let key = if children.contains_key(tok) {
                tok.as_str()
            } else if has_digit(tok) {
                WILDCARD
            } else if children.contains_key(WILDCARD) {
                if children.len() < max {
                    tok.as_str()
                } else {
                    WILDCARD
                }
            } else if children.len() + 1 < max {
                tok.as_str()
            } else {
                WILDCARD
            };
            path.push(key.to_string());
            node = self.child(node, key);
        }
        (node, path)
    }

    pub fn to_json(&self) -> String {
        let file = StoreFile {
            params: self.params,
            templates: self.templates.clone(),
        };
        serde_json::to_string_pretty(&file).expect("template store serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: StoreFile = serde_json::from_str(text).map_err(|e| {
            Error::format(
                origin,
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        let mut store = Self::new(file.params)?;
        for (i, tpl) in file.templates.into_iter().enumerate() {
            let bad = |msg: &str| Error::format(origin, format!("templates[{i}]"), msg);
            if tpl.event_id as usize != i {
                return Err(bad("event ids must be dense and in order"));
            }
            if tpl.tokens.is_empty() {
                return Err(bad("template has no tokens"));
            }
            if tpl.path.len() > store.params.prefix_levels() || tpl.path.len() > tpl.tokens.len() {
                return Err(bad("tree path longer than the tree depth"));
            }
            let mut node = store.length_node(tpl.tokens.len());
            for key in &tpl.path {
                node = store.child(node, key);
            }
            store.nodes[node].templates.push(tpl.event_id);
            store.templates.push(tpl);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}
