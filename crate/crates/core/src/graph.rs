//! Sequence-to-graph transformation.
//!
//! Nodes are the distinct events of a sequence in first-occurrence order.
//! Each consecutive pair `(a, b)` adds one to the weight of edge `a -> b`,
//! and the initial event always carries one extra structural self-loop.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::window::{Label, LogSequence};

pub const DEFAULT_MAX_DISTANCE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Distance {
    Hops(u32),
    Unreachable,
}

impl Distance {
    /// Bucket of the distance-embedding table: `0..=max` for clipped hop
    /// counts and `max + 1` for unreachable pairs.
    pub fn bucket(self, max_distance: usize) -> usize {
        match self {
            Distance::Hops(h) => (h as usize).min(max_distance),
            Distance::Unreachable => max_distance + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightTransform {
    Raw,
    #[default]
    Log1p,
    MeanNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogGraph {
    pub node_ids: Vec<u32>,
    /// Local index of the initial event.
    pub initial: usize,
    /// `(src, dst) -> count`, local indices.
    pub edges: BTreeMap<(usize, usize), u32>,
    /// Row-major `|V| × dim` node features.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub in_deg: Vec<usize>,
    pub out_deg: Vec<usize>,
    /// Clipped hop distances, `dist[i][j]` from `i` to `j`.
    pub dist: Vec<Vec<Distance>>,
    pub max_distance: usize,
    /// Raw row sums of the weight matrix.
    pub w: Vec<f64>,
    pub label: Label,
}

impl LogGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn weight(&self, src: usize, dst: usize) -> u32 {
        self.edges.get(&(src, dst)).copied().unwrap_or(0)
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Assembles a graph from explicit parts, deriving degrees, distances
    /// and weight sums.
    pub fn from_parts(
        node_ids: Vec<u32>,
        initial: usize,
        edges: BTreeMap<(usize, usize), u32>,
        table: &EmbeddingTable,
        max_distance: usize,
        label: Label,
    ) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::InvalidArgument("graph has no nodes".into()));
        }
        if initial >= n {
            return Err(Error::InvalidArgument("initial node out of range".into()));
        }
        if max_distance < 1 {
            return Err(Error::InvalidArgument("max distance must be >= 1".into()));
        }
        for (&(i, j), &c) in &edges {
            if i >= n || j >= n || c == 0 {
                return Err(Error::InvalidArgument(format!(
                    "bad edge ({i}, {j}, {c}) for {n} nodes"
                )));
            }
        }
        table.require(node_ids.iter().copied())?;
        let feature_dim = table.dim();
        let mut features = Vec::with_capacity(n * feature_dim);
        for id in &node_ids {
            features.extend_from_slice(table.get(*id).expect("checked above"));
        }
        let mut g = LogGraph {
            node_ids,
            initial,
            edges,
            features,
            feature_dim,
            in_deg: Vec::new(),
            out_deg: Vec::new(),
            dist: Vec::new(),
            max_distance,
            w: Vec::new(),
            label,
        };
        let (in_deg, out_deg) = degree_vectors(&g);
        g.in_deg = in_deg;
        g.out_deg = out_deg;
        g.dist = shortest_path_matrix(&g, max_distance);
        g.w = edge_weight_vector(&g, WeightTransform::Raw);
        Ok(g)
    }

    /// Bigram counts of the source sequence, keyed by event id pairs.
    pub fn bigram_counts(&self) -> BTreeMap<(u32, u32), u32> {
        self.edges
            .iter()
            .filter_map(|(&(i, j), &c)| {
                let c = if i == self.initial && j == self.initial {
                    c - 1
                } else {
                    c
                };
                (c > 0).then(|| ((self.node_ids[i], self.node_ids[j]), c))
            })
            .collect()
    }
}

pub fn build_graph(seq: &LogSequence, table: &EmbeddingTable, max_distance: usize) -> Result<LogGraph> {
    let first = *seq
        .events
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot build a graph from an empty sequence".into()))?;
    let mut local: BTreeMap<u32, usize> = BTreeMap::new();
    let mut node_ids = Vec::new();
    for &e in &seq.events {
        local.entry(e).or_insert_with(|| {
            node_ids.push(e);
            node_ids.len() - 1
        });
    }
    let mut edges = BTreeMap::new();
    let start = local[&first];
    *edges.entry((start, start)).or_insert(0) += 1;
    for pair in seq.events.windows(2) {
        *edges.entry((local[&pair[0]], local[&pair[1]])).or_insert(0) += 1;
    }
    LogGraph::from_parts(node_ids, start, edges, table, max_distance, seq.label)
}

/// Builds one graph per sequence in parallel; output order follows `seqs`.
pub fn build_graphs(seqs: &[LogSequence], table: &EmbeddingTable, max_distance: usize) -> Result<Vec<LogGraph>> {
    seqs.par_iter().map(|s| build_graph(s, table, max_distance)).collect()
}

/// In- and out-degrees counted over distinct edges.
///
/// A self-loop counts only on the initial event, where it stands for the
/// missing predecessor. A repeated event (`a, a`) leaves the node's
/// neighbourhood unchanged and is carried by the edge weights alone.
pub fn degree_vectors(graph: &LogGraph) -> (Vec<usize>, Vec<usize>) {
    let n = graph.num_nodes();
    let mut in_deg = vec![0; n];
    let mut out_deg = vec![0; n];
    for &(i, j) in graph.edges.keys() {
        if i == j && i != graph.initial {
            continue;
        }
        out_deg[i] += 1;
        in_deg[j] += 1;
    }
    (in_deg, out_deg)
}

/// Directed unweighted BFS distances, clipped to `max_distance`.
pub fn shortest_path_matrix(graph: &LogGraph, max_distance: usize) -> Vec<Vec<Distance>> {
    let n = graph.num_nodes();
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in graph.edges.keys() {
        if i != j {
            adj[i].push(j);
        }
    }
    let cap = max_distance.max(1) as u32;
    (0..n)
        .map(|src| {
            let mut hops: Vec<Option<u32>> = vec![None; n];
            hops[src] = Some(0);
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                let d = hops[u].unwrap();
                for &v in &adj[u] {
                    if hops[v].is_none() {
                        hops[v] = Some(d + 1);
                        queue.push_back(v);
                    }
                }
            }
            hops.into_iter()
                .map(|h| h.map_or(Distance::Unreachable, |h| Distance::Hops(h.min(cap))))
                .collect()
        })
        .collect()
}

/// Row sums of the weight matrix with an element-wise transform.
pub fn edge_weight_vector(graph: &LogGraph, transform: WeightTransform) -> Vec<f64> {
    let mut w = vec![0.0; graph.num_nodes()];
    for (&(i, _), &c) in &graph.edges {
        w[i] += c as f64;
    }
    apply_weight_transform(&mut w, transform);
    w
}

pub fn apply_weight_transform(w: &mut [f64], transform: WeightTransform) {
    match transform {
        WeightTransform::Raw => {}
        WeightTransform::Log1p => w.iter_mut().for_each(|x| *x = 1.0 + x.ln_1p()),
        WeightTransform::MeanNorm => {
            let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
            if mean > 0.0 {
                w.iter_mut().for_each(|x| *x /= mean);
            }
        }
    }
}

/// One line of the graph dataset file. Matrices are recomputed on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub node_ids: Vec<u32>,
    pub edges: Vec<(usize, usize, u32)>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub initial: usize,
}

fn is_zero(x: &usize) -> bool {
    *x == 0
}

impl From<&LogGraph> for GraphRecord {
    fn from(g: &LogGraph) -> Self {
        GraphRecord {
            node_ids: g.node_ids.clone(),
            edges: g.edges.iter().map(|(&(i, j), &c)| (i, j, c)).collect(),
            label: g.label.class() as u8,
            initial: g.initial,
        }
    }
}

impl GraphRecord {
    pub fn into_graph(self, table: &EmbeddingTable, max_distance: usize) -> Result<LogGraph> {
        let edges = self.edges.into_iter().map(|(i, j, c)| ((i, j), c)).collect();
        LogGraph::from_parts(
            self.node_ids,
            self.initial,
            edges,
            table,
            max_distance,
            Label::from_bool(self.label != 0),
        )
    }
}

pub fn graphs_to_jsonl(graphs: &[LogGraph]) -> String {
    let mut out = String::new();
    for g in graphs {
        writeln!(out, "{}", serde_json::to_string(&GraphRecord::from(g)).unwrap()).unwrap();
    }
    out
}

pub fn read_graph_records(path: &Path) -> Result<Vec<GraphRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format(path, format!("line {} column {}", i + 1, e.column()), e.to_string()))
        })
        .collect()
}

pub fn load_graphs(path: &Path, table: &EmbeddingTable, max_distance: usize) -> Result<Vec<LogGraph>> {
    read_graph_records(path)?
        .into_iter()
        .map(|r| r.into_graph(table, max_distance))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::WindowMeta;

    pub(crate) fn table(n: u32, dim: usize) -> EmbeddingTable {
        let vectors = (0..n)
            .map(|i| (i, (0..dim).map(|k| ((i as usize * 7 + k) % 5) as f64 * 0.1).collect()))
            .collect();
        EmbeddingTable::from_vectors(dim, vectors).unwrap()
    }

    fn seq(events: &[u32]) -> LogSequence {
        LogSequence {
            events: events.to_vec(),
            label: Label::Normal,
            meta: WindowMeta::Fixed {
                size: events.len(),
                start: 0,
                partial: false,
            },
        }
    }

    fn fig3() -> LogGraph {
        // E1..E4 as ids 1..4
        build_graph(&seq(&[1, 2, 3, 2, 3, 4]), &table(10, 4), DEFAULT_MAX_DISTANCE).unwrap()
    }

    #[test]
    fn worked_example_edges() {
        let g = fig3();
        assert_eq!(g.node_ids, [1, 2, 3, 4]);
        let edges: BTreeMap<(u32, u32), u32> = g
            .edges
            .iter()
            .map(|(&(i, j), &c)| ((g.node_ids[i], g.node_ids[j]), c))
            .collect();
        let expected = BTreeMap::from([((1, 1), 1), ((1, 2), 1), ((2, 3), 2), ((3, 2), 1), ((3, 4), 1)]);
        assert_eq!(edges, expected);
        assert_eq!(g.dist[0][3], Distance::Hops(3));
    }

    #[test]
    fn worked_example_degrees_and_weights() {
        let g = fig3();
        assert_eq!(g.out_deg[2], 2);
        assert_eq!(g.in_deg[1], 2);
        assert_eq!(edge_weight_vector(&g, WeightTransform::Raw), [2.0, 2.0, 2.0, 0.0]);
        let m = edge_weight_vector(&g, WeightTransform::MeanNorm);
        assert!((m.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        let l = edge_weight_vector(&g, WeightTransform::Log1p);
        assert_eq!(l[3], 1.0);
    }

    #[test]
    fn single_event_graph() {
        let g = build_graph(&seq(&[7]), &table(10, 4), 5).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.edges, BTreeMap::from([((0, 0), 1)]));
        assert_eq!((g.in_deg[0], g.out_deg[0]), (1, 1));
        assert_eq!(g.w, [1.0]);
        assert_eq!(g.dist, vec![vec![Distance::Hops(0)]]);
    }

    #[test]
    fn repeated_initial_event_doubles_self_loop() {
        let g = build_graph(&seq(&[3, 3, 4]), &table(10, 4), 5).unwrap();
        assert_eq!(g.weight(0, 0), 2);
        assert_eq!(g.bigram_counts(), BTreeMap::from([((3, 3), 1), ((3, 4), 1)]));
    }

    #[test]
    fn star_out_degree() {
        let g = build_graph(&seq(&[0, 1, 0, 2, 0, 3, 0, 4]), &table(10, 4), 5).unwrap();
        assert_eq!(g.out_deg[0], 5); // four spokes plus the structural self-loop
        let s = build_graph(&seq(&[1, 0, 2, 0, 3, 0, 4]), &table(10, 4), 5).unwrap();
        assert_eq!(s.out_deg[1], 3);
    }

    #[test]
    fn clipping_and_unreachable() {
        let g = build_graph(&seq(&[0, 1, 2, 3, 4, 5, 6, 7]), &table(10, 4), 3).unwrap();
        assert_eq!(g.dist[0][7], Distance::Hops(3));
        assert_eq!(g.dist[7][0], Distance::Unreachable);
        assert_eq!(g.dist[7][0].bucket(3), 4);
        assert_eq!(g.dist[0][2].bucket(3), 2);
    }

    #[test]
    fn missing_embedding_is_error() {
        assert!(matches!(
            build_graph(&seq(&[0, 42]), &table(3, 4), 5),
            Err(Error::MissingEmbeddings(ids)) if ids == [42]
        ));
        assert!(build_graph(&seq(&[]), &table(3, 4), 5).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let t = table(10, 4);
        let g = fig3();
        let line = graphs_to_jsonl(std::slice::from_ref(&g));
        assert!(line.starts_with(r#"{"node_ids":[1,2,3,4],"edges":[[0,0,1],"#));
        let rec: GraphRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(rec.into_graph(&t, 5).unwrap(), g);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn permuting_nodes_permutes_structure(
                events in prop::collection::vec(0u32..8, 1..30),
                keys in prop::collection::vec(any::<u32>(), 8),
            ) {
                let t = table(8, 4);
                let g = build_graph(&seq(&events), &t, 3).unwrap();
                let n = g.num_nodes();
                let mut perm: Vec<usize> = (0..n).collect();
                perm.sort_by_key(|&i| keys[i]);
                // new index of old node i is pos[i]
                let mut pos = vec![0; n];
                for (new, &old) in perm.iter().enumerate() { pos[old] = new; }
                let node_ids = perm.iter().map(|&o| g.node_ids[o]).collect();
                let edges = g.edges.iter().map(|(&(i, j), &c)| ((pos[i], pos[j]), c)).collect();
                let p = LogGraph::from_parts(node_ids, pos[g.initial], edges, &t, 3, g.label).unwrap();
                for i in 0..n {
                    prop_assert_eq!(p.in_deg[pos[i]], g.in_deg[i]);
                    prop_assert_eq!(p.out_deg[pos[i]], g.out_deg[i]);
                    prop_assert_eq!(p.w[pos[i]], g.w[i]);
                    prop_assert_eq!(p.feature_row(pos[i]), g.feature_row(i));
                    for j in 0..n {
                        prop_assert_eq!(p.dist[pos[i]][pos[j]], g.dist[i][j]);
                    }
                }
            }

            #[test]
            fn edges_encode_bigrams(events in prop::collection::vec(0u32..10, 1..50)) {
                let g = build_graph(&seq(&events), &table(10, 4), 5).unwrap();
                let mut bigrams = BTreeMap::new();
                for p in events.windows(2) { *bigrams.entry((p[0], p[1])).or_insert(0) += 1; }
                prop_assert_eq!(g.bigram_counts(), bigrams);
                prop_assert_eq!(g.node_ids[g.initial], events[0]);
            }
        }
    }
}
