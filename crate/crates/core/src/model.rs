//! Graph transformer classifier.
//!
//! Node inputs are semantic vectors plus learnable in/out-degree embeddings.
//! Queries and values are scaled per node by the summed outgoing edge
//! weight. Attention is dense over all node pairs and biased by the
//! interaction of queries and keys with a shared shortest-path distance
//! embedding, and the same distance embedding is mixed into the aggregated
//! values. One or more post-norm encoder blocks are followed by a
//! sum‖max readout and a three-layer classifier head.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{apply_weight_transform, shortest_path_matrix, LogGraph, WeightTransform};
use crate::scalar::Scalar;
use crate::tensor::gradcheck::{numeric_gradient, relative_error};
use crate::tensor::{Checkpoint, DropoutRng, GatherRow, ParamId, ParamStore, Tape, Tensor, Var, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Node feature dimension.
    pub d_v: usize,
    /// Attention output dimension, split evenly across heads.
    pub d_z: usize,
    pub heads: usize,
    /// Largest hop distance with its own embedding.
    pub max_distance: usize,
    /// Degrees above this share the last degree embedding.
    pub max_degree: usize,
    pub encoder_layers: usize,
    /// Hidden width of the position-wise network inside each encoder block.
    pub encoder_ffn_hidden: usize,
    /// Hidden width of the classifier head.
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub use_degree: bool,
    pub use_distance: bool,
    pub use_edge_weight: bool,
    pub use_feature_structure_interaction: bool,
    pub edge_weight_transform: WeightTransform,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: crate::embed::DEFAULT_DIM,
            d_z: 64,
            heads: 4,
            max_distance: crate::graph::DEFAULT_MAX_DISTANCE,
            max_degree: 64,
            encoder_layers: 1,
            encoder_ffn_hidden: 128,
            ffn_hidden: 1024,
            dropout: 0.3,
            use_degree: true,
            use_distance: true,
            use_edge_weight: true,
            use_feature_structure_interaction: true,
            edge_weight_transform: WeightTransform::Log1p,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_v == 0 || self.d_z == 0 || self.heads == 0 {
            return bad("d_v, d_z and heads must be positive".into());
        }
        if !self.d_z.is_multiple_of(self.heads) {
            return bad(format!("d_z = {} is not divisible by heads = {}", self.d_z, self.heads));
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers must be >= 1".into());
        }
        if self.max_distance == 0 {
            return bad("max_distance must be >= 1".into());
        }
        if self.encoder_ffn_hidden == 0 || self.ffn_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_z / self.heads
    }

    /// Rows of the distance embedding: hop counts `0..=L` plus one unreachable bucket.
    pub fn distance_buckets(&self) -> usize {
        self.max_distance + 2
    }
}

/// A graph prepared for the model: features and structural indices.
#[derive(Debug, Clone)]
pub struct GraphInput<T> {
    pub features: Tensor<T>,
    pub in_deg: Vec<usize>,
    pub out_deg: Vec<usize>,
    /// Row-major `n × n` distance buckets.
    pub buckets: Arc<Vec<usize>>,
    /// Transformed edge-weight sums as an `n × 1` column.
    pub weights: Tensor<T>,
    pub label: usize,
    /// Number of degrees clamped to `max_degree`.
    pub clamped_degrees: usize,
}

impl<T: Scalar> GraphInput<T> {
    pub fn new(graph: &LogGraph, cfg: &ModelConfig) -> Result<Self> {
        if graph.feature_dim != cfg.d_v {
            return Err(Error::DimensionMismatch {
                expected: cfg.d_v,
                found: graph.feature_dim,
                context: "graph feature dimension vs model d_v".into(),
            });
        }
        let n = graph.num_nodes();
        let mut clamped = 0;
        let mut clamp = |d: usize| {
            if d > cfg.max_degree {
                clamped += 1;
            }
            d.min(cfg.max_degree)
        };
        let in_deg = graph.in_deg.iter().map(|&d| clamp(d)).collect();
        let out_deg = graph.out_deg.iter().map(|&d| clamp(d)).collect();
        let dist = shortest_path_matrix(graph, cfg.max_distance);
        let buckets = dist
            .iter()
            .flat_map(|row| row.iter().map(|d| d.bucket(cfg.max_distance)))
            .collect();
        let mut w = graph.w.clone();
        apply_weight_transform(&mut w, cfg.edge_weight_transform);
        Ok(Self {
            features: Tensor::from_f64(n, cfg.d_v, &graph.features),
            in_deg,
            out_deg,
            buckets: Arc::new(buckets),
            weights: Tensor::from_f64(n, 1, &w),
            label: graph.label.class(),
            clamped_degrees: clamped,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows
    }
}

/// How distance information enters the attention logits.
#[derive(Debug, Clone, Copy)]
pub enum SpatialBias {
    Off,
    /// `b_ij = q_i·D_ψ + k_j·D_ψ` with the head's slice of the distance table.
    Interaction(Var),
    /// `b_ij = s_ψ` with a `1 × buckets` row of learnable scalars.
    Scalar(Var),
}

/// `x_i + z_in[deg_in(i)] + z_out[deg_out(i)]`.
pub fn node_input_encoding<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    tables: Option<(Var, Var)>,
    in_deg: &[usize],
    out_deg: &[usize],
) -> Var {
    match tables {
        None => x,
        Some((zin, zout)) => {
            let a = tape.lookup(zin, in_deg);
            let b = tape.lookup(zout, out_deg);
            let s = tape.add(x, a);
            tape.add(s, b)
        }
    }
}

pub fn qkv_project<T: Scalar>(tape: &mut Tape<T>, x: Var, wq: Var, wk: Var, wv: Var) -> (Var, Var, Var) {
    (tape.matmul(x, wq), tape.matmul(x, wk), tape.matmul(x, wv))
}

/// Scales rows of `q` and `v` by the node weights; keys pass through.
pub fn edge_weight_gating<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, w: Option<Var>) -> (Var, Var, Var) {
    match w {
        None => (q, k, v),
        Some(w) => (tape.mul_col(q, w), k, tape.mul_col(v, w)),
    }
}

pub fn spatial_bias<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    buckets: &Arc<Vec<usize>>,
    mode: SpatialBias,
) -> Option<Var> {
    match mode {
        SpatialBias::Off => None,
        SpatialBias::Interaction(table) => {
            let qd = tape.matmul_t(q, table);
            let kd = tape.matmul_t(k, table);
            let bq = tape.pair_gather(qd, Arc::clone(buckets), GatherRow::Query);
            let bk = tape.pair_gather(kd, Arc::clone(buckets), GatherRow::Key);
            Some(tape.add(bq, bk))
        }
        SpatialBias::Scalar(row) => Some(tape.pair_gather(row, Arc::clone(buckets), GatherRow::Shared)),
    }
}

/// Row-softmax of `(q_i·k_j + b_ij) / √dim`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, bias: Option<Var>, dim: usize) -> Var {
    let mut logits = tape.matmul_t(q, k);
    if let Some(b) = bias {
        logits = tape.add(logits, b);
    }
    let scaled = tape.scale(logits, T::one() / T::from_usize(dim).unwrap().sqrt());
    tape.softmax(scaled)
}

/// `z_i = Σ_j â_ij (v_j + D_ψ(ij))`, the distance term dropped when `table` is `None`.
pub fn aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    attn: Var,
    v: Var,
    table: Option<Var>,
    buckets: &Arc<Vec<usize>>,
) -> Var {
    let z = tape.matmul(attn, v);
    match table {
        None => z,
        Some(d) => {
            let nb = tape.shape(d)[0];
            let hist = tape.bucket_scatter(attn, Arc::clone(buckets), nb);
            let dz = tape.matmul(hist, d);
            tape.add(z, dz)
        }
    }
}

/// `concat(Σ_i x_i, max_i x_i)`.
pub fn readout<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.sum_rows(x);
    let m = tape.max_rows(x);
    tape.concat_cols(&[s, m])
}

#[derive(Debug, Clone)]
struct LayerIds {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
    output_bias: ParamId,
    residual: Option<ParamId>,
    norm1: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct HeadIds {
    fc1: (ParamId, ParamId),
    norm1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    fc3: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Ids {
    degree: Option<(ParamId, ParamId)>,
    distance: Option<ParamId>,
    distance_scalar: Option<ParamId>,
    layers: Vec<LayerIds>,
    head: HeadIds,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn glorot<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(rows, cols, a)
    }

    fn uniform<T: Scalar>(&mut self, rows: usize, cols: usize, a: f64) -> Tensor<T> {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| T::lit(self.rng.gen_range(-a..a))).collect(),
        )
    }
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `batch × 2` logits; column 1 is the anomalous class.
    pub logits: Var,
    /// Final node representations per graph.
    pub nodes: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mut p = ParamStore::new();
        let c = &config;
        let embed_scale = 0.1;
        let degree = c.use_degree.then(|| {
            (
                p.add("degree.in", init.uniform(c.max_degree + 1, c.d_v, embed_scale)),
                p.add("degree.out", init.uniform(c.max_degree + 1, c.d_v, embed_scale)),
            )
        });
        let distance = c
            .use_distance
            .then(|| p.add("distance.table", init.uniform(c.distance_buckets(), c.d_z, embed_scale)));
        let distance_scalar = (c.use_distance && !c.use_feature_structure_interaction).then(|| {
            p.add(
                "distance.scalar",
                init.uniform(c.heads, c.distance_buckets(), embed_scale),
            )
        });
        let ones = |n| Tensor::new(1, n, vec![T::one(); n]);
        let linear = |p: &mut ParamStore<T>, init: &mut Init, name: &str, i: usize, o: usize| {
            (
                p.add(&format!("{name}.weight"), init.glorot(i, o)),
                p.add(&format!("{name}.bias"), Tensor::zeros(1, o)),
            )
        };
        let norm = |p: &mut ParamStore<T>, name: &str, n: usize| {
            (
                p.add(&format!("{name}.gamma"), ones(n)),
                p.add(&format!("{name}.beta"), Tensor::zeros(1, n)),
            )
        };
        let mut layers = Vec::new();
        for l in 0..c.encoder_layers {
            let d_in = if l == 0 { c.d_v } else { c.d_z };
            let pre = format!("layer{l}");
            let query = p.add(&format!("{pre}.query"), init.glorot(d_in, c.d_z));
            let key = p.add(&format!("{pre}.key"), init.glorot(d_in, c.d_z));
            let value = p.add(&format!("{pre}.value"), init.glorot(d_in, c.d_z));
            let (output, output_bias) = linear(&mut p, &mut init, &format!("{pre}.output"), c.d_z, c.d_z);
            let residual = (d_in != c.d_z).then(|| p.add(&format!("{pre}.residual"), init.glorot(d_in, c.d_z)));
            let norm1 = norm(&mut p, &format!("{pre}.norm1"), c.d_z);
            let ffn_in = linear(&mut p, &mut init, &format!("{pre}.ffn_in"), c.d_z, c.encoder_ffn_hidden);
            let ffn_out = linear(
                &mut p,
                &mut init,
                &format!("{pre}.ffn_out"),
                c.encoder_ffn_hidden,
                c.d_z,
            );
            let norm2 = norm(&mut p, &format!("{pre}.norm2"), c.d_z);
            layers.push(LayerIds {
                query,
                key,
                value,
                output,
                output_bias,
                residual,
                norm1,
                ffn_in,
                ffn_out,
                norm2,
            });
        }
        let head = HeadIds {
            fc1: linear(&mut p, &mut init, "head.fc1", 2 * c.d_z, c.ffn_hidden),
            norm1: norm(&mut p, "head.norm1", c.ffn_hidden),
            fc2: linear(&mut p, &mut init, "head.fc2", c.ffn_hidden, c.ffn_hidden),
            norm2: norm(&mut p, "head.norm2", c.ffn_hidden),
            fc3: linear(&mut p, &mut init, "head.fc3", c.ffn_hidden, 2),
        };
        Ok(Self {
            config,
            params: p,
            ids: Ids {
                degree,
                distance,
                distance_scalar,
                layers,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn prepare(&self, graph: &LogGraph) -> Result<GraphInput<T>> {
        GraphInput::new(graph, &self.config)
    }

    fn affine(tape: &mut Tape<T>, bound: &[Var], x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let h = tape.matmul(x, bound[w.0]);
        tape.add_row(h, bound[b.0])
    }

    fn norm(tape: &mut Tape<T>, bound: &[Var], x: Var, (g, b): (ParamId, ParamId)) -> Var {
        let n = tape.layer_norm(x);
        let s = tape.mul_row(n, bound[g.0]);
        tape.add_row(s, bound[b.0])
    }

    fn maybe_dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut DropoutRng>) -> Var {
        match rng {
            Some(r) if self.config.dropout > 0.0 => tape.dropout(x, self.config.dropout, r),
            _ => x,
        }
    }

    /// Degree-enriched node inputs `X⁰`.
    pub fn input_encoding(&self, tape: &mut Tape<T>, bound: &[Var], g: &GraphInput<T>) -> Var {
        let x = tape.leaf(g.features.clone());
        let tables = self.ids.degree.map(|(a, b)| (bound[a.0], bound[b.0]));
        node_input_encoding(tape, x, tables, &g.in_deg, &g.out_deg)
    }

    /// Node representations after all encoder blocks, `n × d_z`.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        g: &GraphInput<T>,
        dropout: &mut Option<&mut DropoutRng>,
    ) -> Var {
        let c = &self.config;
        let dh = c.head_dim();
        let mut x = self.input_encoding(tape, bound, g);
        let w = c.use_edge_weight.then(|| tape.leaf(g.weights.clone()));
        let table = self.ids.distance.map(|d| bound[d.0]);
        for layer in &self.ids.layers {
            let (q, k, v) = qkv_project(tape, x, bound[layer.query.0], bound[layer.key.0], bound[layer.value.0]);
            let (q, k, v) = edge_weight_gating(tape, q, k, v, w);
            let mut heads = Vec::with_capacity(c.heads);
            for h in 0..c.heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let dtab = table.map(|t| tape.slice_cols(t, h * dh, dh));
                let mode = match (dtab, self.ids.distance_scalar) {
                    (None, _) => SpatialBias::Off,
                    (Some(_), Some(s)) => SpatialBias::Scalar(tape.lookup(bound[s.0], &[h])),
                    (Some(d), None) => SpatialBias::Interaction(d),
                };
                let bias = spatial_bias(tape, qh, kh, &g.buckets, mode);
                let attn = attention(tape, qh, kh, bias, dh);
                let attn = self.maybe_dropout(tape, attn, dropout);
                heads.push(aggregate(tape, attn, vh, dtab, &g.buckets));
            }
            let z = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            };
            let out = Self::affine(tape, bound, z, (layer.output, layer.output_bias));
            let skip = match layer.residual {
                Some(r) => tape.matmul(x, bound[r.0]),
                None => x,
            };
            let h1 = tape.add(skip, out);
            let h1 = Self::norm(tape, bound, h1, layer.norm1);
            let f = Self::affine(tape, bound, h1, layer.ffn_in);
            let f = tape.gelu(f);
            let f = self.maybe_dropout(tape, f, dropout);
            let f = Self::affine(tape, bound, f, layer.ffn_out);
            let h2 = tape.add(h1, f);
            x = Self::norm(tape, bound, h2, layer.norm2);
        }
        x
    }

    /// Classifier head over a `batch × 2·d_z` matrix of graph representations.
    pub fn classify(&self, tape: &mut Tape<T>, bound: &[Var], hg: Var, dropout: &mut Option<&mut DropoutRng>) -> Var {
        let h = &self.ids.head;
        let mut x = hg;
        for (fc, norm) in [(h.fc1, h.norm1), (h.fc2, h.norm2)] {
            x = Self::affine(tape, bound, x, fc);
            x = Self::norm(tape, bound, x, norm);
            x = tape.gelu(x);
            x = self.maybe_dropout(tape, x, dropout);
        }
        Self::affine(tape, bound, x, h.fc3)
    }

    /// Batched forward pass. Pass a dropout stream for training, `None` for inference.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        graphs: &[&GraphInput<T>],
        mut dropout: Option<&mut DropoutRng>,
    ) -> Forward {
        assert!(!graphs.is_empty(), "forward: empty batch");
        let mut nodes = Vec::with_capacity(graphs.len());
        let mut reps = Vec::with_capacity(graphs.len());
        for g in graphs {
            let x = self.encode(tape, bound, g, &mut dropout);
            reps.push(readout(tape, x));
            nodes.push(x);
        }
        let hg = if reps.len() == 1 {
            reps[0]
        } else {
            tape.concat_rows(&reps)
        };
        let logits = self.classify(tape, bound, hg, &mut dropout);
        Forward { logits, nodes }
    }

    /// Inference logits, one `[normal, anomalous]` pair per graph.
    pub fn logits(&self, graphs: &[&GraphInput<T>]) -> Vec<[T; 2]> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let f = self.forward(&mut tape, &bound, graphs, None);
        tape.value(f.logits).chunks(2).map(|r| [r[0], r[1]]).collect()
    }

    /// Class probabilities, `softmax(logits)`.
    pub fn predict_proba(&self, graphs: &[&GraphInput<T>]) -> Vec<[T; 2]> {
        self.logits(graphs).into_iter().map(softmax2).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint<ModelConfig> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            precision: T::NAME.to_string(),
            config: self.config.clone(),
            params: self.params.to_entries(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<ModelConfig>) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let mut model = Self::new(ckpt.config.clone())?;
        model.params.load_entries(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.checkpoint())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint<ModelConfig> = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Mean cross-entropy of `model` on `graphs` with their stored labels.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &[Var],
    graphs: &[&GraphInput<T>],
    dropout: Option<&mut DropoutRng>,
) -> Var {
    let f = model.forward(tape, bound, graphs, dropout);
    let labels: Vec<usize> = graphs.iter().map(|g| g.label).collect();
    tape.cross_entropy(f.logits, &labels)
}

/// Compares analytic parameter gradients of the batch loss with central
/// differences. Returns `(parameter name, relative error)` per tensor.
pub fn check_model_gradients(model: &Model<f64>, graphs: &[GraphInput<f64>], eps: f64) -> Vec<(String, f64)> {
    let refs: Vec<&GraphInput<f64>> = graphs.iter().collect();
    let loss_value = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let loss = batch_loss(m, &mut tape, &bound, &refs, None);
        tape.value(loss)[0]
    };
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let loss = batch_loss(model, &mut tape, &bound, &refs, None);
    let grads = tape.backward(loss);
    let mut work = model.clone();
    model
        .params
        .ids()
        .map(|id| {
            let n = model.params.values(id).len();
            let analytic = grads.get(bound[id.0]).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
            let mut x = model.params.values(id).to_vec();
            let numeric = numeric_gradient(&mut x, eps, |x| {
                work.params.values_mut(id).copy_from_slice(x);
                loss_value(&work)
            });
            work.params.values_mut(id).copy_from_slice(model.params.values(id));
            (model.params.name(id).to_string(), relative_error(&analytic, &numeric))
        })
        .collect()
}

pub fn softmax2<T: Scalar>(l: [T; 2]) -> [T; 2] {
    let m = l[0].max(l[1]);
    let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
    [a / (a + b), b / (a + b)]
}
