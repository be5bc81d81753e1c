//! Pipeline stages. Each stage reads its inputs from and writes its outputs
//! to the run's output directory, plus a `<stage>_meta.json` summary and
//! the resolved configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use loggraph_core::embed::{EmbeddingTable, Provider};
use loggraph_core::graph::{build_graphs, graphs_to_jsonl, load_graphs, LogGraph};
use loggraph_core::metrics::Metrics;
use loggraph_core::model::{GraphInput, Model, ModelConfig};
use loggraph_core::parse::{HeaderPattern, TemplateStore};
use loggraph_core::synth::{self, Perturbation, SynthConfig};
use loggraph_core::tensor::Checkpoint;
use loggraph_core::train::{
    anomaly_scores, evaluate, history_csv, is_predicted_anomalous, split_and_oversample, train,
};
use loggraph_core::window::{
    chronological_split, group_by_session, group_fixed, group_sliding, Label, LabeledEvent, LogSequence, SequenceRecord,
};
use loggraph_core::{Error, Result, Scalar};
use regex::Regex;
use serde::Serialize;
use serde_json::json;

use crate::config::{Precision, RunConfig, Strategy};

pub const EVENTS_FILE: &str = "events.tsv";
pub const TEMPLATES_FILE: &str = "templates.json";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

/// Writes the resolved config and a stage summary.
fn write_meta(cfg: &RunConfig, stage: &str, summary: serde_json::Value) -> Result<()> {
    write(&cfg.out(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    write_json(
        &cfg.out(&format!("{stage}_meta.json")),
        &json!({
            "stage": stage,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "model_init_seed": cfg.model.init_seed,
            "train_seed": cfg.train.seed,
            "summary": summary,
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub lines: usize,
    pub sequences: usize,
    pub anomalous_sequences: usize,
    pub insertions: usize,
    pub substitutions: usize,
    pub swaps: usize,
}

pub fn run_synth(out: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    let corpus = synth::generate(cfg)?;
    corpus.write(out)?;
    let count = |k| corpus.sequences.iter().filter(|s| s.perturbation == Some(k)).count();
    let summary = SynthSummary {
        lines: corpus.lines.len(),
        sequences: corpus.sequences.len(),
        anomalous_sequences: corpus.sequences.iter().filter(|s| s.perturbation.is_some()).count(),
        insertions: count(Perturbation::Insertion),
        substitutions: count(Perturbation::Substitution),
        swaps: count(Perturbation::Swap),
    };
    write_json(
        &out.join("synth_meta.json"),
        &json!({ "config": cfg, "summary": &summary, "automaton": corpus.automaton.successors }),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRow {
    pub line_no: usize,
    pub event_id: u32,
    pub session_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseSummary {
    pub lines: usize,
    pub accepted: usize,
    pub skipped: usize,
    pub templates: usize,
}

/// Mines templates from the log file. With `store_path` the saved store is
/// extended instead of starting empty, so known lines keep their ids.
pub fn run_parse(cfg: &RunConfig, store_path: Option<&Path>) -> Result<ParseSummary> {
    let text = read(&cfg.data.logs)?;
    let header = HeaderPattern::new(&cfg.data.header_pattern)?;
    let session =
        Regex::new(&cfg.data.session_pattern).map_err(|e| Error::Config(format!("invalid session pattern: {e}")))?;
    let mut store = match store_path {
        Some(p) => TemplateStore::load(p)?,
        None => TemplateStore::new(cfg.parse)?,
    };
    let mut rows = String::new();
    let (mut lines, mut accepted) = (0, 0);
    for (i, raw) in text.lines().enumerate() {
        lines += 1;
        let Some(rec) = header.strip(i + 1, raw) else {
            continue;
        };
        let id = store.parse(&rec.content);
        let key = session.find(raw).map_or("", |m| m.as_str());
        writeln!(rows, "{}\t{}\t{}", rec.line_no, id, key).unwrap();
        accepted += 1;
    }
    let summary = ParseSummary {
        lines,
        accepted,
        skipped: lines - accepted,
        templates: store.len(),
    };
    write(&cfg.out(EVENTS_FILE), format!("# lines={lines}\n{rows}"))?;
    store.save(&cfg.out(TEMPLATES_FILE))?;
    write_meta(cfg, "parse", serde_json::to_value(&summary)?)?;
    info!(
        "parsed {} of {} lines into {} templates",
        accepted, lines, summary.templates
    );
    Ok(summary)
}

/// Reads an event stream written by [`run_parse`]. Returns the raw line count and the rows.
pub fn read_events(path: &Path) -> Result<(usize, Vec<EventRow>)> {
    let text = read(path)?;
    let mut lines = text.lines();
    let total = lines
        .next()
        .and_then(|h| h.strip_prefix("# lines="))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "line 1", "expected `# lines=<n>` header"))?;
    let rows = lines
        .enumerate()
        .map(|(i, line)| {
            let at = format!("line {}", i + 2);
            let mut f = line.split('\t');
            let mut field = |what: &str| {
                f.next()
                    .ok_or_else(|| Error::format(path, &at, format!("missing {what}")))
            };
            let line_no = field("line number")?
                .parse()
                .map_err(|_| Error::format(path, &at, "bad line number"))?;
            let event_id = field("event id")?
                .parse()
                .map_err(|_| Error::format(path, &at, "bad event id"))?;
            let key = field("session key")?;
            Ok(EventRow {
                line_no,
                event_id,
                session_key: (!key.is_empty()).then(|| key.to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((total, rows))
}

/// Reads one `0`/`1` label per line.
pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    read(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| match l.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::format(
                path,
                format!("line {}", i + 1),
                format!("expected 0 or 1, got `{other}`"),
            )),
        })
        .collect()
}

fn embedding_table(cfg: &RunConfig, store: &TemplateStore) -> Result<EmbeddingTable> {
    match cfg.embedding.provider {
        Provider::Hashed => EmbeddingTable::hashed(store, cfg.embedding.dim),
        Provider::File => {
            let path = cfg
                .embedding
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("embedding provider `file` needs embedding.path".into()))?;
            EmbeddingTable::load_for_store(path, cfg.embedding.dim, store)
        }
    }
}

fn count_anomalous(graphs: &[LogGraph]) -> usize {
    graphs.iter().filter(|g| g.label.is_anomalous()).count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub events: usize,
    pub sequences: usize,
    pub dropped_without_session: usize,
    pub train: usize,
    pub test: usize,
    pub train_anomalous: usize,
    pub test_anomalous: usize,
}

pub fn run_build(cfg: &RunConfig) -> Result<BuildSummary> {
    let (total_lines, rows) = read_events(&cfg.out(EVENTS_FILE))?;
    let labels = match &cfg.data.labels {
        Some(p) => {
            let labels = read_labels(p)?;
            if labels.len() != total_lines {
                return Err(Error::InvalidArgument(format!(
                    "label file {} has {} lines but the log has {total_lines}",
                    p.display(),
                    labels.len()
                )));
            }
            labels
        }
        None => vec![false; total_lines],
    };
    let events: Vec<LabeledEvent> = rows
        .into_iter()
        .map(|r| LabeledEvent {
            event_id: r.event_id,
            label: Label::from_bool(labels[r.line_no - 1]),
            session_key: r.session_key,
        })
        .collect();
    let mut dropped = 0;
    let sequences: Vec<LogSequence> = match cfg.window.strategy {
        Strategy::Session => {
            let s = group_by_session(&events)?;
            dropped = s.dropped;
            s.sequences
        }
        Strategy::Fixed => group_fixed(&events, cfg.window.size)?,
        Strategy::Sliding => group_sliding(&events, cfg.window.size, cfg.window.step)?,
    };
    if dropped > 0 {
        warn!("{dropped} events had no session key and were dropped");
    }
    let store = TemplateStore::load(&cfg.out(TEMPLATES_FILE))?;
    let table = embedding_table(cfg, &store)?;
    let graphs = build_graphs(&sequences, &table, cfg.model.max_distance)?;
    let (train_g, test_g) = if graphs.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        chronological_split(&graphs, cfg.window.train_fraction)?
    };

    let mut seq_text = String::new();
    for s in &sequences {
        writeln!(seq_text, "{}", serde_json::to_string(&SequenceRecord::from(s))?).unwrap();
    }
    write(&cfg.out(SEQUENCES_FILE), seq_text)?;
    write(&cfg.out(TRAIN_FILE), graphs_to_jsonl(&train_g))?;
    write(&cfg.out(TEST_FILE), graphs_to_jsonl(&test_g))?;
    table.save(&cfg.out(EMBEDDINGS_FILE))?;
    let summary = BuildSummary {
        events: events.len(),
        sequences: sequences.len(),
        dropped_without_session: dropped,
        train: train_g.len(),
        test: test_g.len(),
        train_anomalous: count_anomalous(&train_g),
        test_anomalous: count_anomalous(&test_g),
    };
    write_meta(cfg, "build", serde_json::to_value(&summary)?)?;
    info!(
        "built {} graphs ({} train, {} test)",
        summary.sequences, summary.train, summary.test
    );
    Ok(summary)
}

fn load_table(cfg: &RunConfig, d_v: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::load(&cfg.out(EMBEDDINGS_FILE), Some(d_v))
}

fn prepare<T: Scalar>(model: &Model<T>, graphs: &[LogGraph]) -> Result<Vec<GraphInput<T>>> {
    graphs.iter().map(|g| model.prepare(g)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub train_graphs: usize,
    pub val_graphs: usize,
    pub oversampled_duplicates: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: u64,
    pub clamped_degrees: usize,
    pub parameters: usize,
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    train_graphs: &[LogGraph],
    val_graphs: &[LogGraph],
) -> Result<(TrainSummary, String, String)> {
    let model = Model::<T>::new(cfg.model.clone())?;
    let tr = prepare(&model, train_graphs)?;
    let va = prepare(&model, val_graphs)?;
    let clamped = tr.iter().chain(&va).map(|g| g.clamped_degrees).sum();
    if clamped > 0 {
        warn!(
            "{clamped} node degrees exceeded max_degree = {} and were clamped",
            cfg.model.max_degree
        );
    }
    let parameters = model.params().num_scalars();
    let report = train(model, &tr, &va, &cfg.train)?;
    let summary = TrainSummary {
        train_graphs: tr.len(),
        val_graphs: va.len(),
        oversampled_duplicates: 0,
        epochs_run: report.history.len(),
        best_epoch: report.best_epoch,
        best_val_loss: report.best_val_loss,
        stopped_early: report.stopped_early,
        steps: report.steps,
        clamped_degrees: clamped,
        parameters,
    };
    let ckpt = serde_json::to_string(&report.model.checkpoint())?;
    Ok((summary, ckpt, history_csv(&report.history)))
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let table = load_table(cfg, cfg.model.d_v)?;
    let graphs = load_graphs(&cfg.out(TRAIN_FILE), &table, cfg.model.max_distance)?;
    let (train_g, val_g, report) = split_and_oversample(&graphs, &cfg.train)?;
    let (mut summary, ckpt, history) = match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &train_g, &val_g)?,
        Precision::F64 => train_typed::<f64>(cfg, &train_g, &val_g)?,
    };
    summary.oversampled_duplicates = report.duplicates;
    write(&cfg.out(CHECKPOINT_FILE), ckpt)?;
    write(&cfg.out(HISTORY_FILE), history)?;
    write_meta(cfg, "train", serde_json::to_value(&summary)?)?;
    info!(
        "trained {} epochs, best epoch {} with validation loss {:.6}",
        summary.epochs_run, summary.best_epoch, summary.best_val_loss
    );
    Ok(summary)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint<ModelConfig>> {
    let text = read(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

/// Graphs of `graphs_path` prepared for a checkpointed model.
fn checkpoint_inputs<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint<ModelConfig>,
    graphs_path: &Path,
) -> Result<(Model<T>, Vec<GraphInput<T>>)> {
    if cfg.model.d_v != ckpt.config.d_v {
        return Err(Error::DimensionMismatch {
            expected: ckpt.config.d_v,
            found: cfg.model.d_v,
            context: "checkpoint d_v vs configured model.d_v".into(),
        });
    }
    let model = Model::<T>::from_checkpoint(ckpt)?;
    let table = load_table(cfg, ckpt.config.d_v)?;
    let graphs = load_graphs(graphs_path, &table, ckpt.config.max_distance)?;
    let inputs = prepare(&model, &graphs)?;
    Ok((model, inputs))
}

fn precision_of(ckpt: &Checkpoint<ModelConfig>) -> Result<Precision> {
    match ckpt.precision.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Config(format!("unknown checkpoint precision `{other}`"))),
    }
}

fn eval_typed<T: Scalar>(cfg: &RunConfig, ckpt: &Checkpoint<ModelConfig>, graphs: &Path) -> Result<Metrics> {
    let (model, inputs) = checkpoint_inputs::<T>(cfg, ckpt, graphs)?;
    evaluate(&model, &inputs)
}

pub fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>, graphs: Option<&Path>) -> Result<Metrics> {
    let ckpt_path = checkpoint.map_or_else(|| cfg.out(CHECKPOINT_FILE), Path::to_path_buf);
    let graphs_path = graphs.map_or_else(|| cfg.out(TEST_FILE), Path::to_path_buf);
    let ckpt = read_checkpoint(&ckpt_path)?;
    let metrics = match precision_of(&ckpt)? {
        Precision::F32 => eval_typed::<f32>(cfg, &ckpt, &graphs_path)?,
        Precision::F64 => eval_typed::<f64>(cfg, &ckpt, &graphs_path)?,
    };
    if metrics.precision_undefined {
        warn!("no graph was predicted anomalous; precision reported as 0");
    }
    write_json(&cfg.out(METRICS_FILE), &metrics)?;
    write_meta(
        cfg,
        "eval",
        json!({ "checkpoint": ckpt_path, "graphs": graphs_path, "precision_undefined": metrics.precision_undefined }),
    )?;
    info!(
        "precision {:.4} recall {:.4} f1 {:.4}",
        metrics.precision, metrics.recall, metrics.f1
    );
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Score {
    pub index: usize,
    pub label: u8,
    pub p_normal: f64,
    pub p_anomalous: f64,
    pub predicted: u8,
}

fn predict_typed<T: Scalar>(cfg: &RunConfig, ckpt: &Checkpoint<ModelConfig>, graphs: &Path) -> Result<Vec<Score>> {
    let (model, inputs) = checkpoint_inputs::<T>(cfg, ckpt, graphs)?;
    Ok(anomaly_scores(&model, &inputs, 64)
        .into_iter()
        .zip(&inputs)
        .enumerate()
        .map(|(index, (p, g))| Score {
            index,
            label: g.label as u8,
            p_normal: p[0],
            p_anomalous: p[1],
            predicted: u8::from(is_predicted_anomalous(p)),
        })
        .collect())
}

pub fn run_predict(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    graphs: Option<&Path>,
    output: Option<&Path>,
) -> Result<Vec<Score>> {
    let ckpt_path = checkpoint.map_or_else(|| cfg.out(CHECKPOINT_FILE), Path::to_path_buf);
    let graphs_path = graphs.map_or_else(|| cfg.out(TEST_FILE), Path::to_path_buf);
    let out: PathBuf = output.map_or_else(|| cfg.out(SCORES_FILE), Path::to_path_buf);
    let ckpt = read_checkpoint(&ckpt_path)?;
    let scores = match precision_of(&ckpt)? {
        Precision::F32 => predict_typed::<f32>(cfg, &ckpt, &graphs_path)?,
        Precision::F64 => predict_typed::<f64>(cfg, &ckpt, &graphs_path)?,
    };
    let mut text = String::new();
    for s in &scores {
        writeln!(text, "{}", serde_json::to_string(s)?).unwrap();
    }
    write(&out, text)?;
    Ok(scores)
}

/// Parse, build, train and evaluate in sequence.
pub fn run_all(cfg: &RunConfig) -> Result<Metrics> {
    run_parse(cfg, None)?;
    run_build(cfg)?;
    run_train(cfg)?;
    run_eval(cfg, None, None)
}
