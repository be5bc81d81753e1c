//! Synthetic HDFS-style corpus with planted anomalies.
//!
//! Normal sessions are random walks over a seeded automaton on `k` event
//! types. Anomalous sessions receive one perturbation (insertion,
//! substitution or swap of adjacent events) that introduces at least one
//! transition the automaton cannot produce. Sessions are written
//! contiguously with a fixed length, so a fixed window of that length
//! recovers them exactly, as does grouping by block id.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block-id pattern for session grouping of the generated logs.
pub const BLOCK_ID_PATTERN: &str = r"blk_-?\d+";

/// `(level, component, template)`; `{blk}`, `{ip}`, `{n}` are filled per line.
const TEMPLATES: &[(&str, &str, &str)] = &[
    (
        "INFO",
        "dfs.DataNode$DataXceiver",
        "Receiving block {blk} src: /{ip} dest: /{ip}",
    ),
    (
        "INFO",
        "dfs.FSNamesystem",
        "BLOCK* NameSystem.allocateBlock: /user/root/rand/_temporary/part-{n} {blk}",
    ),
    (
        "INFO",
        "dfs.DataNode$PacketResponder",
        "PacketResponder {n} for block {blk} terminating",
    ),
    (
        "INFO",
        "dfs.DataNode$PacketResponder",
        "Received block {blk} of size {n} from /{ip}",
    ),
    (
        "INFO",
        "dfs.FSNamesystem",
        "BLOCK* NameSystem.addStoredBlock: blockMap updated: {ip} is added to {blk} size {n}",
    ),
    ("INFO", "dfs.DataBlockScanner", "Verification succeeded for {blk}"),
    ("INFO", "dfs.DataNode$DataXceiver", "Served block {blk} to /{ip}"),
    (
        "INFO",
        "dfs.FSDataset",
        "Deleting block {blk} file /mnt/hadoop/dfs/data/current/subdir{n}/{blk}",
    ),
    (
        "INFO",
        "dfs.FSNamesystem",
        "BLOCK* NameSystem.delete: {blk} is added to invalidSet of {ip}",
    ),
    (
        "WARN",
        "dfs.DataNode$DataXceiver",
        "writeBlock {blk} received exception java.io.IOException: Connection reset by peer",
    ),
    (
        "INFO",
        "dfs.DataNode",
        "Changing block file offset of block {blk} from {n} to {n} meta file offset to {n}",
    ),
    (
        "WARN",
        "dfs.DataNode",
        "Exception in receiveBlock for block {blk} java.io.EOFException",
    ),
];

pub const MAX_EVENT_TYPES: usize = TEMPLATES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub event_types: usize,
    pub sequences: usize,
    pub sequence_length: usize,
    pub anomaly_rate: f64,
    /// Out-degree of every automaton state.
    pub successors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            event_types: 8,
            sequences: 2500,
            sequence_length: 40,
            anomaly_rate: 0.1,
            successors: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=MAX_EVENT_TYPES).contains(&self.event_types) {
            return bad(format!(
                "event_types must lie in 2..={MAX_EVENT_TYPES}, got {}",
                self.event_types
            ));
        }
        if self.successors == 0 || self.successors >= self.event_types {
            return bad(format!(
                "successors must lie in 1..{}, got {}",
                self.event_types, self.successors
            ));
        }
        if self.sequence_length < 3 {
            return bad("sequence_length must be >= 3".into());
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad(format!("anomaly_rate must lie in [0, 1], got {}", self.anomaly_rate));
        }
        Ok(())
    }

    pub fn anomaly_count(&self) -> usize {
        (self.anomaly_rate * self.sequences as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    Insertion,
    Substitution,
    Swap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSequence {
    pub block_id: String,
    pub events: Vec<usize>,
    pub perturbation: Option<Perturbation>,
    /// Index of the line labeled anomalous.
    pub anomalous_position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Automaton {
    pub start: usize,
    pub successors: Vec<Vec<usize>>,
}

impl Automaton {
    pub fn random(k: usize, out_degree: usize, rng: &mut ChaCha8Rng) -> Self {
        loop {
            let successors: Vec<Vec<usize>> = (0..k)
                .map(|s| {
                    let mut others: Vec<usize> = (0..k).filter(|&t| t != s).collect();
                    others.shuffle(rng);
                    let mut chosen = others[..out_degree].to_vec();
                    chosen.sort_unstable();
                    chosen
                })
                .collect();
            let a = Automaton { start: 0, successors };
            if a.reachable().len() == k {
                return a;
            }
        }
    }

    fn reachable(&self) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([self.start]);
        let mut stack = vec![self.start];
        while let Some(s) = stack.pop() {
            for &t in &self.successors[s] {
                if seen.insert(t) {
                    stack.push(t);
                }
            }
        }
        seen
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.successors[from].contains(&to)
    }

    /// Whether some consecutive pair of distinct events is an illegal
    /// transition. A repeated event only adds a self-loop, which leaves the
    /// graph's degrees and distances unchanged, so it does not count.
    pub fn has_illegal_edge(&self, events: &[usize]) -> bool {
        events.windows(2).any(|w| w[0] != w[1] && !self.allows(w[0], w[1]))
    }

    /// Whether every consecutive pair is a legal transition.
    pub fn accepts(&self, events: &[usize]) -> bool {
        events.first() == Some(&self.start) && events.windows(2).all(|w| self.allows(w[0], w[1]))
    }

    fn walk(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = vec![self.start];
        while out.len() < len {
            let last = *out.last().unwrap();
            out.push(*self.successors[last].choose(rng).unwrap());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub automaton: Automaton,
    pub sequences: Vec<SynthSequence>,
    pub lines: Vec<String>,
    /// One 0/1 label per line.
    pub labels: Vec<u8>,
}

fn perturb(
    kind: Perturbation,
    events: &[usize],
    k: usize,
    automaton: &Automaton,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, usize) {
    let n = events.len();
    loop {
        let (out, pos) = match kind {
            Perturbation::Insertion => {
                let pos = rng.gen_range(1..n);
                let mut out = events.to_vec();
                out.insert(pos, rng.gen_range(0..k));
                out.truncate(n);
                (out, pos)
            }
            Perturbation::Substitution => {
                let pos = rng.gen_range(1..n);
                let mut out = events.to_vec();
                out[pos] = rng.gen_range(0..k);
                (out, pos)
            }
            Perturbation::Swap => {
                let pos = rng.gen_range(1..n - 1);
                let mut out = events.to_vec();
                out.swap(pos, pos + 1);
                (out, pos)
            }
        };
        if automaton.has_illegal_edge(&out) {
            return (out, pos);
        }
    }
}

fn render(template: &str, blk: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    let mut rest = template;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        let j = rest[i..].find('}').expect("closed placeholder") + i;
        match &rest[i + 1..j] {
            "blk" => out.push_str(blk),
            "ip" => {
                let _ = write!(
                    out,
                    "10.251.{}.{}:{}",
                    rng.gen_range(0..256),
                    rng.gen_range(0..256),
                    rng.gen_range(1024..65536)
                );
            }
            "n" => {
                let _ = write!(out, "{}", rng.gen_range(0..100_000));
            }
            other => unreachable!("unknown placeholder {other}"),
        }
        rest = &rest[j + 1..];
    }
    out.push_str(rest);
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let automaton = Automaton::random(cfg.event_types, cfg.successors, &mut rng);
    let mut anomalous: Vec<usize> = (0..cfg.sequences).collect();
    anomalous.shuffle(&mut rng);
    anomalous.truncate(cfg.anomaly_count());
    anomalous.sort_unstable();
    let kinds = [Perturbation::Insertion, Perturbation::Substitution, Perturbation::Swap];

    let mut sequences = Vec::with_capacity(cfg.sequences);
    let mut blocks = BTreeSet::new();
    let mut next_anomaly = 0;
    for i in 0..cfg.sequences {
        let block_id = loop {
            let id = format!("blk_{}", rng.gen::<i64>());
            if blocks.insert(id.clone()) {
                break id;
            }
        };
        let walk = automaton.walk(cfg.sequence_length, &mut rng);
        let seq = if anomalous.get(next_anomaly) == Some(&i) {
            let kind = kinds[next_anomaly % kinds.len()];
            next_anomaly += 1;
            let (events, pos) = perturb(kind, &walk, cfg.event_types, &automaton, &mut rng);
            SynthSequence {
                block_id,
                events,
                perturbation: Some(kind),
                anomalous_position: Some(pos),
            }
        } else {
            SynthSequence {
                block_id,
                events: walk,
                perturbation: None,
                anomalous_position: None,
            }
        };
        sequences.push(seq);
    }

    let mut lines = Vec::with_capacity(cfg.sequences * cfg.sequence_length);
    let mut labels = Vec::with_capacity(lines.capacity());
    let mut clock = 0u64;
    for seq in &sequences {
        for (pos, &e) in seq.events.iter().enumerate() {
            let (level, component, template) = TEMPLATES[e];
            let secs = 20 * 3600 + clock / 4;
            clock += 1;
            let time = format!("{:02}{:02}{:02}", (secs / 3600) % 24, (secs / 60) % 60, secs % 60);
            let pid = rng.gen_range(10..40_000);
            let content = render(template, &seq.block_id, &mut rng);
            lines.push(format!("081109 {time} {pid} {level} {component}: {content}"));
            labels.push(u8::from(seq.anomalous_position == Some(pos)));
        }
    }
    Ok(SynthCorpus {
        automaton,
        sequences,
        lines,
        labels,
    })
}

impl SynthCorpus {
    pub fn logs_text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn labels_text(&self) -> String {
        let mut s = String::with_capacity(self.labels.len() * 2);
        for l in &self.labels {
            s.push(if *l == 1 { '1' } else { '0' });
            s.push('\n');
        }
        s
    }

    /// Writes `logs.txt` and `labels.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let logs = dir.join("logs.txt");
        fs::write(&logs, self.logs_text()).map_err(|e| Error::io(&logs, e))?;
        let labels = dir.join("labels.txt");
        fs::write(&labels, self.labels_text()).map_err(|e| Error::io(&labels, e))
    }
}
