//! Grouping of labelled event streams into sequences.

use std::collections::HashMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[default]
    Normal,
    Anomalous,
}

impl Label {
    pub fn from_bool(anomalous: bool) -> Self {
        if anomalous {
            Label::Anomalous
        } else {
            Label::Normal
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    /// Class index used by the classifier; 1 is anomalous.
    pub fn class(self) -> usize {
        self as usize
    }

    fn or(self, other: Label) -> Label {
        Label::from_bool(self.is_anomalous() || other.is_anomalous())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledEvent {
    pub event_id: u32,
    pub label: Label,
    pub session_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum WindowMeta {
    Session {
        key: String,
    },
    Fixed {
        size: usize,
        start: usize,
        /// True for a trailing window shorter than `size`.
        partial: bool,
    },
    Sliding {
        size: usize,
        step: usize,
        start: usize,
        partial: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogSequence {
    pub events: Vec<u32>,
    pub label: Label,
    pub meta: WindowMeta,
}

/// One line of the sequence dataset file.
#[derive(Debug, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub events: Vec<u32>,
    pub label: u8,
    pub meta: WindowMeta,
}

impl From<&LogSequence> for SequenceRecord {
    fn from(s: &LogSequence) -> Self {
        SequenceRecord {
            events: s.events.clone(),
            label: s.label.class() as u8,
            meta: s.meta.clone(),
        }
    }
}

fn window_label(events: &[LabeledEvent]) -> Label {
    events.iter().fold(Label::Normal, |acc, e| acc.or(e.label))
}

/// Result of session grouping.
#[derive(Debug)]
pub struct Sessions {
    pub sequences: Vec<LogSequence>,
    /// Events without a session key.
    pub dropped: usize,
}

/// One sequence per distinct session key, ordered by first appearance.
pub fn group_by_session(events: &[LabeledEvent]) -> Result<Sessions> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(&str, Vec<&LabeledEvent>)> = Vec::new();
    let mut dropped = 0;
    for e in events {
        let Some(key) = e.session_key.as_deref() else {
            dropped += 1;
            continue;
        };
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(e);
    }
    if groups.is_empty() && !events.is_empty() {
        return Err(Error::Config(
            "session key pattern extracted no keys from the input".into(),
        ));
    }
    let sequences = groups
        .into_iter()
        .map(|(key, evs)| LogSequence {
            events: evs.iter().map(|e| e.event_id).collect(),
            label: evs.iter().fold(Label::Normal, |acc, e| acc.or(e.label)),
            meta: WindowMeta::Session { key: key.to_string() },
        })
        .collect();
    Ok(Sessions { sequences, dropped })
}

/// Non-overlapping windows; a shorter trailing window is kept.
pub fn group_fixed(events: &[LabeledEvent], window_size: usize) -> Result<Vec<LogSequence>> {
    if window_size == 0 {
        return Err(Error::InvalidArgument("window size must be >= 1".into()));
    }
    Ok(events
        .chunks(window_size)
        .enumerate()
        .map(|(i, chunk)| LogSequence {
            events: chunk.iter().map(|e| e.event_id).collect(),
            label: window_label(chunk),
            meta: WindowMeta::Fixed {
                size: window_size,
                start: i * window_size,
                partial: chunk.len() < window_size,
            },
        })
        .collect())
}

/// Windows starting at every multiple of `step`; trailing windows may be partial.
pub fn group_sliding(events: &[LabeledEvent], window_size: usize, step: usize) -> Result<Vec<LogSequence>> {
    if window_size == 0 || step == 0 {
        return Err(Error::InvalidArgument(
            "sliding window size and step must be >= 1".into(),
        ));
    }
    Ok((0..events.len())
        .step_by(step)
        .map(|start| {
            let chunk = &events[start..(start + window_size).min(events.len())];
            LogSequence {
                events: chunk.iter().map(|e| e.event_id).collect(),
                label: window_label(chunk),
                meta: WindowMeta::Sliding {
                    size: window_size,
                    step,
                    start,
                    partial: chunk.len() < window_size,
                },
            }
        })
        .collect())
}

/// First `ceil(fraction * n)` items train, the rest test. Order is preserved.
pub fn chronological_split<T: Clone>(items: &[T], train_fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no sequences to split".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    // Guard against 0.8 * 10 = 8.000000000000002 rounding up.
    let cut = ((train_fraction * items.len() as f64) - 1e-9).ceil() as usize;
    let cut = cut.min(items.len());
    Ok((items[..cut].to_vec(), items[cut..].to_vec()))
}

/// Outcome of [`oversample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OversampleReport {
    pub duplicates: usize,
    pub anomalous: usize,
    pub total: usize,
    /// Set when the target could not be met because there are no anomalies.
    pub no_anomalies: bool,
}

/// Smallest anomaly count `a` with `a / (normal + a) >= rate`.
pub fn oversample_target_count(normal: usize, rate: f64) -> usize {
    // a >= rate * normal / (1 - rate); exact check guards the float ceiling.
    let mut a = ((rate * normal as f64) / (1.0 - rate)).ceil() as usize;
    while a > 0 && (a - 1) as f64 / (normal + a - 1) as f64 >= rate {
        a -= 1;
    }
    while (a as f64) / ((normal + a) as f64) < rate {
        a += 1;
    }
    a
}

/// Duplicates uniformly drawn anomalous items until their share reaches
/// `target_rate`. Duplicates are appended after the originals.
pub fn oversample<T: Clone>(
    train: &[T],
    is_anomalous: impl Fn(&T) -> bool,
    target_rate: f64,
    seed: u64,
) -> Result<(Vec<T>, OversampleReport)> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "oversampling rate must lie in (0, 1), got {target_rate}"
        )));
    }
    let anomalies: Vec<&T> = train.iter().filter(|t| is_anomalous(t)).collect();
    let normal = train.len() - anomalies.len();
    let mut out = train.to_vec();
    let mut report = OversampleReport {
        duplicates: 0,
        anomalous: anomalies.len(),
        total: train.len(),
        no_anomalies: false,
    };
    if train.is_empty() || anomalies.len() as f64 / train.len() as f64 >= target_rate {
        return Ok((out, report));
    }
    if anomalies.is_empty() {
        warn!("training set has no anomalies; oversampling to {target_rate} is impossible");
        report.no_anomalies = true;
        return Ok((out, report));
    }
    let needed = oversample_target_count(normal, target_rate) - anomalies.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..needed {
        out.push((*anomalies.choose(&mut rng).expect("non-empty")).clone());
    }
    report.duplicates = needed;
    report.anomalous += needed;
    report.total = out.len();
    Ok((out, report))
}
