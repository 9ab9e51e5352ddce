//! Per-class priority lists and top-fraction selection.
//!
//! Lists are ordered by descending attention size; equal sizes fall back to
//! ascending volume id so a list is a pure function of its input. The
//! selection takes `ceil(fraction * len)` entries, never fewer than one from a
//! non-empty list.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::ClassId;

pub const DEFAULT_FRACTION: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum RankingError {
    #[error("no volumes to rank")]
    EmptyInput,
    #[error("attention size {size} of volume {volume:?} is not a finite non-negative number")]
    BadSize { volume: String, size: f64 },
    #[error("fraction {0} must lie in (0, 1]")]
    BadFraction(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(String),
}

pub type Result<T, E = RankingError> = std::result::Result<T, E>;

/// One line of a serialized priority list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorityEntry {
    pub volume: String,
    pub class: ClassId,
    pub size: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityList {
    pub class: ClassId,
    pub entries: Vec<PriorityEntry>,
}

/// Volumes chosen for revision from one class's priority list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub class: ClassId,
    pub fraction: f64,
    pub iteration: u32,
    pub selected: Vec<String>,
}

/// Input record for ranking: the attention size of one (volume, class) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRecord {
    pub volume: String,
    pub class: ClassId,
    pub size: f64,
}

/// Rank `sizes` (volume id → attention size) for `class`.
pub fn build_priority_list<'a, I>(sizes: I, class: ClassId) -> Result<PriorityList>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut pairs: Vec<(&str, f64)> = sizes.into_iter().collect();
    if pairs.is_empty() {
        return Err(RankingError::EmptyInput);
    }
    if let Some(&(volume, size)) = pairs.iter().find(|(_, s)| !s.is_finite() || *s < 0.0) {
        return Err(RankingError::BadSize { volume: volume.to_owned(), size });
    }
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let entries = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (volume, size))| PriorityEntry { volume: volume.to_owned(), class, size, rank: i + 1 })
        .collect();
    Ok(PriorityList { class, entries })
}

/// `ceil(fraction * len)`, at least 1 for a non-empty list.
///
/// The product is nudged down by a relative 1e-12 before the ceiling so that
/// binary rounding of e.g. `0.07 * 100` does not select an extra volume.
pub fn selection_count(len: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(RankingError::BadFraction(fraction));
    }
    if len == 0 {
        return Ok(0);
    }
    let raw = fraction * len as f64;
    let count = (raw * (1.0 - 1e-12)).ceil() as usize;
    Ok(count.clamp(1, len))
}

pub fn select_top(list: &PriorityList, fraction: f64, iteration: u32) -> Result<Selection> {
    let count = selection_count(list.entries.len(), fraction)?;
    Ok(Selection {
        class: list.class,
        fraction,
        iteration,
        selected: list.entries.iter().take(count).map(|e| e.volume.clone()).collect(),
    })
}

/// Group size records by class and rank each group.
pub fn build_priority_lists(records: &[SizeRecord]) -> Result<BTreeMap<ClassId, PriorityList>> {
    let mut by_class: BTreeMap<ClassId, Vec<(&str, f64)>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class).or_default().push((r.volume.as_str(), r.size));
    }
    if by_class.is_empty() {
        return Err(RankingError::EmptyInput);
    }
    by_class.into_iter().map(|(class, sizes)| Ok((class, build_priority_list(sizes, class)?))).collect()
}

/// Write entries as JSON lines `{volume, class, size, rank}`.
pub fn write_jsonl<W: Write>(mut out: W, entries: &[PriorityEntry]) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read JSON-lines records of any deserializable type, skipping blank lines.
pub fn read_jsonl<R: BufRead, T: serde::de::DeserializeOwned>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| RankingError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RankingError::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}
