//! Dice similarity scoring and leaderboard ordering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::{ClassId, LabelGrid};
use crate::volgrid::VoxelGrid;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("mask is not a binary uint8 grid")]
    NonBinaryInput,
    #[error("volume {volume:?} has no {side} label grid")]
    MissingVolume { volume: String, side: &'static str },
    #[error("no classes to evaluate")]
    EmptyClassSet,
    #[error("leaderboard has no entries")]
    EmptyLeaderboard,
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Overlap counts of two binary masks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OverlapCounts {
    pub pred: u64,
    pub truth: u64,
    pub both: u64,
}

impl OverlapCounts {
    /// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
    pub fn dice(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.both as f64 / denom as f64
        }
    }
}

fn binary_values(grid: &VoxelGrid) -> Result<&[u8]> {
    let values = grid.as_u8().ok_or(MetricError::NonBinaryInput)?;
    if values.iter().any(|&v| v > 1) {
        return Err(MetricError::NonBinaryInput);
    }
    Ok(values)
}

/// Dice similarity of two binary masks.
pub fn dsc(pred: &VoxelGrid, truth: &VoxelGrid) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(MetricError::DimMismatch(pred.dims(), truth.dims()));
    }
    let (a, b) = (binary_values(pred)?, binary_values(truth)?);
    let mut counts = OverlapCounts::default();
    for (&p, &t) in a.iter().zip(b) {
        counts.pred += u64::from(p);
        counts.truth += u64::from(t);
        counts.both += u64::from(p & t);
    }
    Ok(counts.dice())
}

/// Dice of `class` between two label grids, without materializing masks.
pub fn class_dsc(pred: &LabelGrid, truth: &LabelGrid, class: ClassId) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(MetricError::DimMismatch(pred.dims(), truth.dims()));
    }
    let id = class.get();
    let mut counts = OverlapCounts::default();
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        let (p, t) = (p == id, t == id);
        counts.pred += u64::from(p);
        counts.truth += u64::from(t);
        counts.both += u64::from(p && t);
    }
    Ok(counts.dice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Per class, DSC averaged over volumes.
    pub per_class: BTreeMap<ClassId, f64>,
    /// Unweighted mean of `per_class`.
    pub mean_dsc: f64,
    pub per_volume: BTreeMap<String, BTreeMap<ClassId, f64>>,
    pub volumes: usize,
    pub pairs: usize,
    /// Mean inference wall time per volume, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_wall_time_s: Option<f64>,
}

/// Score matched prediction/truth label grids. Per-class scores average over
/// volumes first; the mean then averages over classes.
pub fn evaluate(
    preds: &BTreeMap<String, LabelGrid>,
    truths: &BTreeMap<String, LabelGrid>,
    classes: &[ClassId],
) -> Result<MetricReport> {
    if classes.is_empty() {
        return Err(MetricError::EmptyClassSet);
    }
    if let Some(volume) = truths.keys().find(|v| !preds.contains_key(*v)) {
        return Err(MetricError::MissingVolume { volume: volume.clone(), side: "prediction" });
    }
    if let Some(volume) = preds.keys().find(|v| !truths.contains_key(*v)) {
        return Err(MetricError::MissingVolume { volume: volume.clone(), side: "truth" });
    }
    if truths.is_empty() {
        return Err(MetricError::MissingVolume { volume: String::new(), side: "truth" });
    }
    let mut per_volume = BTreeMap::new();
    for (volume, truth) in truths {
        let pred = &preds[volume];
        let scores = classes
            .iter()
            .map(|&c| Ok((c, class_dsc(pred, truth, c)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        per_volume.insert(volume.clone(), scores);
    }
    let n = per_volume.len() as f64;
    let per_class: BTreeMap<ClassId, f64> = classes
        .iter()
        .map(|&c| (c, per_volume.values().map(|s| s[&c]).sum::<f64>() / n))
        .collect();
    let mean_dsc = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MetricReport {
        pairs: per_volume.len() * per_class.len(),
        volumes: per_volume.len(),
        per_class,
        mean_dsc,
        per_volume,
        mean_wall_time_s: None,
    })
}

/// Aligned-column text rendering of a report.
pub fn render_table(report: &MetricReport) -> String {
    let width = report.per_class.keys().map(|c| c.name().len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:>3}  {:<width$}  {:>7}", "id", "class", "DSC");
    for (class, score) in &report.per_class {
        let _ = writeln!(out, "{:>3}  {:<width$}  {:>7.4}", class.get(), class.name(), score);
    }
    let _ = writeln!(out, "{:>3}  {:<width$}  {:>7.4}", "", "mean", report.mean_dsc);
    let _ = write!(out, "{} volumes, {} (volume, class) pairs", report.volumes, report.pairs);
    if let Some(t) = report.mean_wall_time_s {
        let _ = write!(out, ", {t:.3} s/volume");
    }
    out.push('\n');
    out
}

/// Lexicographic leaderboard ordering: mean DSC rounded to `dsc_decimals`
/// (descending), then mean wall time (ascending, untimed entries last), then
/// entry id. This combination is a convention of this tool, not a published
/// challenge formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRule {
    pub dsc_decimals: u32,
}

impl Default for RankRule {
    fn default() -> Self {
        Self { dsc_decimals: 4 }
    }
}

impl RankRule {
    pub fn describe(&self) -> String {
        format!(
            "lexicographic: mean DSC rounded to {} decimals desc, then mean wall time asc (untimed last); tool convention",
            self.dsc_decimals
        )
    }

    fn dsc_key(&self, dsc: f64) -> i64 {
        (dsc * 10f64.powi(self.dsc_decimals as i32)).round() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub entry: String,
    pub mean_dsc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_wall_time_s: Option<f64>,
    pub rule: String,
}

pub fn benchmark_rank(reports: &[(String, MetricReport)], rule: RankRule) -> Result<Vec<LeaderboardRow>> {
    if reports.is_empty() {
        return Err(MetricError::EmptyLeaderboard);
    }
    let mut order: Vec<&(String, MetricReport)> = reports.iter().collect();
    order.sort_by(|(ea, a), (eb, b)| {
        rule.dsc_key(b.mean_dsc)
            .cmp(&rule.dsc_key(a.mean_dsc))
            .then_with(|| match (a.mean_wall_time_s, b.mean_wall_time_s) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            })
            .then_with(|| ea.cmp(eb))
    });
    let description = rule.describe();
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, (entry, report))| LeaderboardRow {
            rank: i + 1,
            entry: entry.clone(),
            mean_dsc: report.mean_dsc,
            mean_wall_time_s: report.mean_wall_time_s,
            rule: description.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(values: &[u8]) -> VoxelGrid {
        VoxelGrid::from_u8([values.len(), 1, 1], [1.0; 3], values.to_vec()).unwrap()
    }

    fn labels(values: &[u8]) -> LabelGrid {
        LabelGrid::new(mask(values)).unwrap()
    }

    fn cid(id: u8) -> ClassId {
        ClassId::new(id).unwrap()
    }

    #[test]
    fn dsc_examples() {
        assert_eq!(dsc(&mask(&[1, 1, 0]), &mask(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(dsc(&mask(&[1, 1, 0, 0]), &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dsc(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert_eq!(dsc(&mask(&[0, 0]), &mask(&[1, 0])).unwrap(), 0.0);
        // |A| = 2, |B| = 4, |A∩B| = 2
        let d = dsc(&mask(&[1, 1, 0, 0, 0]), &mask(&[1, 1, 1, 1, 0])).unwrap();
        assert!((d - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn dsc_errors() {
        assert!(matches!(dsc(&mask(&[1]), &mask(&[1, 0])), Err(MetricError::DimMismatch(..))));
        assert_eq!(dsc(&mask(&[2]), &mask(&[1])), Err(MetricError::NonBinaryInput));
        let f = VoxelGrid::from_f32([1, 1, 1], [1.0; 3], vec![1.0]).unwrap();
        assert_eq!(dsc(&f, &mask(&[1])), Err(MetricError::NonBinaryInput));
    }

    #[test]
    fn evaluate_identical_sets() {
        let vols: BTreeMap<String, LabelGrid> =
            [("a".to_string(), labels(&[0, 7, 7, 19])), ("b".to_string(), labels(&[19, 0, 0, 7]))].into();
        let report = evaluate(&vols, &vols, &[cid(7), cid(19)]).unwrap();
        assert_eq!(report.mean_dsc, 1.0);
        assert!(report.per_class.values().all(|&d| d == 1.0));
        assert_eq!(report.pairs, 4);
    }

    #[test]
    fn evaluate_averages_per_class_then_over_classes() {
        let truths: BTreeMap<String, LabelGrid> =
            [("a".to_string(), labels(&[7, 7, 19, 0])), ("b".to_string(), labels(&[7, 7, 19, 0]))].into();
        let mut preds = truths.clone();
        // class 7 entirely wrong on volume b
        preds.insert("b".into(), labels(&[0, 0, 19, 0]));
        let report = evaluate(&preds, &truths, &[cid(7), cid(19)]).unwrap();
        assert_eq!(report.per_class[&cid(7)], 0.5);
        assert_eq!(report.per_class[&cid(19)], 1.0);
        assert_eq!(report.mean_dsc, 0.75);
    }

    #[test]
    fn evaluate_errors() {
        let one: BTreeMap<String, LabelGrid> = [("a".to_string(), labels(&[0]))].into();
        let two: BTreeMap<String, LabelGrid> = [("a".to_string(), labels(&[0])), ("b".to_string(), labels(&[0]))].into();
        assert_eq!(evaluate(&one, &one, &[]), Err(MetricError::EmptyClassSet));
        assert_eq!(
            evaluate(&one, &two, &[cid(1)]),
            Err(MetricError::MissingVolume { volume: "b".into(), side: "prediction" })
        );
        assert_eq!(evaluate(&two, &one, &[cid(1)]), Err(MetricError::MissingVolume { volume: "b".into(), side: "truth" }));
    }

    fn report(mean: f64, time: Option<f64>) -> MetricReport {
        MetricReport {
            per_class: BTreeMap::new(),
            mean_dsc: mean,
            per_volume: BTreeMap::new(),
            volumes: 1,
            pairs: 1,
            mean_wall_time_s: time,
        }
    }

    #[test]
    fn leaderboard_order() {
        let rows = benchmark_rank(&[("B".into(), report(0.85, None)), ("A".into(), report(0.90, None))], RankRule::default()).unwrap();
        assert_eq!(rows.iter().map(|r| r.entry.as_str()).collect::<Vec<_>>(), ["A", "B"]);

        let rows = benchmark_rank(
            &[("A".into(), report(0.9, Some(10.0))), ("B".into(), report(0.9, Some(5.0))), ("C".into(), report(0.90004, None))],
            RankRule::default(),
        )
        .unwrap();
        assert_eq!(rows.iter().map(|r| r.entry.as_str()).collect::<Vec<_>>(), ["B", "A", "C"]);
        assert!(rows[0].rule.contains("convention"));

        let rows = benchmark_rank(&[("solo".into(), report(0.1, None))], RankRule::default()).unwrap();
        assert_eq!(rows[0].rank, 1);
        assert_eq!(benchmark_rank(&[], RankRule::default()), Err(MetricError::EmptyLeaderboard));
    }

    #[test]
    fn table_lists_every_class() {
        let vols: BTreeMap<String, LabelGrid> = [("a".to_string(), labels(&[7, 19]))].into();
        let table = render_table(&evaluate(&vols, &vols, &[cid(7), cid(19)]).unwrap());
        assert!(table.contains("liver"));
        assert!(table.contains("aorta"));
        assert!(table.contains("1.0000"));
    }
}
