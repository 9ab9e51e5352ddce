//! `evaluate` and `leaderboard`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use atlasforge_core::metrics::{benchmark_rank, evaluate, render_table, LeaderboardRow, RankRule};
use atlasforge_core::MetricReport;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_file, usage, write_json, Provenance, Settings};
use crate::inputs::{load_label_dir, parse_classes};
use crate::{EvaluateArgs, LeaderboardArgs};

#[derive(Serialize, Deserialize)]
struct ReportFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    report: MetricReport,
}

/// Prints the per-class table and, with `--out`, writes the JSON report.
pub fn run(settings: Settings, args: EvaluateArgs) -> anyhow::Result<()> {
    let classes = parse_classes(&args.classes)?;
    let preds = load_label_dir(&args.pred)?;
    let truths = load_label_dir(&args.truth)?;
    let mut report = evaluate(&preds, &truths, &classes)?;
    if let Some(t) = args.wall_time {
        if !(t.is_finite() && t >= 0.0) {
            return Err(usage(format!("wall time {t} must be finite and non-negative")));
        }
        report.mean_wall_time_s = Some(t);
    }
    print!("{}", render_table(&report));
    if let Some(out) = args.out {
        let inputs: Vec<PathBuf> = [&args.pred, &args.truth]
            .into_iter()
            .flat_map(|dir| report.per_volume.keys().map(move |v| dir.join(format!("{v}.nii"))))
            .collect();
        let provenance = settings.provenance("evaluate", &inputs)?;
        write_json(&out, &ReportFile { provenance: Some(provenance), report })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Row<'a> {
    #[serde(flatten)]
    row: &'a LeaderboardRow,
    report_sha256: &'a str,
}

/// Reads `entry=path` reports (bare or as written by `evaluate`) and emits
/// the ordered leaderboard as JSON-lines.
pub fn leaderboard(_settings: Settings, args: LeaderboardArgs) -> anyhow::Result<()> {
    let mut reports = Vec::with_capacity(args.reports.len());
    let mut hashes = std::collections::BTreeMap::new();
    for spec in &args.reports {
        let (entry, path) = spec.split_once('=').ok_or_else(|| usage(format!("--report {spec:?} is not entry=path")))?;
        if entry.is_empty() || reports.iter().any(|(e, _): &(String, MetricReport)| e == entry) {
            return Err(usage(format!("entry name {entry:?} is empty or repeated")));
        }
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {path}: {e}")))?;
        let value: serde_json::Value = serde_json::from_str(&text).with_context(|| path.to_owned())?;
        let report: MetricReport = if value.get("report").is_some() {
            serde_json::from_value::<ReportFile>(value).with_context(|| path.to_owned())?.report
        } else {
            serde_json::from_value(value).with_context(|| path.to_owned())?
        };
        hashes.insert(entry.to_owned(), sha256_file(path.as_ref())?);
        reports.push((entry.to_owned(), report));
    }
    let rows = benchmark_rank(&reports, RankRule { dsc_decimals: args.decimals })?;
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for row in &rows {
        let line = Row { row, report_sha256: &hashes[&row.entry] };
        writeln!(out, "{}", serde_json::to_string(&line).expect("row serializes"))?;
    }
    out.flush()?;
    Ok(())
}
