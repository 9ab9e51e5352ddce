//! `rank`: per-class priority lists and top-fraction selection.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use anyhow::Context;
use atlasforge_core::ranking::{build_priority_lists, read_jsonl, select_top, selection_count, write_jsonl, SizeRecord};
use atlasforge_core::{PriorityEntry, Selection};
use serde::Serialize;

use crate::config::{write_json, Provenance, Settings};
use crate::RankArgs;

#[derive(Serialize)]
struct SelectionFile {
    provenance: Provenance,
    fraction: f64,
    iteration: u32,
    selections: Vec<Selection>,
}

/// `<out>.selection.json` next to a priority list.
pub fn selection_path(out: &std::path::Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".selection.json");
    out.with_file_name(name)
}

/// Writes every class's priority list to `--out` (JSON-lines, classes
/// ascending, rank order within a class) and the selections with provenance
/// to `<out>.selection.json`.
pub fn run(mut settings: Settings, args: RankArgs) -> anyhow::Result<()> {
    if let Some(f) = args.fraction {
        settings.config.fraction = f;
    }
    let fraction = settings.config.fraction;
    selection_count(1, fraction)?;
    let file = File::open(&args.sizes).with_context(|| format!("opening {}", args.sizes.display()))?;
    let records: Vec<SizeRecord> =
        read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", args.sizes.display()))?;
    let lists = build_priority_lists(&records)?;
    let selections = lists
        .values()
        .map(|l| select_top(l, fraction, args.iteration))
        .collect::<Result<Vec<_>, _>>()?;

    let out = settings.output(args.out, "priority.jsonl")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let entries: Vec<PriorityEntry> = lists.values().flat_map(|l| l.entries.iter().cloned()).collect();
    let writer = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    write_jsonl(writer, &entries).with_context(|| format!("writing {}", out.display()))?;

    let provenance = settings.provenance("rank", &[args.sizes.clone()])?;
    for s in &selections {
        println!("class {:>2} {:<20} {} of {} selected", s.class.get(), s.class.name(), s.selected.len(), lists[&s.class].entries.len());
    }
    write_json(&selection_path(&out), &SelectionFile { provenance, fraction, iteration: args.iteration, selections })
}
