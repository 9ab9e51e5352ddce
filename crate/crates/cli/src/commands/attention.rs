//! `attention compute`: attention volumes and size records from a prediction
//! manifest.

use std::path::Path;

use anyhow::Context;
use atlasforge_core::attention::{attention_maps, AttentionRecord};
use atlasforge_core::ranking::SizeRecord;
use atlasforge_core::volgrid::{write_volume_file, VolumeManifest, VolumeRole};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{write_json, Provenance, Settings};
use crate::inputs::{load_ensemble, parse_classes, prediction_classes, prediction_volumes, InputError};
use crate::AttentionArgs;

#[derive(Serialize)]
struct RecordsFile<'a> {
    provenance: Provenance,
    records: &'a [AttentionRecord],
}

pub fn attention_file_name(volume: &str, class: u8) -> String {
    format!("{volume}_c{class:02}_attention.nii")
}

/// Writes `<out>/<volume>_cNN_attention.nii` per pair, `sizes.jsonl` (ranking
/// input) and `attention_records.json` (full records plus provenance).
/// Volumes are processed in parallel, classes of one volume in sequence.
pub fn compute(mut settings: Settings, args: AttentionArgs) -> anyhow::Result<()> {
    settings.with_attention(&args.attention);
    let params = settings.config.attention;
    params.validate()?;
    let manifest = VolumeManifest::load(&args.preds)?;
    let volumes = prediction_volumes(&manifest);
    if volumes.is_empty() {
        return Err(InputError::NoPredictions(args.preds.clone()).into());
    }
    let classes = if args.classes.is_empty() { prediction_classes(&manifest) } else { parse_classes(&args.classes)? };
    let out = settings.output(args.out, "attention")?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let per_volume: Vec<Vec<AttentionRecord>> = volumes
        .par_iter()
        .map(|volume| {
            let ens = load_ensemble(&manifest, volume, &classes)?;
            let mut records = Vec::with_capacity(classes.len());
            for map in attention_maps(&ens, Some(&classes), &params)? {
                let path = out.join(attention_file_name(volume, map.class_id.get()));
                write_volume_file(&path, &map.attention)?;
                records.push(map.record());
            }
            Ok(records)
        })
        .collect::<anyhow::Result<_>>()?;
    let records: Vec<AttentionRecord> = per_volume.into_iter().flatten().collect();

    let mut sizes = String::new();
    for r in &records {
        let line = SizeRecord { volume: r.volume_id.clone(), class: r.class_id, size: r.attention_size };
        sizes.push_str(&serde_json::to_string(&line).expect("size record serializes"));
        sizes.push('\n');
    }
    let sizes_path = out.join("sizes.jsonl");
    std::fs::write(&sizes_path, sizes).with_context(|| format!("writing {}", sizes_path.display()))?;

    let mut inputs = vec![args.preds.clone()];
    inputs.extend(
        manifest
            .entries
            .iter()
            .filter(|e| e.role == VolumeRole::Prediction && e.class.is_some_and(|c| classes.contains(&c)))
            .map(|e| e.path.clone()),
    );
    let provenance = settings.provenance("attention compute", &inputs)?;
    write_json(&out.join("attention_records.json"), &RecordsFile { provenance, records: &records })?;
    println!("{} attention maps ({} volumes x {} classes) written to {}", records.len(), volumes.len(), classes.len(), display(&out));
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
