//! `simulate`: a full synthetic campaign, and optionally a review workspace
//! for the HTTP service.

use std::collections::HashMap;
use std::path::Path;

use anyhow::Context;
use atlasforge_core::campaign::{Campaign, CampaignStore, Clock, VolumeEntry};
use atlasforge_core::simloop::{generate_phantom, run_loop, simulate_ensemble, LoopSummary, Scenario};
use atlasforge_core::volgrid::{write_volume_file, ManifestEntry, VolumeManifest, VolumeRole};
use atlasforge_core::attention::attention_maps;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::attention::attention_file_name;
use crate::config::{usage, write_json, Provenance, Settings};
use crate::SimulateArgs;

/// Token written into a staged review workspace.
pub const DEV_TOKEN: &str = "dev-token";

#[derive(Serialize)]
struct SummaryFile<'a> {
    provenance: Provenance,
    summary: &'a LoopSummary,
}

pub fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| usage(format!("scenario {}: {e}", path.display())))?;
    Ok(scenario)
}

/// Writes `summary.json`, `trace.jsonl`, `dsc.csv`, `initial_pairs.jsonl`
/// and the campaign's `events.jsonl` into the output directory.
pub fn run(mut settings: Settings, args: SimulateArgs) -> anyhow::Result<()> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed.or(settings.config.seed) {
        scenario.seed = seed;
    }
    settings.config.seed = Some(scenario.seed);
    scenario.validate()?;
    let out = settings.output(args.out, &format!("sim/{}", scenario.name))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let trace = run_loop(&scenario)?;
    let s = &trace.summary;
    let provenance = settings.provenance("simulate", &[args.scenario.clone()])?;
    write_json(&out.join("summary.json"), &SummaryFile { provenance, summary: s })?;
    write(&out.join("trace.jsonl"), trace.trace_jsonl())?;
    write(&out.join("dsc.csv"), trace.dsc_csv())?;
    let mut pairs = String::new();
    for p in &trace.initial_pairs {
        pairs.push_str(&serde_json::to_string(p).expect("pair serializes"));
        pairs.push('\n');
    }
    write(&out.join("initial_pairs.jsonl"), pairs)?;
    let mut events = String::new();
    for e in trace.campaign.events() {
        events.push_str(&serde_json::to_string(e).expect("event serializes"));
        events.push('\n');
    }
    write(&out.join("events.jsonl"), events)?;

    println!("scenario {} seed {}", s.scenario, s.seed);
    for t in &trace.iterations {
        println!(
            "  iteration {:>2} {:<4} pool {:>4} selected {:>3} revised {:>3} model DSC {:.4} annotation DSC {:.4}",
            t.iteration, t.model_tag, t.pool_size, t.selected, t.revised, t.model_mean_dsc, t.annotation_mean_dsc
        );
    }
    println!(
        "stop {:?} after {} iterations; revised {} of {} pairs (budget {}), effort ratio {:.4}",
        s.stop_reason, s.iterations, s.total_revised, s.total_pairs, s.total_budget, s.effort_ratio
    );
    if let Some(rho) = s.spearman_iteration0 {
        println!("spearman(attention size, 1 - DSC) at iteration 0: {rho:.4}");
    }
    println!("trace sha256 {}", s.trace_sha256);

    if args.stage_review {
        stage_review(&scenario, &out.join("review"))?;
        println!("review workspace written to {}", out.join("review").display());
    }
    Ok(())
}

fn write(path: &Path, text: String) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Phantom images and labels, iteration-0 attention maps, a volume manifest,
/// a campaign log with iteration 0 open and a development token file.
pub fn stage_review(scenario: &Scenario, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let classes = scenario.class_ids();
    let staged: Vec<(Vec<ManifestEntry>, atlasforge_core::EnsemblePrediction)> = (0..scenario.volumes)
        .into_par_iter()
        .map(|i| -> anyhow::Result<_> {
            let id = Scenario::volume_id(i);
            let (image, truth) = generate_phantom(&scenario.phantom_spec(i))?;
            let ens = simulate_ensemble(&id, &truth, &classes, &scenario.models, &scenario.errors, scenario.volume_seed(i), 0)?;
            let mut entries = Vec::new();
            let mut put = |name: String, role, class, grid: &atlasforge_core::VoxelGrid| -> anyhow::Result<()> {
                write_volume_file(dir.join(&name), grid)?;
                entries.push(ManifestEntry { volume: id.clone(), role, path: name.into(), class, architecture: None });
                Ok(())
            };
            put(format!("{id}_image.nii"), VolumeRole::Image, None, &image)?;
            put(format!("{id}_label.nii"), VolumeRole::Label, None, truth.grid())?;
            for map in attention_maps(&ens, None, &scenario.campaign.attention)? {
                put(attention_file_name(&id, map.class_id.get()), VolumeRole::Attention, Some(map.class_id), &map.attention)?;
            }
            Ok((entries, ens))
        })
        .collect::<anyhow::Result<_>>()?;

    let manifest = VolumeManifest { entries: staged.iter().flat_map(|(e, _)| e.iter().cloned()).collect() };
    manifest.save(dir.join("volumes.json"))?;
    let volumes = (0..scenario.volumes).map(|i| VolumeEntry { id: Scenario::volume_id(i), dims: scenario.dims }).collect();
    let mut campaign = Campaign::create(&scenario.name, scenario.campaign.clone(), volumes, classes, "M0", Clock::Logical)?;
    let ensembles: Vec<_> = staged.into_iter().map(|(_, e)| e).collect();
    campaign.open_iteration(&ensembles)?;
    let log = dir.join("campaign.events.jsonl");
    if log.exists() {
        std::fs::remove_file(&log).with_context(|| format!("replacing {}", log.display()))?;
        let _ = std::fs::remove_file(CampaignStore::snapshot_path(&log));
    }
    CampaignStore::create(&log, campaign)?;
    write_json(&dir.join("tokens.json"), &HashMap::from([(DEV_TOKEN, "reviewer")]))
}
