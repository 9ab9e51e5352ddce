//! `campaign`: step an event-sourced campaign from the command line.

use std::path::Path;

use anyhow::Context;
use atlasforge_core::campaign::{
    Campaign, CampaignConfig, CampaignStore, Clock, ManifestScope, RevisionRecord, SignOff, SignOffDecision,
    SignOffScope, Verdict, VolumeEntry,
};
use atlasforge_core::ranking::{read_jsonl, SizeRecord};
use atlasforge_core::volgrid::{read_volume_file, VolumeManifest};
use rayon::prelude::*;

use crate::config::{usage, write_json, Settings};
use crate::inputs::{load_ensemble, parse_classes, volume_dims};
use crate::{
    AdvanceArgs, CampaignCmd, DecisionArg, ExportArgs, InitArgs, OpenArgs, ReviseArgs, ScopeChoice, SignoffArgs,
    VerdictArg,
};

pub fn run(settings: Settings, cmd: CampaignCmd) -> anyhow::Result<()> {
    match cmd {
        CampaignCmd::Init(args) => init(settings, args),
        CampaignCmd::Open(args) => open(&settings, args),
        CampaignCmd::Status(args) => {
            let store = load(&settings, args.log)?;
            print_status(store.campaign());
            Ok(())
        }
        CampaignCmd::Revise(args) => revise(&settings, args),
        CampaignCmd::Export(args) => export(&settings, args),
        CampaignCmd::Advance(args) => advance(&settings, args),
        CampaignCmd::Signoff(args) => signoff(&settings, args),
    }
}

fn load(settings: &Settings, flag: Option<std::path::PathBuf>) -> anyhow::Result<CampaignStore> {
    let log = settings.event_log(flag)?;
    if !log.exists() {
        return Err(usage(format!("event log {} does not exist; run `campaign init` first", log.display())));
    }
    CampaignStore::open(&log, Clock::System).with_context(|| format!("opening {}", log.display()))
}

fn print_status(campaign: &Campaign) {
    let state = campaign.state();
    println!("{}", serde_json::to_string_pretty(&state.summary()).expect("summary serializes"));
    println!("stop rule: {:?}", campaign.stop_decision());
}

fn init(mut settings: Settings, args: InitArgs) -> anyhow::Result<()> {
    settings.with_attention(&args.attention);
    if let Some(f) = args.fraction {
        settings.config.fraction = f;
    }
    if let Some(r) = args.stop_ratio {
        settings.config.stop_ratio = r;
    }
    if let Some(m) = args.max_iterations {
        settings.config.max_iterations = m;
    }
    let classes = parse_classes(&args.classes)?;
    let manifest = VolumeManifest::load(&args.volumes)?;
    let volumes = manifest
        .volumes()
        .into_iter()
        .map(|v| Ok(VolumeEntry { id: v.to_owned(), dims: volume_dims(&manifest, v)? }))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let c = &settings.config;
    let config = CampaignConfig {
        fraction: c.fraction,
        attention: c.attention,
        stop_ratio: c.stop_ratio,
        max_iterations: c.max_iterations,
        ..CampaignConfig::default()
    };
    let campaign = Campaign::create(args.id, config, volumes, classes, args.model_tag, Clock::System)?;
    let log = settings.event_log(args.log.log)?;
    if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let store = CampaignStore::create(&log, campaign)?;
    println!("created {}", log.display());
    print_status(store.campaign());
    Ok(())
}

fn open(settings: &Settings, args: OpenArgs) -> anyhow::Result<()> {
    let mut store = load(settings, args.log.log)?;
    let selections = if let Some(sizes) = &args.sizes {
        let file = std::fs::File::open(sizes).with_context(|| format!("opening {}", sizes.display()))?;
        let records: Vec<SizeRecord> = read_jsonl(std::io::BufReader::new(file))?;
        store.apply(|c| c.open_iteration_with_sizes(&records))?
    } else {
        let preds = args.preds.as_deref().expect("clap requires --preds or --sizes");
        let manifest = VolumeManifest::load(preds)?;
        let state = store.campaign().state();
        let classes = state.classes.clone();
        let ensembles = state
            .volumes
            .keys()
            .filter(|v| state.pairs[*v].values().any(|p| p.status == atlasforge_core::PairStatus::Unrevised))
            .cloned()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|v| load_ensemble(&manifest, v, &classes))
            .collect::<anyhow::Result<Vec<_>>>()?;
        store.apply(|c| c.open_iteration(&ensembles))?
    };
    let iteration = store.campaign().state().open.as_ref().map_or(0, |o| o.iteration);
    println!("iteration {iteration} open");
    for s in selections.values() {
        println!("class {:>2} {:<20} selected: {}", s.class.get(), s.class.name(), s.selected.join(", "));
    }
    Ok(())
}

fn revise(settings: &Settings, args: ReviseArgs) -> anyhow::Result<()> {
    let mut store = load(settings, args.log.log)?;
    let class = parse_classes(&[args.class])?[0];
    let iteration = store
        .campaign()
        .state()
        .open
        .as_ref()
        .map(|o| o.iteration)
        .ok_or(atlasforge_core::campaign::CampaignError::NoOpenIteration)?;
    let mask = args.mask.as_deref().map(read_volume_file).transpose()?;
    let verdict = match args.verdict {
        VerdictArg::Revised => Verdict::Revised,
        VerdictArg::NoChange => Verdict::NoChange,
    };
    let record = RevisionRecord {
        volume: args.volume,
        class,
        iteration,
        annotator: args.annotator,
        verdict,
        mask_ref: args.mask.as_deref().map(abs_display),
        timestamp: 0,
    };
    let record = store.apply(|c| c.record_revision(record, mask.as_ref()))?;
    println!("{}", serde_json::to_string(&record).expect("record serializes"));
    Ok(())
}

fn abs_display(p: &Path) -> String {
    std::path::absolute(p).unwrap_or_else(|_| p.to_owned()).display().to_string()
}

fn export(settings: &Settings, args: ExportArgs) -> anyhow::Result<()> {
    let mut store = load(settings, args.log.log)?;
    let manifest = match args.scope {
        Some(choice) => {
            let scope = match choice {
                ScopeChoice::CurrentIteration => ManifestScope::CurrentIteration,
                ScopeChoice::Cumulative => ManifestScope::Cumulative,
            };
            store.apply(|c| c.export_finetune_manifest_with(scope))?
        }
        None => store.apply(|c| c.export_finetune_manifest())?,
    };
    let out = match args.out {
        Some(p) => p,
        None => settings.output(None, &format!("finetune_it{:02}.json", manifest.iteration))?,
    };
    write_json(&out, &manifest)?;
    println!("{} entries written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn advance(settings: &Settings, args: AdvanceArgs) -> anyhow::Result<()> {
    let mut store = load(settings, args.log.log)?;
    let decision = store.apply(|c| {
        c.advance_iteration(args.model_tag)?;
        c.check_stop()
    })?;
    print_status(store.campaign());
    println!("decision: {}", serde_json::to_string(&decision).expect("decision serializes"));
    Ok(())
}

fn signoff(settings: &Settings, args: SignoffArgs) -> anyhow::Result<()> {
    let mut store = load(settings, args.log.log)?;
    let signoff = SignOff {
        reviewer: args.reviewer,
        scope: if args.volumes.is_empty() { SignOffScope::Campaign } else { SignOffScope::Volumes(args.volumes) },
        decision: match args.decision {
            DecisionArg::Approve => SignOffDecision::Approve,
            DecisionArg::Reopen => SignOffDecision::Reopen,
        },
        note: args.note,
    };
    store.apply(|c| c.final_signoff(signoff))?;
    print_status(store.campaign());
    Ok(())
}
