//! `serve`: run the HTTP gateway.

use std::collections::HashMap;
use std::sync::Arc;

use anyhow::Context;
use atlasforge_core::campaign::{CampaignStore, Clock};
use atlasforge_core::volgrid::VolumeManifest;
use atlasforge_service::{load_tokens, AppState};

use crate::config::Settings;
use crate::ServeArgs;

pub fn run(settings: Settings, args: ServeArgs) -> anyhow::Result<()> {
    let logs = if args.logs.is_empty() { vec![settings.event_log(None)?] } else { args.logs };
    let root = settings.config.data_root.clone();
    let volumes = match args.volumes.or_else(|| root.as_ref().map(|r| r.join("volumes.json")).filter(|p| p.exists())) {
        Some(p) => VolumeManifest::load(p)?,
        None => VolumeManifest::default(),
    };
    let tokens: HashMap<String, String> = match args.tokens.or_else(|| root.as_ref().map(|r| r.join("tokens.json")).filter(|p| p.exists())) {
        Some(p) => load_tokens(&p).with_context(|| format!("reading tokens {}", p.display()))?,
        None => HashMap::new(),
    };
    let mask_dir = args.mask_dir.or_else(|| root.as_ref().map(|r| r.join("masks"))).unwrap_or_else(|| {
        logs[0].parent().map_or_else(|| "masks".into(), |d| d.join("masks"))
    });
    let mut state = AppState::new(volumes, tokens, mask_dir);
    for log in &logs {
        let store = CampaignStore::open(log, Clock::System).with_context(|| format!("opening {}", log.display()))?;
        state = state.with_campaign(store);
    }
    let state = Arc::new(state);
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.addr).await.with_context(|| format!("binding {}", args.addr))?;
        let addr = listener.local_addr()?;
        let ids: Vec<&str> = state.campaign_ids().collect();
        println!("listening on http://{addr}/v1 (campaigns: {})", ids.join(", "));
        use std::io::Write;
        std::io::stdout().flush()?;
        atlasforge_service::serve(listener, state.clone()).await.context("serving")
    })
}
