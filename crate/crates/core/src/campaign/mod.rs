//! Event-sourced annotation campaign.
//!
//! A campaign cycles through open (rank and select) → revise → export
//! fine-tune manifest → advance to the next model, until the stop rule fires;
//! a senior sign-off then approves or reopens pairs. Every mutation appends one
//! [`Event`]; [`CampaignState`] is a pure fold over that log, so replaying the
//! log reproduces the live state exactly.

mod state;
mod store;

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use state::{CampaignState, CampaignSummary, IterationSummary, OpenIteration, PairState, PairStatus};
pub use store::{read_events, write_events, CampaignStore, StoreError};

use crate::attention::{attention_records, AttentionError, AttentionParams, EnsemblePrediction};
use crate::labelspace::ClassId;
use crate::ranking::{
    build_priority_list, select_top, RankingError, Selection, SizeRecord, DEFAULT_FRACTION,
};
use crate::volgrid::{VoxelData, VoxelGrid};

pub const DEFAULT_STOP_RATIO: f64 = 1.0;
pub const DEFAULT_MAX_ITERATIONS: u32 = 20;

#[derive(Debug, Error, PartialEq)]
pub enum CampaignError {
    #[error("volume manifest is empty")]
    EmptyManifest,
    #[error("invalid campaign config: {0}")]
    BadConfig(String),
    #[error("no prediction for volume {volume:?}{}", class.map(|c| format!(" class {c}")).unwrap_or_default())]
    MissingPredictions { volume: String, class: Option<ClassId> },
    #[error("iteration {0} is already open")]
    IterationAlreadyOpen(u32),
    #[error("no iteration is open")]
    NoOpenIteration,
    #[error("iteration {0} is still open")]
    IterationStillOpen(u32),
    #[error("campaign is stopped ({0:?}); reopen via sign-off to continue")]
    CampaignStopped(StopReason),
    #[error("campaign has not stopped")]
    CampaignNotStopped,
    #[error("unknown volume {0:?}")]
    UnknownVolume(String),
    #[error("class {0} is not part of this campaign")]
    UnknownClass(ClassId),
    #[error("volume {volume:?} class {class} is not selected in the open iteration")]
    NotSelected { volume: String, class: ClassId },
    #[error("revision for iteration {got}, but iteration {open} is open")]
    WrongIteration { open: u32, got: u32 },
    #[error("volume {volume:?} class {class} already has a verdict this iteration")]
    DuplicateRevision { volume: String, class: ClassId },
    #[error("revised mask dims {actual:?} differ from volume dims {expected:?}")]
    DimMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error("verdict revised requires a mask and a mask reference")]
    MaskRequired,
    #[error("verdict no-change must not carry a mask")]
    UnexpectedMask,
    #[error("revised mask must be uint8 with values 0/1")]
    NonBinaryMask,
    #[error("{} selected pair(s) have no verdict", unresolved.len())]
    IterationIncomplete { unresolved: Vec<PairRef> },
    #[error("fine-tune manifest for iteration {0} has not been exported")]
    ManifestNotExported(u32),
    #[error("model tag must be non-empty")]
    EmptyModelTag,
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error("event log replay failed: {0}")]
    Replay(String),
}

pub type Result<T, E = CampaignError> = std::result::Result<T, E>;

/// Which revisions a fine-tune manifest lists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifestScope {
    /// Only pairs revised in the open iteration.
    CurrentIteration,
    /// Every pair currently holding a revised mask.
    #[default]
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub fraction: f64,
    pub attention: AttentionParams,
    /// Minimum no-change share of the last iteration's selections that stops
    /// the campaign.
    pub stop_ratio: f64,
    pub max_iterations: u32,
    pub manifest_scope: ManifestScope,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            fraction: DEFAULT_FRACTION,
            attention: AttentionParams::default(),
            stop_ratio: DEFAULT_STOP_RATIO,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            manifest_scope: ManifestScope::default(),
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(CampaignError::BadConfig(format!("fraction {} must lie in (0, 1]", self.fraction)));
        }
        if !(self.stop_ratio > 0.0 && self.stop_ratio <= 1.0) {
            return Err(CampaignError::BadConfig(format!("stop_ratio {} must lie in (0, 1]", self.stop_ratio)));
        }
        if self.max_iterations == 0 {
            return Err(CampaignError::BadConfig("max_iterations must be at least 1".into()));
        }
        self.attention.validate().map_err(|e| CampaignError::BadConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub id: String,
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRef {
    pub volume: String,
    pub class: ClassId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Revised,
    NoChange,
}

/// One annotator verdict. `timestamp` is assigned from the campaign clock
/// when the revision is recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionRecord {
    pub volume: String,
    pub class: ClassId,
    pub iteration: u32,
    pub annotator: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignOffScope {
    Campaign,
    Volumes(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignOffDecision {
    Approve,
    Reopen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignOff {
    pub reviewer: String,
    pub scope: SignOffScope,
    pub decision: SignOffDecision,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FinetuneEntry {
    pub volume: String,
    pub class: ClassId,
    pub mask_path: String,
    pub annotator: String,
    pub iteration: u32,
}

/// Training input for producing the next model from the current one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FinetuneManifest {
    pub iteration: u32,
    pub model_tag: String,
    pub scope: ManifestScope,
    pub entries: Vec<FinetuneEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// The last iteration's selections met the no-change ratio.
    NoFurtherRevisions,
    /// No unrevised pairs remain.
    PoolEmpty,
    /// The iteration cap was reached.
    IterationCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "decision", content = "reason")]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Genesis {
        campaign_id: String,
        config: CampaignConfig,
        volumes: Vec<VolumeEntry>,
        classes: Vec<ClassId>,
        model_tag: String,
    },
    ConfigUpdated {
        config: CampaignConfig,
    },
    IterationOpened {
        iteration: u32,
        fraction: f64,
        sizes: Vec<SizeRecord>,
        selections: Vec<Selection>,
    },
    RevisionRecorded {
        record: RevisionRecord,
    },
    ManifestExported {
        manifest: FinetuneManifest,
    },
    IterationAdvanced {
        iteration: u32,
        model_tag: String,
    },
    CampaignStopped {
        reason: StopReason,
    },
    SignedOff {
        signoff: SignOff,
    },
}

/// One line of the event log: `{seq, kind, payload, ts}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(flatten)]
    pub body: EventBody,
    pub ts: u64,
}

/// Source of event timestamps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Clock {
    /// Milliseconds since the Unix epoch.
    #[default]
    System,
    /// The event's own sequence number; makes logs reproducible.
    Logical,
}

impl Clock {
    fn now(self, seq: u64) -> u64 {
        match self {
            Clock::System => SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0),
            Clock::Logical => seq,
        }
    }
}

/// A campaign: its event log and the state folded from it.
#[derive(Debug, Clone)]
pub struct Campaign {
    state: CampaignState,
    events: Vec<Event>,
    clock: Clock,
}

impl Campaign {
    pub fn create(
        campaign_id: impl Into<String>,
        config: CampaignConfig,
        volumes: Vec<VolumeEntry>,
        classes: Vec<ClassId>,
        model_tag: impl Into<String>,
        clock: Clock,
    ) -> Result<Self> {
        let campaign_id = campaign_id.into();
        let model_tag = model_tag.into();
        if volumes.is_empty() {
            return Err(CampaignError::EmptyManifest);
        }
        config.validate()?;
        if campaign_id.is_empty() {
            return Err(CampaignError::BadConfig("campaign id must be non-empty".into()));
        }
        if model_tag.is_empty() {
            return Err(CampaignError::EmptyModelTag);
        }
        if classes.is_empty() {
            return Err(CampaignError::BadConfig("no classes".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &classes {
            if !seen.insert(*c) {
                return Err(CampaignError::BadConfig(format!("class {c} listed twice")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &volumes {
            if v.id.is_empty() {
                return Err(CampaignError::BadConfig("empty volume id".into()));
            }
            if !seen.insert(v.id.as_str()) {
                return Err(CampaignError::BadConfig(format!("duplicate volume id {:?}", v.id)));
            }
            if v.dims.contains(&0) {
                return Err(CampaignError::BadConfig(format!("volume {:?} has zero-sized dims", v.id)));
            }
        }
        let genesis = Event {
            seq: 0,
            body: EventBody::Genesis { campaign_id, config, volumes, classes, model_tag },
            ts: clock.now(0),
        };
        let state = CampaignState::from_genesis(&genesis)?;
        Ok(Self { state, events: vec![genesis], clock })
    }

    /// Rebuild a campaign by folding `events` from genesis.
    pub fn replay(events: Vec<Event>, clock: Clock) -> Result<Self> {
        let first = events.first().ok_or_else(|| CampaignError::Replay("empty event log".into()))?;
        let mut state = CampaignState::from_genesis(first)?;
        for e in &events[1..] {
            state.apply(e)?;
        }
        Ok(Self { state, events, clock })
    }

    /// Resume from a snapshot plus the events recorded after it. `events` is
    /// the full log; only entries past the snapshot position are applied.
    pub fn resume(snapshot: CampaignState, events: Vec<Event>, clock: Clock) -> Result<Self> {
        let mut state = snapshot;
        if events.len() as u64 <= state.last_seq {
            return Err(CampaignError::Replay(format!(
                "snapshot at seq {} is ahead of a log with {} events",
                state.last_seq,
                events.len()
            )));
        }
        for e in &events[(state.last_seq + 1) as usize..] {
            state.apply(e)?;
        }
        Ok(Self { state, events, clock })
    }

    pub fn state(&self) -> &CampaignState {
        &self.state
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    /// Deterministic JSON rendering of the state.
    pub fn snapshot_json(&self) -> String {
        serde_json::to_string(&self.state).expect("campaign state serializes")
    }

    fn emit(&mut self, body: EventBody) -> Result<()> {
        let seq = self.events.len() as u64;
        let event = Event { seq, body, ts: self.clock.now(seq) };
        self.state.apply(&event)?;
        self.events.push(event);
        Ok(())
    }

    fn ensure_not_stopped(&self) -> Result<()> {
        match self.state.stopped {
            Some(reason) => Err(CampaignError::CampaignStopped(reason)),
            None => Ok(()),
        }
    }

    pub fn update_config(&mut self, config: CampaignConfig) -> Result<()> {
        config.validate()?;
        if let Some(open) = &self.state.open {
            return Err(CampaignError::IterationStillOpen(open.iteration));
        }
        self.emit(EventBody::ConfigUpdated { config })
    }

    /// Compute attention sizes for every pool pair and open the iteration.
    /// Predictions for volumes outside the pool are ignored.
    pub fn open_iteration(&mut self, predictions: &[EnsemblePrediction]) -> Result<BTreeMap<ClassId, Selection>> {
        if let Some(open) = &self.state.open {
            return Err(CampaignError::IterationAlreadyOpen(open.iteration));
        }
        self.ensure_not_stopped()?;
        let by_volume: BTreeMap<&str, &EnsemblePrediction> =
            predictions.iter().map(|p| (p.volume_id(), p)).collect();
        let mut jobs: Vec<(&EnsemblePrediction, Vec<ClassId>)> = Vec::new();
        for (volume, pairs) in &self.state.pairs {
            let classes: Vec<ClassId> =
                pairs.iter().filter(|(_, s)| s.status == PairStatus::Unrevised).map(|(c, _)| *c).collect();
            if classes.is_empty() {
                continue;
            }
            let ens = by_volume
                .get(volume.as_str())
                .ok_or_else(|| CampaignError::MissingPredictions { volume: volume.clone(), class: None })?;
            if ens.dims() != self.state.volumes[volume] {
                return Err(CampaignError::DimMismatch { expected: self.state.volumes[volume], actual: ens.dims() });
            }
            if let Some(c) = classes.iter().find(|c| !ens.class_ids().contains(c)) {
                return Err(CampaignError::MissingPredictions { volume: volume.clone(), class: Some(*c) });
            }
            jobs.push((ens, classes));
        }
        let params = self.state.config.attention;
        let records = jobs
            .par_iter()
            .map(|(ens, classes)| attention_records(ens, Some(classes), &params))
            .collect::<Result<Vec<_>, _>>()?;
        let sizes: Vec<SizeRecord> = records
            .into_iter()
            .flatten()
            .map(|r| SizeRecord { volume: r.volume_id, class: r.class_id, size: r.attention_size })
            .collect();
        self.open_iteration_with_sizes(&sizes)
    }

    /// Open the iteration from precomputed attention sizes. Every pool pair
    /// needs a size; sizes for pairs outside the pool are dropped.
    pub fn open_iteration_with_sizes(&mut self, sizes: &[SizeRecord]) -> Result<BTreeMap<ClassId, Selection>> {
        if let Some(open) = &self.state.open {
            return Err(CampaignError::IterationAlreadyOpen(open.iteration));
        }
        self.ensure_not_stopped()?;
        let mut lookup: BTreeMap<(&str, ClassId), f64> = BTreeMap::new();
        for r in sizes {
            let pair = self
                .state
                .pairs
                .get(&r.volume)
                .ok_or_else(|| CampaignError::UnknownVolume(r.volume.clone()))?;
            if !pair.contains_key(&r.class) {
                return Err(CampaignError::UnknownClass(r.class));
            }
            lookup.insert((r.volume.as_str(), r.class), r.size);
        }
        let iteration = self.state.iteration;
        let fraction = self.state.config.fraction;
        let mut pool_sizes = Vec::new();
        let mut selections = BTreeMap::new();
        for &class in &self.state.classes {
            let mut ranked = Vec::new();
            for volume in self.state.pool(class) {
                let size = *lookup
                    .get(&(volume, class))
                    .ok_or_else(|| CampaignError::MissingPredictions { volume: volume.to_owned(), class: Some(class) })?;
                ranked.push((volume, size));
                pool_sizes.push(SizeRecord { volume: volume.to_owned(), class, size });
            }
            let selection = if ranked.is_empty() {
                Selection { class, fraction, iteration, selected: Vec::new() }
            } else {
                select_top(&build_priority_list(ranked, class)?, fraction, iteration)?
            };
            selections.insert(class, selection);
        }
        self.emit(EventBody::IterationOpened {
            iteration,
            fraction,
            sizes: pool_sizes,
            selections: selections.values().cloned().collect(),
        })?;
        Ok(selections)
    }

    /// Record one verdict. `mask` must be present iff the verdict is
    /// `revised`; it is checked against the volume dims and for 0/1 values.
    pub fn record_revision(&mut self, mut rec: RevisionRecord, mask: Option<&VoxelGrid>) -> Result<RevisionRecord> {
        let open = self.state.open.as_ref().ok_or(CampaignError::NoOpenIteration)?;
        if rec.iteration != open.iteration {
            return Err(CampaignError::WrongIteration { open: open.iteration, got: rec.iteration });
        }
        let dims = *self.state.volumes.get(&rec.volume).ok_or_else(|| CampaignError::UnknownVolume(rec.volume.clone()))?;
        if !self.state.classes.contains(&rec.class) {
            return Err(CampaignError::UnknownClass(rec.class));
        }
        let not_selected = || CampaignError::NotSelected { volume: rec.volume.clone(), class: rec.class };
        if !open.is_selected(&rec.volume, rec.class) {
            return Err(not_selected());
        }
        match self.state.pairs[&rec.volume][&rec.class].status {
            PairStatus::Selected => {}
            PairStatus::Revised | PairStatus::AcceptedNoChange => {
                return Err(CampaignError::DuplicateRevision { volume: rec.volume.clone(), class: rec.class })
            }
            PairStatus::Unrevised | PairStatus::SignedOff => return Err(not_selected()),
        }
        match (rec.verdict, mask) {
            (Verdict::Revised, None) => return Err(CampaignError::MaskRequired),
            (Verdict::Revised, Some(mask)) => {
                if rec.mask_ref.as_deref().is_none_or(str::is_empty) {
                    return Err(CampaignError::MaskRequired);
                }
                if mask.dims() != dims {
                    return Err(CampaignError::DimMismatch { expected: dims, actual: mask.dims() });
                }
                match mask.data() {
                    VoxelData::U8(v) if v.iter().all(|&x| x <= 1) => {}
                    _ => return Err(CampaignError::NonBinaryMask),
                }
            }
            (Verdict::NoChange, Some(_)) => return Err(CampaignError::UnexpectedMask),
            (Verdict::NoChange, None) => {
                if rec.mask_ref.is_some() {
                    return Err(CampaignError::UnexpectedMask);
                }
            }
        }
        rec.timestamp = self.clock.now(self.events.len() as u64);
        self.emit(EventBody::RevisionRecorded { record: rec.clone() })?;
        Ok(rec)
    }

    /// Export the fine-tune manifest with the configured scope.
    pub fn export_finetune_manifest(&mut self) -> Result<FinetuneManifest> {
        let scope = self.state.config.manifest_scope;
        self.export_finetune_manifest_with(scope)
    }

    /// Export the fine-tune manifest for the open iteration. Exporting again
    /// returns the stored manifest without a new event.
    pub fn export_finetune_manifest_with(&mut self, scope: ManifestScope) -> Result<FinetuneManifest> {
        let open = self.state.open.as_ref().ok_or(CampaignError::NoOpenIteration)?;
        if let Some(m) = &open.manifest {
            return Ok(m.clone());
        }
        let unresolved = self.state.unresolved();
        if !unresolved.is_empty() {
            return Err(CampaignError::IterationIncomplete { unresolved });
        }
        let iteration = open.iteration;
        let entries = self
            .state
            .live_revisions()
            .filter(|r| scope == ManifestScope::Cumulative || r.iteration == iteration)
            .map(|r| FinetuneEntry {
                volume: r.volume.clone(),
                class: r.class,
                mask_path: r.mask_ref.clone().unwrap_or_default(),
                annotator: r.annotator.clone(),
                iteration: r.iteration,
            })
            .collect();
        let manifest = FinetuneManifest { iteration, model_tag: self.state.model_tag.clone(), scope, entries };
        self.emit(EventBody::ManifestExported { manifest: manifest.clone() })?;
        Ok(manifest)
    }

    /// Close the open iteration and record the fine-tuned model's tag.
    pub fn advance_iteration(&mut self, model_tag: impl Into<String>) -> Result<&CampaignState> {
        let model_tag = model_tag.into();
        let open = self.state.open.as_ref().ok_or(CampaignError::NoOpenIteration)?;
        if open.manifest.is_none() {
            return Err(CampaignError::ManifestNotExported(open.iteration));
        }
        if model_tag.is_empty() {
            return Err(CampaignError::EmptyModelTag);
        }
        let iteration = open.iteration;
        self.emit(EventBody::IterationAdvanced { iteration, model_tag })?;
        Ok(&self.state)
    }

    /// Evaluate the stop rule without recording anything.
    pub fn stop_decision(&self) -> StopDecision {
        stop_decision(&self.state)
    }

    /// Evaluate the stop rule and record a stop event when it fires.
    pub fn check_stop(&mut self) -> Result<StopDecision> {
        if let Some(open) = &self.state.open {
            return Err(CampaignError::IterationStillOpen(open.iteration));
        }
        let decision = self.stop_decision();
        if let (StopDecision::Stop(reason), None) = (decision, self.state.stopped) {
            self.emit(EventBody::CampaignStopped { reason })?;
        }
        Ok(decision)
    }

    /// Senior review of a stopped campaign.
    pub fn final_signoff(&mut self, signoff: SignOff) -> Result<()> {
        if self.state.stopped.is_none() {
            return Err(CampaignError::CampaignNotStopped);
        }
        if signoff.reviewer.is_empty() {
            return Err(CampaignError::BadConfig("reviewer must be non-empty".into()));
        }
        if let SignOffScope::Volumes(vs) = &signoff.scope {
            if let Some(v) = vs.iter().find(|v| !self.state.volumes.contains_key(*v)) {
                return Err(CampaignError::UnknownVolume(v.clone()));
            }
        }
        self.emit(EventBody::SignedOff { signoff })
    }
}

/// The stop rule: a last iteration whose selections met the no-change ratio,
/// an empty pool, or the iteration cap, checked in that order.
pub fn stop_decision(state: &CampaignState) -> StopDecision {
    if state.open.is_some() {
        return StopDecision::Continue;
    }
    if let Some(reason) = state.stopped {
        return StopDecision::Stop(reason);
    }
    if let Some(last) = &state.stop_basis {
        if last.selected > 0 {
            let ratio = last.no_change as f64 / last.selected as f64;
            if ratio >= state.config.stop_ratio - 1e-12 {
                return StopDecision::Stop(StopReason::NoFurtherRevisions);
            }
        }
    }
    if state.pool_size() == 0 {
        return StopDecision::Stop(StopReason::PoolEmpty);
    }
    if state.iteration >= state.config.max_iterations {
        return StopDecision::Stop(StopReason::IterationCap);
    }
    StopDecision::Continue
}

#[cfg(test)]
mod tests;
