//! Campaign state as a pure fold over the event log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    CampaignConfig, CampaignError, Event, EventBody, FinetuneManifest, PairRef, RevisionRecord, SignOff,
    SignOffDecision, SignOffScope, StopReason, Verdict, VolumeEntry,
};
use crate::labelspace::ClassId;
use crate::ranking::{build_priority_list, PriorityList, Selection};

/// Review status of one (volume, class) pair.
///
/// Forward path: `unrevised → selected → {revised | accepted-no-change} →
/// signed-off`. A senior approval may also sign off pairs that were never
/// selected; only a reopen moves a pair back to `unrevised`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairStatus {
    Unrevised,
    Selected,
    Revised,
    AcceptedNoChange,
    SignedOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairState {
    pub status: PairStatus,
    /// Iteration in which the pair was last selected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_in: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<RevisionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenIteration {
    pub iteration: u32,
    pub fraction: f64,
    pub priority: BTreeMap<ClassId, PriorityList>,
    pub selections: BTreeMap<ClassId, Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<FinetuneManifest>,
}

impl OpenIteration {
    pub fn selected_pairs(&self) -> impl Iterator<Item = PairRef> + '_ {
        self.selections
            .values()
            .flat_map(|s| s.selected.iter().map(move |v| PairRef { volume: v.clone(), class: s.class }))
    }

    pub fn is_selected(&self, volume: &str, class: ClassId) -> bool {
        self.selections.get(&class).is_some_and(|s| s.selected.iter().any(|v| v == volume))
    }
}

/// Outcome of one closed iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u32,
    pub model_tag: String,
    pub pool_size: usize,
    pub selected: usize,
    pub revised: usize,
    pub no_change: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub campaign_id: String,
    pub iteration: u32,
    pub model_tag: String,
    pub model_lineage: Vec<String>,
    pub config: CampaignConfig,
    pub classes: Vec<ClassId>,
    pub volumes: BTreeMap<String, [usize; 3]>,
    pub pairs: BTreeMap<String, BTreeMap<ClassId, PairState>>,
    pub open: Option<OpenIteration>,
    pub history: Vec<IterationSummary>,
    /// The iteration the stop rule is evaluated against; cleared by a reopen.
    pub stop_basis: Option<IterationSummary>,
    pub stopped: Option<StopReason>,
    pub signoffs: Vec<SignOff>,
    pub last_seq: u64,
}

impl CampaignState {
    pub(super) fn from_genesis(event: &Event) -> Result<Self, CampaignError> {
        let EventBody::Genesis { campaign_id, config, volumes, classes, model_tag } = &event.body else {
            return Err(CampaignError::Replay(format!("event {} is not a genesis event", event.seq)));
        };
        if event.seq != 0 {
            return Err(CampaignError::Replay(format!("genesis has seq {}, expected 0", event.seq)));
        }
        let pair_map = || classes.iter().map(|&c| (c, PairState::fresh())).collect::<BTreeMap<_, _>>();
        Ok(Self {
            campaign_id: campaign_id.clone(),
            iteration: 0,
            model_tag: model_tag.clone(),
            model_lineage: vec![model_tag.clone()],
            config: config.clone(),
            classes: classes.clone(),
            volumes: volumes.iter().map(|VolumeEntry { id, dims }| (id.clone(), *dims)).collect(),
            pairs: volumes.iter().map(|v| (v.id.clone(), pair_map())).collect(),
            open: None,
            history: Vec::new(),
            stop_basis: None,
            stopped: None,
            signoffs: Vec::new(),
            last_seq: 0,
        })
    }

    /// Apply one non-genesis event. Events are trusted to have been validated
    /// by the operation that produced them; only sequencing is checked here.
    pub(super) fn apply(&mut self, event: &Event) -> Result<(), CampaignError> {
        if event.seq != self.last_seq + 1 {
            return Err(CampaignError::Replay(format!("seq {} follows {}", event.seq, self.last_seq)));
        }
        match &event.body {
            EventBody::Genesis { .. } => {
                return Err(CampaignError::Replay(format!("second genesis at seq {}", event.seq)));
            }
            EventBody::ConfigUpdated { config } => self.config = config.clone(),
            EventBody::IterationOpened { iteration, fraction, sizes, selections } => {
                let mut by_class: BTreeMap<ClassId, Vec<(&str, f64)>> = BTreeMap::new();
                for r in sizes {
                    by_class.entry(r.class).or_default().push((r.volume.as_str(), r.size));
                }
                let priority = by_class
                    .into_iter()
                    .map(|(class, sizes)| Ok((class, build_priority_list(sizes, class)?)))
                    .collect::<Result<BTreeMap<_, _>, CampaignError>>()?;
                for s in selections {
                    for v in &s.selected {
                        let pair = self.pair_mut(v, s.class)?;
                        pair.status = PairStatus::Selected;
                        pair.selected_in = Some(*iteration);
                    }
                }
                self.open = Some(OpenIteration {
                    iteration: *iteration,
                    fraction: *fraction,
                    priority,
                    selections: selections.iter().map(|s| (s.class, s.clone())).collect(),
                    manifest: None,
                });
            }
            EventBody::RevisionRecorded { record } => {
                let pair = self.pair_mut(&record.volume, record.class)?;
                pair.status = match record.verdict {
                    Verdict::Revised => PairStatus::Revised,
                    Verdict::NoChange => PairStatus::AcceptedNoChange,
                };
                pair.revision = Some(record.clone());
            }
            EventBody::ManifestExported { manifest } => {
                let open = self.open.as_mut().ok_or_else(|| CampaignError::Replay("manifest without open iteration".into()))?;
                open.manifest = Some(manifest.clone());
            }
            EventBody::IterationAdvanced { iteration, model_tag } => {
                let open = self.open.take().ok_or_else(|| CampaignError::Replay("advance without open iteration".into()))?;
                let mut summary = IterationSummary {
                    iteration: *iteration,
                    model_tag: self.model_tag.clone(),
                    pool_size: open.priority.values().map(|l| l.entries.len()).sum(),
                    selected: 0,
                    revised: 0,
                    no_change: 0,
                };
                for pair in open.selected_pairs() {
                    summary.selected += 1;
                    match self.pairs[&pair.volume][&pair.class].status {
                        PairStatus::Revised => summary.revised += 1,
                        PairStatus::AcceptedNoChange => summary.no_change += 1,
                        _ => {}
                    }
                }
                self.history.push(summary.clone());
                self.stop_basis = Some(summary);
                self.iteration += 1;
                self.model_tag = model_tag.clone();
                self.model_lineage.push(model_tag.clone());
            }
            EventBody::CampaignStopped { reason } => self.stopped = Some(*reason),
            EventBody::SignedOff { signoff } => {
                let volumes: Vec<String> = match &signoff.scope {
                    SignOffScope::Campaign => self.volumes.keys().cloned().collect(),
                    SignOffScope::Volumes(v) => v.clone(),
                };
                for v in &volumes {
                    let pairs = self.pairs.get_mut(v).ok_or_else(|| CampaignError::UnknownVolume(v.clone()))?;
                    for pair in pairs.values_mut() {
                        match signoff.decision {
                            SignOffDecision::Approve => pair.status = PairStatus::SignedOff,
                            SignOffDecision::Reopen => *pair = PairState::fresh(),
                        }
                    }
                }
                if signoff.decision == SignOffDecision::Reopen {
                    self.stopped = None;
                    self.stop_basis = None;
                }
                self.signoffs.push(signoff.clone());
            }
        }
        self.last_seq = event.seq;
        Ok(())
    }

    fn pair_mut(&mut self, volume: &str, class: ClassId) -> Result<&mut PairState, CampaignError> {
        self.pairs
            .get_mut(volume)
            .ok_or_else(|| CampaignError::UnknownVolume(volume.to_owned()))?
            .get_mut(&class)
            .ok_or(CampaignError::UnknownClass(class))
    }

    pub fn pair(&self, volume: &str, class: ClassId) -> Option<&PairState> {
        self.pairs.get(volume)?.get(&class)
    }

    /// Pairs still eligible for ranking: never resolved and not signed off.
    pub fn pool(&self, class: ClassId) -> impl Iterator<Item = &str> + '_ {
        self.pairs
            .iter()
            .filter(move |(_, p)| p.get(&class).is_some_and(|s| s.status == PairStatus::Unrevised))
            .map(|(v, _)| v.as_str())
    }

    pub fn pool_size(&self) -> usize {
        self.pairs.values().flat_map(|p| p.values()).filter(|s| s.status == PairStatus::Unrevised).count()
    }

    pub fn status_counts(&self) -> BTreeMap<PairStatus, usize> {
        let mut counts = BTreeMap::new();
        for s in self.pairs.values().flat_map(|p| p.values()) {
            *counts.entry(s.status).or_insert(0) += 1;
        }
        counts
    }

    /// Selected pairs of the open iteration that have no verdict yet.
    pub fn unresolved(&self) -> Vec<PairRef> {
        let Some(open) = &self.open else { return Vec::new() };
        open.selected_pairs()
            .filter(|p| self.pairs[&p.volume][&p.class].status == PairStatus::Selected)
            .collect()
    }

    /// Revision records whose pair is currently in `revised` status.
    pub fn live_revisions(&self) -> impl Iterator<Item = &RevisionRecord> + '_ {
        self.pairs
            .values()
            .flat_map(|p| p.values())
            .filter(|s| s.status == PairStatus::Revised)
            .filter_map(|s| s.revision.as_ref())
    }

    pub fn summary(&self) -> CampaignSummary {
        CampaignSummary {
            campaign_id: self.campaign_id.clone(),
            iteration: self.iteration,
            model_tag: self.model_tag.clone(),
            open_iteration: self.open.as_ref().map(|o| o.iteration),
            stopped: self.stopped,
            classes: self.classes.clone(),
            volumes: self.volumes.len(),
            status_counts: self.status_counts(),
            unresolved: self.unresolved().len(),
            last_seq: self.last_seq,
        }
    }
}

impl PairState {
    fn fresh() -> Self {
        Self { status: PairStatus::Unrevised, selected_in: None, revision: None }
    }
}

/// Compact view served to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub campaign_id: String,
    pub iteration: u32,
    pub model_tag: String,
    pub open_iteration: Option<u32>,
    pub stopped: Option<StopReason>,
    pub classes: Vec<ClassId>,
    pub volumes: usize,
    pub status_counts: BTreeMap<PairStatus, usize>,
    pub unresolved: usize,
    pub last_seq: u64,
}
