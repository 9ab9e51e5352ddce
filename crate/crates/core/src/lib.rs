//! atlasforge-core: the algorithms behind a semi-automatic segmentation
//! annotation campaign.
//!
//! The pipeline runs in a loop:
//!
//! 1. An ensemble of segmentation models produces per-class soft predictions
//!    for every volume ([`attention::EnsemblePrediction`]).
//! 2. Each (volume, class) pair gets an attention map that sums ensemble
//!    inconsistency, mean per-model entropy and a multi-class overlap flag
//!    ([`attention`]).
//! 3. Per class, volumes are ranked by attention size and the top fraction is
//!    selected for human revision ([`ranking`]).
//! 4. Revisions, fine-tune manifests, model advances, the stopping rule and
//!    the final senior review are tracked by an event-sourced state machine
//!    ([`campaign`]).
//!
//! [`volgrid`] holds the voxel containers and the NIfTI-1 subset codec,
//! [`labelspace`] the 25-structure class registry, [`metrics`] Dice scoring and
//! leaderboard ordering, and [`simloop`] a synthetic harness that drives the
//! whole loop without real CT data.

pub mod attention;
pub mod campaign;
pub mod labelspace;
pub mod metrics;
pub mod ranking;
pub mod simloop;
pub mod volgrid;

pub use attention::{AttentionMap, AttentionParams, EnsemblePrediction, OverlapScope, SizeWeighting};
pub use campaign::{Campaign, CampaignConfig, CampaignState, PairStatus, RevisionRecord, SignOff, Verdict};
pub use labelspace::{ClassDef, ClassId, Group, LabelGrid};
pub use metrics::{dsc, MetricReport};
pub use ranking::{PriorityEntry, PriorityList, Selection};
pub use volgrid::{Dtype, VoxelData, VoxelGrid};
