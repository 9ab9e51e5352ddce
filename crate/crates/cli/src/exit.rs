//! Exit-code contract: 2 for usage and configuration problems, 3 for bad
//! data.

use atlasforge_core::attention::AttentionError;
use atlasforge_core::campaign::{CampaignError, StoreError};
use atlasforge_core::labelspace::LabelError;
use atlasforge_core::metrics::MetricError;
use atlasforge_core::ranking::RankingError;
use atlasforge_core::simloop::SimError;
use atlasforge_core::volgrid::VolError;

use crate::config::UsageError;
use crate::inputs::InputError;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;

/// The code for the first classifiable error in the chain; data error
/// otherwise.
pub fn code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(classify).unwrap_or(DATA)
}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<u8> {
    if e.is::<UsageError>() || e.is::<serde_json::Error>() {
        return Some(USAGE);
    }
    if let Some(e) = e.downcast_ref::<InputError>() {
        return Some(match e {
            InputError::DimMismatch { .. } => DATA,
            _ => USAGE,
        });
    }
    if let Some(e) = e.downcast_ref::<AttentionError>() {
        return Some(attention(e));
    }
    if let Some(e) = e.downcast_ref::<VolError>() {
        return Some(match e {
            VolError::Io { .. } | VolError::Manifest { .. } | VolError::BadAxis(_) => USAGE,
            _ => DATA,
        });
    }
    if let Some(e) = e.downcast_ref::<RankingError>() {
        return Some(match e {
            RankingError::BadFraction(_) | RankingError::Io(_) => USAGE,
            _ => DATA,
        });
    }
    if let Some(e) = e.downcast_ref::<MetricError>() {
        return Some(match e {
            MetricError::MissingVolume { .. } | MetricError::EmptyClassSet | MetricError::EmptyLeaderboard => USAGE,
            _ => DATA,
        });
    }
    if let Some(e) = e.downcast_ref::<SimError>() {
        return Some(match e {
            SimError::ShapeOutOfBounds { .. }
            | SimError::TooFewArchitectures(_)
            | SimError::BadSpec(_)
            | SimError::BadModel { .. } => USAGE,
            SimError::Campaign(c) => campaign(c),
            SimError::Attention(a) => attention(a),
            _ => DATA,
        });
    }
    if let Some(e) = e.downcast_ref::<StoreError>() {
        return Some(match e {
            StoreError::Io { .. } | StoreError::AlreadyExists(_) => USAGE,
            StoreError::Parse { .. } => DATA,
            StoreError::Campaign(c) => campaign(c),
        });
    }
    if let Some(e) = e.downcast_ref::<CampaignError>() {
        return Some(campaign(e));
    }
    if let Some(e) = e.downcast_ref::<LabelError>() {
        return Some(match e {
            LabelError::UnknownClass(_) => USAGE,
            _ => DATA,
        });
    }
    if e.is::<std::io::Error>() {
        return Some(USAGE);
    }
    None
}

fn attention(e: &AttentionError) -> u8 {
    match e {
        AttentionError::TooFewArchitectures(_)
        | AttentionError::BadThreshold(_)
        | AttentionError::UnknownClass(_)
        | AttentionError::NoClasses
        | AttentionError::DuplicateClass(_)
        | AttentionError::DuplicateArchitecture(_) => USAGE,
        _ => DATA,
    }
}

fn campaign(e: &CampaignError) -> u8 {
    match e {
        CampaignError::BadConfig(_) | CampaignError::EmptyManifest | CampaignError::EmptyModelTag => USAGE,
        CampaignError::Attention(a) => attention(a),
        CampaignError::Ranking(RankingError::BadFraction(_)) => USAGE,
        _ => DATA,
    }
}
