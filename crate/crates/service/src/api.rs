//! Wire types shared by the server and its clients.

use std::collections::BTreeMap;

use atlasforge_core::campaign::{
    CampaignConfig, CampaignSummary, FinetuneManifest, IterationSummary, PairRef, StopDecision,
};
use atlasforge_core::labelspace::ClassDef;
use atlasforge_core::{ClassId, Dtype, PairStatus, RevisionRecord, Selection, Verdict, VoxelData};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

/// Error body returned with every non-2xx status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryResponse {
    pub sha256: String,
    pub classes: Vec<RegistryClass>,
}

/// Owned mirror of [`ClassDef`] so clients can deserialize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryClass {
    pub id: ClassId,
    pub name: String,
    pub group: atlasforge_core::Group,
}

impl From<&ClassDef> for RegistryClass {
    fn from(d: &ClassDef) -> Self {
        Self { id: d.id, name: d.name.to_owned(), group: d.group }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenIterationView {
    pub iteration: u32,
    pub fraction: f64,
    pub selections: Vec<Selection>,
    pub unresolved: Vec<PairRef>,
    pub manifest_exported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResponse {
    pub summary: CampaignSummary,
    pub config: CampaignConfig,
    pub model_lineage: Vec<String>,
    pub history: Vec<IterationSummary>,
    pub open: Option<OpenIterationView>,
    pub stop: StopDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub campaign_id: String,
    pub iteration: u32,
    pub model_tag: String,
    pub total_pairs: usize,
    pub status_counts: BTreeMap<PairStatus, usize>,
    /// Pairs currently holding a revised mask.
    pub revised_pairs: usize,
    /// `revised_pairs / total_pairs`: share of pairs a human had to redraw.
    pub effort_ratio: f64,
    pub history: Vec<IterationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityItem {
    pub volume: String,
    pub class: ClassId,
    pub rank: usize,
    pub attention_size: f64,
    pub status: PairStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityResponse {
    pub class: ClassId,
    pub iteration: u32,
    pub total: usize,
    pub entries: Vec<PriorityItem>,
}

/// Row-major 2-D array with its element type; `data` is base64 of the
/// little-endian bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub dtype: Dtype,
    pub data: String,
}

impl Layer {
    pub fn encode(data: &VoxelData) -> Self {
        Self { dtype: data.dtype(), data: STANDARD.encode(data.to_le_bytes()) }
    }

    pub fn decode(&self) -> Option<VoxelData> {
        let bytes = STANDARD.decode(&self.data).ok()?;
        VoxelData::from_le_bytes(self.dtype, &bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePayload {
    pub volume: String,
    pub axis: usize,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub layers: BTreeMap<String, Layer>,
    /// Finite (min, max) of the image layer, for display normalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<(f64, f64)>,
}

/// Revised mask upload: uint8 0/1 voxels, x fastest, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskUpload {
    pub dims: [usize; 3],
    pub data: String,
}

impl MaskUpload {
    pub fn new(dims: [usize; 3], voxels: &[u8]) -> Self {
        Self { dims, data: STANDARD.encode(voxels) }
    }

    pub fn voxels(&self) -> Option<Vec<u8>> {
        STANDARD.decode(&self.data).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionRequest {
    pub volume: String,
    pub class: ClassId,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskUpload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionResponse {
    pub record: RevisionRecord,
    pub status: PairStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvanceRequest {
    #[serde(alias = "model-tag")]
    pub model_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvanceResponse {
    pub summary: CampaignSummary,
    pub manifest: FinetuneManifest,
    pub stop: StopDecision,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn u8_layers_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let data = VoxelData::U8(bytes);
            prop_assert_eq!(Layer::encode(&data).decode(), Some(data));
        }

        #[test]
        fn f32_layers_round_trip_bit_exact(bits in proptest::collection::vec(any::<u32>(), 0..256)) {
            let data = VoxelData::F32(bits.iter().map(|&b| f32::from_bits(b)).collect());
            let back = Layer::encode(&data).decode().unwrap();
            let VoxelData::F32(back) = back else { panic!("dtype changed") };
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), bits);
        }
    }

    #[test]
    fn truncated_f32_layer_is_rejected() {
        let layer = Layer { dtype: Dtype::F32, data: STANDARD.encode([0u8; 6]) };
        assert_eq!(layer.decode(), None);
    }

    #[test]
    fn advance_accepts_kebab_key() {
        let req: AdvanceRequest = serde_json::from_str(r#"{"model-tag":"M2"}"#).unwrap();
        assert_eq!(req.model_tag, "M2");
    }
}
