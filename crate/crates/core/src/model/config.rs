use crate::error::{CoreError, Result};
use crate::fusion::FusionMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// How the patch search is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Every query patch against every source patch.
    Full,
    /// Block-partitioned search with a bounded source region per block.
    Tiled,
}

/// Patch-search settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    pub mode: SearchMode,
    /// Query-grid block edge for tiled search.
    pub tile: usize,
    /// Extra source-grid positions searched around each block's footprint.
    pub margin: usize,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec { mode: SearchMode::Tiled, tile: 32, margin: 8 }
    }
}

/// Architecture and inference-behavior settings. Two configs with equal
/// fingerprints produce structurally identical parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of the shared matching encoder (all three stages).
    pub match_channels: usize,
    /// Channels of the three reference pyramid stages, fine to coarse.
    pub pyramid_channels: [usize; 3],
    /// Backbone width; must equal the coarsest pyramid width so summation
    /// fusion is well-typed.
    pub backbone_channels: usize,
    /// Residual blocks in the backbone.
    pub backbone_blocks: usize,
    /// Decoder widths after the first and second upsampling stages; the
    /// first must equal the middle pyramid width.
    pub decoder_channels: [usize; 2],
    /// Hidden width of the alignment-prediction head.
    pub align_hidden: usize,
    /// Hidden width of the confidence gate heads.
    pub gate_hidden: usize,
    pub fusion: FusionMode,
    pub search: SearchSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            match_channels: 16,
            pyramid_channels: [16, 32, 64],
            backbone_channels: 64,
            backbone_blocks: 4,
            decoder_channels: [32, 16],
            align_hidden: 32,
            gate_hidden: 8,
            fusion: FusionMode::Adaptive,
            search: SearchSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.match_channels,
            self.pyramid_channels[0],
            self.pyramid_channels[1],
            self.pyramid_channels[2],
            self.backbone_channels,
            self.backbone_blocks,
            self.decoder_channels[0],
            self.decoder_channels[1],
            self.align_hidden,
            self.gate_hidden,
            self.search.tile,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(CoreError::InvalidArgument("model config requires positive sizes".into()));
        }
        if self.backbone_channels != self.pyramid_channels[2] {
            return Err(CoreError::InvalidArgument(format!(
                "backbone width {} must equal coarse pyramid width {} (summation fusion adds them)",
                self.backbone_channels, self.pyramid_channels[2]
            )));
        }
        if self.decoder_channels[0] != self.pyramid_channels[1] {
            return Err(CoreError::InvalidArgument(format!(
                "first decoder width {} must equal middle pyramid width {} (summation fusion adds them)",
                self.decoder_channels[0], self.pyramid_channels[1]
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding; stored in checkpoints so
    /// a file cannot silently load into a differently-shaped model.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
