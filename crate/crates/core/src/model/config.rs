//! Model configuration: variant flags, extractor widths, window ratios.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// The ablation variants: prototype matching only, plus a base-class
/// segmentation head, plus the affine alignment head, or the fully
/// supervised upper bound (extractor + segmentation head over all classes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "3d_seg")]
    ThreeDSeg,
    #[serde(rename = "3d_seg_align")]
    ThreeDSegAlign,
    Supervised,
}

impl Variant {
    pub fn use_seg_head(self) -> bool {
        !matches!(self, Variant::ThreeD)
    }

    pub fn use_align_head(self) -> bool {
        matches!(self, Variant::ThreeDSegAlign)
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "3d" => Ok(Variant::ThreeD),
            "3d_seg" => Ok(Variant::ThreeDSeg),
            "3d_seg_align" => Ok(Variant::ThreeDSegAlign),
            "supervised" => Ok(Variant::Supervised),
            other => Err(ModelError::ConfigMismatch(format!(
                "unknown variant {other:?} (expected 3d | 3d_seg | 3d_seg_align | supervised)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::ThreeD => "3d",
            Variant::ThreeDSeg => "3d_seg",
            Variant::ThreeDSegAlign => "3d_seg_align",
            Variant::Supervised => "supervised",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Feature channels C_f produced by the extractor.
    pub feat_channels: usize,
    /// Encoder widths per level; the decoder mirrors them.
    pub widths: Vec<usize>,
    /// Downsample once before the first conv and upsample the features back
    /// at the end (counts toward the depth).
    pub stem_pool: bool,
    /// Local-prototype window ratios per axis.
    pub window_ratios: [f64; 3],
    pub seg_hidden: usize,
    /// Conv widths of the affine head trunk.
    pub affine_channels: [usize; 2],
    /// Hidden width of the affine head regressor.
    pub affine_hidden: usize,
    /// Foreground classes of the segmentation head (base classes for the
    /// episodic variants, all classes for the supervised one).
    pub num_classes: usize,
    pub instance_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl ModelConfig {
    /// Desk scale: depth-3 extractor (stem pool + two encoder pools),
    /// widths (16, 32, 64), C_f = 32.
    pub fn desk_default() -> Self {
        Self {
            variant: Variant::ThreeD,
            feat_channels: 32,
            widths: vec![16, 32, 64],
            stem_pool: true,
            window_ratios: [0.25, 0.25, 0.5],
            seg_hidden: 16,
            affine_channels: [8, 16],
            affine_hidden: 32,
            num_classes: 6,
            instance_norm: true,
        }
    }

    /// Acquisition-scale configuration (256x256x48 volumes, window ratios
    /// 1/8, 1/8, 1/4); widths chosen to land near 5.7M trainable parameters.
    pub fn paper_scale() -> Self {
        Self {
            variant: Variant::ThreeDSegAlign,
            feat_channels: 32,
            widths: vec![40, 80, 160, 320],
            stem_pool: true,
            window_ratios: [0.125, 0.125, 0.25],
            seg_hidden: 32,
            affine_channels: [16, 32],
            affine_hidden: 64,
            num_classes: 6,
            instance_norm: true,
        }
    }

    /// Number of 2x downsamplings between the input and the deepest level.
    pub fn depth(&self) -> usize {
        self.stem_pool as usize + self.widths.len().saturating_sub(1)
    }

    /// Every spatial dim must be divisible by this for a forward pass.
    pub fn required_divisor(&self) -> usize {
        let ext = 1usize << self.depth();
        // the affine head pools three times
        let aff = if self.variant.use_align_head() { 8 } else { 1 };
        ext.max(aff)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.is_empty() || self.feat_channels == 0 {
            return Err(ModelError::ConfigMismatch(
                "widths and feat_channels must be nonzero".into(),
            ));
        }
        if self.num_classes == 0 && self.variant.use_seg_head() {
            return Err(ModelError::ConfigMismatch(
                "segmentation head needs num_classes >= 1".into(),
            ));
        }
        for r in self.window_ratios {
            if !(0.0 < r && r <= 1.0) {
                return Err(ModelError::ConfigMismatch(format!(
                    "window ratios must lie in (0, 1], got {:?}",
                    self.window_ratios
                )));
            }
        }
        Ok(())
    }

    pub fn check_shape(&self, shape: [usize; 3]) -> Result<(), ModelError> {
        let div = self.required_divisor();
        if shape.iter().any(|&s| s % div != 0) {
            return Err(ModelError::ShapeError(format!(
                "shape {shape:?} not divisible by {div} required by this config"
            )));
        }
        Ok(())
    }
}
