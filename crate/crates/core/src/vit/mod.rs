//! A small patch-token Vision Transformer with a pluggable attention kind
//! per layer.

mod arch;
mod checkpoint;
mod model;
mod params;

pub use arch::ArchDescriptor;
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, CHECKPOINT_SCHEMA};
pub use model::{forward_tape, unfold_patches, ForwardOutput, InheritMode, MiniViT, TapeForward};
pub use params::{LayerParams, ModelParams};

use serde::{Deserialize, Serialize};

use crate::attention::{FeatureMap, FocusingParams};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

/// Feature map used by linear layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinearFeature {
    #[default]
    Relu,
    ReluFocus { p: f64 },
}

impl LinearFeature {
    pub fn feature_map(self) -> FeatureMap {
        match self {
            LinearFeature::Relu => FeatureMap::Relu,
            LinearFeature::ReluFocus { p } => FeatureMap::ReluFocus(FocusingParams { p }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    pub channels: usize,
    pub patch: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub window: usize,
    pub squeeze_kernel: usize,
    pub squeeze_hidden: usize,
    #[serde(default)]
    pub linear_feature: LinearFeature,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            channels: 3,
            patch: 8,
            depth: 6,
            d_model: 64,
            heads: 4,
            mlp_ratio: 4,
            window: 4,
            squeeze_kernel: 3,
            squeeze_hidden: crate::attention::default_hidden(64),
            linear_feature: LinearFeature::Relu,
        }
    }
}

impl ViTConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size[0] / self.patch, self.image_size[1] / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || h == 0 || w == 0 || self.channels == 0 {
            return bad("image size, channels and patch size must be positive".into());
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!("image {h}×{w} not divisible by patch {}", self.patch));
        }
        if self.depth == 0 || self.d_model == 0 || self.mlp_ratio == 0 {
            return bad("depth, d_model and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        let (gh, gw) = self.grid();
        if self.window == 0 || gh % self.window != 0 || gw % self.window != 0 {
            return bad(format!("window {} does not tile the {gh}×{gw} grid", self.window));
        }
        if self.squeeze_kernel % 2 == 0 || self.squeeze_hidden == 0 {
            return bad("squeeze kernel must be odd and its generator width positive".into());
        }
        if let LinearFeature::ReluFocus { p } = self.linear_feature {
            if !(p > 0.0) {
                return bad(format!("focusing power must be positive, got {p}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ViTConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens(), 64);
    }

    #[test]
    fn invalid_configs() {
        let base = ViTConfig::default();
        for c in [
            ViTConfig { patch: 7, ..base.clone() },
            ViTConfig { heads: 3, ..base.clone() },
            ViTConfig { window: 3, ..base.clone() },
            ViTConfig { squeeze_kernel: 2, ..base.clone() },
            ViTConfig { depth: 0, ..base.clone() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ViTConfig::default()).unwrap();
        v["dmodel"] = 3.into();
        assert!(serde_json::from_value::<ViTConfig>(v).is_err());
    }
}
