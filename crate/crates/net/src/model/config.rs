use serde::{Deserialize, Serialize};

use crate::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Softplus,
}

/// Number of Swin stages (each followed by a 2× patch merge).
pub const SWIN_STAGES: usize = 4;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub unet_feature_channels: usize,
    pub unet_levels: usize,
    pub swin_embed_dim: usize,
    pub swin_depths: Vec<usize>,
    pub swin_heads: Vec<usize>,
    pub window_size: usize,
    pub output_activation: OutputActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 64,
            unet_feature_channels: 16,
            unet_levels: 3,
            swin_embed_dim: 48,
            swin_depths: vec![2, 2, 2, 2],
            swin_heads: vec![3, 6, 12, 24],
            window_size: 7,
            output_activation: OutputActivation::Softplus,
        }
    }
}

impl ModelConfig {
    /// CPU-sized preset for tests: 32³ patches, narrow widths.
    pub fn toy() -> Self {
        ModelConfig {
            patch_size: 32,
            unet_feature_channels: 4,
            swin_embed_dim: 12,
            window_size: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::Config(m));
        if self.swin_depths.len() != SWIN_STAGES || self.swin_heads.len() != SWIN_STAGES {
            return err(format!("swin_depths and swin_heads need {SWIN_STAGES} entries"));
        }
        let down = 1usize << (SWIN_STAGES + 1);
        if self.patch_size == 0 || self.patch_size % down != 0 {
            return err(format!(
                "patch_size {} must be divisible by {down} ({} Swin downsamplings)",
                self.patch_size,
                SWIN_STAGES + 1
            ));
        }
        if self.unet_levels == 0 || self.patch_size % (1 << (self.unet_levels - 1)) != 0 {
            return err(format!("patch_size {} incompatible with {} UNet levels", self.patch_size, self.unet_levels));
        }
        if self.unet_feature_channels == 0 || self.swin_embed_dim == 0 || self.window_size == 0 {
            return err("channel counts and window size must be positive".into());
        }
        for (i, (&h, &d)) in self.swin_heads.iter().zip(&self.swin_depths).enumerate() {
            let dim = self.swin_embed_dim << i;
            if h == 0 || dim % h != 0 {
                return err(format!("stage {i}: width {dim} not divisible by {h} heads"));
            }
            if d == 0 {
                return err(format!("stage {i}: depth must be >= 1"));
            }
        }
        Ok(())
    }

    /// Name of the first field that differs, for mismatch diagnostics.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        if self.patch_size != other.patch_size {
            Some("patch_size")
        } else if self.unet_feature_channels != other.unet_feature_channels {
            Some("unet_feature_channels")
        } else if self.unet_levels != other.unet_levels {
            Some("unet_levels")
        } else if self.swin_embed_dim != other.swin_embed_dim {
            Some("swin_embed_dim")
        } else if self.swin_depths != other.swin_depths {
            Some("swin_depths")
        } else if self.swin_heads != other.swin_heads {
            Some("swin_heads")
        } else if self.window_size != other.window_size {
            Some("window_size")
        } else if self.output_activation != other.output_activation {
            Some("output_activation")
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn rejects_bad_sizes() {
        let c = ModelConfig { patch_size: 48, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(NetError::Config(_))));
        let c = ModelConfig { swin_heads: vec![5, 6, 12, 24], ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { unet_levels: 7, ..ModelConfig::toy() };
        assert!(c.validate().is_err());
    }
}
