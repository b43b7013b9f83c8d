//! Architecture configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::batchnorm::{DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};

/// Named dilation sets of the context block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DilationPreset {
    /// {1, 2, 4, 8}
    Default,
    /// {1, 1, 1, 1}: no dilation, the plain residual U-Net control.
    Abl1,
    /// {1, 2, 3, 4}: linear progression.
    Abl2,
    /// {1, 4, 8, 16}: oversized rates.
    Abl3,
}

impl DilationPreset {
    pub const ALL: [DilationPreset; 4] = [
        DilationPreset::Default,
        DilationPreset::Abl1,
        DilationPreset::Abl2,
        DilationPreset::Abl3,
    ];

    pub fn rates(self) -> [usize; 4] {
        match self {
            DilationPreset::Default => [1, 2, 4, 8],
            DilationPreset::Abl1 => [1, 1, 1, 1],
            DilationPreset::Abl2 => [1, 2, 3, 4],
            DilationPreset::Abl3 => [1, 4, 8, 16],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DilationPreset::Default => "default",
            DilationPreset::Abl1 => "abl-1",
            DilationPreset::Abl2 => "abl-2",
            DilationPreset::Abl3 => "abl-3",
        }
    }
}

impl fmt::Display for DilationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DilationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DilationPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset '{s}' (default|abl-1|abl-2|abl-3)")))
    }
}

fn default_bn_eps() -> f64 {
    DEFAULT_BN_EPS
}

fn default_bn_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

fn default_true() -> bool {
    true
}

/// Fully determines the architecture and its parameter count.
///
/// `patch_shape` is in (depth, height, width) order, so the 128x128x64
/// training patch is `[64, 128, 128]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub encoder_widths: [usize; 3],
    pub bottleneck_width: usize,
    pub context_branch_width: usize,
    pub dilation_rates: [usize; 4],
    pub patch_shape: [usize; 3],
    pub out_channels: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    /// Keep bottleneck activations for Grad-CAM.
    #[serde(default = "default_true")]
    pub capture_bottleneck: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            encoder_widths: [16, 32, 64],
            bottleneck_width: 128,
            context_branch_width: 32,
            dilation_rates: DilationPreset::Default.rates(),
            patch_shape: [64, 128, 128],
            out_channels: 1,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            capture_bottleneck: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder_widths: [2, 4, 8],
            bottleneck_width: 8,
            context_branch_width: 2,
            patch_shape: [8, 16, 16],
            ..Self::default()
        }
    }

    /// Configuration of the desk-scale phantom training recipe.
    pub fn desk() -> Self {
        ModelConfig {
            encoder_widths: [4, 8, 16],
            bottleneck_width: 32,
            context_branch_width: 8,
            patch_shape: [32, 32, 32],
            ..Self::default()
        }
    }

    pub fn with_preset(mut self, preset: DilationPreset) -> Self {
        self.dilation_rates = preset.rates();
        self
    }

    /// Patch dims after the three poolings.
    pub fn bottleneck_shape(&self) -> [usize; 3] {
        self.patch_shape.map(|v| v / 8)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.encoder_widths.contains(&0) || self.bottleneck_width == 0 || self.context_branch_width == 0 {
            return bad(format!(
                "widths must be positive: encoder {:?}, bottleneck {}, branch {}",
                self.encoder_widths, self.bottleneck_width, self.context_branch_width
            ));
        }
        if self.dilation_rates.contains(&0) {
            return bad(format!("dilation rates must be >= 1, got {:?}", self.dilation_rates));
        }
        if self.patch_shape.iter().any(|&v| v == 0 || v % 8 != 0) {
            return bad(format!("patch dims must be positive multiples of 8, got {:?}", self.patch_shape));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad(format!("bad batch-norm settings eps={} momentum={}", self.bn_eps, self.bn_momentum));
        }
        Ok(())
    }
}
