use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small widths for CPU-scale experiments.
    Desk,
    /// ResNet50-width encoder through the 1/16 stage.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockStyle {
    /// 3×3 → 3×3.
    Basic,
    /// 1×1 reduce → 3×3 → 1×1 expand (×4).
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Nominal input (h, w); both multiples of 32.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    /// Channels of f1..f4.
    pub encoder_widths: [usize; 4],
    /// Residual blocks in the stages producing f2, f3, f4.
    pub encoder_blocks: [usize; 3],
    pub encoder_style: BlockStyle,
    pub dcp_channels: usize,
    pub decoder_widths: [usize; 4],
    pub cbam_reduction: usize,
    pub use_dcp: bool,
    pub use_cbam: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            input_size: (64, 64),
            in_channels: 3,
            encoder_widths: [16, 32, 64, 128],
            encoder_blocks: [1, 1, 1],
            encoder_style: BlockStyle::Basic,
            dcp_channels: 16,
            decoder_widths: [64, 32, 16, 8],
            cbam_reduction: 4,
            use_dcp: true,
            use_cbam: true,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            input_size: (256, 256),
            in_channels: 3,
            encoder_widths: [64, 256, 512, 1024],
            encoder_blocks: [3, 4, 6],
            encoder_style: BlockStyle::Bottleneck,
            dcp_channels: 64,
            decoder_widths: [128, 128, 128, 128],
            cbam_reduction: 16,
            use_dcp: true,
            use_cbam: true,
        }
    }

    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn with_ablation(mut self, use_dcp: bool, use_cbam: bool) -> Self {
        self.use_dcp = use_dcp;
        self.use_cbam = use_cbam;
        self
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    /// Channels of the fused bottleneck (the four level outputs concatenated).
    pub fn bottleneck_channels(&self) -> usize {
        4 * self.dcp_channels
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h % 32 != 0 || w % 32 != 0 || h < 64 || w < 64 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be multiples of 32 and at least 64"
            )));
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .chain([&self.dcp_channels, &self.in_channels, &self.cbam_reduction]);
        if widths.clone().any(|&v| v == 0) {
            return Err(Error::Config("all widths must be at least 1".into()));
        }
        if self.encoder_style == BlockStyle::Bottleneck && self.encoder_widths[1..].iter().any(|w| w % 4 != 0) {
            return Err(Error::Config("bottleneck stage widths must be divisible by 4".into()));
        }
        if self.use_cbam {
            for &c in &self.decoder_widths {
                if c < self.cbam_reduction {
                    return Err(Error::ReductionExceedsChannels {
                        ratio: self.cbam_reduction,
                        channels: c,
                    });
                }
            }
        }
        Ok(())
    }

    /// Short label of the ablation arm.
    pub fn arm_label(&self) -> &'static str {
        match (self.use_dcp, self.use_cbam) {
            (true, true) => "full",
            (false, true) => "no-dcp",
            (true, false) => "no-attention",
            (false, false) => "no-dcp-no-attention",
        }
    }
}
