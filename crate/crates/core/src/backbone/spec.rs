use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, DEFAULT_EPS};
use crate::block::BlockConfig;
use crate::error::{domain, Error, Result};
use crate::nn::ConvGeometry;

pub const STAGE_CHANNELS: [usize; 4] = [96, 160, 320, 512];
pub const STAGE_PATCH: [usize; 4] = [4, 2, 2, 2];
pub const STAGE_HEADS: [usize; 4] = [1, 2, 5, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    /// Downsampling factor of the stage's patch embedding.
    pub patch_size: usize,
    pub fr_ratio: usize,
    pub heads: usize,
    pub expansion: usize,
    /// Number of blocks.
    pub depth: usize,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.fr_ratio == 0 || self.expansion == 0 {
            return Err(domain("stage fields must be positive"));
        }
        if !self.channels.is_multiple_of(self.fr_ratio * self.heads) {
            return Err(domain(format!(
                "stage with {} channels cannot split into {} heads after reduction by {}",
                self.channels, self.heads, self.fr_ratio
            )));
        }
        if !matches!(self.patch_size, 2 | 4) {
            return Err(domain(format!("patch size must be 2 or 4, got {}", self.patch_size)));
        }
        Ok(())
    }
}

/// Named four-stage pyramid configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
}

impl VariantSpec {
    fn standard(name: &str, depths: [usize; 4], expansions: [usize; 4]) -> Self {
        let stages = (0..4)
            .map(|i| StageSpec {
                channels: STAGE_CHANNELS[i],
                patch_size: STAGE_PATCH[i],
                fr_ratio: 2,
                heads: STAGE_HEADS[i],
                expansion: expansions[i],
                depth: depths[i],
            })
            .collect();
        Self {
            name: name.to_string(),
            stages,
        }
    }

    pub fn tiny() -> Self {
        Self::standard("tiny", [2, 2, 2, 2], [8, 8, 4, 4])
    }

    pub fn small() -> Self {
        Self::standard("small", [3, 3, 9, 3], [8, 8, 4, 4])
    }

    pub fn medium() -> Self {
        Self::standard("medium", [3, 3, 27, 3], [8, 8, 4, 4])
    }

    pub fn large() -> Self {
        Self::standard("large", [4, 4, 36, 4], [4, 4, 4, 4])
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" | "t" => Ok(Self::tiny()),
            "small" | "s" => Ok(Self::small()),
            "medium" | "m" => Ok(Self::medium()),
            "large" | "l" => Ok(Self::large()),
            _ => Err(Error::UnknownVariant(name.to_string())),
        }
    }

    pub const NAMES: [&'static str; 4] = ["tiny", "small", "medium", "large"];

    /// Same layout with every stage's feature reduction replaced.
    pub fn with_fr_ratio(mut self, fr_ratio: usize) -> Result<Self> {
        for s in &mut self.stages {
            s.fr_ratio = fr_ratio;
        }
        self.validate()?;
        Ok(self)
    }

    /// Channels divided by `channel_div` and depths replaced, for desk-scale runs.
    pub fn scaled(&self, channel_div: usize, depths: &[usize]) -> Result<Self> {
        if depths.len() != self.stages.len() || channel_div == 0 {
            return Err(domain("scaled variant needs one depth per stage"));
        }
        let stages = self
            .stages
            .iter()
            .zip(depths)
            .map(|(s, &depth)| StageSpec {
                channels: s.channels / channel_div,
                depth,
                ..*s
            })
            .collect();
        let out = Self {
            name: format!("{}/{}", self.name, channel_div),
            stages,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(domain("a variant needs at least one stage"));
        }
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    /// Product of all patch sizes; input sides must be a multiple of this.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_size).product()
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map(|s| s.channels).unwrap_or(0)
    }
}

/// How each stage turns its input into tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Kernel `2P - 1`, stride `P`, padding `P - 1` (7/4/3 and 3/2/1).
    #[default]
    Overlapping,
    /// Kernel `P`, stride `P`, no padding.
    NonOverlapping,
}

impl PatchMode {
    pub fn geometry(self, patch_size: usize) -> ConvGeometry {
        match self {
            PatchMode::Overlapping => ConvGeometry {
                kernel: 2 * patch_size - 1,
                stride: patch_size,
                padding: patch_size - 1,
            },
            PatchMode::NonOverlapping => ConvGeometry {
                kernel: patch_size,
                stride: patch_size,
                padding: 0,
            },
        }
    }
}

/// Everything needed to materialize a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: VariantSpec,
    pub class_count: usize,
    pub in_channels: usize,
    pub mode: AttentionMode,
    pub fpc: bool,
    #[serde(default)]
    pub post_norm: bool,
    #[serde(default)]
    pub patch_mode: PatchMode,
    pub eps: f64,
}

impl ModelSpec {
    pub fn new(variant: VariantSpec, class_count: usize) -> Self {
        Self {
            variant,
            class_count,
            in_channels: 3,
            mode: AttentionMode::Vicinity2D,
            fpc: true,
            post_norm: false,
            patch_mode: PatchMode::Overlapping,
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_mode(mut self, mode: AttentionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_fpc(mut self, fpc: bool) -> Self {
        self.fpc = fpc;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if self.class_count < 2 {
            return Err(domain("class_count must be at least 2"));
        }
        if self.in_channels == 0 {
            return Err(domain("in_channels must be positive"));
        }
        Ok(())
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        let s = &self.variant.stages[stage];
        BlockConfig {
            dim: s.channels,
            heads: s.heads,
            fr_ratio: s.fr_ratio,
            expansion: s.expansion,
            mode: self.mode,
            fpc: self.fpc,
            post_norm: self.post_norm,
            eps: self.eps,
        }
    }

    pub fn embed_geometry(&self, stage: usize) -> ConvGeometry {
        self.patch_mode.geometry(self.variant.stages[stage].patch_size)
    }

    /// Token grid side of every stage for a square input.
    pub fn stage_sides(&self, image_side: usize) -> Result<Vec<usize>> {
        let stride = self.variant.total_stride();
        if image_side == 0 || !image_side.is_multiple_of(stride) {
            return Err(domain(format!(
                "input side {image_side} must be a positive multiple of {stride}"
            )));
        }
        let mut side = image_side;
        Ok(self
            .variant
            .stages
            .iter()
            .map(|s| {
                side /= s.patch_size;
                side
            })
            .collect())
    }
}
