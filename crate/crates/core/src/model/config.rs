//! Model geometry and the named size presets.

use serde::{Deserialize, Serialize};

use crate::ssm::SsmDims;

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Base,
    Large,
    Huge,
    Custom,
}

impl Variant {
    pub const PRESETS: [Variant; 4] = [Variant::Tiny, Variant::Base, Variant::Large, Variant::Huge];

    /// `(num_blocks, embed_dim)` of a preset; `None` for custom.
    pub fn shape(self) -> Option<(usize, usize)> {
        match self {
            Variant::Tiny => Some((2, 35)),
            Variant::Base => Some((12, 35)),
            Variant::Large => Some((4, 79)),
            Variant::Huge => Some((20, 79)),
            Variant::Custom => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Tiny => "tiny",
            Variant::Base => "base",
            Variant::Large => "large",
            Variant::Huge => "huge",
            Variant::Custom => "custom",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Variant::Tiny),
            "base" => Ok(Variant::Base),
            "large" => Ok(Variant::Large),
            "huge" => Ok(Variant::Huge),
            "custom" => Ok(Variant::Custom),
            other => Err(ModelError::Config {
                field: "model.name".into(),
                detail: format!("unknown variant {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    MambaEnhanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub name: Variant,
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub state_size: usize,
    /// `d_inner = expand · embed_dim`.
    pub expand: usize,
    /// Channels per patch.
    pub patch_c: usize,
    /// Samples per patch.
    pub patch_t: usize,
    pub mask_ratio: f64,
    pub head: HeadKind,
    pub head_hidden: usize,
    /// Input window geometry; fixes the positional-embedding size.
    pub channels: usize,
    pub samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Variant::Tiny)
    }
}

impl ModelConfig {
    pub fn preset(variant: Variant) -> Self {
        let (num_blocks, embed_dim) = variant.shape().unwrap_or((2, 35));
        Self {
            name: variant,
            num_blocks,
            embed_dim,
            state_size: crate::DEFAULT_STATE_SIZE,
            expand: 2,
            patch_c: 4,
            patch_t: 32,
            mask_ratio: crate::DEFAULT_MASK_RATIO,
            head: HeadKind::Linear,
            head_hidden: 128,
            channels: 20,
            samples: 1600,
        }
    }

    pub fn custom(num_blocks: usize, embed_dim: usize, state_size: usize) -> Self {
        Self {
            name: Variant::Custom,
            num_blocks,
            embed_dim,
            state_size,
            ..Self::preset(Variant::Tiny)
        }
    }

    pub fn with_input(mut self, channels: usize, samples: usize) -> Self {
        self.channels = channels;
        self.samples = samples;
        self
    }

    pub fn ssm_dims(&self) -> SsmDims {
        SsmDims::standard(self.embed_dim, self.state_size, self.expand)
    }

    /// Channel rows after padding.
    pub fn grid_c(&self) -> usize {
        self.channels.div_ceil(self.patch_c)
    }

    /// Time columns after padding.
    pub fn grid_t(&self) -> usize {
        self.samples.div_ceil(self.patch_t)
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_c() * self.grid_t()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_c * self.patch_t
    }

    /// Checks every field; the error names the offending field path.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, detail: String| {
            Err(ModelError::Config {
                field: format!("model.{field}"),
                detail,
            })
        };
        if let Some((blocks, d)) = self.name.shape() {
            if (blocks, d) != (self.num_blocks, self.embed_dim) {
                return bad(
                    "name",
                    format!(
                        "preset {:?} is ({blocks} blocks, d={d}) but num_blocks={} embed_dim={}; use name = \"custom\"",
                        self.name, self.num_blocks, self.embed_dim
                    ),
                );
            }
        }
        for (field, v) in [
            ("num_blocks", self.num_blocks),
            ("embed_dim", self.embed_dim),
            ("state_size", self.state_size),
            ("expand", self.expand),
            ("patch_c", self.patch_c),
            ("patch_t", self.patch_t),
            ("head_hidden", self.head_hidden),
            ("channels", self.channels),
            ("samples", self.samples),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1".into());
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio", format!("must lie in [0, 1), got {}", self.mask_ratio));
        }
        if self.channels < self.patch_c {
            return bad(
                "channels",
                format!("{} channels cannot fill one {}-channel patch", self.channels, self.patch_c),
            );
        }
        if self.samples < self.patch_t {
            return bad(
                "samples",
                format!("{} samples cannot fill one {}-sample patch", self.samples, self.patch_t),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table() {
        let c = ModelConfig::preset(Variant::Tiny);
        assert_eq!((c.num_blocks, c.embed_dim, c.state_size), (2, 35, 80));
        assert_eq!(ModelConfig::preset(Variant::Base).num_blocks, 12);
        assert_eq!(ModelConfig::preset(Variant::Large).embed_dim, 79);
        assert_eq!(ModelConfig::preset(Variant::Huge).num_blocks, 20);
        assert_eq!((c.patch_c, c.patch_t, c.mask_ratio), (4, 32, 0.6));
    }

    #[test]
    fn default_grid_has_250_tokens() {
        let c = ModelConfig::default();
        assert_eq!((c.grid_c(), c.grid_t(), c.num_tokens()), (5, 50, 250));
        assert_eq!(c.with_input(4, 64).num_tokens(), 2);
    }

    #[test]
    fn validation_names_the_field() {
        let c = ModelConfig {
            mask_ratio: 1.0,
            ..ModelConfig::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("model.mask_ratio"), "{err}");
        let c = ModelConfig::custom(2, 16, 8).with_input(3, 64);
        assert!(c.validate().unwrap_err().to_string().contains("model.channels"));
    }
}
