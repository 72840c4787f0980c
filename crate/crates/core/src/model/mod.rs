//! The unified model: semantic encoder, latent autoencoder, projections into a
//! shared width, a two-expert transformer backbone over one token sequence,
//! and the text and velocity heads.

mod image;
mod params;
mod sequence;
mod unified;

pub use image::{patchify, unpatchify, Image};
pub use params::{Binder, Param, ParamGroup, ParamId, ParamStore};
pub use sequence::{
    build_sequence, Expert, ModalityTag, PositionScheme, SequenceMode, SequenceOptions, TokenSequence,
};
pub use unified::{sinusoidal, SegmentInputs, UnifiedModel};

use crate::config::KvConfig;
use crate::error::{bail, Result};
use std::str::FromStr;

/// Whether the generation loss may update the understanding expert through
/// the text keys and values that latent queries read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionGradient {
    /// Latent queries read detached copies of understanding-side keys/values.
    Detached,
    /// Gradients flow through the shared attention in both directions.
    Shared,
}

impl FromStr for ConditionGradient {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detached" => Ok(Self::Detached),
            "shared" => Ok(Self::Shared),
            _ => bail!(Config, "condition gradient must be `detached` or `shared`, got {s:?}"),
        }
    }
}

impl std::fmt::Display for ConditionGradient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Detached => "detached",
            Self::Shared => "shared",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Backbone width.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    /// Side of the square images the encoders consume.
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub vit_dim: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vae_patch: usize,
    pub latent_dim: usize,
    pub ln_eps: f64,
    pub sequence: SequenceOptions,
    pub condition_gradient: ConditionGradient,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            heads: 4,
            mlp_hidden: 128,
            vocab: 64,
            image_size: 16,
            channels: 1,
            patch: 4,
            vit_dim: 32,
            vit_depth: 2,
            vit_heads: 2,
            vae_patch: 4,
            latent_dim: 8,
            ln_eps: 1e-5,
            sequence: SequenceOptions::default(),
            condition_gradient: ConditionGradient::Detached,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("vit_dim", self.vit_dim),
            ("vit_heads", self.vit_heads),
            ("vae_patch", self.vae_patch),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                bail!(Config, "model.{name} must be positive");
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            bail!(Config, "width {} not divisible by {} heads", self.width, self.heads);
        }
        if !self.vit_dim.is_multiple_of(self.vit_heads) {
            bail!(Config, "vit_dim {} not divisible by {} heads", self.vit_dim, self.vit_heads);
        }
        if !self.image_size.is_multiple_of(self.patch) || !self.image_size.is_multiple_of(self.vae_patch) {
            bail!(Config, "image_size {} must be divisible by both patch sizes", self.image_size);
        }
        if self.channels != 1 && self.channels != 3 {
            bail!(Config, "channels must be 1 or 3");
        }
        if !(self.ln_eps > 0.0) {
            bail!(Config, "ln_eps must be positive");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn n_latents(&self) -> usize {
        (self.image_size / self.vae_patch).pow(2)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("width", self.width);
        c.set("depth", self.depth);
        c.set("heads", self.heads);
        c.set("mlp_hidden", self.mlp_hidden);
        c.set("vocab", self.vocab);
        c.set("image_size", self.image_size);
        c.set("channels", self.channels);
        c.set("patch", self.patch);
        c.set("vit_dim", self.vit_dim);
        c.set("vit_depth", self.vit_depth);
        c.set("vit_heads", self.vit_heads);
        c.set("vae_patch", self.vae_patch);
        c.set("latent_dim", self.latent_dim);
        c.set("ln_eps", self.ln_eps);
        c.set("vae_sees_vit", self.sequence.vae_sees_vit);
        c.set(
            "positions",
            match self.sequence.positions {
                PositionScheme::Global => "global",
                PositionScheme::PerSegment => "per_segment",
            },
        );
        c.set("condition_gradient", self.condition_gradient);
        c.set("init_seed", self.init_seed);
        c
    }

    /// Starts from the defaults and applies the keys present in `c`.
    pub fn from_kv(c: &KvConfig) -> Result<Self> {
        let mut m = Self::default();
        c.apply("width", &mut m.width)?;
        c.apply("depth", &mut m.depth)?;
        c.apply("heads", &mut m.heads)?;
        c.apply("mlp_hidden", &mut m.mlp_hidden)?;
        c.apply("vocab", &mut m.vocab)?;
        c.apply("image_size", &mut m.image_size)?;
        c.apply("channels", &mut m.channels)?;
        c.apply("patch", &mut m.patch)?;
        c.apply("vit_dim", &mut m.vit_dim)?;
        c.apply("vit_depth", &mut m.vit_depth)?;
        c.apply("vit_heads", &mut m.vit_heads)?;
        c.apply("vae_patch", &mut m.vae_patch)?;
        c.apply("latent_dim", &mut m.latent_dim)?;
        c.apply("ln_eps", &mut m.ln_eps)?;
        c.apply("vae_sees_vit", &mut m.sequence.vae_sees_vit)?;
        if let Some(p) = c.raw("positions") {
            m.sequence.positions = match p {
                "global" => PositionScheme::Global,
                "per_segment" => PositionScheme::PerSegment,
                other => bail!(Config, "positions must be `global` or `per_segment`, got {other:?}"),
            };
        }
        c.apply("condition_gradient", &mut m.condition_gradient)?;
        c.apply("init_seed", &mut m.init_seed)?;
        m.validate()?;
        Ok(m)
    }
}
