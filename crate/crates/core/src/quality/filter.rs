use crate::config::KvConfig;
use crate::data::{Sample, SUPERRES_FACTOR};
use crate::error::{bail, Result};
use std::fmt;

/// Coarse-filter bounds. Both length bounds are inclusive, as is `min_side`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Thresholds {
    pub min_side: usize,
    pub len_min: usize,
    pub len_max: usize,
}

impl Default for Thresholds {
    /// Production values: 128 px, 16 to 1024 characters.
    fn default() -> Self {
        Self { min_side: 128, len_min: 16, len_max: 1024 }
    }
}

impl Thresholds {
    /// Production text bounds with the resolution floor scaled to a corpus of
    /// `image_size` images. The smallest image in such a corpus is the
    /// super-resolution input, `image_size / 4` on a side.
    pub fn desk(image_size: usize) -> Self {
        Self { min_side: (image_size / SUPERRES_FACTOR).max(1), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_side == 0 || self.len_min == 0 || self.len_max == 0 {
            bail!(Parameter, "filter thresholds must be positive");
        }
        if self.len_min > self.len_max {
            bail!(Parameter, "len_min {} exceeds len_max {}", self.len_min, self.len_max);
        }
        Ok(())
    }

    /// Reads `min_side`, `len_min`, `len_max` over `self`.
    pub fn apply_kv(mut self, c: &KvConfig) -> Result<Self> {
        c.apply("min_side", &mut self.min_side)?;
        c.apply("len_min", &mut self.len_min)?;
        c.apply("len_max", &mut self.len_max)?;
        self.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    Resolution,
    Length,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            Self::Resolution => "resolution",
            Self::Length => "length",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Reject(RejectReason),
}

impl Decision {
    pub fn keep(self) -> bool {
        self == Decision::Keep
    }
}

/// Resolution check over every image, then a length check over the record's
/// text (all text fields joined, counted in characters).
pub fn coarse_filter(sample: &Sample, t: &Thresholds) -> Result<Decision> {
    t.validate()?;
    let text = sample.full_text();
    if sample.images().next().is_none() && text.is_empty() {
        bail!(Contract, "sample {} has neither image nor text", sample.id);
    }
    if sample.images().any(|i| i.min_side() < t.min_side) {
        return Ok(Decision::Reject(RejectReason::Resolution));
    }
    if !text.is_empty() {
        let n = text.chars().count();
        if n < t.len_min || n > t.len_max {
            return Ok(Decision::Reject(RejectReason::Length));
        }
    }
    Ok(Decision::Keep)
}
