use crate::error::{bail, Result};
use std::fmt;
use std::str::FromStr;

/// Kind of a token in the shared sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityTag {
    Text,
    Vit,
    Vae,
}

/// Backbone parameter set a token is routed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Expert {
    Understanding,
    Generation,
}

impl Expert {
    pub fn other(self) -> Expert {
        match self {
            Expert::Understanding => Expert::Generation,
            Expert::Generation => Expert::Understanding,
        }
    }
}

impl ModalityTag {
    /// Hard routing: text and semantic-visual tokens go to the understanding
    /// expert, latent-visual tokens to the generation expert.
    pub fn expert(self) -> Expert {
        match self {
            ModalityTag::Text | ModalityTag::Vit => Expert::Understanding,
            ModalityTag::Vae => Expert::Generation,
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModalityTag::Text => "TEXT",
            ModalityTag::Vit => "VIT",
            ModalityTag::Vae => "VAE",
        })
    }
}

impl FromStr for ModalityTag {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TEXT" => Ok(ModalityTag::Text),
            "VIT" => Ok(ModalityTag::Vit),
            "VAE" => Ok(ModalityTag::Vae),
            other => bail!(Routing, "unknown modality tag {other:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceMode {
    /// `[VIT, TEXT]`.
    Understand,
    /// `[TEXT, VAE]`.
    Generate,
    /// `[VIT, TEXT, VAE]`: the text segment is both predicted and used as the
    /// generation condition.
    Interleaved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionScheme {
    /// One running index across the whole sequence.
    Global,
    /// Index restarts at zero in each segment.
    PerSegment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceOptions {
    /// Whether latent tokens may attend to semantic-visual tokens.
    pub vae_sees_vit: bool,
    pub positions: PositionScheme,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self { vae_sees_vit: false, positions: PositionScheme::Global }
    }
}

/// Modality-tagged token layout with its attention mask.
///
/// Embeddings are not stored here; text ids are, and visual token rows are
/// supplied at forward time in segment order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tags: Vec<ModalityTag>,
    text_ids: Vec<u32>,
    positions: Vec<usize>,
    /// Row-major `len × len`; `mask[q * len + k]` admits key `k` for query `q`.
    mask: Vec<bool>,
    flow_time: Option<f64>,
}

impl TokenSequence {
    /// Assembles a sequence from explicit parts, validating the invariants.
    pub fn from_parts(
        tags: Vec<ModalityTag>,
        text_ids: Vec<u32>,
        positions: Vec<usize>,
        mask: Vec<bool>,
        flow_time: Option<f64>,
    ) -> Result<Self> {
        let n = tags.len();
        if n == 0 {
            bail!(Contract, "empty token sequence");
        }
        if positions.len() != n {
            bail!(Shape, "{} positions for {n} tokens", positions.len());
        }
        if mask.len() != n * n {
            bail!(Shape, "mask of length {} is not {n}x{n}", mask.len());
        }
        let n_text = tags.iter().filter(|&&t| t == ModalityTag::Text).count();
        if text_ids.len() != n_text {
            bail!(Shape, "{} text ids for {n_text} TEXT tokens", text_ids.len());
        }
        let has_vae = tags.contains(&ModalityTag::Vae);
        match flow_time {
            Some(t) if !(0.0..=1.0).contains(&t) => bail!(Parameter, "flow time {t} outside [0, 1]"),
            Some(_) if !has_vae => bail!(Contract, "flow time set without VAE tokens"),
            None if has_vae => bail!(Contract, "VAE tokens present without a flow time"),
            _ => {}
        }
        Ok(Self { tags, text_ids, positions, mask, flow_time })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[ModalityTag] {
        &self.tags
    }

    pub fn text_ids(&self) -> &[u32] {
        &self.text_ids
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn flow_time(&self) -> Option<f64> {
        self.flow_time
    }

    pub fn admits(&self, query: usize, key: usize) -> bool {
        self.mask[query * self.len() + key]
    }

    pub fn indices_of(&self, tag: ModalityTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    pub fn count(&self, tag: ModalityTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            bail!(Shape, "replacement mask has length {}, expected {}", mask.len(), self.mask.len());
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn with_flow_time(mut self, t: f64) -> Result<Self> {
        if self.count(ModalityTag::Vae) == 0 {
            bail!(Contract, "flow time set without VAE tokens");
        }
        if !(0.0..=1.0).contains(&t) {
            bail!(Parameter, "flow time {t} outside [0, 1]");
        }
        self.flow_time = Some(t);
        Ok(self)
    }
}

/// Lays out a sequence for `mode` and derives its attention mask.
///
/// Mask rules, applied per (query, key):
/// - VIT queries see every VIT key.
/// - TEXT queries see every earlier-or-equal key that is not VAE (causal over
///   text, full view of the image that precedes it).
/// - VAE queries see every TEXT key and every VAE key, plus VIT keys when
///   `opts.vae_sees_vit` is set.
pub fn build_sequence(
    text_ids: &[u32],
    n_vit: usize,
    n_vae: usize,
    mode: SequenceMode,
    flow_time: Option<f64>,
    opts: SequenceOptions,
) -> Result<TokenSequence> {
    let segments: Vec<(ModalityTag, usize)> = match mode {
        SequenceMode::Understand => {
            if n_vae > 0 {
                bail!(Contract, "UNDERSTAND sequences carry no VAE tokens");
            }
            vec![(ModalityTag::Vit, n_vit), (ModalityTag::Text, text_ids.len())]
        }
        SequenceMode::Generate => {
            if n_vit > 0 {
                bail!(Contract, "GENERATE sequences carry no VIT tokens");
            }
            if n_vae == 0 {
                bail!(Contract, "GENERATE sequences need VAE tokens");
            }
            vec![(ModalityTag::Text, text_ids.len()), (ModalityTag::Vae, n_vae)]
        }
        SequenceMode::Interleaved => {
            if n_vit == 0 || n_vae == 0 {
                bail!(Contract, "INTERLEAVED sequences need both VIT and VAE tokens");
            }
            vec![
                (ModalityTag::Vit, n_vit),
                (ModalityTag::Text, text_ids.len()),
                (ModalityTag::Vae, n_vae),
            ]
        }
    };

    let mut tags = Vec::new();
    let mut positions = Vec::new();
    for &(tag, len) in &segments {
        for i in 0..len {
            positions.push(match opts.positions {
                PositionScheme::Global => tags.len(),
                PositionScheme::PerSegment => i,
            });
            tags.push(tag);
        }
    }
    let n = tags.len();
    if n == 0 {
        bail!(Contract, "empty token sequence");
    }

    let mut mask = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            mask[q * n + k] = match (tags[q], tags[k]) {
                (ModalityTag::Vit, ModalityTag::Vit) => true,
                (ModalityTag::Vit, _) => false,
                (ModalityTag::Text, ModalityTag::Vae) => false,
                (ModalityTag::Text, _) => k <= q,
                (ModalityTag::Vae, ModalityTag::Vit) => opts.vae_sees_vit,
                (ModalityTag::Vae, _) => true,
            };
        }
    }
    TokenSequence::from_parts(tags, text_ids.to_vec(), positions, mask, flow_time)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn understand_mask() {
        let s = build_sequence(&[1, 2, 3], 4, 0, SequenceMode::Understand, None, Default::default()).unwrap();
        assert_eq!(s.len(), 7);
        for (i, q) in (4..7).enumerate() {
            for k in 0..4 {
                assert!(s.admits(q, k));
            }
            for (j, k) in (4..7).enumerate() {
                assert_eq!(s.admits(q, k), j <= i);
            }
        }
        for q in 0..4 {
            for k in 0..7 {
                assert_eq!(s.admits(q, k), k < 4);
            }
        }
    }

    #[test]
    fn generate_mask() {
        let s = build_sequence(&[1, 2, 3], 0, 4, SequenceMode::Generate, Some(0.5), Default::default()).unwrap();
        for q in 3..7 {
            assert!((0..7).all(|k| s.admits(q, k)));
        }
        for q in 0..3 {
            for k in 0..7 {
                assert_eq!(s.admits(q, k), k <= q);
            }
        }
    }

    #[test]
    fn interleaved_policy_switch() {
        let off = build_sequence(&[1, 2], 2, 2, SequenceMode::Interleaved, Some(0.1), Default::default()).unwrap();
        assert!(!off.admits(4, 0));
        let opts = SequenceOptions { vae_sees_vit: true, ..Default::default() };
        let on = build_sequence(&[1, 2], 2, 2, SequenceMode::Interleaved, Some(0.1), opts).unwrap();
        assert!(on.admits(4, 0));
        // text never sees the noisy latents
        assert!(!on.admits(3, 4));
    }

    #[test]
    fn positions_schemes() {
        let g = build_sequence(&[1, 2], 2, 0, SequenceMode::Understand, None, Default::default()).unwrap();
        assert_eq!(g.positions(), &[0, 1, 2, 3]);
        let opts = SequenceOptions { positions: PositionScheme::PerSegment, ..Default::default() };
        let p = build_sequence(&[1, 2], 2, 0, SequenceMode::Understand, None, opts).unwrap();
        assert_eq!(p.positions(), &[0, 1, 0, 1]);
    }

    #[test]
    fn contract_errors() {
        let d = SequenceOptions::default();
        assert!(build_sequence(&[], 0, 0, SequenceMode::Understand, None, d).is_err());
        assert!(build_sequence(&[1], 0, 2, SequenceMode::Generate, None, d).is_err());
        assert!(build_sequence(&[1], 0, 0, SequenceMode::Understand, Some(0.3), d).is_err());
        assert!("PIXEL".parse::<ModalityTag>().is_err());
    }

    #[test]
    fn mask_is_reproducible() {
        let d = SequenceOptions::default();
        let a = build_sequence(&[5, 6, 7], 3, 2, SequenceMode::Interleaved, Some(0.4), d).unwrap();
        let b = build_sequence(&[5, 6, 7], 3, 2, SequenceMode::Interleaved, Some(0.4), d).unwrap();
        assert_eq!(a, b);
    }
}
