//! Quality control for a generated corpus: coarse filtering, alignment
//! scoring of caption pairs, top-fraction retention, and the expert-review
//! export.

mod filter;
mod review;
mod scorer;

pub use filter::{coarse_filter, Decision, RejectReason, Thresholds};
pub use review::{export_review, parse_review_line, read_review, ReviewRecord};
pub use scorer::{char_cosine, ProcessScorer, Scorer, ToyScorer};

use crate::config::KvConfig;
use crate::data::{write_manifest_lines, Record, MANIFEST};
use crate::error::{bail, Error, Result};
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

pub const SCORES_HEADER: &str = "id,sim_embed,score_align,score_final,kept";

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub sim_embed: f64,
    pub score_align: f64,
    /// `λ·sim_embed + score_align`.
    pub score_final: f64,
}

/// Scores one caption pair. Any scorer failure comes back as
/// [`Error::Scoring`] carrying the sample id.
pub fn score(record: &Record, scorer: &dyn Scorer, lambda: f64) -> Result<ScoredSample> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        bail!(Parameter, "lambda must be a finite non-negative number, got {lambda}");
    }
    let id = record.id().to_string();
    let (sim, align) = scorer.score_pair(record).map_err(|e| match e {
        e @ Error::Scoring { .. } => e,
        other => Error::Scoring { id: id.clone(), reason: other.to_string() },
    })?;
    if !sim.is_finite() || !align.is_finite() {
        return Err(Error::Scoring { id, reason: format!("non-finite scores ({sim}, {align})") });
    }
    Ok(ScoredSample { id, sim_embed: sim, score_align: align, score_final: lambda * sim + align })
}

/// Number kept out of `n` at `fraction`: `ceil(n·fraction)`, with a small
/// allowance so products like `10·0.3` do not round up past the exact value.
pub fn retain_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Sorts by `score_final` descending, ties by id ascending, and keeps the
/// first `ceil(n·fraction)`.
pub fn retain_top(scored: &[ScoredSample], fraction: f64) -> Result<Vec<ScoredSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(Parameter, "retain fraction must be in (0, 1], got {fraction}");
    }
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.score_final.total_cmp(&a.score_final).then_with(|| a.id.cmp(&b.id)));
    v.truncate(retain_count(scored.len(), fraction));
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcConfig {
    pub thresholds: Thresholds,
    pub lambda: f64,
    pub retain: f64,
    /// Apply the retention cut within each pseudo-modality instead of over
    /// the whole corpus.
    pub per_modality: bool,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self { thresholds: Thresholds::default(), lambda: 0.5, retain: 0.5, per_modality: false }
    }
}

impl QcConfig {
    /// Defaults for a corpus of `image_size` images.
    pub fn desk(image_size: usize) -> Self {
        Self { thresholds: Thresholds::desk(image_size), ..Self::default() }
    }

    /// Reads `min_side`, `len_min`, `len_max`, `lambda`, `retain` and
    /// `per_modality` over `self`.
    pub fn apply_kv(mut self, c: &KvConfig) -> Result<Self> {
        self.thresholds = self.thresholds.apply_kv(c)?;
        c.apply("lambda", &mut self.lambda)?;
        c.apply("retain", &mut self.retain)?;
        c.apply("per_modality", &mut self.per_modality)?;
        Ok(self)
    }
}

#[derive(Clone, Debug)]
pub struct QcOutcome {
    /// Records surviving every step, in input order.
    pub kept: Vec<Record>,
    /// Every scored caption pair with its retention flag, in input order.
    pub scores: Vec<(ScoredSample, bool)>,
    pub rejected: Vec<(String, RejectReason)>,
}

/// Filter, then score caption pairs, then keep the top fraction of those.
/// Records that are not caption pairs only go through the filter.
pub fn run_qc(records: &[Record], scorer: &dyn Scorer, cfg: &QcConfig) -> Result<QcOutcome> {
    cfg.thresholds.validate()?;
    let mut passed = Vec::new();
    let mut rejected = Vec::new();
    for r in records {
        match coarse_filter(&r.sample, &cfg.thresholds)? {
            Decision::Keep => passed.push(r),
            Decision::Reject(why) => rejected.push((r.id().to_string(), why)),
        }
    }
    let mut scored = Vec::new();
    let mut groups: BTreeMap<String, Vec<ScoredSample>> = BTreeMap::new();
    for r in passed.iter().filter(|r| r.sample.is_caption_pair()) {
        let s = score(r, scorer, cfg.lambda)?;
        let key = match (cfg.per_modality, &r.sample.params) {
            (true, Some(p)) => p.modality.name().to_string(),
            _ => String::new(),
        };
        groups.entry(key).or_default().push(s.clone());
        scored.push(s);
    }
    let mut winners = HashSet::new();
    for g in groups.values() {
        winners.extend(retain_top(g, cfg.retain)?.into_iter().map(|s| s.id));
    }
    let kept = passed
        .into_iter()
        .filter(|r| !r.sample.is_caption_pair() || winners.contains(r.id()))
        .cloned()
        .collect();
    let scores = scored
        .into_iter()
        .map(|s| {
            let k = winners.contains(&s.id);
            (s, k)
        })
        .collect();
    Ok(QcOutcome { kept, scores, rejected })
}

pub fn write_scores<W: Write>(mut w: W, rows: &[(ScoredSample, bool)]) -> Result<()> {
    writeln!(w, "{SCORES_HEADER}")?;
    for (s, kept) in rows {
        writeln!(w, "{},{},{},{},{}", s.id, s.sim_embed, s.score_align, s.score_final, *kept as u8)?;
    }
    Ok(())
}

/// Writes the kept records as a manifest under `out`, copying their images
/// from `src` (the input manifest's directory) unless both are the same.
pub fn write_filtered(src: &Path, out: &Path, kept: &[Record]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let same = src.canonicalize().ok().zip(out.canonicalize().ok()).is_some_and(|(a, b)| a == b);
    if !same {
        for r in kept {
            for f in [&r.x_v_file, &r.a_v_file].into_iter().flatten() {
                let to = out.join(f);
                if let Some(parent) = to.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::copy(src.join(f), to)?;
            }
        }
    }
    let name = if same { "manifest.filtered.tsv" } else { MANIFEST };
    write_manifest_lines(&out.join(name), kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(id: &str, v: f64) -> ScoredSample {
        ScoredSample { id: id.into(), sim_embed: 0.0, score_align: v, score_final: v }
    }

    struct Fixed(f64, f64);
    impl Scorer for Fixed {
        fn embed_similarity(&self, _: &Record) -> Result<f64> {
            Ok(self.0)
        }
        fn align_score(&self, _: &Record) -> Result<f64> {
            Ok(self.1)
        }
        fn name(&self) -> String {
            "fixed".into()
        }
    }

    struct Broken;
    impl Scorer for Broken {
        fn embed_similarity(&self, _: &Record) -> Result<f64> {
            Err(Error::Io(std::io::Error::other("down")))
        }
        fn align_score(&self, _: &Record) -> Result<f64> {
            Ok(0.0)
        }
        fn name(&self) -> String {
            "broken".into()
        }
    }

    fn any_record() -> Record {
        let p = crate::data::GridPoint::all()[0].params();
        Record { sample: crate::data::make_caption_pair(&p, 16, None).unwrap(), x_v_file: None, a_v_file: None }
    }

    #[test]
    fn score_formula() {
        let r = any_record();
        let out = score(&r, &Fixed(0.8, 0.6), 0.5).unwrap();
        assert!((out.score_final - 1.0).abs() < 1e-12);
        assert_eq!(score(&r, &Fixed(0.8, 0.6), 0.0).unwrap().score_final, 0.6);
        assert!(matches!(score(&r, &Fixed(0.8, 0.6), -1.0), Err(Error::Parameter(_))));
        match score(&r, &Broken, 0.5) {
            Err(Error::Scoring { id, .. }) => assert_eq!(id, r.id()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(score(&r, &Fixed(f64::NAN, 0.0), 0.5), Err(Error::Scoring { .. })));
    }

    #[test]
    fn top_half() {
        let v = vec![s("c", 0.5), s("a", 0.9), s("d", 0.3), s("b", 0.7)];
        let kept: Vec<_> = retain_top(&v, 0.5).unwrap().into_iter().map(|s| s.id).collect();
        assert_eq!(kept, ["a", "b"]);
        assert_eq!(retain_top(&v, 1.0).unwrap().len(), 4);
        assert!(retain_top(&[], 0.5).unwrap().is_empty());
        assert!(retain_top(&v, 0.0).is_err());
        assert!(retain_top(&v, 1.5).is_err());
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let v: Vec<_> = ["e", "b", "d", "a", "c"].iter().map(|id| s(id, 1.0)).collect();
        let kept: Vec<_> = retain_top(&v, 0.5).unwrap().into_iter().map(|s| s.id).collect();
        assert_eq!(kept, ["a", "b", "c"]);
    }

    #[test]
    fn counts() {
        assert_eq!(retain_count(7, 0.5), 4);
        assert_eq!(retain_count(10, 0.3), 3);
        assert_eq!(retain_count(1, 0.01), 1);
        assert_eq!(retain_count(0, 0.5), 0);
    }
}
