use crate::data::{caption, parse_caption, quantize, render, Record, Sample};
use crate::error::{bail, Error, Result};
use crate::model::Image;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use crate::process::JsonLines;

/// Source of the two alignment signals for a caption pair. Higher is better
/// for both; the scale of `align_score` is scorer-defined.
pub trait Scorer {
    /// Text-side similarity in [-1, 1].
    fn embed_similarity(&self, record: &Record) -> Result<f64>;

    /// Image-text alignment.
    fn align_score(&self, record: &Record) -> Result<f64>;

    /// Both signals at once; scorers with a per-call cost override this.
    fn score_pair(&self, record: &Record) -> Result<(f64, f64)> {
        Ok((self.embed_similarity(record)?, self.align_score(record)?))
    }

    /// Name recorded in reports.
    fn name(&self) -> String;
}

fn caption_of(s: &Sample) -> Result<&str> {
    match (&s.a_t, s.is_caption_pair()) {
        (Some(c), true) => Ok(c),
        _ => bail!(Contract, "sample {} is not a caption pair", s.id),
    }
}

/// Deterministic reference scorer for the synthetic corpus.
///
/// Similarity is the cosine between character histograms of the caption and
/// of the ground-truth caption. Alignment is one minus the mean absolute
/// pixel difference between the image and a render of whatever scene the
/// caption describes (0 when the caption does not parse). Images whose
/// channel count differs from the render are compared in gray.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyScorer;

fn histogram(s: &str) -> BTreeMap<char, u64> {
    let mut h = BTreeMap::new();
    for c in s.chars() {
        *h.entry(c).or_insert(0) += 1;
    }
    h
}

/// Cosine similarity of character histograms. Counts stay integral so equal
/// strings give exactly 1.
pub fn char_cosine(a: &str, b: &str) -> f64 {
    let (ha, hb) = (histogram(a), histogram(b));
    let dot: u64 = ha.iter().map(|(c, n)| n * hb.get(c).copied().unwrap_or(0)).sum();
    let na: u64 = ha.values().map(|n| n * n).sum();
    let nb: u64 = hb.values().map(|n| n * n).sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    dot as f64 / ((na as f64) * (nb as f64)).sqrt()
}

fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.pixels().len() as f64
}

impl Scorer for ToyScorer {
    fn embed_similarity(&self, record: &Record) -> Result<f64> {
        let s = &record.sample;
        let text = caption_of(s)?;
        let Some(p) = &s.params else {
            bail!(Contract, "sample {} has no ground-truth scene", s.id);
        };
        Ok(char_cosine(text, &caption(p)))
    }

    fn align_score(&self, record: &Record) -> Result<f64> {
        let s = &record.sample;
        let text = caption_of(s)?;
        let Some(img) = s.captioned_image() else {
            bail!(Contract, "sample {} has no image", s.id);
        };
        let Some(p) = parse_caption(text) else {
            return Ok(0.0);
        };
        if img.height() != img.width() {
            bail!(Shape, "sample {}: toy scorer needs square images", s.id);
        }
        let mut r = render(&p, img.height())?;
        let mut img = img.clone();
        if r.channels() != img.channels() {
            // compare in gray; palette tints average out per pixel
            r = r.to_channels(1)?;
            img = img.to_channels(1)?;
        }
        Ok(1.0 - mean_abs_diff(&quantize(&img), &quantize(&r)))
    }

    fn name(&self) -> String {
        "toy".into()
    }
}

#[derive(Serialize)]
struct Request<'a> {
    id: &'a str,
    caption: &'a str,
    image_path: String,
}

#[derive(Deserialize)]
struct Response {
    sim: f64,
    align: f64,
}

/// Scorer running as a separate process. Each request is one JSON line
/// `{"id","caption","image_path"}` on its stdin, answered by one line
/// `{"sim","align"}` on its stdout.
pub struct ProcessScorer {
    base: PathBuf,
    proc: JsonLines,
}

impl ProcessScorer {
    /// Starts `command` with `args`. Image paths sent to it are `base`
    /// joined with the record's image file.
    pub fn spawn(command: &str, args: &[String], base: &Path) -> Result<Self> {
        Ok(Self { base: base.to_path_buf(), proc: JsonLines::spawn(command, args)? })
    }

    fn ask(&self, record: &Record) -> std::result::Result<Response, String> {
        let s = &record.sample;
        let caption = caption_of(s).map_err(|e| e.to_string())?;
        let file = match s.task {
            crate::data::Task::T2I => &record.a_v_file,
            _ => &record.x_v_file,
        };
        let Some(file) = file else {
            return Err("record has no image file".into());
        };
        self.proc.ask(&Request { id: &s.id, caption, image_path: self.base.join(file).display().to_string() })
    }
}

impl Scorer for ProcessScorer {
    fn embed_similarity(&self, record: &Record) -> Result<f64> {
        Ok(self.score_pair(record)?.0)
    }

    fn align_score(&self, record: &Record) -> Result<f64> {
        Ok(self.score_pair(record)?.1)
    }

    fn score_pair(&self, record: &Record) -> Result<(f64, f64)> {
        let r = self.ask(record).map_err(|reason| Error::Scoring { id: record.id().to_string(), reason })?;
        Ok((r.sim, r.align))
    }

    fn name(&self) -> String {
        format!("process:{}", self.proc.command)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_caption_pair, make_t2i, GridPoint};

    fn rec(s: Sample) -> Record {
        Record { sample: s, x_v_file: None, a_v_file: None }
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(char_cosine("abc", "cab"), 1.0);
        assert_eq!(char_cosine("aa", "bb"), 0.0);
        assert_eq!(char_cosine("", "a"), 0.0);
        // (1,1) vs (1,0)
        assert!((char_cosine("ab", "a") - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn clean_samples_score_one() {
        for (i, g) in GridPoint::all().iter().enumerate().step_by(97) {
            let p = g.params();
            let s = if i % 2 == 0 { make_caption_pair(&p, 16, None) } else { make_t2i(&p, 16, None) }.unwrap();
            let s = Sample { x_v: s.x_v.as_ref().map(quantize), ..s };
            assert_eq!(ToyScorer.score_pair(&rec(s)).unwrap(), (1.0, 1.0));
        }
    }

    #[test]
    fn wrong_caption_scores_lower() {
        let all = GridPoint::all();
        let p = all[0].params();
        let q = all[1000].params();
        let s = make_caption_pair(&p, 16, Some(caption(&q))).unwrap();
        let (sim, align) = ToyScorer.score_pair(&rec(s.clone())).unwrap();
        assert!(sim < 1.0 && align < 1.0, "{sim} {align}");
        let garbage = make_caption_pair(&p, 16, Some("nothing to see here".into())).unwrap();
        assert_eq!(ToyScorer.align_score(&rec(garbage)).unwrap(), 0.0);
    }

    #[test]
    fn non_caption_records_are_refused() {
        let p = GridPoint::all()[3].params();
        let s = crate::data::make_text_only(&p, 16).unwrap();
        assert!(ToyScorer.score_pair(&rec(s)).is_err());
    }
}
