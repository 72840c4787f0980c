//! Metrics (PSNR, SSIM, Fréchet distance, answer accuracy) and the
//! per-task evaluation that writes the JSON report.

mod metrics;
mod predict;

pub use metrics::{
    answer_accuracy, frechet_distance, mse, normalize_answer, psnr, ssim, FeatureAccumulator, FeatureStats,
    SSIM_WINDOW,
};
pub use predict::{greedy_decode, ConstantPredictor, ModelPredictor, OraclePredictor, Predictor};

use crate::data::{parse_answer, InterleavedKind, Record, Sample, Task};
use crate::data::save_pnm;
use crate::error::{bail, Error, Result};
use crate::process::JsonLines;
use crate::model::{Image, UnifiedModel};
use crate::quality::{Scorer, ToyScorer};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Maps an image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn features(&self, img: &Image) -> Result<Vec<f64>>;
}

/// Mean over patches of the model's semantic encoder output. Images are
/// converted to the encoder's channel count and side first.
pub struct VitFeatures<'a>(pub &'a UnifiedModel);

impl FeatureExtractor for VitFeatures<'_> {
    fn name(&self) -> String {
        format!("vit-mean({})", self.0.config().vit_dim)
    }

    fn features(&self, img: &Image) -> Result<Vec<f64>> {
        let z = self.0.vit_encode(img)?;
        let n = z.rows() as f64;
        let mut out = vec![0.0; z.cols()];
        for r in 0..z.rows() {
            for (o, v) in out.iter_mut().zip(z.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }
}

/// Extractor running as a separate process, on the same line-delimited JSON
/// protocol as the external scorer: each request `{"id","image_path"}` is
/// answered by `{"features":[...]}`. Images are written to `scratch` as
/// PGM/PPM for the duration of the request.
pub struct ProcessExtractor {
    scratch: PathBuf,
    proc: JsonLines,
    next: AtomicUsize,
}

#[derive(serde::Serialize)]
struct FeatureRequest<'a> {
    id: &'a str,
    image_path: String,
}

#[derive(serde::Deserialize)]
struct FeatureReply {
    features: Vec<f64>,
}

impl ProcessExtractor {
    pub fn spawn(command: &str, args: &[String], scratch: &Path) -> Result<Self> {
        std::fs::create_dir_all(scratch)?;
        Ok(Self { scratch: scratch.to_path_buf(), proc: JsonLines::spawn(command, args)?, next: AtomicUsize::new(0) })
    }
}

impl FeatureExtractor for ProcessExtractor {
    fn name(&self) -> String {
        format!("process:{}", self.proc.command)
    }

    fn features(&self, img: &Image) -> Result<Vec<f64>> {
        let id = format!("img-{:06}", self.next.fetch_add(1, Ordering::Relaxed));
        let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
        let path = self.scratch.join(format!("{id}.{ext}"));
        save_pnm(&path, img)?;
        let reply: std::result::Result<FeatureReply, String> =
            self.proc.ask(&FeatureRequest { id: &id, image_path: path.display().to_string() });
        std::fs::remove_file(&path)?;
        let f = reply.map_err(|reason| Error::Scoring { id, reason })?.features;
        if f.is_empty() || f.iter().any(|v| !v.is_finite()) {
            bail!(Format, "feature extractor returned an empty or non-finite vector");
        }
        Ok(f)
    }
}

pub fn extract_features(images: &[Image], extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        bail!(Contract, "feature statistics need at least 2 images, got {}", images.len());
    }
    let mut acc = FeatureAccumulator::default();
    for img in images {
        acc.push(&extractor.features(img)?)?;
    }
    acc.finish()
}

/// Puts a prediction and its reference on a common footing: same side, and
/// gray for both when their channel counts differ.
pub fn comparable(pred: &Image, gold: &Image) -> Result<(Image, Image)> {
    let mut p = pred.fit_to(gold.height())?;
    let mut g = gold.clone();
    if p.channels() != g.channels() {
        p = p.to_channels(1)?;
        g = g.to_channels(1)?;
    }
    Ok((p, g))
}

/// Report key of a task, or `None` for tasks without a metric.
pub fn task_key(task: Task) -> Option<&'static str> {
    match task {
        Task::TextOnly => None,
        Task::I2T => Some("i2t"),
        Task::T2I => Some("t2i"),
        Task::Interleaved(k) => Some(k.name()),
    }
}

pub const TASK_KEYS: [&str; 7] = ["i2t", "t2i", "segment", "superres", "counterfactual", "stain", "crossmodal"];

/// Evaluation result: metric tables per task plus self-describing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub split: String,
    pub predictor: String,
    pub extractor: String,
    pub tasks: BTreeMap<String, BTreeMap<String, f64>>,
    /// Ids of every record the evaluation read.
    pub read: Vec<String>,
}

fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

impl Report {
    /// Pretty JSON with sorted keys. Infinite values are written as the
    /// strings `"inf"` / `"-inf"`.
    pub fn to_json(&self) -> String {
        let mut root = Map::new();
        for (task, metrics) in &self.tasks {
            let m: Map<String, Value> = metrics.iter().map(|(k, v)| (k.clone(), number(*v))).collect();
            root.insert(task.clone(), Value::Object(m));
        }
        root.insert(
            "meta".into(),
            json!({
                "split": self.split,
                "predictor": self.predictor,
                "extractor": self.extractor,
                "preprocessing": "fit to reference side by integer resampling; gray when channel counts differ",
                "records": self.read.len(),
            }),
        );
        let mut s = serde_json::to_string_pretty(&Value::Object(root)).expect("json values serialize");
        s.push('\n');
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Union of the lesion boxes of the source and edited scenes; the whole
/// image when neither has a lesion.
fn edit_region(s: &Sample, size: usize) -> (usize, usize, usize, usize) {
    let boxes: Vec<_> = [&s.params, &s.target_params]
        .into_iter()
        .flatten()
        .filter_map(|p| p.lesion_box(size))
        .collect();
    if boxes.is_empty() {
        return (0, 0, size, size);
    }
    boxes.iter().fold((size, size, 0, 0), |(a, b, c, d), &(y0, x0, y1, x1)| (a.min(y0), b.min(x0), c.max(y1), d.max(x1)))
}

/// Runs every requested task (all present ones when `tasks` is empty) over
/// the samples of one held-out split.
///
/// Every record must belong to `split`, and `split` may not be the training
/// split.
pub fn evaluate(
    predictor: &dyn Predictor,
    samples: &[Sample],
    split: &str,
    extractor: &dyn FeatureExtractor,
    tasks: &[&str],
) -> Result<Report> {
    if split == "train" {
        bail!(Contract, "evaluation must not read the training split");
    }
    for t in tasks {
        if !TASK_KEYS.contains(t) {
            bail!(Config, "unknown evaluation task {t:?}");
        }
    }
    let prefix = format!("{split}-");
    let mut read = Vec::new();
    let mut by_task: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        if !s.id.starts_with(&prefix) {
            bail!(Contract, "record {} does not belong to split {split}", s.id);
        }
        let Some(key) = task_key(s.task) else { continue };
        if tasks.is_empty() || tasks.contains(&key) {
            by_task.entry(key).or_default().push(s);
        }
    }
    for t in tasks {
        if !by_task.contains_key(t) {
            bail!(Contract, "split {split} has no {t} records");
        }
    }
    if by_task.is_empty() {
        bail!(Contract, "split {split} has nothing to evaluate");
    }

    let mut out = BTreeMap::new();
    for (key, group) in &by_task {
        let mut m = BTreeMap::new();
        m.insert("n".to_string(), group.len() as f64);
        read.extend(group.iter().map(|s| s.id.clone()));
        match group[0].task {
            Task::I2T => {
                let preds = group.iter().map(|s| Ok(parse_answer(&predictor.answer(s)?))).collect::<Result<Vec<_>>>()?;
                let golds: Vec<&str> = group.iter().map(|s| s.a_t.as_deref().unwrap_or_default()).collect();
                m.insert("accuracy".into(), answer_accuracy(&preds, &golds)?);
            }
            Task::T2I => {
                if group.len() < 2 {
                    bail!(Contract, "text-to-image evaluation needs at least 2 records");
                }
                let mut gen = Vec::new();
                let mut refs = Vec::new();
                let mut align = Vec::new();
                for s in group {
                    let gold = s.a_v.as_ref().expect("validated t2i record");
                    let (p, g) = comparable(&predictor.image(s)?, gold)?;
                    let r = Record { sample: Sample { a_v: Some(p.clone()), ..(*s).clone() }, x_v_file: None, a_v_file: None };
                    align.push(ToyScorer.align_score(&r)?);
                    gen.push(p);
                    refs.push(g);
                }
                let fd = frechet_distance(&extract_features(&gen, extractor)?, &extract_features(&refs, extractor)?)?;
                m.insert("frechet".into(), fd);
                m.insert("align".into(), mean(&align));
            }
            Task::Interleaved(kind) => {
                let mut ps = Vec::new();
                let mut ss = Vec::new();
                let mut preds = Vec::new();
                let mut golds = Vec::new();
                for s in group {
                    let gold = s.a_v.as_ref().expect("validated interleaved record");
                    let (p, g) = comparable(&predictor.image(s)?, gold)?;
                    if kind == InterleavedKind::Counterfactual {
                        let (y0, x0, y1, x1) = edit_region(s, g.height());
                        ps.push(psnr(&p.crop(y0, x0, y1, x1)?, &g.crop(y0, x0, y1, x1)?, 1.0)?);
                        preds.push(parse_answer(&predictor.answer(s)?));
                        golds.push(s.a_t.clone().unwrap_or_default());
                    } else {
                        ps.push(psnr(&p, &g, 1.0)?);
                        ss.push(ssim(&p, &g, 1.0)?);
                    }
                }
                if kind == InterleavedKind::Counterfactual {
                    m.insert("psnr_edit".into(), mean(&ps));
                    m.insert("accuracy".into(), answer_accuracy(&preds, &golds)?);
                } else {
                    m.insert("psnr".into(), mean(&ps));
                    m.insert("ssim".into(), mean(&ss));
                }
            }
            Task::TextOnly => unreachable!("text-only records are skipped"),
        }
        out.insert(key.to_string(), m);
    }
    Ok(Report {
        split: split.to_string(),
        predictor: predictor.name(),
        extractor: extractor.name(),
        tasks: out,
        read,
    })
}
