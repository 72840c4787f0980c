//! The end-to-end run behind the command-line tool: generate data, quality
//! control, curriculum training, sampling and evaluation, all rooted in one
//! output directory.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/<split>/manifest.tsv, data/<split>/images/
//! qc/manifest.tsv, qc/images/, qc/scores.csv, qc/review.jsonl
//! ckpt/model.cfg, ckpt/stage<k>.okaf, ckpt/stage<k>.ema.okaf, ckpt/stage<k>.trace.csv
//! report.<split>.json
//! ```

use crate::config::KvConfig;
use crate::data::{build_corpus, read_manifest, save_pnm, tokenizer, CorpusSpec, Record, MANIFEST};
use crate::error::{bail, Result};
use crate::eval::{evaluate, FeatureExtractor, ModelPredictor, ProcessExtractor, Report, VitFeatures};
use crate::process::split_command;
use crate::model::{ModelConfig, UnifiedModel};
use crate::objectives::euler_sample;
use crate::quality::{self, ProcessScorer, QcConfig, Scorer, ToyScorer};
use crate::train::{
    checkpoint_path, pretrain_vae, run_curriculum, save_stage, train_stage, trace_path, CurriculumConfig, Datasets,
    StageConfig, VaeConfig,
};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";

/// Everything a run needs, read from one key-value file.
///
/// Sections: `corpus.*`, `model.*`, `vae.*`, `stage1.*`..`stage3.*`, `qc.*`
/// and `eval.*`. The global seed seeds the corpus and the model
/// initialization and offsets every stage seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    /// Size of the test split relative to the training split.
    pub test_scale: f64,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    pub qc: QcConfig,
    /// External scorer command line; the built-in toy scorer when absent.
    pub scorer: Option<String>,
    /// Number of records exported for expert review.
    pub review: usize,
    pub eval_steps: usize,
    pub eval_ema: bool,
    pub eval_max_tokens: usize,
    pub eval_tasks: Vec<String>,
    /// External feature extractor command line for the Fréchet distance;
    /// the model's semantic encoder when absent.
    pub extractor: Option<String>,
}

const CORPUS_KEYS: [&str; 13] = [
    "text",
    "caption",
    "vqa",
    "t2i",
    "segment",
    "superres",
    "counterfactual",
    "stain",
    "crossmodal",
    "image_size",
    "caption_noise",
    "think_fraction",
    "test_scale",
];

fn known_keys() -> Result<BTreeSet<String>> {
    let mut k = BTreeSet::new();
    k.extend(CORPUS_KEYS.iter().map(|c| format!("corpus.{c}")));
    k.extend(ModelConfig::default().to_kv().keys().map(|c| format!("model.{c}")));
    k.extend(["steps", "lr", "batch", "seed"].iter().map(|c| format!("vae.{c}")));
    for s in 1..=3u8 {
        let d = crate::train::default_stage(s)?;
        k.extend(d.to_kv().keys().filter(|c| !c.starts_with("mix.")).map(|c| format!("stage{s}.{c}")));
        k.insert(format!("stage{s}.alpha"));
    }
    k.extend(
        ["min_side", "len_min", "len_max", "lambda", "retain", "per_modality", "scorer", "review"]
            .iter()
            .map(|c| format!("qc.{c}")),
    );
    k.extend(["steps", "ema", "max_tokens", "tasks", "extractor"].iter().map(|c| format!("eval.{c}")));
    Ok(k)
}

impl RunConfig {
    pub fn new(seed: u64) -> Result<Self> {
        Self::from_kv(&KvConfig::new(), seed)
    }

    pub fn from_kv(c: &KvConfig, seed: u64) -> Result<Self> {
        let known = known_keys()?;
        for key in c.keys() {
            let mix = key.starts_with("stage") && key.split_once('.').is_some_and(|(_, r)| r.starts_with("mix."));
            if !known.contains(key) && !mix {
                bail!(Config, "unknown config key {key:?}");
            }
        }
        let corpus = CorpusSpec::from_kv(&c.section("corpus"))?;
        let mut test_scale: f64 = 0.25;
        c.apply("corpus.test_scale", &mut test_scale)?;
        if !(test_scale > 0.0 && test_scale.is_finite()) {
            bail!(Config, "corpus.test_scale must be positive");
        }
        let mut mc = c.section("model");
        if mc.raw("init_seed").is_none() {
            mc.set("init_seed", seed);
        }
        if mc.raw("image_size").is_none() {
            mc.set("image_size", corpus.image_size);
        }
        let model = ModelConfig::from_kv(&mc)?;
        if model.image_size != corpus.image_size {
            bail!(Config, "model.image_size {} differs from corpus.image_size {}", model.image_size, corpus.image_size);
        }

        let mut vae = VaeConfig::default();
        c.apply("vae.steps", &mut vae.steps)?;
        c.apply("vae.lr", &mut vae.lr)?;
        c.apply("vae.batch", &mut vae.batch_size)?;
        c.apply("vae.seed", &mut vae.seed)?;
        vae.seed = vae.seed.wrapping_add(seed);
        let mut stages = Vec::new();
        for s in 1..=3u8 {
            let mut st = StageConfig::from_kv(s, &c.section(&format!("stage{s}")))?;
            st.seed = st.seed.wrapping_add(seed);
            stages.push(st);
        }

        let qc = QcConfig::desk(corpus.image_size).apply_kv(&c.section("qc"))?;
        let mut review = 200;
        c.apply("qc.review", &mut review)?;
        let mut eval_steps = 10;
        let mut eval_ema = false;
        let mut eval_max_tokens = 160;
        c.apply("eval.steps", &mut eval_steps)?;
        c.apply("eval.ema", &mut eval_ema)?;
        c.apply("eval.max_tokens", &mut eval_max_tokens)?;
        if eval_steps == 0 {
            bail!(Config, "eval.steps must be positive");
        }
        let eval_tasks = c
            .raw("eval.tasks")
            .map(|t| t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default();
        Ok(Self {
            seed,
            corpus,
            test_scale,
            model,
            curriculum: CurriculumConfig { vae, stages },
            qc,
            scorer: c.raw("qc.scorer").map(str::to_string),
            review,
            eval_steps,
            eval_ema,
            eval_max_tokens,
            eval_tasks,
            extractor: c.raw("eval.extractor").map(str::to_string),
        })
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?, seed)
    }
}

pub fn data_dir(out: &Path, split: &str) -> PathBuf {
    out.join("data").join(split)
}

pub fn qc_dir(out: &Path) -> PathBuf {
    out.join("qc")
}

pub fn ckpt_dir(out: &Path) -> PathBuf {
    out.join("ckpt")
}

pub fn report_path(out: &Path, split: &str) -> PathBuf {
    out.join(format!("report.{split}.json"))
}

/// Writes the training and test splits. Returns their record counts.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    let train = build_corpus(&cfg.corpus, cfg.seed, TRAIN_SPLIT, &data_dir(out, TRAIN_SPLIT))?;
    let test_spec = cfg.corpus.scaled(cfg.test_scale);
    let test = build_corpus(&test_spec, cfg.seed, TEST_SPLIT, &data_dir(out, TEST_SPLIT))?;
    Ok((train.len(), test.len()))
}

pub struct QcSummary {
    pub input: usize,
    pub kept: usize,
    pub rejected: usize,
    pub scored: usize,
}

/// Filters the training split into `qc/`, with the scores CSV and a blank
/// review file for the first kept caption pairs.
pub fn run_qc(cfg: &RunConfig, out: &Path) -> Result<QcSummary> {
    let src = data_dir(out, TRAIN_SPLIT);
    let records = read_manifest(&src.join(MANIFEST))?;
    let scorer: Box<dyn Scorer> = match &cfg.scorer {
        None => Box::new(ToyScorer),
        Some(cmd) => {
            let (prog, args) = split_command(cmd)?;
            Box::new(ProcessScorer::spawn(&prog, &args, &src)?)
        }
    };
    let res = quality::run_qc(&records, scorer.as_ref(), &cfg.qc)?;
    let dir = qc_dir(out);
    quality::write_filtered(&src, &dir, &res.kept)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("scores.csv"))?);
    quality::write_scores(&mut w, &res.scores)?;
    w.flush()?;
    let review_ids = res.kept.iter().filter(|r| r.sample.is_caption_pair()).take(cfg.review).map(Record::id);
    quality::export_review(review_ids, &dir.join("review.jsonl"))?;
    Ok(QcSummary { input: records.len(), kept: res.kept.len(), rejected: res.rejected.len(), scored: res.scores.len() })
}

/// Which part of the curriculum to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSel {
    One(u8),
    All,
}

impl std::str::FromStr for StageSel {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "1" | "2" | "3" => Ok(Self::One(s.parse().expect("digit"))),
            _ => bail!(Config, "stage must be 1, 2, 3 or all, got {s:?}"),
        }
    }
}

fn training_records(out: &Path) -> Result<Vec<Record>> {
    let qc = qc_dir(out).join(MANIFEST);
    if qc.exists() {
        read_manifest(&qc)
    } else {
        read_manifest(&data_dir(out, TRAIN_SPLIT).join(MANIFEST))
    }
}

/// Loads the model configuration saved next to the checkpoints and the
/// parameters of `path`.
pub fn load_model(ckpt: &Path, path: &Path) -> Result<UnifiedModel> {
    let cfg = ModelConfig::from_kv(&KvConfig::load(&ckpt.join("model.cfg"))?)?;
    let mut m = UnifiedModel::new(cfg)?;
    m.load_file(path)?;
    Ok(m)
}

/// Latest raw (or EMA) checkpoint present, stage 3 down to stage 0.
pub fn latest_checkpoint(out: &Path, ema: bool) -> Result<PathBuf> {
    let dir = ckpt_dir(out);
    for s in (1..=3).rev() {
        let p = checkpoint_path(&dir, s, ema);
        if p.exists() {
            return Ok(p);
        }
    }
    let p = checkpoint_path(&dir, 0, false);
    if p.exists() {
        return Ok(p);
    }
    bail!(Contract, "no checkpoint under {}; run `train` first", dir.display())
}

/// Stage 1 (and `all`) start from a fresh model and pre-train the latent
/// codec first; stages 2 and 3 continue from the previous stage's
/// checkpoint.
pub fn train(cfg: &RunConfig, out: &Path, sel: StageSel) -> Result<Vec<PathBuf>> {
    let records = training_records(out)?;
    let mut data = Datasets::from_samples(records.into_iter().map(|r| r.sample));
    let dir = ckpt_dir(out);
    std::fs::create_dir_all(&dir)?;
    match sel {
        StageSel::All => {
            let mut model = UnifiedModel::new(cfg.model.clone())?;
            Ok(run_curriculum(&mut model, &mut data, &cfg.curriculum, true, Some(&dir))?.checkpoints)
        }
        StageSel::One(k) => {
            let stage = &cfg.curriculum.stages[k as usize - 1];
            let mut written = Vec::new();
            let mut model = if k == 1 {
                let mut m = UnifiedModel::new(cfg.model.clone())?;
                std::fs::write(dir.join("model.cfg"), m.config().to_kv().to_string())?;
                let images: Vec<_> = data.samples().flat_map(|s| s.images().cloned()).collect();
                pretrain_vae(&mut m, &images, &cfg.curriculum.vae)?;
                let p = checkpoint_path(&dir, 0, false);
                m.save_file(&p)?;
                written.push(p);
                m
            } else {
                let prev = checkpoint_path(&dir, k - 1, false);
                if !prev.exists() {
                    bail!(Contract, "stage {k} needs {}; run stage {} first", prev.display(), k - 1);
                }
                load_model(&dir, &prev)?
            };
            let mut w = std::io::BufWriter::new(std::fs::File::create(trace_path(&dir, k))?);
            let outcome = train_stage(&mut model, &mut data, stage, Some(&mut w), None)?;
            w.flush()?;
            written.extend(save_stage(&dir, &model, k, &outcome)?);
            Ok(written)
        }
    }
}

/// Generates one image for `prompt` and writes it to `path` (or
/// `samples/<seed>.pgm`). Returns the path written.
pub fn sample(out: &Path, prompt: &str, steps: usize, seed: u64, path: Option<&Path>) -> Result<PathBuf> {
    if steps == 0 {
        bail!(Parameter, "sampler steps must be positive");
    }
    let model = load_model(&ckpt_dir(out), &latest_checkpoint(out, false)?)?;
    let mut ids = vec![tokenizer::BOS];
    ids.extend(tokenizer::encode_strict(prompt)?);
    let img = euler_sample(&model, &ids, steps, seed)?;
    let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
    let target = match path {
        Some(p) => p.to_path_buf(),
        None => out.join("samples").join(format!("{seed}.{ext}")),
    };
    if let Some(parent) = target.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_pnm(&target, &img)?;
    Ok(target)
}

/// Evaluates the latest checkpoint on `split` and writes the report.
pub fn eval(cfg: &RunConfig, out: &Path, split: &str) -> Result<Report> {
    let model = load_model(&ckpt_dir(out), &latest_checkpoint(out, cfg.eval_ema)?)?;
    let records = read_manifest(&data_dir(out, split).join(MANIFEST))?;
    let samples: Vec<_> = records.into_iter().map(|r| r.sample).collect();
    let mut pred = ModelPredictor::new(&model, cfg.eval_steps, cfg.seed);
    pred.max_new_tokens = cfg.eval_max_tokens;
    let tasks: Vec<&str> = cfg.eval_tasks.iter().map(String::as_str).collect();
    let vit = VitFeatures(&model);
    let external = match &cfg.extractor {
        Some(cmd) => {
            let (prog, args) = split_command(cmd)?;
            Some(ProcessExtractor::spawn(&prog, &args, &out.join("scratch"))?)
        }
        None => None,
    };
    let extractor: &dyn FeatureExtractor = match &external {
        Some(x) => x,
        None => &vit,
    };
    let report = evaluate(&pred, &samples, split, extractor, &tasks)?;
    std::fs::write(report_path(out, split), report.to_json())?;
    Ok(report)
}
