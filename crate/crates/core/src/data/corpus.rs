use super::pnm::{load_pnm, quantize, save_pnm};
use super::sample::{
    make_caption_pair, make_instruction, make_interleaved, make_t2i, make_text_only, InterleavedKind, Question,
    Sample, Task,
};
use super::scene::{caption, GridPoint, SceneParams};
use crate::config::KvConfig;
use crate::error::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "id\ttask\tx_v\ta_v\tq\tk\ta_t\tthink\tparams\ttarget_params";

/// Record counts per kind plus generation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub text: usize,
    pub caption: usize,
    pub vqa: usize,
    pub t2i: usize,
    pub segment: usize,
    pub superres: usize,
    pub counterfactual: usize,
    pub stain: usize,
    pub crossmodal: usize,
    pub image_size: usize,
    /// Fraction of caption pairs whose caption describes a different scene.
    pub caption_noise: f64,
    /// Fraction of question-answer records carrying reasoning.
    pub think_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            text: 64,
            caption: 96,
            vqa: 96,
            t2i: 128,
            segment: 16,
            superres: 16,
            counterfactual: 16,
            stain: 16,
            crossmodal: 16,
            image_size: 16,
            caption_noise: 0.2,
            think_fraction: 0.25,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            bail!(Config, "corpus image_size must be a positive multiple of 4");
        }
        for (name, f) in [("caption_noise", self.caption_noise), ("think_fraction", self.think_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                bail!(Config, "{name} must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.text
            + self.caption
            + self.vqa
            + self.t2i
            + self.segment
            + self.superres
            + self.counterfactual
            + self.stain
            + self.crossmodal
    }

    /// Every count scaled by `f`, rounding up so no kind disappears.
    pub fn scaled(&self, f: f64) -> Self {
        let s = |n: usize| if n == 0 { 0 } else { ((n as f64 * f).ceil() as usize).max(1) };
        Self {
            text: s(self.text),
            caption: s(self.caption),
            vqa: s(self.vqa),
            t2i: s(self.t2i),
            segment: s(self.segment),
            superres: s(self.superres),
            counterfactual: s(self.counterfactual),
            stain: s(self.stain),
            crossmodal: s(self.crossmodal),
            ..self.clone()
        }
    }

    pub fn from_kv(c: &KvConfig) -> Result<Self> {
        let mut s = Self::default();
        c.apply("text", &mut s.text)?;
        c.apply("caption", &mut s.caption)?;
        c.apply("vqa", &mut s.vqa)?;
        c.apply("t2i", &mut s.t2i)?;
        c.apply("segment", &mut s.segment)?;
        c.apply("superres", &mut s.superres)?;
        c.apply("counterfactual", &mut s.counterfactual)?;
        c.apply("stain", &mut s.stain)?;
        c.apply("crossmodal", &mut s.crossmodal)?;
        c.apply("image_size", &mut s.image_size)?;
        c.apply("caption_noise", &mut s.caption_noise)?;
        c.apply("think_fraction", &mut s.think_fraction)?;
        s.validate()?;
        Ok(s)
    }

    /// `(task, count)` in generation order.
    fn plan(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("text", self.text),
            ("caption", self.caption),
            ("vqa", self.vqa),
            ("t2i", self.t2i),
            ("segment", self.segment),
            ("superres", self.superres),
            ("counterfactual", self.counterfactual),
            ("stain", self.stain),
            ("crossmodal", self.crossmodal),
        ]
    }
}

/// A sample together with the image files it was stored in.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub sample: Sample,
    pub x_v_file: Option<String>,
    pub a_v_file: Option<String>,
}

impl Record {
    pub fn id(&self) -> &str {
        &self.sample.id
    }
}

/// Random stream for one split; different names give unrelated streams.
pub fn split_rng(seed: u64, split: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // FNV-1a of the split name selects the stream
    let mut h: u64 = 0xcbf29ce484222325;
    for b in split.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    rng.set_stream(h);
    rng
}

/// A different grid point for a corrupted caption.
fn perturbed(p: &SceneParams, rng: &mut ChaCha8Rng) -> SceneParams {
    loop {
        let q = GridPoint::random(rng).params().with_modality(p.modality);
        if caption(&q) != caption(p) {
            return q;
        }
    }
}

/// Generates the samples of one split in memory, pixels quantized to 8 bits
/// so they equal what a manifest reload yields.
pub fn generate_samples(spec: &CorpusSpec, seed: u64, split: &str) -> Result<Vec<Sample>> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = split_rng(seed, split);
    let mut out = Vec::with_capacity(spec.total());
    for (kind, count) in spec.plan() {
        for _ in 0..count {
            let p = GridPoint::random(&mut rng).params();
            let noisy = rng.random_bool(spec.caption_noise);
            let mut s = match kind {
                "text" => make_text_only(&p, size)?,
                "caption" | "t2i" => {
                    let text = noisy.then(|| caption(&perturbed(&p, &mut rng)));
                    if kind == "caption" {
                        make_caption_pair(&p, size, text)?
                    } else {
                        make_t2i(&p, size, text)?
                    }
                }
                "vqa" => {
                    let q = Question::ALL[rng.random_range(0..Question::ALL.len())];
                    let think = rng.random_bool(spec.think_fraction);
                    make_instruction(&p, q, think, size)?
                }
                other => {
                    let k = InterleavedKind::ALL.into_iter().find(|k| k.name() == other).expect("planned kind");
                    let sub = rng.random();
                    make_interleaved(k, &p, sub, size)?
                }
            };
            s.id = format!("{split}-{:06}", out.len());
            s.x_v = s.x_v.as_ref().map(quantize);
            s.a_v = s.a_v.as_ref().map(quantize);
            s.validate()?;
            out.push(s);
        }
    }
    Ok(out)
}

fn check_field(id: &str, s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        bail!(Format, "record {id}: text fields cannot contain tabs or line breaks");
    }
    Ok(())
}

fn image_name(id: &str, which: &str, channels: usize) -> String {
    format!("images/{id}.{which}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

/// Writes `dir/manifest.tsv` and the images under `dir/images`.
pub fn write_manifest(dir: &Path, samples: &[Sample]) -> Result<Vec<Record>> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let mut files = [None, None];
        for (slot, (img, which)) in files.iter_mut().zip([(&s.x_v, "x"), (&s.a_v, "y")]) {
            if let Some(img) = img {
                let name = image_name(&s.id, which, img.channels());
                save_pnm(&dir.join(&name), img)?;
                *slot = Some(name);
            }
        }
        let [x_v_file, a_v_file] = files;
        records.push(Record { sample: s.clone(), x_v_file, a_v_file });
    }
    write_manifest_lines(&dir.join(MANIFEST), &records)?;
    Ok(records)
}

/// Writes only the manifest; image files are referenced, not written.
pub fn write_manifest_lines(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{MANIFEST_HEADER}")?;
    for r in records {
        let s = &r.sample;
        let opt = |v: &Option<String>| v.clone().unwrap_or_default();
        let fields = [
            s.id.clone(),
            s.task.to_string(),
            opt(&r.x_v_file),
            opt(&r.a_v_file),
            opt(&s.q),
            opt(&s.k),
            opt(&s.a_t),
            opt(&s.think),
            s.params.as_ref().map(SceneParams::to_record).unwrap_or_default(),
            s.target_params.as_ref().map(SceneParams::to_record).unwrap_or_default(),
        ];
        for f in &fields {
            check_field(&s.id, f)?;
        }
        writeln!(w, "{}", fields.join("\t"))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest; image paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if n == 0 {
            if line != MANIFEST_HEADER {
                bail!(Format, "{}: unexpected header {line:?}", path.display());
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            bail!(Format, "{}:{}: expected 10 columns, got {}", path.display(), n + 1, cols.len());
        }
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        let img = |s: &str| -> Result<Option<crate::model::Image>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(load_pnm(&base.join(s))?))
            }
        };
        let params = |s: &str| -> Result<Option<SceneParams>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(SceneParams::from_record(s)?))
            }
        };
        let task: Task = cols[1].parse()?;
        let mut sample = Sample {
            id: cols[0].to_string(),
            task,
            q: opt(cols[4]),
            x_v: img(cols[2])?,
            k: opt(cols[5]),
            a_t: opt(cols[6]),
            a_v: img(cols[3])?,
            think: opt(cols[7]),
            params: params(cols[8])?,
            target_params: params(cols[9])?,
        };
        if let Some(p) = &sample.params {
            let label = p.modality.name();
            if let Some(x) = sample.x_v.take() {
                sample.x_v = Some(x.with_label(label));
            }
        }
        sample.validate()?;
        out.push(Record { sample, x_v_file: opt(cols[2]), a_v_file: opt(cols[3]) });
    }
    Ok(out)
}

/// Generates one split and writes it under `dir`.
pub fn build_corpus(spec: &CorpusSpec, seed: u64, split: &str, dir: &Path) -> Result<Vec<Record>> {
    let samples = generate_samples(spec, seed, split)?;
    write_manifest(dir, &samples)
}
