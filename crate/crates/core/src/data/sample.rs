use super::scene::{caption, render, shape_mask, LesionLevel, PseudoModality, SceneParams};
use crate::error::{bail, Result};
use crate::model::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const DESCRIBE: &str = "describe the image.";
pub const SUPERRES_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InterleavedKind {
    Segment,
    SuperRes,
    Counterfactual,
    Stain,
    CrossModal,
}

impl InterleavedKind {
    pub const ALL: [InterleavedKind; 5] =
        [Self::Segment, Self::SuperRes, Self::Counterfactual, Self::Stain, Self::CrossModal];

    pub fn name(self) -> &'static str {
        match self {
            Self::Segment => "segment",
            Self::SuperRes => "superres",
            Self::Counterfactual => "counterfactual",
            Self::Stain => "stain",
            Self::CrossModal => "crossmodal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    TextOnly,
    I2T,
    T2I,
    Interleaved(InterleavedKind),
}

impl Task {
    pub fn category(self) -> Category {
        match self {
            Task::TextOnly => Category::Text,
            Task::I2T => Category::I2T,
            Task::T2I => Category::T2I,
            Task::Interleaved(_) => Category::Interleaved,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::TextOnly => f.write_str("text"),
            Task::I2T => f.write_str("i2t"),
            Task::T2I => f.write_str("t2i"),
            Task::Interleaved(k) => write!(f, "interleaved:{}", k.name()),
        }
    }
}

impl FromStr for Task {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "text" => Task::TextOnly,
            "i2t" => Task::I2T,
            "t2i" => Task::T2I,
            _ => match s.strip_prefix("interleaved:").and_then(|k| InterleavedKind::ALL.into_iter().find(|x| x.name() == k)) {
                Some(k) => Task::Interleaved(k),
                None => bail!(Format, "unknown task {s:?}"),
            },
        })
    }
}

/// Mixture unit of the curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Text,
    T2I,
    I2T,
    Interleaved,
}

impl Category {
    pub const ALL: [Category; 4] = [Self::Text, Self::T2I, Self::I2T, Self::Interleaved];

    pub fn name(self) -> &'static str {
        match self {
            Self::Text => "text",
            Self::T2I => "t2i",
            Self::I2T => "i2t",
            Self::Interleaved => "interleaved",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.into_iter().find(|c| c.name() == s) {
            Some(c) => Ok(c),
            None => bail!(Config, "unknown task category {s:?}"),
        }
    }
}

/// One multimodal record: `(q, x_v, k) -> (a_t, a_v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub q: Option<String>,
    pub x_v: Option<Image>,
    pub k: Option<String>,
    pub a_t: Option<String>,
    pub a_v: Option<Image>,
    /// Reasoning including its markers.
    pub think: Option<String>,
    /// Scene behind `x_v` (or `a_v` for text-to-image).
    pub params: Option<SceneParams>,
    /// Scene behind `a_v` when it differs from `params`.
    pub target_params: Option<SceneParams>,
}

impl Sample {
    fn empty(task: Task) -> Self {
        Sample {
            id: String::new(),
            task,
            q: None,
            x_v: None,
            k: None,
            a_t: None,
            a_v: None,
            think: None,
            params: None,
            target_params: None,
        }
    }

    /// Checks the field-presence rules of the task.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.task {
            Task::TextOnly => self.a_t.is_some() && self.x_v.is_none() && self.a_v.is_none(),
            Task::I2T => self.x_v.is_some() && self.a_t.is_some() && self.a_v.is_none(),
            Task::T2I => self.a_t.is_some() && self.a_v.is_some() && self.x_v.is_none(),
            Task::Interleaved(_) => {
                self.x_v.is_some() && self.a_v.is_some() && (self.q.is_some() || self.a_t.is_some())
            }
        };
        if !ok {
            bail!(Contract, "sample {} does not carry the fields a {} record needs", self.id, self.task);
        }
        if let Some(t) = &self.think {
            if !t.starts_with(THINK_OPEN) || !t.ends_with(THINK_CLOSE) || t.matches(THINK_CLOSE).count() != 1 {
                bail!(Contract, "sample {}: reasoning must be wrapped in one think block", self.id);
            }
        }
        Ok(())
    }

    /// Text the model reads before it answers.
    pub fn prompt(&self) -> String {
        match self.task {
            Task::T2I => self.a_t.clone().unwrap_or_default(),
            _ => {
                let mut s = String::new();
                if let Some(k) = &self.k {
                    s.push_str(k);
                    s.push_str(": ");
                }
                if let Some(q) = &self.q {
                    s.push_str(q);
                    s.push(' ');
                }
                s
            }
        }
    }

    /// Text the model is trained to produce after [`prompt`](Self::prompt).
    pub fn answer(&self) -> String {
        match (&self.think, &self.a_t) {
            (Some(t), Some(a)) => format!("{t} {a}"),
            (None, Some(a)) => a.clone(),
            (Some(t), None) => t.clone(),
            (None, None) => String::new(),
        }
    }

    /// Every text field joined by single spaces.
    pub fn full_text(&self) -> String {
        [&self.k, &self.q, &self.think, &self.a_t]
            .into_iter()
            .flatten()
            .cloned()
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Caption pairs are the records quality control scores.
    pub fn is_caption_pair(&self) -> bool {
        match self.task {
            Task::T2I => true,
            Task::I2T => self.q.as_deref() == Some(DESCRIBE) && self.think.is_none(),
            _ => false,
        }
    }

    /// The image a caption describes.
    pub fn captioned_image(&self) -> Option<&Image> {
        match self.task {
            Task::T2I => self.a_v.as_ref(),
            _ => self.x_v.as_ref(),
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.x_v.iter().chain(self.a_v.iter())
    }
}

fn area_pixels(params: &SceneParams, size: usize) -> Result<usize> {
    Ok(shape_mask(params, size)?.pixels().iter().filter(|&&v| v > 0.5).count())
}

pub fn make_text_only(params: &SceneParams, size: usize) -> Result<Sample> {
    let mut s = Sample::empty(Task::TextOnly);
    s.k = Some(params.modality.to_string());
    s.a_t = Some(format!(
        "a {} of radius {} covers {} of {} pixels.",
        params.shape,
        params.radius,
        area_pixels(params, size)?,
        size * size
    ));
    s.params = Some(params.clone());
    Ok(s)
}

/// Image captioning record (`describe the image.`).
pub fn make_caption_pair(params: &SceneParams, size: usize, text: Option<String>) -> Result<Sample> {
    let mut s = Sample::empty(Task::I2T);
    s.x_v = Some(render(params, size)?);
    s.q = Some(DESCRIBE.to_string());
    s.a_t = Some(text.unwrap_or_else(|| caption(params)));
    s.params = Some(params.clone());
    Ok(s)
}

pub fn make_t2i(params: &SceneParams, size: usize, text: Option<String>) -> Result<Sample> {
    let mut s = Sample::empty(Task::T2I);
    s.a_v = Some(render(params, size)?);
    s.a_t = Some(text.unwrap_or_else(|| caption(params)));
    s.params = Some(params.clone());
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Question {
    LesionPresent,
    Shape,
    Modality,
    Position,
    Brightness,
    LesionSize,
}

impl Question {
    pub const ALL: [Question; 6] =
        [Self::LesionPresent, Self::Shape, Self::Modality, Self::Position, Self::Brightness, Self::LesionSize];

    pub fn text(self) -> &'static str {
        match self {
            Self::LesionPresent => "is a lesion present?",
            Self::Shape => "what shape is shown?",
            Self::Modality => "which modality is this?",
            Self::Position => "where is the shape?",
            Self::Brightness => "how bright is the shape?",
            Self::LesionSize => "how large is the lesion?",
        }
    }

    pub fn from_text(q: &str) -> Option<Question> {
        Self::ALL.into_iter().find(|x| x.text() == q.trim())
    }

    /// Ground-truth answer read off the scene.
    pub fn answer(self, p: &SceneParams) -> String {
        match self {
            Self::LesionPresent => if p.lesion { "yes" } else { "no" }.to_string(),
            Self::Shape => p.shape.to_string(),
            Self::Modality => p.modality.to_string(),
            Self::Position => format!("{} {}", p.row_word(), p.col_word()),
            Self::Brightness => p.intensity_word().to_string(),
            Self::LesionSize => p.lesion_level().word().to_string(),
        }
    }
}

fn reasoning(p: &SceneParams) -> String {
    let lesion = match p.lesion_level() {
        LesionLevel::None => "no lesion is visible".to_string(),
        l => format!("a {} lesion sits at its centre", l.word()),
    };
    format!(
        "{THINK_OPEN}the scan is {}. it shows a {} {} at {} {}. {lesion}.{THINK_CLOSE}",
        p.modality,
        p.intensity_word(),
        p.shape,
        p.row_word(),
        p.col_word()
    )
}

/// Visual question answering record from the fixed question bank.
pub fn make_instruction(params: &SceneParams, question: Question, with_think: bool, size: usize) -> Result<Sample> {
    let mut s = Sample::empty(Task::I2T);
    s.x_v = Some(render(params, size)?);
    s.k = Some(params.modality.to_string());
    s.q = Some(question.text().to_string());
    s.a_t = Some(question.answer(params));
    s.think = with_think.then(|| reasoning(params));
    s.params = Some(params.clone());
    Ok(s)
}

/// Final answer in generated text: whatever follows the think block,
/// whitespace-trimmed.
pub fn parse_answer(text: &str) -> String {
    let tail = match text.rfind(THINK_CLOSE) {
        Some(i) => &text[i + THINK_CLOSE.len()..],
        None => text,
    };
    tail.trim().to_string()
}

const CROSS_SOURCES: [PseudoModality; 5] =
    [PseudoModality::Cxr, PseudoModality::Ct, PseudoModality::Mri, PseudoModality::Ultrasound, PseudoModality::Pet];

pub fn make_interleaved(kind: InterleavedKind, params: &SceneParams, seed: u64, size: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Sample::empty(Task::Interleaved(kind));
    let mut p = params.clone();
    match kind {
        InterleavedKind::Segment => {
            s.x_v = Some(render(&p, size)?);
            s.a_v = Some(shape_mask(&p, size)?);
            s.q = Some(format!("segment the {}.", p.shape));
            s.a_t = Some(format!("mask of the {} at {} {}.", p.shape, p.row_word(), p.col_word()));
        }
        InterleavedKind::SuperRes => {
            if !size.is_multiple_of(SUPERRES_FACTOR) {
                bail!(Shape, "super-resolution needs a size divisible by {SUPERRES_FACTOR}");
            }
            let full = render(&p, size)?;
            s.x_v = Some(full.downsample(SUPERRES_FACTOR)?);
            s.a_v = Some(full);
            s.q = Some(format!("increase the resolution {SUPERRES_FACTOR}x."));
            s.a_t = Some(format!("{SUPERRES_FACTOR}x super-resolved {} image of a {}.", p.modality, p.shape));
        }
        InterleavedKind::Counterfactual => {
            let from = p.lesion_level();
            let options: Vec<LesionLevel> = LesionLevel::ALL.into_iter().filter(|l| *l != from).collect();
            let to = options[rng.random_range(0..options.len())];
            let mut edited = p.clone();
            edited.lesion = to != LesionLevel::None;
            edited.lesion_radius = match to {
                LesionLevel::Large => super::scene::LESION_RADII[1],
                _ => super::scene::LESION_RADII[0],
            };
            if from != LesionLevel::None && to == LesionLevel::None {
                edited.lesion_radius = p.lesion_radius;
            }
            s.x_v = Some(render(&p, size)?);
            s.a_v = Some(render(&edited, size)?);
            s.q = Some(format!("show this scan with lesion {}.", to.word()));
            s.a_t = Some(format!("the lesion changed from {} to {}.", from.word(), to.word()));
            s.target_params = Some(edited);
        }
        InterleavedKind::Stain => {
            p = p.with_modality(PseudoModality::He);
            let target = p.with_modality(PseudoModality::Ihc);
            s.x_v = Some(render(&p, size)?);
            s.a_v = Some(render(&target, size)?);
            s.q = Some(format!("restain as {}.", PseudoModality::Ihc));
            s.a_t = Some(format!("{} converted to {} staining.", PseudoModality::He, PseudoModality::Ihc));
            s.target_params = Some(target);
        }
        InterleavedKind::CrossModal => {
            let src = if CROSS_SOURCES.contains(&p.modality) {
                p.modality
            } else {
                CROSS_SOURCES[rng.random_range(0..CROSS_SOURCES.len())]
            };
            let others: Vec<PseudoModality> = CROSS_SOURCES.into_iter().filter(|m| *m != src).collect();
            let dst = others[rng.random_range(0..others.len())];
            p = p.with_modality(src);
            let target = p.with_modality(dst);
            s.x_v = Some(render(&p, size)?);
            s.a_v = Some(render(&target, size)?);
            s.q = Some(format!("translate to {dst}."));
            s.a_t = Some(format!("{src} translated to {dst}."));
            s.target_params = Some(target);
        }
    }
    s.k = Some(p.modality.to_string());
    s.params = Some(p);
    Ok(s)
}
