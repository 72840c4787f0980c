use crate::error::{bail, Result};
use crate::model::Image;
use std::fmt;
use std::str::FromStr;

/// Geometry is expressed on a 16-unit canvas and scaled at render time.
pub const CANVAS: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PseudoModality {
    Cxr,
    Ct,
    Mri,
    Ultrasound,
    Pet,
    He,
    Ihc,
    Fundus,
}

struct Palette {
    background: f64,
    lesion: f64,
    /// Per-channel tint, zero-sum so the channel mean equals the gray value.
    tint: Option<[f64; 3]>,
}

impl PseudoModality {
    pub const ALL: [PseudoModality; 8] = [
        Self::Cxr,
        Self::Ct,
        Self::Mri,
        Self::Ultrasound,
        Self::Pet,
        Self::He,
        Self::Ihc,
        Self::Fundus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cxr => "pseudo-cxr",
            Self::Ct => "pseudo-ct",
            Self::Mri => "pseudo-mri",
            Self::Ultrasound => "pseudo-us",
            Self::Pet => "pseudo-pet",
            Self::He => "pseudo-he",
            Self::Ihc => "pseudo-ihc",
            Self::Fundus => "pseudo-fundus",
        }
    }

    fn palette(self) -> Palette {
        let (background, lesion, tint) = match self {
            Self::Cxr => (0.10, 0.35, None),
            Self::Ct => (0.15, 0.95, None),
            Self::Mri => (0.05, 0.30, None),
            Self::Ultrasound => (0.25, 0.05, None),
            Self::Pet => (0.0, 1.0, None),
            Self::He => (0.85, 0.30, Some([0.6, -0.8, 0.2])),
            Self::Ihc => (0.80, 0.20, Some([0.6, 0.1, -0.7])),
            Self::Fundus => (0.20, 0.95, Some([0.8, -0.2, -0.6])),
        };
        Palette { background, lesion, tint }
    }

    pub fn background(self) -> f64 {
        self.palette().background
    }

    pub fn channels(self) -> usize {
        if self.palette().tint.is_some() {
            3
        } else {
            1
        }
    }
}

impl fmt::Display for PseudoModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PseudoModality {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.into_iter().find(|m| m.name() == s) {
            Some(m) => Ok(m),
            None => bail!(Format, "unknown modality {s:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Circle, Self::Square, Self::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Diamond => "diamond",
        }
    }

    /// Whether offset `(dy, dx)` from the centre lies inside radius `r`.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Self::Circle => dy * dy + dx * dx <= r * r,
            Self::Square => dy.abs() <= r && dx.abs() <= r,
            Self::Diamond => dy.abs() + dx.abs() <= r,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.into_iter().find(|k| k.name() == s) {
            Some(k) => Ok(k),
            None => bail!(Format, "unknown shape {s:?}"),
        }
    }
}

/// Everything needed to draw one scene. Coordinates and radii are in canvas
/// units (see [`CANVAS`]).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub modality: PseudoModality,
    pub shape: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub intensity: f64,
    pub background: f64,
    pub lesion: bool,
    pub lesion_radius: f64,
}

pub const ROW_WORDS: [&str; 3] = ["upper", "middle", "lower"];
pub const COL_WORDS: [&str; 3] = ["left", "center", "right"];
pub const INTENSITY_WORDS: [&str; 3] = ["dim", "medium", "bright"];
pub const INTENSITY_LEVELS: [f64; 3] = [0.45, 0.65, 0.9];
pub const RADII: [f64; 3] = [2.0, 3.0, 4.0];
pub const LESION_RADII: [f64; 2] = [1.0, 2.0];
const CELL_CENTERS: [f64; 3] = [4.0, 8.0, 12.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LesionLevel {
    None,
    Small,
    Large,
}

impl LesionLevel {
    pub const ALL: [LesionLevel; 3] = [Self::None, Self::Small, Self::Large];

    pub fn word(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Small => "small",
            Self::Large => "large",
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Self::None => "no lesion",
            Self::Small => "a small lesion",
            Self::Large => "a large lesion",
        }
    }
}

/// A point of the discrete scene grid the corpus draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPoint {
    pub modality: PseudoModality,
    pub shape: ShapeKind,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub intensity: usize,
    pub lesion: LesionLevel,
}

impl GridPoint {
    pub fn params(&self) -> SceneParams {
        SceneParams {
            modality: self.modality,
            shape: self.shape,
            cy: CELL_CENTERS[self.row],
            cx: CELL_CENTERS[self.col],
            radius: RADII[self.size],
            intensity: INTENSITY_LEVELS[self.intensity],
            background: self.modality.background(),
            lesion: self.lesion != LesionLevel::None,
            lesion_radius: match self.lesion {
                LesionLevel::Large => LESION_RADII[1],
                _ => LESION_RADII[0],
            },
        }
    }

    /// Every grid point in a fixed order.
    pub fn all() -> Vec<GridPoint> {
        let mut out = Vec::new();
        for modality in PseudoModality::ALL {
            for shape in ShapeKind::ALL {
                for row in 0..3 {
                    for col in 0..3 {
                        for size in 0..3 {
                            for intensity in 0..3 {
                                for lesion in LesionLevel::ALL {
                                    out.push(GridPoint { modality, shape, row, col, size, intensity, lesion });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R) -> GridPoint {
        GridPoint {
            modality: PseudoModality::ALL[rng.random_range(0..8)],
            shape: ShapeKind::ALL[rng.random_range(0..3)],
            row: rng.random_range(0..3),
            col: rng.random_range(0..3),
            size: rng.random_range(0..3),
            intensity: rng.random_range(0..3),
            lesion: LesionLevel::ALL[rng.random_range(0..3)],
        }
    }
}

fn nearest(levels: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, l) in levels.iter().enumerate() {
        if (l - v).abs() < (levels[best] - v).abs() {
            best = i;
        }
    }
    best
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.intensity) || !unit(self.background) {
            bail!(Parameter, "intensity and background must lie in [0, 1]");
        }
        if !(self.radius >= 0.0) || !(self.lesion_radius >= 0.0) {
            bail!(Parameter, "radii must be nonnegative");
        }
        let r = self.radius.max(if self.lesion { self.lesion_radius } else { 0.0 });
        if self.cy - r < 0.0 || self.cx - r < 0.0 || self.cy + r > CANVAS || self.cx + r > CANVAS {
            bail!(Parameter, "scene geometry leaves the canvas: centre ({}, {}) radius {r}", self.cy, self.cx);
        }
        Ok(())
    }

    pub fn lesion_level(&self) -> LesionLevel {
        if !self.lesion {
            LesionLevel::None
        } else if nearest(&LESION_RADII, self.lesion_radius) == 0 {
            LesionLevel::Small
        } else {
            LesionLevel::Large
        }
    }

    pub fn row_word(&self) -> &'static str {
        ROW_WORDS[nearest(&CELL_CENTERS, self.cy)]
    }

    pub fn col_word(&self) -> &'static str {
        COL_WORDS[nearest(&CELL_CENTERS, self.cx)]
    }

    pub fn intensity_word(&self) -> &'static str {
        INTENSITY_WORDS[nearest(&INTENSITY_LEVELS, self.intensity)]
    }

    /// The nearest grid point.
    pub fn grid(&self) -> GridPoint {
        GridPoint {
            modality: self.modality,
            shape: self.shape,
            row: nearest(&CELL_CENTERS, self.cy),
            col: nearest(&CELL_CENTERS, self.cx),
            size: nearest(&RADII, self.radius),
            intensity: nearest(&INTENSITY_LEVELS, self.intensity),
            lesion: self.lesion_level(),
        }
    }

    /// Same scene under another modality, keeping the geometry.
    pub fn with_modality(&self, modality: PseudoModality) -> SceneParams {
        SceneParams { modality, background: modality.background(), ..self.clone() }
    }

    pub fn same_geometry(&self, other: &SceneParams) -> bool {
        self.shape == other.shape
            && self.cy == other.cy
            && self.cx == other.cx
            && self.radius == other.radius
            && self.lesion == other.lesion
            && self.lesion_radius == other.lesion_radius
    }

    /// Pixel bounding box `(y0, x0, y1, x1)`, exclusive ends, of the lesion
    /// disc at `size`; `None` without a lesion.
    pub fn lesion_box(&self, size: usize) -> Option<(usize, usize, usize, usize)> {
        if !self.lesion {
            return None;
        }
        let s = size as f64 / CANVAS;
        let (cy, cx, r) = (self.cy * s, self.cx * s, self.lesion_radius * s);
        let lo = |c: f64| ((c - r - 0.5).ceil().max(0.0)) as usize;
        let hi = |c: f64| (((c + r - 0.5).floor() + 1.0).min(size as f64)) as usize;
        Some((lo(cy), lo(cx), hi(cy), hi(cx)))
    }

    pub fn to_record(&self) -> String {
        format!(
            "modality={},shape={},cy={},cx={},r={},intensity={},background={},lesion={},lesion_r={}",
            self.modality,
            self.shape,
            self.cy,
            self.cx,
            self.radius,
            self.intensity,
            self.background,
            self.lesion,
            self.lesion_radius
        )
    }

    pub fn from_record(s: &str) -> Result<SceneParams> {
        let mut fields = std::collections::HashMap::new();
        for part in s.split(',') {
            let Some((k, v)) = part.split_once('=') else {
                bail!(Format, "scene field {part:?} is not key=value");
            };
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            match fields.get(k) {
                Some(v) => Ok(v),
                None => bail!(Format, "scene record lacks {k}"),
            }
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| crate::Error::Format(format!("scene field {k} is not a number")))
        };
        let p = SceneParams {
            modality: get("modality")?.parse()?,
            shape: get("shape")?.parse()?,
            cy: num("cy")?,
            cx: num("cx")?,
            radius: num("r")?,
            intensity: num("intensity")?,
            background: num("background")?,
            lesion: get("lesion")?
                .parse()
                .map_err(|_| crate::Error::Format("scene field lesion is not a bool".into()))?,
            lesion_radius: num("lesion_r")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Gray value of every pixel, row-major, before tinting.
fn gray(params: &SceneParams, size: usize) -> Vec<f64> {
    let s = size as f64 / CANVAS;
    let (cy, cx, r, lr) = (params.cy * s, params.cx * s, params.radius * s, params.lesion_radius * s);
    let lesion = params.modality.palette().lesion;
    let mut out = vec![params.background; size * size];
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let px = &mut out[y * size + x];
            if r > 0.0 && params.shape.contains(dy, dx, r) {
                *px = params.intensity;
            }
            if params.lesion && ShapeKind::Circle.contains(dy, dx, lr) {
                *px = lesion;
            }
        }
    }
    out
}

pub fn render(params: &SceneParams, size: usize) -> Result<Image> {
    params.validate()?;
    if size == 0 {
        bail!(Parameter, "render size must be positive");
    }
    let g = gray(params, size);
    let img = match params.modality.palette().tint {
        None => Image::new(size, size, 1, g)?,
        Some(tint) => {
            let px = g
                .iter()
                .flat_map(|&v| tint.map(|t| (v + t * v * (1.0 - v)).clamp(0.0, 1.0)))
                .collect();
            Image::new(size, size, 3, px)?
        }
    };
    Ok(img.with_label(params.modality.name()))
}

/// Binary mask of the shape alone.
pub fn shape_mask(params: &SceneParams, size: usize) -> Result<Image> {
    params.validate()?;
    let s = size as f64 / CANVAS;
    let (cy, cx, r) = (params.cy * s, params.cx * s, params.radius * s);
    let mut px = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            if r > 0.0 && params.shape.contains(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                px[y * size + x] = 1.0;
            }
        }
    }
    Ok(Image::new(size, size, 1, px)?.with_label("mask"))
}

pub fn caption(params: &SceneParams) -> String {
    format!(
        "a {} image showing a {} {} of radius {} at {} {} with {}",
        params.modality,
        params.intensity_word(),
        params.shape,
        params.radius,
        params.row_word(),
        params.col_word(),
        params.lesion_level().phrase()
    )
}

/// Inverse of [`caption`] on grid scenes; `None` when the text does not
/// follow the template.
pub fn parse_caption(text: &str) -> Option<SceneParams> {
    let rest = text.trim().strip_prefix("a ")?;
    let (modality, rest) = rest.split_once(" image showing a ")?;
    let mut words = rest.split(' ');
    let word = words.next()?;
    let intensity = INTENSITY_WORDS.iter().position(|w| *w == word)?;
    let shape: ShapeKind = words.next()?.parse().ok()?;
    if words.next()? != "of" || words.next()? != "radius" {
        return None;
    }
    let radius: f64 = words.next()?.parse().ok()?;
    let size = RADII.iter().position(|r| *r == radius)?;
    if words.next()? != "at" {
        return None;
    }
    let (r, c) = (words.next()?, words.next()?);
    let row = ROW_WORDS.iter().position(|w| *w == r)?;
    let col = COL_WORDS.iter().position(|w| *w == c)?;
    if words.next()? != "with" {
        return None;
    }
    let tail: Vec<&str> = words.collect();
    let lesion = LesionLevel::ALL.into_iter().find(|l| l.phrase() == tail.join(" "))?;
    let p = GridPoint { modality: modality.parse().ok()?, shape, row, col, size, intensity, lesion }.params();
    Some(p)
}
