use crate::config::KvConfig;
use crate::data::Category;
use crate::error::{bail, Result};
use crate::model::ParamGroup;
use crate::objectives::LossWeights;
use rand::Rng;

/// Which parameter groups stay fixed during a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeFlags {
    pub vit: bool,
    pub vae: bool,
    pub understanding: bool,
    pub generation: bool,
}

impl FreezeFlags {
    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Vit => self.vit,
            ParamGroup::Vae => self.vae,
            ParamGroup::Understanding => self.understanding,
            ParamGroup::Generation => self.generation,
        }
    }
}

/// One curriculum stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage_id: u8,
    pub steps: usize,
    /// Base learning rate.
    pub lr: f64,
    /// Multiplier applied to `lr` for desk-scale runs.
    pub lr_scale: f64,
    /// Category fractions, normalized to sum 1.
    pub mixing: Vec<(Category, f64)>,
    pub freeze: FreezeFlags,
    pub weights: LossWeights,
    pub ema_ratio: f64,
    /// Longest token sequence a training example may produce.
    pub max_tokens: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub dropout_text: f64,
    pub dropout_visual: f64,
    pub seed: u64,
}

/// Normalizes positive weights into fractions.
pub fn normalize_mixing(raw: &[(Category, f64)]) -> Result<Vec<(Category, f64)>> {
    if raw.is_empty() {
        bail!(Config, "mixing needs at least one category");
    }
    for (c, w) in raw {
        if !(*w > 0.0) || !w.is_finite() {
            bail!(Config, "mixing weight for {c} must be positive, got {w}");
        }
    }
    for (i, (c, _)) in raw.iter().enumerate() {
        if raw[..i].iter().any(|(d, _)| d == c) {
            bail!(Config, "category {c} listed twice in mixing");
        }
    }
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    Ok(raw.iter().map(|(c, w)| (*c, w / total)).collect())
}

/// Recipe for stage 1, 2 or 3. Step counts are desk-scale.
pub fn default_stage(stage_id: u8) -> Result<StageConfig> {
    use Category::*;
    let (steps, lr, mixing, vit_frozen): (usize, f64, Vec<(Category, f64)>, bool) = match stage_id {
        1 => (300, 5e-5, vec![(Text, 5.0), (T2I, 25.0), (I2T, 75.0)], false),
        2 => (400, 2.5e-5, vec![(Text, 5.0), (T2I, 45.0), (I2T, 40.0), (Interleaved, 10.0)], true),
        3 => (300, 1e-5, vec![(Text, 3.0), (T2I, 35.0), (I2T, 37.0), (Interleaved, 25.0)], true),
        _ => bail!(Config, "stage id must be 1, 2 or 3, got {stage_id}"),
    };
    Ok(StageConfig {
        stage_id,
        steps,
        lr,
        lr_scale: 100.0,
        mixing: normalize_mixing(&mixing)?,
        freeze: FreezeFlags { vit: vit_frozen, vae: true, understanding: false, generation: false },
        weights: LossWeights::default(),
        ema_ratio: 0.995,
        max_tokens: 512,
        batch_size: 4,
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.0,
        grad_clip: 1.0,
        dropout_text: 0.0,
        dropout_visual: 0.0,
        seed: stage_id as u64,
    })
}

impl StageConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr * self.lr_scale
    }

    pub fn fraction(&self, c: Category) -> f64 {
        self.mixing.iter().find(|(d, _)| *d == c).map_or(0.0, |(_, f)| *f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage_id) {
            bail!(Config, "stage id must be 1, 2 or 3");
        }
        if self.steps == 0 || self.batch_size == 0 || self.max_tokens == 0 {
            bail!(Config, "stage {}: steps, batch and max_tokens must be positive", self.stage_id);
        }
        if !(self.lr > 0.0) || !(self.lr_scale > 0.0) {
            bail!(Config, "stage {}: learning rate must be positive", self.stage_id);
        }
        if !(self.ema_ratio > 0.0 && self.ema_ratio < 1.0) {
            bail!(Config, "stage {}: ema ratio must lie in (0, 1)", self.stage_id);
        }
        if !self.freeze.vae {
            bail!(Config, "stage {}: the latent codec is frozen in every stage", self.stage_id);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            bail!(Config, "stage {}: invalid optimizer constants", self.stage_id);
        }
        if self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            bail!(Config, "stage {}: weight decay and clip norm must be nonnegative / positive", self.stage_id);
        }
        if self.dropout_text != 0.0 || self.dropout_visual != 0.0 {
            bail!(Config, "stage {}: dropout is recorded but not supported; set it to 0", self.stage_id);
        }
        self.weights.validate()?;
        let sum: f64 = self.mixing.iter().map(|(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-9 || self.mixing.iter().any(|(_, f)| !(*f > 0.0)) {
            bail!(Config, "stage {}: mixing fractions must be positive and sum to 1", self.stage_id);
        }
        Ok(())
    }

    /// Defaults for `stage_id` overridden by the keys of `c` (already
    /// stripped of any `stageN.` prefix).
    pub fn from_kv(stage_id: u8, c: &KvConfig) -> Result<Self> {
        let mut s = default_stage(stage_id)?;
        c.apply("steps", &mut s.steps)?;
        c.apply("lr", &mut s.lr)?;
        c.apply("lr_scale", &mut s.lr_scale)?;
        c.apply("ema", &mut s.ema_ratio)?;
        c.apply("max_tokens", &mut s.max_tokens)?;
        c.apply("batch", &mut s.batch_size)?;
        c.apply("beta1", &mut s.beta1)?;
        c.apply("beta2", &mut s.beta2)?;
        c.apply("eps", &mut s.eps)?;
        c.apply("weight_decay", &mut s.weight_decay)?;
        c.apply("grad_clip", &mut s.grad_clip)?;
        c.apply("dropout.text", &mut s.dropout_text)?;
        c.apply("dropout.visual", &mut s.dropout_visual)?;
        c.apply("seed", &mut s.seed)?;
        c.apply("freeze.vit", &mut s.freeze.vit)?;
        c.apply("freeze.vae", &mut s.freeze.vae)?;
        c.apply("freeze.understanding", &mut s.freeze.understanding)?;
        c.apply("freeze.generation", &mut s.freeze.generation)?;
        c.apply("w_ce", &mut s.weights.w_ce)?;
        c.apply("w_mse", &mut s.weights.w_mse)?;
        if let Some(alpha) = c.get::<f64>("alpha")? {
            if c.raw("w_ce").is_some() || c.raw("w_mse").is_some() {
                bail!(Config, "give either alpha or w_ce/w_mse, not both");
            }
            s.weights = LossWeights::from_alpha(alpha)?;
        }
        let mix = c.section("mix");
        if mix.keys().next().is_some() {
            let mut raw = Vec::new();
            for k in mix.keys() {
                let cat: Category = k.parse()?;
                let w: f64 = mix.get(k)?.expect("listed key");
                if w > 0.0 {
                    raw.push((cat, w));
                }
            }
            raw.sort_by_key(|(c, _)| *c);
            s.mixing = normalize_mixing(&raw)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("steps", self.steps);
        c.set("lr", self.lr);
        c.set("lr_scale", self.lr_scale);
        c.set("ema", self.ema_ratio);
        c.set("max_tokens", self.max_tokens);
        c.set("batch", self.batch_size);
        c.set("beta1", self.beta1);
        c.set("beta2", self.beta2);
        c.set("eps", self.eps);
        c.set("weight_decay", self.weight_decay);
        c.set("grad_clip", self.grad_clip);
        c.set("dropout.text", self.dropout_text);
        c.set("dropout.visual", self.dropout_visual);
        c.set("seed", self.seed);
        c.set("freeze.vit", self.freeze.vit);
        c.set("freeze.vae", self.freeze.vae);
        c.set("freeze.understanding", self.freeze.understanding);
        c.set("freeze.generation", self.freeze.generation);
        c.set("w_ce", self.weights.w_ce);
        c.set("w_mse", self.weights.w_mse);
        for (cat, f) in &self.mixing {
            c.set(format!("mix.{cat}"), f);
        }
        c
    }
}

/// Draws a category with the configured probabilities.
pub fn sample_mixture<R: Rng + ?Sized>(cfg: &StageConfig, rng: &mut R) -> Category {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, f) in &cfg.mixing {
        acc += f;
        if u < acc {
            return *c;
        }
    }
    cfg.mixing.last().expect("validated mixing").0
}
