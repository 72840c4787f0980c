use crate::data::{tokenizer, Sample, Task};
use crate::error::{bail, Result};
use crate::model::{build_sequence, Binder, Image, ModalityTag, SegmentInputs, SequenceMode, UnifiedModel};
use crate::objectives::{sample_field, ModelField};
use crate::tensor::{Graph, Tensor};
use crate::train::text_layout;

/// What `evaluate` asks of a model.
pub trait Predictor {
    fn name(&self) -> String;

    /// Text answer (for image-to-text and counterfactual explanations).
    fn answer(&self, sample: &Sample) -> Result<String>;

    /// Visual answer, conditioned on the sample's gold text.
    fn image(&self, sample: &Sample) -> Result<Image>;
}

/// Returns the gold answers verbatim; useful as a metric oracle.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn answer(&self, sample: &Sample) -> Result<String> {
        match &sample.a_t {
            Some(a) => Ok(a.clone()),
            None => bail!(Contract, "sample {} has no text answer", sample.id),
        }
    }

    fn image(&self, sample: &Sample) -> Result<Image> {
        match &sample.a_v {
            Some(a) => Ok(a.clone()),
            None => bail!(Contract, "sample {} has no visual answer", sample.id),
        }
    }
}

/// Answers every image request with one flat image.
#[derive(Clone, Debug)]
pub struct ConstantPredictor {
    pub image: Image,
}

impl Predictor for ConstantPredictor {
    fn name(&self) -> String {
        format!("constant:{}", self.image.mean())
    }

    fn answer(&self, _: &Sample) -> Result<String> {
        Ok(String::new())
    }

    fn image(&self, _: &Sample) -> Result<Image> {
        Ok(self.image.clone())
    }
}

/// Greedy continuation of `prompt` (which should start with BOS), optionally
/// after the semantic tokens of `image`. Stops at EOS or after `max_new`
/// tokens; returns only the new tokens, EOS excluded.
pub fn greedy_decode(model: &UnifiedModel, image: Option<&Image>, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        bail!(Contract, "greedy decoding needs a non-empty prompt");
    }
    let vit = image.map(|i| model.vit_encode(i)).transpose()?;
    let n_vit = vit.as_ref().map_or(0, Tensor::rows);
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let seq = build_sequence(&ids, n_vit, 0, SequenceMode::Understand, None, model.config().sequence)?;
        let mut g = Graph::new(0);
        let mut b = Binder::inference(model.params());
        let v = vit.as_ref().map(|t| g.constant(t.clone()));
        let h = model.forward(&mut g, &mut b, &seq, SegmentInputs { vit: v, vae: None })?;
        let last = *seq.indices_of(ModalityTag::Text).last().expect("text segment");
        let logits = model.lm_logits(&mut g, &mut b, h, &[last])?;
        let row = g.value(logits).row(0);
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if !x.is_finite() {
                bail!(Numeric, "non-finite logit while decoding");
            }
            if x > row[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == tokenizer::EOS {
            break;
        }
        ids.push(tok);
        out.push(tok);
    }
    Ok(out)
}

/// A trained model: greedy text answers, Euler-sampled images.
pub struct ModelPredictor<'a> {
    pub model: &'a UnifiedModel,
    pub steps: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a UnifiedModel, steps: usize, seed: u64) -> Self {
        Self { model, steps, seed, max_new_tokens: 256 }
    }

    /// Per-sample noise seed, independent of evaluation order.
    fn sample_seed(&self, id: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325 ^ self.seed;
        for b in id.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        h
    }
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        format!("model(steps={})", self.steps)
    }

    fn answer(&self, sample: &Sample) -> Result<String> {
        let mut prompt = vec![tokenizer::BOS];
        prompt.extend(tokenizer::encode(&sample.prompt()));
        let ids = greedy_decode(self.model, sample.x_v.as_ref(), &prompt, self.max_new_tokens)?;
        Ok(tokenizer::decode(&ids))
    }

    fn image(&self, sample: &Sample) -> Result<Image> {
        let (ids, _) = text_layout(sample);
        let cond = &ids[..ids.len() - 1];
        let field = match (&sample.task, &sample.x_v) {
            (Task::T2I, _) => ModelField::new(self.model, cond),
            (Task::Interleaved(_), Some(x)) => ModelField::new(self.model, cond).with_vit(self.model.vit_encode(x)?),
            _ => bail!(Contract, "sample {} has no image to generate", sample.id),
        };
        let z = sample_field(self.model, &field, self.steps, self.sample_seed(&sample.id))?;
        self.model.vae_decode(&z)
    }
}
