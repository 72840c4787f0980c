use super::optim::{clip_grad_norm, AdamW, EmaShadow};
use super::stage::{sample_mixture, StageConfig};
use crate::data::{tokenizer, Category, Sample, Task};
use crate::error::{bail, Result};
use crate::model::{build_sequence, Binder, Image, ModalityTag, ParamGroup, SegmentInputs, SequenceMode, UnifiedModel};
use crate::objectives::{combine, flow_loss, ntp_loss, FlowPair};
use crate::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Per-category sample pools, read cyclically.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pools: BTreeMap<Category, Vec<Sample>>,
    cursors: BTreeMap<Category, usize>,
}

impl Datasets {
    pub fn from_samples(samples: impl IntoIterator<Item = Sample>) -> Self {
        let mut pools: BTreeMap<Category, Vec<Sample>> = BTreeMap::new();
        for s in samples {
            pools.entry(s.task.category()).or_default().push(s);
        }
        Self { pools, cursors: BTreeMap::new() }
    }

    pub fn len(&self, c: Category) -> usize {
        self.pools.get(&c).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.pools.values().all(Vec::is_empty)
    }

    /// Next sample of category `c`, wrapping around at the end of the pool.
    pub fn next(&mut self, c: Category) -> Result<&Sample> {
        let Some(pool) = self.pools.get(&c).filter(|p| !p.is_empty()) else {
            bail!(Contract, "no {c} samples to train on");
        };
        let cur = self.cursors.entry(c).or_insert(0);
        let s = &pool[*cur % pool.len()];
        *cur += 1;
        Ok(s)
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.pools.values().flatten()
    }

    pub fn reset(&mut self) {
        self.cursors.clear();
    }
}

/// Token layout of a sample: `[BOS] prompt answer [EOS]` and the number of
/// leading tokens (BOS plus prompt) that are not trained on.
pub fn text_layout(sample: &Sample) -> (Vec<u32>, usize) {
    let prompt = sample.prompt();
    let mut ids = vec![tokenizer::BOS];
    ids.extend(tokenizer::encode(&prompt));
    let n_prompt = ids.len();
    if sample.task != Task::T2I {
        ids.extend(tokenizer::encode(&sample.answer()));
    }
    ids.push(tokenizer::EOS);
    let n_prompt = if sample.task == Task::TextOnly { 1 } else { n_prompt };
    (ids, n_prompt)
}

/// Losses of one sample. Text losses are skipped for text-to-image records.
pub struct ExampleLosses {
    pub ntp: Option<Var>,
    pub flow: Option<Var>,
    pub tokens: usize,
}

/// Builds the sequence for `sample`, runs the model and returns its losses.
/// Flow time and noise are drawn from `rng`.
pub fn example_losses(
    model: &UnifiedModel,
    g: &mut Graph,
    b: &mut Binder,
    sample: &Sample,
    rng: &mut ChaCha8Rng,
) -> Result<ExampleLosses> {
    let cfg = model.config();
    let (ids, n_prompt) = text_layout(sample);
    let inputs = &ids[..ids.len() - 1];
    let (mode, vit_img, vae_img): (SequenceMode, Option<&Image>, Option<&Image>) = match sample.task {
        Task::TextOnly => (SequenceMode::Understand, None, None),
        Task::I2T => (SequenceMode::Understand, sample.x_v.as_ref(), None),
        Task::T2I => (SequenceMode::Generate, None, sample.a_v.as_ref()),
        Task::Interleaved(_) => (SequenceMode::Interleaved, sample.x_v.as_ref(), sample.a_v.as_ref()),
    };
    let vit = match vit_img {
        Some(img) => Some(model.vit_encode_var(g, b, img)?),
        None => None,
    };
    let flow = match vae_img {
        Some(img) => {
            let z0 = model.vae_encode(img)?;
            let t: f64 = rng.random();
            let z1 = Tensor::randn(z0.shape(), 1.0, rng);
            Some(FlowPair::with_noise(z0, z1, t)?)
        }
        None => None,
    };
    let n_vit = if vit.is_some() { cfg.n_patches() } else { 0 };
    let n_vae = if flow.is_some() { cfg.n_latents() } else { 0 };
    let seq = build_sequence(inputs, n_vit, n_vae, mode, flow.as_ref().map(|f| f.t), cfg.sequence)?;
    let zt = flow.as_ref().map(|f| g.constant(f.z_t.clone()));
    let h = model.forward(g, b, &seq, SegmentInputs { vit, vae: zt })?;

    let ntp = if sample.task == Task::T2I {
        None
    } else {
        let targets: Vec<Option<usize>> = (0..inputs.len())
            .map(|i| (i + 1 >= n_prompt).then_some(ids[i + 1] as usize))
            .collect();
        let logits = model.lm_logits(g, b, h, &seq.indices_of(ModalityTag::Text))?;
        Some(ntp_loss(g, logits, &targets)?)
    };
    let flow = match &flow {
        Some(f) => {
            let v = model.predict_velocity(g, b, h, &seq.indices_of(ModalityTag::Vae), Some(f.t))?;
            let target = g.constant(f.v_target.clone());
            Some(flow_loss(g, v, target)?)
        }
        None => None,
    };
    Ok(ExampleLosses { ntp, flow, tokens: seq.len() })
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub category: Category,
    pub l_ntp: Option<f64>,
    pub l_flow: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

pub const TRACE_HEADER: &str = "step,category,l_ntp,l_flow,total,lr";

impl TraceRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.category,
            opt(self.l_ntp),
            opt(self.l_flow),
            self.total,
            self.lr
        )
    }
}

pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

/// Mean of the values `f` yields over `rows`; `None` if there are none.
pub fn window_mean(rows: &[TraceRow], f: impl Fn(&TraceRow) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub struct StageOutcome {
    pub trace: Vec<TraceRow>,
    pub ema: EmaShadow,
}

/// Applies the stage's freeze flags to the model.
pub fn apply_freeze(model: &mut UnifiedModel, cfg: &StageConfig) {
    for g in ParamGroup::ALL {
        model.params_mut().set_trainable(g, !cfg.freeze.is_frozen(g));
    }
}

/// Runs one curriculum stage in place. Every stage reads its pools from the
/// start, so a stage's result depends only on its input parameters.
///
/// `sink`, when given, receives the trace as CSV while training runs.
/// `on_step` is called after each parameter update (used by tests to record
/// the parameter trajectory).
pub fn train_stage(
    model: &mut UnifiedModel,
    data: &mut Datasets,
    cfg: &StageConfig,
    mut sink: Option<&mut dyn Write>,
    mut on_step: Option<&mut dyn FnMut(&UnifiedModel)>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    for (c, _) in &cfg.mixing {
        if data.len(*c) == 0 {
            bail!(Contract, "stage {} mixes {c} but the dataset has none", cfg.stage_id);
        }
    }
    apply_freeze(model, cfg);
    data.reset();
    let mut opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut ema = EmaShadow::new(model.params(), cfg.ema_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = cfg.effective_lr();
    let mut trace = Vec::with_capacity(cfg.steps);
    if let Some(w) = sink.as_deref_mut() {
        writeln!(w, "{TRACE_HEADER}")?;
    }

    for step in 0..cfg.steps {
        let category = sample_mixture(cfg, &mut rng);
        let mut g = Graph::new(cfg.seed.wrapping_add(step as u64));
        let mut b = Binder::training(model.params());
        let mut ntp = Vec::new();
        let mut flow = Vec::new();
        for _ in 0..cfg.batch_size {
            let sample = data.next(category)?;
            let l = example_losses(model, &mut g, &mut b, sample, &mut rng).map_err(|e| match e {
                crate::Error::Numeric(m) => crate::Error::Numeric(format!("stage {} step {step}: {m}", cfg.stage_id)),
                other => other,
            })?;
            if l.tokens > cfg.max_tokens {
                bail!(Contract, "sample {} needs {} tokens, stage allows {}", sample.id, l.tokens, cfg.max_tokens);
            }
            ntp.extend(l.ntp);
            flow.extend(l.flow);
        }
        let mean = |g: &mut Graph, v: &[Var]| -> Result<Option<Var>> {
            if v.is_empty() {
                return Ok(None);
            }
            let mut acc = v[0];
            for &x in &v[1..] {
                acc = g.add(acc, x)?;
            }
            Ok(Some(g.scale(acc, 1.0 / v.len() as f64)))
        };
        let l_ntp = mean(&mut g, &ntp)?;
        let l_flow = mean(&mut g, &flow)?;
        let total = combine(&mut g, l_ntp, l_flow, cfg.weights).map_err(|e| match e {
            crate::Error::Numeric(m) => crate::Error::Numeric(format!("stage {} step {step}: {m}", cfg.stage_id)),
            other => other,
        })?;
        g.backward(total)?;
        let mut grads = b.grads(&g);
        for (id, gr) in &grads {
            if gr.check_finite("gradient").is_err() {
                bail!(Numeric, "stage {} step {step}: non-finite gradient for {}", cfg.stage_id, model.params().get(*id).name);
            }
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(model.params_mut(), &grads, lr)?;
        ema.update(model.params())?;
        if let Some(f) = on_step.as_deref_mut() {
            f(model);
        }

        let row = TraceRow {
            step,
            category,
            l_ntp: l_ntp.map(|v| g.value(v).item()),
            l_flow: l_flow.map(|v| g.value(v).item()),
            total: g.value(total).item(),
            lr,
        };
        if !row.total.is_finite() {
            bail!(Numeric, "stage {} step {step}: non-finite loss", cfg.stage_id);
        }
        if let Some(w) = sink.as_deref_mut() {
            writeln!(w, "{}", row.csv())?;
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("stage {} step {step}: {}", cfg.stage_id, row.csv());
        }
        trace.push(row);
    }
    Ok(StageOutcome { trace, ema })
}

/// Reconstruction pre-training of the latent codec ("stage 0").
#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { steps: 400, lr: 1e-2, batch_size: 16, seed: 0 }
    }
}

/// Trains only the latent codec on `decode(encode(x)) ≈ x`, then freezes it.
/// Returns the per-step reconstruction loss.
pub fn pretrain_vae(model: &mut UnifiedModel, images: &[Image], cfg: &VaeConfig) -> Result<Vec<f64>> {
    if images.is_empty() {
        bail!(Contract, "latent codec pre-training needs images");
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        bail!(Config, "vae pre-training needs positive steps, batch and lr");
    }
    let targets: Vec<Tensor> = images.iter().map(|i| model.vae_patches(i)).collect::<Result<_>>()?;
    let all = Tensor::from_rows(&targets.iter().flat_map(|t| (0..t.rows()).map(|r| t.row(r).to_vec())).collect::<Vec<_>>())?;
    let per = targets[0].rows();
    for g in ParamGroup::ALL {
        model.params_mut().set_trainable(g, g == ParamGroup::Vae);
    }
    let mut opt = AdamW::new(model.params(), 0.9, 0.999, 1e-8, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let rows: Vec<usize> = (0..cfg.batch_size)
            .flat_map(|_| {
                let i = rng.random_range(0..targets.len());
                (i * per)..(i + 1) * per
            })
            .collect();
        let mut g = Graph::new(cfg.seed);
        let mut b = Binder::training(model.params());
        let xall = g.constant(all.clone());
        let x = g.index_rows(xall, &rows)?;
        let z = model.codec_encode(&mut g, &mut b, x)?;
        let y = model.vae_decode_var(&mut g, &mut b, z)?;
        let d = g.sub(y, x)?;
        let sq = g.mul(d, d)?;
        let loss = g.mean(sq);
        g.backward(loss)?;
        let l = g.value(loss).item();
        if !l.is_finite() {
            bail!(Numeric, "codec pre-training step {step}: non-finite loss");
        }
        losses.push(l);
        let grads = b.grads(&g);
        opt.step(model.params_mut(), &grads, cfg.lr)?;
    }
    model.params_mut().set_trainable(ParamGroup::Vae, false);
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumConfig {
    pub vae: VaeConfig,
    pub stages: Vec<StageConfig>,
}

impl CurriculumConfig {
    pub fn paper_default() -> Result<Self> {
        Ok(Self { vae: VaeConfig::default(), stages: (1..=3).map(super::default_stage).collect::<Result<_>>()? })
    }
}

pub struct CurriculumOutcome {
    pub vae_losses: Vec<f64>,
    pub stages: Vec<StageOutcome>,
    /// Checkpoint files written, in order.
    pub checkpoints: Vec<PathBuf>,
}

/// Paths of the checkpoints a curriculum run writes into `dir`.
pub fn checkpoint_path(dir: &Path, stage: u8, ema: bool) -> PathBuf {
    if ema {
        dir.join(format!("stage{stage}.ema.okaf"))
    } else {
        dir.join(format!("stage{stage}.okaf"))
    }
}

pub fn trace_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.trace.csv"))
}

/// Writes the raw and EMA checkpoints of a finished stage; returns their paths.
pub fn save_stage(dir: &Path, model: &UnifiedModel, stage: u8, outcome: &StageOutcome) -> Result<[PathBuf; 2]> {
    let raw = checkpoint_path(dir, stage, false);
    model.save_file(&raw)?;
    let ema = checkpoint_path(dir, stage, true);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&ema)?);
    outcome.ema.apply_to(model.params()).save(&mut f)?;
    f.flush()?;
    Ok([raw, ema])
}

/// Stage 0 (unless `pretrain` is false) then every stage in order, each
/// starting from the previous stage's final parameters. With `out`, writes
/// the model config, a checkpoint and an EMA checkpoint per stage, and the
/// per-stage traces.
pub fn run_curriculum(
    model: &mut UnifiedModel,
    data: &mut Datasets,
    cfg: &CurriculumConfig,
    pretrain: bool,
    out: Option<&Path>,
) -> Result<CurriculumOutcome> {
    for w in cfg.stages.windows(2) {
        if w[0].stage_id >= w[1].stage_id {
            bail!(Config, "stages must be ordered by id, got {} before {}", w[0].stage_id, w[1].stage_id);
        }
    }
    for s in &cfg.stages {
        s.validate()?;
    }
    let mut checkpoints = Vec::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("model.cfg"), model.config().to_kv().to_string())?;
    }
    let vae_losses = if pretrain {
        let images: Vec<Image> = data.samples().flat_map(|s| s.images().cloned()).collect();
        let l = pretrain_vae(model, &images, &cfg.vae)?;
        if let Some(dir) = out {
            let p = checkpoint_path(dir, 0, false);
            model.save_file(&p)?;
            checkpoints.push(p);
        }
        l
    } else {
        Vec::new()
    };
    let mut stages = Vec::new();
    for s in &cfg.stages {
        log::info!("stage {}: {} steps at lr {}", s.stage_id, s.steps, s.effective_lr());
        let outcome = match out {
            Some(dir) => {
                let f = std::fs::File::create(trace_path(dir, s.stage_id))?;
                let mut w = std::io::BufWriter::new(f);
                let o = train_stage(model, data, s, Some(&mut w), None)?;
                w.flush()?;
                o
            }
            None => train_stage(model, data, s, None, None)?,
        };
        if let Some(dir) = out {
            checkpoints.extend(save_stage(dir, model, s.stage_id, &outcome)?);
        }
        stages.push(outcome);
    }
    Ok(CurriculumOutcome { vae_losses, stages, checkpoints })
}
