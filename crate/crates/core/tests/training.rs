use okaf::data::{generate_samples, tokenizer, Category, CorpusSpec, Sample};
use okaf::model::{Image, ModelConfig, ParamGroup, UnifiedModel};
use okaf::objectives::sample_latent;
use okaf::train::*;
use okaf::Error;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        width: 16,
        depth: 1,
        heads: 2,
        mlp_hidden: 32,
        vit_dim: 16,
        vit_depth: 1,
        vit_heads: 2,
        ..Default::default()
    }
}

fn corpus(split: &str) -> Vec<Sample> {
    generate_samples(&CorpusSpec::default().scaled(0.25), 7, split).unwrap()
}

fn short(stage: u8, steps: usize) -> StageConfig {
    let mut c = default_stage(stage).unwrap();
    c.steps = steps;
    c.batch_size = 2;
    c
}

fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.pixels().len() as f64;
    10.0 * (1.0 / mse).log10()
}

#[test]
fn codec_pretraining_reconstructs_held_out_images() {
    let mut model = UnifiedModel::new(ModelConfig::default()).unwrap();
    let train: Vec<Image> = generate_samples(&CorpusSpec::default(), 1, "train")
        .unwrap()
        .iter()
        .flat_map(|s| s.images().cloned().collect::<Vec<_>>())
        .collect();
    let losses = pretrain_vae(&mut model, &train, &VaeConfig::default()).unwrap();
    assert!(losses.last().unwrap() < &(losses[0] / 10.0));
    for id in model.params().group_ids(ParamGroup::Vae) {
        assert!(!model.params().is_trainable(id));
    }
    let mut total = 0.0;
    let mut n = 0;
    for s in corpus("test") {
        for img in s.images() {
            let x = model.prepare_image(img).unwrap();
            let y = model.vae_decode(&model.vae_encode(img).unwrap()).unwrap();
            let p = psnr(&x, &y);
            assert!((okaf::eval::psnr(&x, &y, 1.0).unwrap() - p).abs() < 1e-12);
            total += p;
            n += 1;
        }
    }
    let mean = total / n as f64;
    assert!(mean > 25.0, "held-out psnr {mean}");
}

#[test]
fn freeze_schedule_across_curriculum() {
    let mut model = UnifiedModel::new(tiny_config()).unwrap();
    let mut data = Datasets::from_samples(corpus("train"));
    let before = model.params().clone();
    let images: Vec<Image> = data.samples().flat_map(|s| s.images().cloned()).collect();
    pretrain_vae(&mut model, &images, &VaeConfig { steps: 20, ..Default::default() }).unwrap();
    let after_vae = model.params().clone();
    assert!(!after_vae.group_bit_eq(&before, ParamGroup::Vae));
    assert!(after_vae.group_bit_eq(&before, ParamGroup::Vit));

    train_stage(&mut model, &mut data, &short(1, 6), None, None).unwrap();
    let s1 = model.params().clone();
    assert!(s1.group_bit_eq(&after_vae, ParamGroup::Vae));
    assert!(!s1.group_bit_eq(&after_vae, ParamGroup::Vit));
    assert!(!s1.group_bit_eq(&after_vae, ParamGroup::Understanding));
    assert!(!s1.group_bit_eq(&after_vae, ParamGroup::Generation));

    for stage in [2, 3] {
        train_stage(&mut model, &mut data, &short(stage, 6), None, None).unwrap();
        assert!(model.params().group_bit_eq(&after_vae, ParamGroup::Vae));
        assert!(model.params().group_bit_eq(&s1, ParamGroup::Vit));
    }
}

#[test]
fn ema_matches_closed_form_recursion() {
    let mut model = UnifiedModel::new(tiny_config()).unwrap();
    let mut data = Datasets::from_samples(corpus("train"));
    let cfg = short(1, 12);
    let id = model.params().id("lm_head.b").unwrap();
    let theta0 = model.params().value(id).clone();
    let mut traj = Vec::new();
    let mut record = |m: &UnifiedModel| traj.push(m.params().value(id).clone());
    let out = train_stage(&mut model, &mut data, &cfg, None, Some(&mut record)).unwrap();
    assert_eq!(traj.len(), 12);
    let r = cfg.ema_ratio;
    let n = traj.len() as i32;
    let shadow = out.ema.get(id).unwrap();
    for j in 0..theta0.data().len() {
        let mut expect = r.powi(n) * theta0.data()[j];
        for (k, t) in traj.iter().enumerate() {
            expect += (1.0 - r) * r.powi(n - 1 - k as i32) * t.data()[j];
        }
        assert!((shadow.data()[j] - expect).abs() < 1e-12);
    }
}

#[test]
fn trace_is_deterministic_and_finite() {
    let run = || {
        let mut model = UnifiedModel::new(tiny_config()).unwrap();
        let mut data = Datasets::from_samples(corpus("train"));
        let mut buf = Vec::new();
        let out = train_stage(&mut model, &mut data, &short(3, 8), Some(&mut buf), None).unwrap();
        (buf, out.trace, model.params().clone())
    };
    let (a, trace, pa) = run();
    let (b, _, pb) = run();
    assert_eq!(a, b);
    assert!(pa.bit_eq(&pb));
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    assert_eq!(lines.count(), 8);
    assert!(trace.iter().all(|r| r.total.is_finite() && r.lr == short(3, 8).effective_lr()));
}

#[test]
fn curriculum_checkpoints_reload_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = UnifiedModel::new(tiny_config()).unwrap();
    let mut data = Datasets::from_samples(corpus("train"));
    let cfg = CurriculumConfig {
        vae: VaeConfig { steps: 10, ..Default::default() },
        stages: vec![short(1, 3), short(2, 3), short(3, 3)],
    };
    let out = run_curriculum(&mut model, &mut data, &cfg, true, Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints.len(), 7);
    assert_eq!(out.stages.len(), 3);
    for s in 1..=3 {
        let trace = std::fs::read_to_string(trace_path(dir.path(), s)).unwrap();
        assert_eq!(trace.lines().count(), 4);
    }

    let cfg_text = std::fs::read_to_string(dir.path().join("model.cfg")).unwrap();
    let mcfg = ModelConfig::from_kv(&okaf::config::KvConfig::parse(&cfg_text).unwrap()).unwrap();
    let mut reloaded = UnifiedModel::new(mcfg).unwrap();
    reloaded.load_file(&checkpoint_path(dir.path(), 3, false)).unwrap();
    assert!(reloaded.params().bit_eq(model.params()));
    let text = tokenizer::encode("a pseudo-ct image");
    let za = sample_latent(&model, &text, 4, 11).unwrap();
    let zb = sample_latent(&reloaded, &text, 4, 11).unwrap();
    assert!(za.bit_eq(&zb));

    let mut ema = UnifiedModel::new(tiny_config()).unwrap();
    ema.load_file(&checkpoint_path(dir.path(), 3, true)).unwrap();
    assert!(ema.params().group_bit_eq(model.params(), ParamGroup::Vae));
    assert!(!ema.params().bit_eq(model.params()));
}

#[test]
fn stage_errors() {
    let mut model = UnifiedModel::new(tiny_config()).unwrap();
    let only_text: Vec<Sample> = corpus("train").into_iter().filter(|s| s.task.category() == Category::Text).collect();
    let mut data = Datasets::from_samples(only_text);
    assert!(matches!(train_stage(&mut model, &mut data, &short(1, 2), None, None), Err(Error::Contract(_))));
    let mut c = short(1, 2);
    c.dropout_text = 0.3;
    let mut data = Datasets::from_samples(corpus("train"));
    assert!(matches!(train_stage(&mut model, &mut data, &c, None, None), Err(Error::Config(_))));
    assert!(pretrain_vae(&mut model, &[], &VaeConfig::default()).is_err());
}
