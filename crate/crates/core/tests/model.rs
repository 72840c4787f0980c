use okaf::model::{
    build_sequence, Binder, Expert, Image, ModalityTag, ModelConfig, ParamGroup, SegmentInputs, SequenceMode,
    TokenSequence, UnifiedModel,
};
use okaf::tensor::grad_check_many;
use okaf::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        width: 16,
        depth: 2,
        heads: 2,
        mlp_hidden: 32,
        vocab: 11,
        image_size: 8,
        patch: 4,
        vit_dim: 16,
        vit_depth: 1,
        vit_heads: 2,
        vae_patch: 4,
        latent_dim: 8,
        ..Default::default()
    }
}

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(size, size, 1, (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn zero_group(model: &mut UnifiedModel, group: ParamGroup) {
    for id in model.params().group_ids(group) {
        let shape = model.params().value(id).shape().to_vec();
        *model.params_mut().value_mut(id) = Tensor::zeros(&shape);
    }
}

#[test]
fn vit_tokens_shape_and_determinism() {
    let model = UnifiedModel::new(small_config()).unwrap();
    let img = random_image(8, 1);
    let a = model.vit_encode(&img).unwrap();
    let b = model.vit_encode(&img).unwrap();
    assert_eq!(a.shape(), &[4, 16]);
    assert!(a.bit_eq(&b));
}

#[test]
fn zero_vit_encoder_gives_zero_tokens() {
    let mut model = UnifiedModel::new(small_config()).unwrap();
    zero_group(&mut model, ParamGroup::Vit);
    let z = model.vit_encode(&random_image(8, 2)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn latent_codec_shapes() {
    let model = UnifiedModel::new(small_config()).unwrap();
    let img = random_image(8, 3);
    let z = model.vae_encode(&img).unwrap();
    assert_eq!(z.shape(), &[4, 8]);
    assert!(z.bit_eq(&model.vae_encode(&img).unwrap()));
    let back = model.vae_decode(&z).unwrap();
    assert!(back.same_shape(&img));
    assert!(back.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn zero_latent_with_zero_bias_decodes_black() {
    let mut model = UnifiedModel::new(small_config()).unwrap();
    let bias = model.params().id("vae.decoder.b").unwrap();
    *model.params_mut().value_mut(bias) = Tensor::zeros(&[16]);
    let img = model.vae_decode(&Tensor::zeros(&[4, 8])).unwrap();
    assert!(img.pixels().iter().all(|&v| v == 0.0));
}

#[test]
fn head_shapes_and_zero_heads() {
    let mut model = UnifiedModel::new(small_config()).unwrap();
    for name in ["lm_head.w", "lm_head.b", "velocity_head.w", "velocity_head.b"] {
        let id = model.params().id(name).unwrap();
        let shape = model.params().value(id).shape().to_vec();
        *model.params_mut().value_mut(id) = Tensor::zeros(&shape);
    }
    let seq = build_sequence(&[1, 2, 3], 0, 4, SequenceMode::Generate, Some(0.3), Default::default()).unwrap();
    let mut g = Graph::new(0);
    let mut b = Binder::inference(model.params());
    let z = g.constant(Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
    let h = model.forward(&mut g, &mut b, &seq, SegmentInputs { vit: None, vae: Some(z) }).unwrap();
    let logits = model.lm_logits(&mut g, &mut b, h, &seq.indices_of(ModalityTag::Text)).unwrap();
    assert_eq!(g.value(logits).shape(), &[3, 11]);
    let p = g.softmax(logits, 1).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 11.0).abs() < 1e-15));
    let vel = model
        .predict_velocity(&mut g, &mut b, h, &seq.indices_of(ModalityTag::Vae), seq.flow_time())
        .unwrap();
    assert_eq!(g.value(vel).shape(), &[4, 8]);
    assert!(g.value(vel).data().iter().all(|&v| v == 0.0));
    assert!(model.predict_velocity(&mut g, &mut b, h, &[3], None).is_err());
    assert!(model.lm_logits(&mut g, &mut b, h, &[]).is_err());
}

fn velocity_at(model: &UnifiedModel, z: &Tensor, t: f64) -> Tensor {
    let seq = build_sequence(&[4, 5], 0, 4, SequenceMode::Generate, Some(t), Default::default()).unwrap();
    let mut g = Graph::new(0);
    let mut b = Binder::inference(model.params());
    let zv = g.constant(z.clone());
    let h = model.forward(&mut g, &mut b, &seq, SegmentInputs { vit: None, vae: Some(zv) }).unwrap();
    let v = model.predict_velocity(&mut g, &mut b, h, &seq.indices_of(ModalityTag::Vae), Some(t)).unwrap();
    g.value(v).clone()
}

#[test]
fn velocity_depends_on_flow_time() {
    let model = UnifiedModel::new(small_config()).unwrap();
    let z = Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let a = velocity_at(&model, &z, 0.2);
    let b = velocity_at(&model, &z, 0.7);
    assert!(a.max_abs_diff(&b) > 1e-6);
    assert!(a.bit_eq(&velocity_at(&model, &z, 0.2)));
}

#[test]
fn text_only_sequence_never_reads_generation_expert() {
    let model = UnifiedModel::new(small_config()).unwrap();
    let seq = build_sequence(&[1, 2, 3, 4], 0, 0, SequenceMode::Understand, None, Default::default()).unwrap();
    let mut g = Graph::new(0);
    let mut b = Binder::training(model.params());
    let h = model.forward(&mut g, &mut b, &seq, SegmentInputs::default()).unwrap();
    model.lm_logits(&mut g, &mut b, h, &[0, 1, 2, 3]).unwrap();
    let touched = model
        .params()
        .group_ids(ParamGroup::Generation)
        .into_iter()
        .filter(|&id| b.is_bound(id))
        .count();
    assert_eq!(touched, 0);
    assert!(b.bound().count() > 0);
}

#[test]
fn unknown_inputs_are_routing_errors() {
    let model = UnifiedModel::new(small_config()).unwrap();
    let seq = build_sequence(&[1], 4, 0, SequenceMode::Understand, None, Default::default()).unwrap();
    let mut g = Graph::new(0);
    let mut b = Binder::inference(model.params());
    let err = model.forward(&mut g, &mut b, &seq, SegmentInputs::default()).unwrap_err();
    assert!(matches!(err, okaf::Error::Routing(_)), "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_forward() {
    let model = UnifiedModel::new(small_config()).unwrap();
    let mut buf = Vec::new();
    model.save(&mut buf).unwrap();
    let mut other = UnifiedModel::new(ModelConfig { init_seed: 99, ..small_config() }).unwrap();
    assert!(!other.params().bit_eq(model.params()));
    other.load(buf.as_slice()).unwrap();
    let z = Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(velocity_at(&model, &z, 0.5).bit_eq(&velocity_at(&other, &z, 0.5)));
}

/// Loss touching every head and encoder of the model. With detached
/// conditioning the latent branch is a deliberate stop-gradient, so the
/// velocity term is left out there.
fn probe_loss(
    model: &UnifiedModel,
    g: &mut Graph,
    b: &mut Binder,
    img: &Image,
    with_flow: bool,
) -> okaf::Result<okaf::Var> {
    let cfg = model.config();
    let vit = model.vit_encode_var(g, b, img)?;
    let z0 = model.vae_encode_var(g, b, img)?;
    let recon = model.vae_decode_var(g, b, z0)?;
    let z = g.tanh(z0);
    let seq = build_sequence(&[1, 2, 3], cfg.n_patches(), cfg.n_latents(), SequenceMode::Interleaved, Some(0.4), cfg.sequence)?;
    let h = model.forward(g, b, &seq, SegmentInputs { vit: Some(vit), vae: Some(z) })?;
    let logits = model.lm_logits(g, b, h, &seq.indices_of(ModalityTag::Text))?;
    let lp = g.log_softmax(logits)?;
    let picked = g.pick_per_row(lp, &[2, 3, 0])?;
    let nll = g.mean(picked);
    let v = model.predict_velocity(g, b, h, &seq.indices_of(ModalityTag::Vae), seq.flow_time())?;
    let v2 = g.mul(v, v)?;
    let flow = g.mean(v2);
    let r2 = g.mul(recon, recon)?;
    let rec = g.mean(r2);
    let s = g.add(nll, rec)?;
    if with_flow {
        g.add(s, flow)
    } else {
        Ok(s)
    }
}

#[test]
fn whole_model_matches_finite_differences() {
    for policy in [okaf::model::ConditionGradient::Detached, okaf::model::ConditionGradient::Shared] {
        let cfg = ModelConfig { condition_gradient: policy, ..small_config() };
        let model = UnifiedModel::new(cfg).unwrap();
        let img = random_image(8, 4);
        let inputs: Vec<Tensor> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
        let err = grad_check_many(
            |g, vars| {
                let mut b = Binder::from_vars(vars.to_vec());
                probe_loss(&model, g, &mut b, &img, policy == okaf::model::ConditionGradient::Shared)
            },
            &inputs,
            1e-5,
            0,
        )
        .unwrap();
        assert!(err < 1e-4, "{policy:?}: max relative error {err}");
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, identity_mask: bool) -> TokenSequence {
    let tags: Vec<ModalityTag> = (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => ModalityTag::Text,
            1 => ModalityTag::Vit,
            _ => ModalityTag::Vae,
        })
        .collect();
    let n_text = tags.iter().filter(|&&t| t == ModalityTag::Text).count();
    let mask: Vec<bool> = (0..n * n)
        .map(|i| {
            let (q, k) = (i / n, i % n);
            q == k || (!identity_mask && rng.random_bool(0.6))
        })
        .collect();
    let flow = tags.contains(&ModalityTag::Vae).then_some(0.5);
    TokenSequence::from_parts(tags, vec![0; n_text], (0..n).collect(), mask, flow).unwrap()
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.random_range(1..=3);
    ModelConfig {
        width: heads * rng.random_range(2..=5),
        heads,
        depth: rng.random_range(1..=2),
        mlp_hidden: rng.random_range(4..=12),
        init_seed: rng.random(),
        ..small_config()
    }
}

fn run_backbone(model: &UnifiedModel, seq: &TokenSequence, x: &Tensor) -> Tensor {
    let mut g = Graph::new(0);
    let mut b = Binder::inference(model.params());
    let xv = g.constant(x.clone());
    let h = model.mot_forward(&mut g, &mut b, seq, xv).unwrap();
    g.value(h).clone()
}

#[test]
fn expert_disjointness_under_identity_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let cfg = ModelConfig { depth: 1, ..random_config(&mut rng) };
        let model = UnifiedModel::new(cfg.clone()).unwrap();
        let n = rng.random_range(2..=8);
        let seq = random_sequence(&mut rng, n, true);
        let x = Tensor::randn(&[n, cfg.width], 1.0, &mut rng);
        let base = run_backbone(&model, &seq, &x);
        for expert in [Expert::Understanding, Expert::Generation] {
            let mut perturbed = model.clone();
            for id in perturbed.expert_param_ids(expert) {
                let noise = Tensor::randn(perturbed.params().value(id).shape(), 0.5, &mut rng);
                perturbed.params_mut().value_mut(id).add_assign(&noise);
            }
            let out = run_backbone(&perturbed, &seq, &x);
            for (i, tag) in seq.tags().iter().enumerate() {
                if tag.expert() != expert {
                    assert_eq!(base.row(i), out.row(i), "row {i} ({tag}) moved when {expert:?} changed");
                }
            }
        }
    }
}

#[test]
fn expert_swap_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let cfg = random_config(&mut rng);
        let model = UnifiedModel::new(cfg.clone()).unwrap();
        let n = rng.random_range(2..=8);
        let seq = random_sequence(&mut rng, n, false);
        let x = Tensor::randn(&[n, cfg.width], 1.0, &mut rng);
        let base = run_backbone(&model, &seq, &x);

        let mut swapped = model.clone();
        swapped.swap_experts();
        let tags: Vec<ModalityTag> = seq
            .tags()
            .iter()
            .map(|t| match t.expert() {
                Expert::Understanding => ModalityTag::Vae,
                Expert::Generation => ModalityTag::Text,
            })
            .collect();
        let n_text = tags.iter().filter(|&&t| t == ModalityTag::Text).count();
        let flow = tags.contains(&ModalityTag::Vae).then_some(0.5);
        let relabeled =
            TokenSequence::from_parts(tags, vec![0; n_text], seq.positions().to_vec(), seq.mask().to_vec(), flow)
                .unwrap();
        let out = run_backbone(&swapped, &relabeled, &x);
        assert!(base.max_abs_diff(&out) <= 1e-12, "{}", base.max_abs_diff(&out));
    }
}

#[test]
fn token_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let cfg = random_config(&mut rng);
        let model = UnifiedModel::new(cfg.clone()).unwrap();
        let n = rng.random_range(2..=8);
        let seq = random_sequence(&mut rng, n, false);
        let x = Tensor::randn(&[n, cfg.width], 1.0, &mut rng);
        let base = run_backbone(&model, &seq, &x);

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let tags: Vec<ModalityTag> = perm.iter().map(|&p| seq.tags()[p]).collect();
        let positions: Vec<usize> = perm.iter().map(|&p| seq.positions()[p]).collect();
        let mut mask = vec![false; n * n];
        for (qi, &qp) in perm.iter().enumerate() {
            for (ki, &kp) in perm.iter().enumerate() {
                mask[qi * n + ki] = seq.admits(qp, kp);
            }
        }
        let n_text = seq.count(ModalityTag::Text);
        let pseq = TokenSequence::from_parts(tags, vec![0; n_text], positions, mask, seq.flow_time()).unwrap();
        let xp = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let out = run_backbone(&model, &pseq, &xp);
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in out.row(i).iter().zip(base.row(p)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
