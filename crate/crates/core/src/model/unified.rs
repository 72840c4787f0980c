use super::{
    image::{patchify, unpatchify},
    Binder, ConditionGradient, Expert, Image, ModalityTag, ModelConfig, ParamGroup, ParamId, ParamStore,
    TokenSequence,
};
use crate::error::{bail, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

/// Pre-norm transformer block parameters.
#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for n in [self.ln1, self.ln2] {
            out.extend([n.g, n.b]);
        }
        for l in [self.q, self.k, self.v, self.o, self.fc1, self.fc2] {
            out.extend([l.w, l.b]);
        }
        out
    }
}

/// Visual token rows supplied to a forward pass, in segment order.
#[derive(Clone, Copy, Debug, Default)]
pub struct SegmentInputs {
    /// `n_vit × vit_dim` semantic tokens.
    pub vit: Option<Var>,
    /// `n_vae × latent_dim` (noised) latent tokens.
    pub vae: Option<Var>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn tensor(&mut self, name: String, group: ParamGroup, t: Tensor) -> ParamId {
        self.store.add(name, group, t)
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::randn(&[fan_in, fan_out], std, &mut self.rng);
        Linear {
            w: self.tensor(format!("{name}.w"), group, w),
            b: self.tensor(format!("{name}.b"), group, Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, group: ParamGroup, dim: usize) -> Norm {
        Norm {
            g: self.tensor(format!("{name}.g"), group, Tensor::ones(&[dim])),
            b: self.tensor(format!("{name}.b"), group, Tensor::zeros(&[dim])),
        }
    }

    fn block(&mut self, name: &str, group: ParamGroup, dim: usize, hidden: usize) -> Block {
        Block {
            ln1: self.norm(&format!("{name}.ln1"), group, dim),
            q: self.linear(&format!("{name}.attn.q"), group, dim, dim),
            k: self.linear(&format!("{name}.attn.k"), group, dim, dim),
            v: self.linear(&format!("{name}.attn.v"), group, dim, dim),
            o: self.linear(&format!("{name}.attn.o"), group, dim, dim),
            ln2: self.norm(&format!("{name}.ln2"), group, dim),
            fc1: self.linear(&format!("{name}.mlp.fc1"), group, dim, hidden),
            fc2: self.linear(&format!("{name}.mlp.fc2"), group, hidden, dim),
        }
    }
}

/// Sinusoidal features of a scalar: `dim/2` sines followed by `dim/2` cosines
/// at geometrically spaced frequencies from 1 down to `1/max_period`.
pub fn sinusoidal(value: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

/// Token indices per expert and the permutation that restores sequence order
/// from `[understanding rows; generation rows]`.
struct Route {
    idx: [Vec<usize>; 2],
    order: Vec<usize>,
}

fn slot(e: Expert) -> usize {
    match e {
        Expert::Understanding => 0,
        Expert::Generation => 1,
    }
}

impl Route {
    fn new(tags: &[ModalityTag]) -> Self {
        let mut idx: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, t) in tags.iter().enumerate() {
            idx[slot(t.expert())].push(i);
        }
        let mut order = vec![0; tags.len()];
        for (row, &pos) in idx[0].iter().chain(&idx[1]).enumerate() {
            order[pos] = row;
        }
        Self { idx, order }
    }

    fn mixed(&self) -> bool {
        !self.idx[0].is_empty() && !self.idx[1].is_empty()
    }

    fn present(&self) -> impl Iterator<Item = usize> + '_ {
        (0..2).filter(|&s| !self.idx[s].is_empty())
    }

    fn split(&self, g: &mut Graph, x: Var) -> Result<[Option<Var>; 2]> {
        if !self.mixed() {
            let mut out = [None, None];
            for s in self.present() {
                out[s] = Some(x);
            }
            return Ok(out);
        }
        Ok([Some(g.index_rows(x, &self.idx[0])?), Some(g.index_rows(x, &self.idx[1])?)])
    }

    fn merge(&self, g: &mut Graph, parts: [Option<Var>; 2]) -> Result<Var> {
        match parts {
            [Some(u), Some(v)] => {
                let cat = g.concat_rows(&[u, v])?;
                g.index_rows(cat, &self.order)
            }
            [Some(u), None] => Ok(u),
            [None, Some(v)] => Ok(v),
            [None, None] => bail!(Contract, "no tokens to merge"),
        }
    }
}

/// All model parameters plus the handles the forward pass uses to find them.
#[derive(Clone, Debug)]
pub struct UnifiedModel {
    cfg: ModelConfig,
    params: ParamStore,
    vit_patch: Linear,
    vit_pos: ParamId,
    vit_blocks: Vec<Block>,
    vit_norm: Norm,
    vae_enc: Linear,
    vae_dec: Linear,
    proj_vit: Linear,
    proj_vae: Linear,
    time_embed: Linear,
    token_embed: ParamId,
    /// `[understanding, generation]` per layer.
    layers: Vec<[Block; 2]>,
    final_norm: [Norm; 2],
    lm_head: Linear,
    velocity_head: Linear,
}

impl UnifiedModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(cfg.init_seed) };
        let (d, dv, dz) = (cfg.width, cfg.vit_dim, cfg.latent_dim);
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let vae_dim = cfg.vae_patch * cfg.vae_patch * cfg.channels;

        use ParamGroup::*;
        let vit_patch = init.linear("vit.patch_embed", Vit, patch_dim, dv);
        let pos = Tensor::randn(&[cfg.n_patches(), dv], 0.02, &mut init.rng);
        let vit_pos = init.tensor("vit.pos".into(), Vit, pos);
        let vit_blocks = (0..cfg.vit_depth)
            .map(|i| init.block(&format!("vit.block{i}"), Vit, dv, 2 * dv))
            .collect();
        let vit_norm = init.norm("vit.norm", Vit, dv);
        let vae_enc = init.linear("vae.encoder", Vae, vae_dim, dz);
        let vae_dec = init.linear("vae.decoder", Vae, dz, vae_dim);
        let proj_vit = init.linear("proj.vit", Vit, dv, d);
        let proj_vae = init.linear("proj.vae", Generation, dz, d);
        let time_embed = init.linear("time_embed", Generation, d, d);
        let emb = Tensor::randn(&[cfg.vocab, d], 1.0, &mut init.rng);
        let token_embed = init.tensor("text.embed".into(), Understanding, emb);
        let layers = (0..cfg.depth)
            .map(|l| {
                [
                    init.block(&format!("backbone.layer{l}.und"), Understanding, d, cfg.mlp_hidden),
                    init.block(&format!("backbone.layer{l}.gen"), Generation, d, cfg.mlp_hidden),
                ]
            })
            .collect();
        let final_norm = [
            init.norm("backbone.norm.und", Understanding, d),
            init.norm("backbone.norm.gen", Generation, d),
        ];
        let lm_head = init.linear("lm_head", Understanding, d, cfg.vocab);
        let velocity_head = init.linear("velocity_head", Generation, d, dz);

        Ok(Self {
            cfg,
            params: store,
            vit_patch,
            vit_pos,
            vit_blocks,
            vit_norm,
            vae_enc,
            vae_dec,
            proj_vit,
            proj_vae,
            time_embed,
            token_embed,
            layers,
            final_norm,
            lm_head,
            velocity_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Backbone parameters of one expert, including its final norm.
    pub fn expert_param_ids(&self, expert: Expert) -> Vec<ParamId> {
        let s = slot(expert);
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(|l| l[s].ids()).collect();
        ids.extend([self.final_norm[s].g, self.final_norm[s].b]);
        ids
    }

    /// Exchanges the two experts' backbone parameter values.
    pub fn swap_experts(&mut self) {
        let a = self.expert_param_ids(Expert::Understanding);
        let b = self.expert_param_ids(Expert::Generation);
        for (x, y) in a.into_iter().zip(b) {
            let tx = self.params.value(x).clone();
            let ty = std::mem::replace(self.params.value_mut(y), tx);
            *self.params.value_mut(x) = ty;
        }
    }

    fn lin(&self, g: &mut Graph, b: &mut Binder, l: Linear, x: Var) -> Result<Var> {
        let w = b.var(g, &self.params, l.w);
        let bias = b.var(g, &self.params, l.b);
        g.linear(x, w, bias)
    }

    fn norm(&self, g: &mut Graph, b: &mut Binder, n: Norm, x: Var) -> Result<Var> {
        let gamma = b.var(g, &self.params, n.g);
        let beta = b.var(g, &self.params, n.b);
        g.layer_norm(x, gamma, beta, self.cfg.ln_eps)
    }

    fn mlp(&self, g: &mut Graph, b: &mut Binder, blk: &Block, x: Var) -> Result<Var> {
        let h = self.norm(g, b, blk.ln2, x)?;
        let h = self.lin(g, b, blk.fc1, h)?;
        let h = g.gelu(h);
        self.lin(g, b, blk.fc2, h)
    }

    /// Converts an image to the encoders' channel count and side length.
    pub fn prepare_image(&self, img: &Image) -> Result<Image> {
        img.to_channels(self.cfg.channels)?.fit_to(self.cfg.image_size)
    }

    /// Semantic tokens, one per patch.
    pub fn vit_encode_var(&self, g: &mut Graph, b: &mut Binder, img: &Image) -> Result<Var> {
        let img = self.prepare_image(img)?;
        let patches = g.constant(patchify(&img, self.cfg.patch)?);
        let x = self.lin(g, b, self.vit_patch, patches)?;
        let pos = b.var(g, &self.params, self.vit_pos);
        let mut x = g.add(x, pos)?;
        let n = self.cfg.n_patches();
        let full = vec![true; n * n];
        for blk in &self.vit_blocks {
            let h = self.norm(g, b, blk.ln1, x)?;
            let q = self.lin(g, b, blk.q, h)?;
            let k = self.lin(g, b, blk.k, h)?;
            let v = self.lin(g, b, blk.v, h)?;
            let a = attend(g, q, k, v, &full, self.cfg.vit_heads)?;
            let o = self.lin(g, b, blk.o, a)?;
            x = g.add(x, o)?;
            let m = self.mlp(g, b, blk, x)?;
            x = g.add(x, m)?;
        }
        self.norm(g, b, self.vit_norm, x)
    }

    pub fn vit_encode(&self, img: &Image) -> Result<Tensor> {
        let mut g = Graph::new(0);
        let mut b = Binder::inference(&self.params);
        let v = self.vit_encode_var(&mut g, &mut b, img)?;
        Ok(g.value(v).clone())
    }

    /// Pixel patches the latent codec encodes, after [`prepare_image`](Self::prepare_image).
    pub fn vae_patches(&self, img: &Image) -> Result<Tensor> {
        patchify(&self.prepare_image(img)?, self.cfg.vae_patch)
    }

    /// Latent mean per latent patch (the codec is deterministic).
    pub fn vae_encode_var(&self, g: &mut Graph, b: &mut Binder, img: &Image) -> Result<Var> {
        let p = g.constant(self.vae_patches(img)?);
        self.codec_encode(g, b, p)
    }

    /// Latents of already patchified pixels, one row per patch.
    pub fn codec_encode(&self, g: &mut Graph, b: &mut Binder, patches: Var) -> Result<Var> {
        self.lin(g, b, self.vae_enc, patches)
    }

    /// Unclamped decoded patches.
    pub fn vae_decode_var(&self, g: &mut Graph, b: &mut Binder, z: Var) -> Result<Var> {
        self.lin(g, b, self.vae_dec, z)
    }

    pub fn vae_encode(&self, img: &Image) -> Result<Tensor> {
        let mut g = Graph::new(0);
        let mut b = Binder::inference(&self.params);
        let v = self.vae_encode_var(&mut g, &mut b, img)?;
        Ok(g.value(v).clone())
    }

    /// Decodes a square grid of latent tokens; pixels are clamped to `[0, 1]`.
    pub fn vae_decode(&self, z: &Tensor) -> Result<Image> {
        z.check_finite("latent")?;
        let (m, dz) = z.dims2()?;
        if dz != self.cfg.latent_dim {
            bail!(Shape, "latent width {dz}, model expects {}", self.cfg.latent_dim);
        }
        let side = (m as f64).sqrt().round() as usize;
        if side * side != m {
            bail!(Shape, "{m} latent tokens do not form a square grid");
        }
        let mut g = Graph::new(0);
        let mut b = Binder::inference(&self.params);
        let zv = g.constant(z.clone());
        let out = self.vae_decode_var(&mut g, &mut b, zv)?;
        let size = side * self.cfg.vae_patch;
        unpatchify(g.value(out), size, size, self.cfg.channels, self.cfg.vae_patch)
    }

    /// Projects every segment to the backbone width, adds the flow-time
    /// embedding on latent rows and sinusoidal positions on all rows.
    pub fn embed(&self, g: &mut Graph, b: &mut Binder, seq: &TokenSequence, inputs: SegmentInputs) -> Result<Var> {
        let d = self.cfg.width;
        let n_text = seq.count(ModalityTag::Text);
        let n_vit = seq.count(ModalityTag::Vit);
        let n_vae = seq.count(ModalityTag::Vae);
        let mut blocks = Vec::new();
        let mut offset = [0usize; 3];
        let mut rows = 0;

        if n_text > 0 {
            let ids: Vec<usize> = seq.text_ids().iter().map(|&i| i as usize).collect();
            if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab) {
                bail!(Index, "token id {bad} outside vocabulary of {}", self.cfg.vocab);
            }
            let table = b.var(g, &self.params, self.token_embed);
            blocks.push(g.index_rows(table, &ids)?);
            rows += n_text;
        }
        offset[1] = rows;
        if n_vit > 0 {
            let Some(vit) = inputs.vit else {
                bail!(Routing, "sequence has {n_vit} VIT tokens but no semantic tokens were supplied");
            };
            let shape = g.value(vit).shape().to_vec();
            if shape != [n_vit, self.cfg.vit_dim] {
                bail!(Routing, "semantic tokens {shape:?} do not fill {n_vit} VIT slots");
            }
            blocks.push(self.lin(g, b, self.proj_vit, vit)?);
            rows += n_vit;
        }
        offset[2] = rows;
        if n_vae > 0 {
            let Some(vae) = inputs.vae else {
                bail!(Routing, "sequence has {n_vae} VAE tokens but no latents were supplied");
            };
            let shape = g.value(vae).shape().to_vec();
            if shape != [n_vae, self.cfg.latent_dim] {
                bail!(Routing, "latents {shape:?} do not fill {n_vae} VAE slots");
            }
            let Some(t) = seq.flow_time() else {
                bail!(Contract, "VAE tokens without a flow time");
            };
            let feats = g.constant(Tensor::from_parts(vec![1, d], sinusoidal(t * 1000.0, d, 10_000.0)));
            let temb = self.lin(g, b, self.time_embed, feats)?;
            let z = self.lin(g, b, self.proj_vae, vae)?;
            blocks.push(g.add_row_bias(z, temb)?);
        }

        let mut seen = [0usize; 3];
        let order: Vec<usize> = seq
            .tags()
            .iter()
            .map(|t| {
                let s = match t {
                    ModalityTag::Text => 0,
                    ModalityTag::Vit => 1,
                    ModalityTag::Vae => 2,
                };
                seen[s] += 1;
                offset[s] + seen[s] - 1
            })
            .collect();
        let cat = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks)? };
        let x = if order.iter().enumerate().all(|(i, &r)| i == r) { cat } else { g.index_rows(cat, &order)? };

        let pos: Vec<f64> = seq
            .positions()
            .iter()
            .flat_map(|&p| sinusoidal(p as f64, d, 10_000.0))
            .collect();
        let pos = g.constant(Tensor::from_parts(vec![seq.len(), d], pos));
        g.add(x, pos)
    }

    /// Two-expert transformer over already-embedded rows `x[n×d]`.
    ///
    /// Every row is normalized, projected and passed through the MLP by the
    /// expert its tag selects; attention runs over the whole masked sequence.
    pub fn mot_forward(&self, g: &mut Graph, b: &mut Binder, seq: &TokenSequence, x: Var) -> Result<Var> {
        let n = seq.len();
        if g.value(x).shape() != [n, self.cfg.width] {
            bail!(
                Shape,
                "embeddings {:?} do not match a {n}-token sequence of width {}",
                g.value(x).shape(),
                self.cfg.width
            );
        }
        let route = Route::new(seq.tags());
        let mask_rows: [Vec<bool>; 2] = std::array::from_fn(|s| {
            route.idx[s].iter().flat_map(|&q| seq.mask()[q * n..(q + 1) * n].iter().copied()).collect()
        });
        let detach = self.cfg.condition_gradient == ConditionGradient::Detached && route.mixed();
        let heads = self.cfg.heads;

        let mut x = x;
        for layer in &self.layers {
            let xs = route.split(g, x)?;
            let mut q = [None, None];
            let mut k = [None, None];
            let mut v = [None, None];
            for s in route.present() {
                let h = self.norm(g, b, layer[s].ln1, xs[s].expect("present"))?;
                q[s] = Some(self.lin(g, b, layer[s].q, h)?);
                k[s] = Some(self.lin(g, b, layer[s].k, h)?);
                v[s] = Some(self.lin(g, b, layer[s].v, h)?);
            }
            let keys = route.merge(g, k)?;
            let values = route.merge(g, v)?;
            let mut out = [None, None];
            for s in route.present() {
                let (kk, vv) = if detach && s == 1 {
                    let ku = g.detach(k[0].expect("mixed"));
                    let vu = g.detach(v[0].expect("mixed"));
                    (route.merge(g, [Some(ku), k[1]])?, route.merge(g, [Some(vu), v[1]])?)
                } else {
                    (keys, values)
                };
                let a = attend(g, q[s].expect("present"), kk, vv, &mask_rows[s], heads)?;
                out[s] = Some(self.lin(g, b, layer[s].o, a)?);
            }
            let attn = route.merge(g, out)?;
            x = g.add(x, attn)?;

            let xs = route.split(g, x)?;
            let mut out = [None, None];
            for s in route.present() {
                out[s] = Some(self.mlp(g, b, &layer[s], xs[s].expect("present"))?);
            }
            let m = route.merge(g, out)?;
            x = g.add(x, m)?;
        }
        let xs = route.split(g, x)?;
        let mut out = [None, None];
        for s in route.present() {
            out[s] = Some(self.norm(g, b, self.final_norm[s], xs[s].expect("present"))?);
        }
        route.merge(g, out)
    }

    /// [`embed`](Self::embed) followed by [`mot_forward`](Self::mot_forward).
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, seq: &TokenSequence, inputs: SegmentInputs) -> Result<Var> {
        let x = self.embed(g, b, seq, inputs)?;
        self.mot_forward(g, b, seq, x)
    }

    /// Next-token logits at the given TEXT positions.
    pub fn lm_logits(&self, g: &mut Graph, b: &mut Binder, hidden: Var, text_positions: &[usize]) -> Result<Var> {
        if text_positions.is_empty() {
            bail!(Contract, "lm_logits needs at least one TEXT position");
        }
        let h = g.index_rows(hidden, text_positions)?;
        self.lin(g, b, self.lm_head, h)
    }

    /// Velocity per latent token.
    pub fn predict_velocity(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        hidden: Var,
        vae_positions: &[usize],
        flow_time: Option<f64>,
    ) -> Result<Var> {
        if flow_time.is_none() {
            bail!(Contract, "velocity prediction needs a flow time");
        }
        if vae_positions.is_empty() {
            bail!(Contract, "velocity prediction needs VAE positions");
        }
        let h = g.index_rows(hidden, vae_positions)?;
        self.lin(g, b, self.velocity_head, h)
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        self.params.save(w)
    }

    pub fn load<R: std::io::Read>(&mut self, r: R) -> Result<()> {
        self.params.load(r)
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(f)
    }

    pub fn load_file(&mut self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        self.load(f)
    }
}

/// Multi-head scaled dot-product attention of `q[nq×d]` over `k, v[n×d]`,
/// with `mask` holding `nq × n` admissibility flags.
fn attend(g: &mut Graph, q: Var, k: Var, v: Var, mask: &[bool], heads: usize) -> Result<Var> {
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.masked_softmax(s, mask)?;
        outs.push(g.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}
