//! The promptable multitask network.
//!
//! A ViT-style image encoder produces one token per patch. Point prompts are
//! encoded as a fixed sinusoid of their normalized position plus a learned
//! role embedding. A two-way decoder mixes prompt and image tokens under a
//! block mask that keeps contrastive (pcl) tokens from influencing anything
//! but themselves. Dense heads upsample image tokens back to the crop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{BlockMask, Graph, Var};
use crate::checkpoint;
use crate::data::PromptRole;
use crate::error::{Error, Result};
use crate::grid::{Grid, Point};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::seed::{self, salt};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_crop: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub projector_dim: usize,
    /// Channels between the token projection and the final 3×3 conv of each
    /// dense head.
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_crop: 64,
            patch_size: 8,
            embed_dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            num_heads: 4,
            mlp_ratio: 2,
            projector_dim: 32,
            head_channels: 8,
        }
    }
}

impl ModelConfig {
    /// A 16×16 configuration small enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            image_crop: 16,
            patch_size: 4,
            embed_dim: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            projector_dim: 8,
            head_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_crop == 0 || self.image_crop % self.patch_size != 0 {
            return Err(Error::invalid(
                "image_crop must be a positive multiple of patch_size",
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid("embed_dim must be divisible by num_heads"));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::invalid("embed_dim must be a positive multiple of 4"));
        }
        if self.mlp_ratio == 0 || self.projector_dim == 0 || self.head_channels == 0 {
            return Err(Error::invalid(
                "mlp_ratio, projector_dim and head_channels must be positive",
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_crop / self.patch_size
    }

    pub fn num_image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

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

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderBlock {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
struct DecoderBlock {
    self_attn: Attn,
    ln_self: Norm,
    to_image: Attn,
    ln_to_image: Norm,
    to_prompt: Attn,
    ln_to_prompt: Norm,
    mlp: Mlp,
    ln_mlp: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
}

/// Parameter handles in construction order.
#[derive(Clone, Debug)]
struct Layout {
    patch: Linear,
    pos: ParamId,
    encoder: Vec<EncoderBlock>,
    enc_norm: Norm,
    roles: ParamId,
    no_prompt: ParamId,
    decoder: Vec<DecoderBlock>,
    seg: Head,
    det: Head,
    proj_up: Linear,
    proj_down: Linear,
}

struct Builder<'a, R> {
    params: ParamSet,
    rng: &'a mut R,
}

impl<R: rand::Rng> Builder<'_, R> {
    fn tensor(&mut self, name: String, t: Tensor) -> ParamId {
        self.params.push(name, t)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let std = (1.0 / din as f64).sqrt();
        let w = Tensor::randn(&[din, dout], std, self.rng);
        Linear {
            w: self.tensor(format!("{name}.w"), w),
            b: self.tensor(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.tensor(format!("{name}.g"), Tensor::full(&[d], 1.0)),
            b: self.tensor(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn mlp(&mut self, name: &str, d: usize, hidden: usize) -> Mlp {
        Mlp {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }

    fn head(&mut self, name: &str, cfg: &ModelConfig, out: usize) -> Head {
        let p = cfg.patch_size;
        let c = cfg.head_channels;
        let proj = self.linear(&format!("{name}.proj"), cfg.embed_dim, p * p * c);
        let std = (1.0 / (9 * c) as f64).sqrt();
        let conv = Tensor::randn(&[9 * c, out], std, self.rng);
        Head {
            proj,
            conv_w: self.tensor(format!("{name}.conv.w"), conv),
            conv_b: self.tensor(format!("{name}.conv.b"), Tensor::zeros(&[out])),
        }
    }
}

fn build(cfg: &ModelConfig, init_seed: u64) -> (Layout, ParamSet) {
    let mut rng = seed::rng(init_seed, salt::INIT, 0);
    let mut b = Builder {
        params: ParamSet::default(),
        rng: &mut rng,
    };
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let patch = b.linear("enc.patch", cfg.patch_size * cfg.patch_size, d);
    let pos = Tensor::randn(&[cfg.num_image_tokens(), d], 0.02, b.rng);
    let pos = b.tensor("enc.pos".into(), pos);
    let encoder = (0..cfg.encoder_depth)
        .map(|i| EncoderBlock {
            ln1: b.norm(&format!("enc.{i}.ln1"), d),
            attn: b.attn(&format!("enc.{i}.attn"), d),
            ln2: b.norm(&format!("enc.{i}.ln2"), d),
            mlp: b.mlp(&format!("enc.{i}.mlp"), d, hidden),
        })
        .collect();
    let enc_norm = b.norm("enc.norm", d);
    let roles = Tensor::randn(&[3, d], 0.1, b.rng);
    let roles = b.tensor("prompt.roles".into(), roles);
    let no_prompt = Tensor::randn(&[1, d], 0.1, b.rng);
    let no_prompt = b.tensor("prompt.none".into(), no_prompt);
    let decoder = (0..cfg.decoder_depth)
        .map(|i| DecoderBlock {
            self_attn: b.attn(&format!("dec.{i}.self"), d),
            ln_self: b.norm(&format!("dec.{i}.ln_self"), d),
            to_image: b.attn(&format!("dec.{i}.t2i"), d),
            ln_to_image: b.norm(&format!("dec.{i}.ln_t2i"), d),
            to_prompt: b.attn(&format!("dec.{i}.i2t"), d),
            ln_to_prompt: b.norm(&format!("dec.{i}.ln_i2t"), d),
            mlp: b.mlp(&format!("dec.{i}.mlp"), d, hidden),
            ln_mlp: b.norm(&format!("dec.{i}.ln_mlp"), d),
        })
        .collect();
    let seg = b.head("seg", cfg, 2);
    let det = b.head("det", cfg, 1);
    let proj_up = b.linear("proj.up", d, d);
    let proj_down = b.linear("proj.down", d, cfg.projector_dim);
    let layout = Layout {
        patch,
        pos,
        encoder,
        enc_norm,
        roles,
        no_prompt,
        decoder,
        seg,
        det,
        proj_up,
        proj_down,
    };
    (layout, b.params)
}

fn role_index(role: PromptRole) -> usize {
    match role {
        PromptRole::TaskPrompt => 0,
        PromptRole::PclQuery => 1,
        PromptRole::PclNegative => 2,
    }
}

/// Fixed sinusoidal embedding of a normalized position: `dim / 4`
/// frequencies per axis, geometric from π to 64π, as (sin, cos) pairs.
pub fn sinusoid(u_row: f64, u_col: f64, dim: usize) -> Vec<f64> {
    let f = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for u in [u_row, u_col] {
        for k in 0..f {
            let t = if f > 1 {
                k as f64 / (f - 1) as f64
            } else {
                0.0
            };
            let w = std::f64::consts::PI * 64f64.powf(t);
            out.push((w * u).sin());
            out.push((w * u).cos());
        }
    }
    out
}

/// Token layout `[task, pcl, image]`; `true` blocks a (query, key) pair.
pub fn build_attention_mask(n_task: usize, n_pcl: usize, n_img: usize) -> BlockMask {
    let n = n_task + n_pcl + n_img;
    let mut m = BlockMask::open(n, n);
    let pcl = n_task..n_task + n_pcl;
    for i in 0..n {
        for j in pcl.clone() {
            if i != j {
                m.set(i, j, true);
            }
        }
    }
    for i in pcl {
        for j in 0..n_task {
            m.set(i, j, true);
        }
    }
    m
}

/// A PCL token to decode alongside the task prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PclToken {
    pub position: Point,
    pub role: PromptRole,
}

/// Variables produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[H·W, 2]` row-major over pixels.
    pub seg_logits: Var,
    /// `[H·W, 1]`, non-negative.
    pub density: Var,
    /// Refined task tokens `[max(M, 1), D]`.
    pub task_tokens: Var,
    /// Refined pcl tokens `[P, D]` when any were given.
    pub pcl_tokens: Option<Var>,
    /// Number of real task prompts (0 means the no-prompt token was used).
    pub n_task: usize,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    layout: Layout,
    pub params: ParamSet,
    /// Optimizer steps applied to these parameters.
    pub step: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build(&config, init_seed);
        Ok(Self {
            config,
            layout,
            params,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            serde_json::to_value(&self.config)?,
            self.step,
            &self.params,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        checkpoint::write_checkpoint(
            &mut buf,
            serde_json::to_value(&self.config)?,
            self.step,
            &self.params,
        )?;
        Ok(buf)
    }

    fn from_parts(header: checkpoint::CheckpointHeader, params: ParamSet) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(header.config)?;
        let mut state = Self::new(config, 0)?;
        if state.params.names().ne(params.names()) {
            return Err(Error::Checkpoint(
                "parameter names do not match the configuration".into(),
            ));
        }
        state
            .params
            .assign(&params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        state.step = header.step;
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, p) = checkpoint::load(path)?;
        Self::from_parts(h, p)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, p) = checkpoint::read_checkpoint(bytes)?;
        Self::from_parts(h, p)
    }

    /// Bind all parameters into `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound<'_> {
        Bound {
            model: self,
            vars: self.params.bind(g, requires_grad),
        }
    }
}

impl ModelState {
    /// Bind with caller-provided variables, one per parameter in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound<'_> {
        Bound {
            model: self,
            vars: BoundParams::from_vars(vars),
        }
    }
}

/// A model whose parameters live in a particular graph.
pub struct Bound<'a> {
    model: &'a ModelState,
    pub vars: BoundParams,
}

impl Bound<'_> {
    fn p(&self, id: ParamId) -> Var {
        self.vars.get(id)
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    fn layout(&self) -> &Layout {
        &self.model.layout
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        g.linear(x, self.p(l.w), self.p(l.b))
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        g.layernorm(x, self.p(n.g), self.p(n.b), LN_EPS)
    }

    fn mlp(&self, g: &mut Graph, x: Var, m: Mlp) -> Result<Var> {
        let h = self.linear(g, x, m.up)?;
        let h = g.gelu(h);
        self.linear(g, h, m.down)
    }

    /// Attention with separate inputs for queries, keys (both already carrying
    /// positional terms where wanted) and values.
    fn attend(
        &self,
        g: &mut Graph,
        a: Attn,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&BlockMask>,
    ) -> Result<Var> {
        let q = self.linear(g, q_in, a.q)?;
        let k = self.linear(g, k_in, a.k)?;
        let v = self.linear(g, v_in, a.v)?;
        let o = g.attention(q, k, v, self.cfg().num_heads, mask)?;
        self.linear(g, o, a.o)
    }

    /// `[N_img, D]` tokens for one crop.
    pub fn encode_image(&self, g: &mut Graph, image: &Grid<f64>) -> Result<Var> {
        let cfg = self.cfg().clone();
        let s = cfg.image_crop;
        if image.dims() != (s, s) {
            return Err(Error::InvalidShape {
                op: "encode_image",
                shape: vec![image.height(), image.width()],
            });
        }
        let x = g.constant(Tensor::new(vec![s, s, 1], image.data().to_vec())?);
        let x = g.unfold_patches(x, cfg.patch_size)?;
        let x = self.linear(g, x, self.layout().patch)?;
        let mut x = g.add(x, self.p(self.layout().pos))?;
        for blk in self.layout().encoder.clone() {
            let h = self.norm(g, x, blk.ln1)?;
            let a = self.attend(g, blk.attn, h, h, h, None)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, blk.ln2)?;
            let m = self.mlp(g, h, blk.mlp)?;
            x = g.add(x, m)?;
        }
        self.norm(g, x, self.layout().enc_norm)
    }

    fn position_code(&self, p: Point) -> Result<Vec<f64>> {
        let s = self.cfg().image_crop;
        if p.row >= s || p.col >= s {
            return Err(Error::invalid(format!("prompt {p:?} outside {s}×{s} crop")));
        }
        Ok(sinusoid(
            (p.row as f64 + 0.5) / s as f64,
            (p.col as f64 + 0.5) / s as f64,
            self.cfg().embed_dim,
        ))
    }

    /// Prompt tokens and their positional codes. An empty list yields the
    /// learned no-prompt token with a zero positional code.
    pub fn encode_prompts(
        &self,
        g: &mut Graph,
        prompts: &[(Point, PromptRole)],
    ) -> Result<(Var, Var)> {
        let d = self.cfg().embed_dim;
        if prompts.is_empty() {
            let pe = g.constant(Tensor::zeros(&[1, d]));
            return Ok((self.p(self.layout().no_prompt), pe));
        }
        let mut codes = Vec::with_capacity(prompts.len() * d);
        for (i, &(p, _)) in prompts.iter().enumerate() {
            codes.extend(
                self.position_code(p)
                    .map_err(|_| Error::OutOfBounds { index: i })?,
            );
        }
        let pe = g.constant(Tensor::new(vec![prompts.len(), d], codes)?);
        let ids: Vec<usize> = prompts.iter().map(|&(_, r)| role_index(r)).collect();
        let roles = g.embedding(self.p(self.layout().roles), &ids)?;
        Ok((g.add(pe, roles)?, pe))
    }

    fn image_pe(&self, g: &mut Graph) -> Result<Var> {
        let cfg = self.cfg();
        let (n, p, s, d) = (
            cfg.grid(),
            cfg.patch_size as f64,
            cfg.image_crop as f64,
            cfg.embed_dim,
        );
        let mut codes = Vec::with_capacity(n * n * d);
        for r in 0..n {
            for c in 0..n {
                codes.extend(sinusoid(
                    (r as f64 + 0.5) * p / s,
                    (c as f64 + 0.5) * p / s,
                    d,
                ));
            }
        }
        Ok(g.constant(Tensor::new(vec![n * n, d], codes)?))
    }

    /// Two-way decoding of prompt tokens `[n_task + n_pcl, D]` (task first)
    /// and image tokens. `prompt_pe` carries the matching positional codes.
    pub fn decode(
        &self,
        g: &mut Graph,
        image: Var,
        prompts: Var,
        prompt_pe: Var,
        n_task: usize,
        mask: &BlockMask,
    ) -> Result<(Var, Var)> {
        let n_img = g.shape(image)[0];
        let n_prompt = g.shape(prompts)[0];
        let total = n_prompt + n_img;
        if mask.rows() != total || mask.cols() != total || n_task == 0 || n_task > n_prompt {
            return Err(Error::ShapeMismatch {
                op: "decode mask",
                lhs: vec![total, total],
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        let image_pe = self.image_pe(g)?;
        let to_prompt_mask = mask.sub(n_prompt..total, 0..n_prompt);
        let (mut p, mut x) = (prompts, image);
        for blk in self.layout().decoder.clone() {
            let tokens = g.concat(&[p, x])?;
            let pe = g.concat(&[prompt_pe, image_pe])?;
            let qk = g.add(tokens, pe)?;
            let a = self.attend(g, blk.self_attn, qk, qk, tokens, Some(mask))?;
            let s = g.add(tokens, a)?;
            let tokens = self.norm(g, s, blk.ln_self)?;
            p = g.slice_rows(tokens, 0, n_prompt)?;
            x = g.slice_rows(tokens, n_prompt, total)?;

            let pq = g.add(p, prompt_pe)?;
            let xk = g.add(x, image_pe)?;
            let a = self.attend(g, blk.to_image, pq, xk, x, None)?;
            let s = g.add(p, a)?;
            p = self.norm(g, s, blk.ln_to_image)?;

            let pk = g.add(p, prompt_pe)?;
            let a = self.attend(g, blk.to_prompt, xk, pk, p, Some(&to_prompt_mask))?;
            let s = g.add(x, a)?;
            x = self.norm(g, s, blk.ln_to_prompt)?;

            let tokens = g.concat(&[p, x])?;
            let m = self.mlp(g, tokens, blk.mlp)?;
            let s = g.add(tokens, m)?;
            let tokens = self.norm(g, s, blk.ln_mlp)?;
            p = g.slice_rows(tokens, 0, n_prompt)?;
            x = g.slice_rows(tokens, n_prompt, total)?;
        }
        Ok((x, p))
    }

    fn dense_head(&self, g: &mut Graph, tokens: Var, head: Head) -> Result<Var> {
        let cfg = self.cfg();
        let n = cfg.grid();
        let h = self.linear(g, tokens, head.proj)?;
        let h = g.fold_patches(h, (n, n), cfg.patch_size)?;
        let h = g.gelu(h);
        g.conv3x3(h, self.p(head.conv_w), self.p(head.conv_b))
    }

    /// `[H·W, 2]` logits.
    pub fn seg_head(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        self.dense_head(g, tokens, self.layout().seg)
    }

    /// `[H·W, 1]` non-negative density, in units of one kernel peak.
    pub fn det_head(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let raw = self.dense_head(g, tokens, self.layout().det)?;
        Ok(g.softplus(raw))
    }

    /// Projector φ: two-layer MLP then L2 normalization.
    pub fn project(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let h = self.linear(g, tokens, self.layout().proj_up)?;
        let h = g.gelu(h);
        let z = self.linear(g, h, self.layout().proj_down)?;
        Ok(g.l2_normalize(z))
    }

    /// One pass: every instance is segmented at once, conditioned on all task
    /// prompts, with pcl tokens decoded alongside under the leakage mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: &Grid<f64>,
        task: &[Point],
        pcl: &[PclToken],
    ) -> Result<Forward> {
        let img = self.encode_image(g, image)?;
        let task_roles: Vec<(Point, PromptRole)> =
            task.iter().map(|&p| (p, PromptRole::TaskPrompt)).collect();
        let (t, t_pe) = self.encode_prompts(g, &task_roles)?;
        let n_task_tokens = g.shape(t)[0];
        let (prompts, pe) = if pcl.is_empty() {
            (t, t_pe)
        } else {
            let list: Vec<(Point, PromptRole)> = pcl.iter().map(|p| (p.position, p.role)).collect();
            let (c, c_pe) = self.encode_prompts(g, &list)?;
            (g.concat(&[t, c])?, g.concat(&[t_pe, c_pe])?)
        };
        let n_img = self.cfg().num_image_tokens();
        let mask = build_attention_mask(n_task_tokens, pcl.len(), n_img);
        let (x, p) = self.decode(g, img, prompts, pe, n_task_tokens, &mask)?;
        let seg_logits = self.seg_head(g, x)?;
        let density = self.det_head(g, x)?;
        let task_tokens = g.slice_rows(p, 0, n_task_tokens)?;
        let pcl_tokens = if pcl.is_empty() {
            None
        } else {
            Some(g.slice_rows(p, n_task_tokens, n_task_tokens + pcl.len())?)
        };
        Ok(Forward {
            seg_logits,
            density,
            task_tokens,
            pcl_tokens,
            n_task: task.len(),
        })
    }
}

/// Dense outputs for one crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[H·W, 2]` row-major logits.
    pub logits: Vec<f64>,
    /// `H·W` density, in units of one kernel peak.
    pub density: Vec<f64>,
    pub size: usize,
}

impl Prediction {
    pub fn foreground_probability(&self) -> Grid<f64> {
        let p = self
            .logits
            .chunks_exact(2)
            .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
            .collect();
        Grid::from_vec(self.size, self.size, p).expect("sized by construction")
    }

    pub fn density_map(&self) -> Grid<f64> {
        Grid::from_vec(self.size, self.size, self.density.clone()).expect("sized by construction")
    }
}

impl ModelState {
    /// Gradient-free forward on one crop.
    pub fn predict(&self, image: &Grid<f64>, task: &[Point]) -> Result<Prediction> {
        self.predict_with_pcl(image, task, &[])
    }

    pub fn predict_with_pcl(
        &self,
        image: &Grid<f64>,
        task: &[Point],
        pcl: &[PclToken],
    ) -> Result<Prediction> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = b.forward(&mut g, image, task, pcl)?;
        Ok(Prediction {
            logits: g.value(f.seg_logits).data().to_vec(),
            density: g.value(f.density).data().to_vec(),
            size: self.config.image_crop,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, weighted_sum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> Grid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_vec(
            size,
            size,
            (0..size * size).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap()
    }

    fn random_points(n: usize, size: usize, rng: &mut impl Rng) -> Vec<Point> {
        (0..n)
            .map(|_| Point::new(rng.gen_range(0..size), rng.gen_range(0..size)))
            .collect()
    }

    #[test]
    fn image_tokens_shape_and_determinism() {
        let m = ModelState::new(ModelConfig::default(), 0).unwrap();
        let img = random_image(64, 1);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let a = b.encode_image(&mut g, &img).unwrap();
        let c = b.encode_image(&mut g, &img).unwrap();
        assert_eq!(g.shape(a), &[64, 64]);
        assert_eq!(g.value(a), g.value(c));
        assert!(b.encode_image(&mut g, &random_image(32, 1)).is_err());
        let zero = b.encode_image(&mut g, &Grid::filled(64, 64, 0.0)).unwrap();
        let one = b.encode_image(&mut g, &Grid::filled(64, 64, 1.0)).unwrap();
        assert!(g.value(zero).max_abs_diff(g.value(one)) > 1e-3);
    }

    #[test]
    fn prompt_tokens() {
        let m = ModelState::new(ModelConfig::default(), 0).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let (none, _) = b.encode_prompts(&mut g, &[]).unwrap();
        assert_eq!(g.shape(none), &[1, 64]);
        let p = Point::new(10, 20);
        let (two, _) = b
            .encode_prompts(
                &mut g,
                &[(p, PromptRole::TaskPrompt), (p, PromptRole::TaskPrompt)],
            )
            .unwrap();
        let v = g.value(two).data().to_vec();
        assert_eq!(v[..64], v[64..]);
        let (q, _) = b
            .encode_prompts(&mut g, &[(p, PromptRole::PclQuery)])
            .unwrap();
        let roles = m.params.tensor(m.layout.roles.0).data();
        for i in 0..64 {
            let delta = g.value(q).data()[i] - v[i];
            assert!((delta - (roles[64 + i] - roles[i])).abs() < 1e-12);
        }
        let err = b.encode_prompts(
            &mut g,
            &[
                (p, PromptRole::TaskPrompt),
                (Point::new(64, 0), PromptRole::TaskPrompt),
            ],
        );
        assert!(matches!(err, Err(Error::OutOfBounds { index: 1 })));
    }

    #[test]
    fn mask_structure() {
        let m = build_attention_mask(3, 0, 10);
        assert_eq!(m.blocked_count(), 0);
        let m = build_attention_mask(2, 3, 64);
        for i in 5..69 {
            for j in 2..5 {
                assert!(m.is_blocked(i, j));
            }
        }
        for i in 0..2 {
            for j in 2..5 {
                assert!(m.is_blocked(i, j));
            }
        }
        for i in 2..5 {
            for j in 0..69 {
                assert_eq!(m.is_blocked(i, j), j < 5 && j != i, "{i},{j}");
            }
        }
        // Task and image rows are open except for pcl columns.
        assert_eq!(m.blocked_count(), 66 * 3 + 3 * 4);
    }

    #[test]
    fn pcl_tokens_do_not_leak() {
        let m = ModelState::new(ModelConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(64, 9);
        let task = random_points(3, 64, &mut rng);
        let pcl: Vec<PclToken> = random_points(7, 64, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, p)| PclToken {
                position: p,
                role: if i % 2 == 0 {
                    PromptRole::PclQuery
                } else {
                    PromptRole::PclNegative
                },
            })
            .collect();
        let a = m.predict(&img, &task).unwrap();
        let b = m.predict_with_pcl(&img, &task, &pcl).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
        assert_eq!(bits(&a.density), bits(&b.density));
    }

    #[test]
    fn task_prompt_permutation_equivariance() {
        let m = ModelState::new(ModelConfig::default(), 4).unwrap();
        let img = random_image(64, 2);
        let task = vec![Point::new(3, 5), Point::new(40, 12), Point::new(20, 60)];
        let perm = [2usize, 0, 1];
        let permuted: Vec<Point> = perm.iter().map(|&i| task[i]).collect();
        let run = |pts: &[Point]| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let f = b.forward(&mut g, &img, pts, &[]).unwrap();
            (
                g.value(f.task_tokens).clone(),
                g.value(f.seg_logits).clone(),
            )
        };
        let (ta, la) = run(&task);
        let (tb, lb) = run(&permuted);
        assert!(la.max_abs_diff(&lb) < 1e-10);
        let d = 64;
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..d {
                assert!((tb.data()[new * d + k] - ta.data()[old * d + k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_depth_decoder_is_identity() {
        let cfg = ModelConfig {
            decoder_depth: 0,
            ..ModelConfig::tiny()
        };
        let m = ModelState::new(cfg, 0).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let img = b.encode_image(&mut g, &random_image(16, 0)).unwrap();
        let (p, pe) = b
            .encode_prompts(&mut g, &[(Point::new(1, 1), PromptRole::TaskPrompt)])
            .unwrap();
        let mask = build_attention_mask(1, 0, 16);
        let (x, q) = b.decode(&mut g, img, p, pe, 1, &mask).unwrap();
        assert_eq!(g.value(x), g.value(img));
        assert_eq!(g.value(q), g.value(p));
        let bad = build_attention_mask(1, 0, 15);
        assert!(b.decode(&mut g, img, p, pe, 1, &bad).is_err());
    }

    #[test]
    fn head_outputs() {
        let m = ModelState::new(ModelConfig::default(), 0).unwrap();
        let pred = m
            .predict(&random_image(64, 3), &[Point::new(30, 30)])
            .unwrap();
        assert_eq!(pred.logits.len(), 64 * 64 * 2);
        assert_eq!(pred.density.len(), 64 * 64);
        assert!(pred.density.iter().all(|&v| v >= 0.0));
        for l in pred.logits.chunks(2) {
            let (a, b) = (l[0].exp(), l[1].exp());
            assert!((a / (a + b) + b / (a + b) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn projections_are_unit_length() {
        let m = ModelState::new(ModelConfig::default(), 0).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let pts = [Point::new(3, 3), Point::new(3, 3), Point::new(50, 9)];
        let f = b.forward(&mut g, &random_image(64, 3), &pts, &[]).unwrap();
        let z = b.project(&mut g, f.task_tokens).unwrap();
        let z = g.value(z).data();
        for row in z.chunks(32) {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(z[..32], z[32..64]);
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let a = ModelState::new(ModelConfig::default(), 1).unwrap();
        let b = ModelState::new(ModelConfig::default(), 2).unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
        assert_ne!(a.params.tensor(0), b.params.tensor(0));
        assert!(ModelState::new(
            ModelConfig {
                image_crop: 60,
                ..ModelConfig::default()
            },
            0
        )
        .is_err());
        assert!(ModelState::new(
            ModelConfig {
                num_heads: 3,
                ..ModelConfig::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let mut m = ModelState::new(ModelConfig::tiny(), 7).unwrap();
        m.step = 42;
        let bytes = m.to_bytes().unwrap();
        let r = ModelState::from_bytes(&bytes).unwrap();
        assert_eq!(r.step, 42);
        assert_eq!(r.config(), m.config());
        assert_eq!(r.to_bytes().unwrap(), bytes);
        let img = random_image(16, 1);
        assert_eq!(m.predict(&img, &[]).unwrap(), r.predict(&img, &[]).unwrap());
    }

    /// Runs gradcheck over every parameter of a tiny model for a loss built by `f`.
    fn model_gradcheck(f: impl Fn(&Bound, &mut Graph) -> Result<Var>) -> f64 {
        let m = ModelState::new(ModelConfig::tiny(), 13).unwrap();
        let tensors: Vec<Tensor> = m.params.tensors().cloned().collect();
        let report = gradcheck(
            |g, vars| {
                let b = Bound {
                    model: &m,
                    vars: BoundParams::from_vars(vars.to_vec()),
                };
                f(&b, g)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn gradcheck_decoder_and_heads() {
        let img = random_image(16, 4);
        let err = model_gradcheck(|b, g| {
            let f = b.forward(g, &img, &[Point::new(2, 3), Point::new(11, 9)], &[])?;
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let s = weighted_sum(g, f.seg_logits, &mut rng)?;
            let d = weighted_sum(g, f.density, &mut rng)?;
            g.add(s, d)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_projection_path_to_prompt_encoder() {
        let img = random_image(16, 6);
        let pcl = [
            PclToken {
                position: Point::new(5, 5),
                role: PromptRole::PclQuery,
            },
            PclToken {
                position: Point::new(14, 1),
                role: PromptRole::PclNegative,
            },
        ];
        let m = ModelState::new(ModelConfig::tiny(), 13).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let f = b.forward(&mut g, &img, &[Point::new(8, 8)], &pcl).unwrap();
        let z = b.project(&mut g, f.pcl_tokens.unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let loss = weighted_sum(&mut g, z, &mut rng).unwrap();
        g.backward(loss).unwrap();
        let roles = b.vars.get(m.layout.roles);
        let grad = g.grad(roles).unwrap();
        assert!(grad.iter().map(|v| v.abs()).sum::<f64>() > 0.0);

        let err = model_gradcheck(|b, g| {
            let f = b.forward(g, &img, &[Point::new(8, 8)], &pcl)?;
            let z = b.project(g, f.pcl_tokens.unwrap())?;
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            weighted_sum(g, z, &mut rng)
        });
        assert!(err < 1e-4, "{err}");
    }
}
