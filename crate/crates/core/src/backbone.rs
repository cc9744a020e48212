//! A desk-scale frozen vision/text/fusion transformer whose attention
//! projections are the slices of a [`FrozenStack`].
//!
//! Each encoder block is a single-head residual attention `x ← x + Attn(x)`
//! with no layer norm, feed-forward block or positional encoding. Every
//! query/key/value projection routes through the mode-approximation update.
//! A fusion layer runs self-attention over the text sequence, cross-attention
//! from text queries to image keys/values, and then either the plain
//! residual or, on the `[CLS]` row, the gated query blend.
//!
//! There are two forward implementations:
//! - [`Forward`], a tape-recorded pass over the adapted model, used for both
//!   inference and gradients.
//! - [`reference`], an adapter-free pass over the frozen weights written
//!   with the plain tensor and alignment functions. With the adapter at its
//!   zero initialization both produce identical bits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::align::{ContextMode, GateMode, GateParams};
use crate::autodiff::{Grads, Tape, Var};
use crate::mode_approx::{
    init_adapter, stack_len, Branch, CoefficientTable, FrozenStack, GlobalFactors, Role, SliceKey,
    DEFAULT_INIT_STD,
};
use crate::rng::{streams, SeededRng};
use crate::tensor::{attention_scale, Matrix, Tensor3, Vector};
use crate::{Error, Result};

/// Initial value of the gate transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateInit {
    #[default]
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width `d`; pooled features share it.
    pub width: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    /// CP rank `R`.
    pub rank: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub vocab: usize,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Attention heads. Only 1 is supported.
    pub heads: usize,
    /// Reserved for frozen feed-forward sub-blocks; must be `false`.
    pub feed_forward: bool,
    pub gate_mode: GateMode,
    pub gated_query: bool,
    pub gate_init: GateInit,
    pub context: ContextMode,
    pub init_std: f64,
    /// Relative std of the per-modality perturbation around the shared
    /// concept embeddings. Zero makes both token tables identical.
    pub embed_noise: f64,
    /// Expected norm of the concept and `[CLS]` embeddings; entries are
    /// drawn with std `embed_scale / √d`.
    pub embed_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            vision_layers: 2,
            text_layers: 2,
            fusion_layers: 2,
            rank: 4,
            image_tokens: 4,
            text_tokens: 4,
            vocab: 32,
            temperature: 0.1,
            heads: 1,
            feed_forward: false,
            gate_mode: GateMode::Softmax,
            gated_query: true,
            gate_init: GateInit::Zeros,
            context: ContextMode::Enhance,
            init_std: DEFAULT_INIT_STD,
            embed_noise: 0.1,
            embed_scale: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("width", self.width),
            ("vision_layers", self.vision_layers),
            ("text_layers", self.text_layers),
            ("fusion_layers", self.fusion_layers),
            ("rank", self.rank),
            ("image_tokens", self.image_tokens),
            ("text_tokens", self.text_tokens),
            ("vocab", self.vocab),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::argument(format!("{name} must be at least 1")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::argument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::argument(format!("init_std must be positive, got {}", self.init_std)));
        }
        if !(self.embed_noise >= 0.0 && self.embed_noise.is_finite()) {
            return Err(Error::argument(format!("embed_noise must be non-negative, got {}", self.embed_noise)));
        }
        if !(self.embed_scale > 0.0 && self.embed_scale.is_finite()) {
            return Err(Error::argument(format!("embed_scale must be positive, got {}", self.embed_scale)));
        }
        if self.heads != 1 {
            return Err(Error::argument(format!("only single-head attention is supported, got {}", self.heads)));
        }
        if self.feed_forward {
            return Err(Error::argument("feed-forward sub-blocks are not supported"));
        }
        Ok(())
    }

    /// Number of stacked projections `N = 3(L_v + L_t) + 6 L_c`.
    pub fn stack_len(&self) -> usize {
        stack_len(self.vision_layers, self.text_layers, self.fusion_layers)
    }
}

/// Everything that never trains.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    pub stack: FrozenStack,
    pub image_embed: Matrix,
    pub text_embed: Matrix,
    pub image_cls: Matrix,
    pub text_cls: Matrix,
}

/// The binary image-text matching head, `E → 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItmHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Names of the trainable blocks, in the fixed order used by
/// [`TrainableParams::blocks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    U,
    V,
    P,
    Lambda,
    Gamma(usize),
    Beta(usize),
    HeadWeight,
    HeadBias,
}

impl core::fmt::Display for ParamBlock {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::U => f.write_str("U"),
            Self::V => f.write_str("V"),
            Self::P => f.write_str("P"),
            Self::Lambda => f.write_str("Lambda"),
            Self::Gamma(l) => write!(f, "gamma[{l}]"),
            Self::Beta(l) => write!(f, "beta[{l}]"),
            Self::HeadWeight => f.write_str("head.weight"),
            Self::HeadBias => f.write_str("head.bias"),
        }
    }
}

/// Adapter factors, gate transforms and the matching head. Gradients and
/// optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    pub factors: GlobalFactors,
    pub coeffs: CoefficientTable,
    /// One per fusion layer; empty when the gated query is disabled.
    pub gates: Vec<GateParams>,
    pub head: ItmHead,
}

impl TrainableParams {
    pub fn blocks(&self) -> Vec<(ParamBlock, &[f64])> {
        let mut out: Vec<(ParamBlock, &[f64])> = vec![
            (ParamBlock::U, self.factors.u.as_slice()),
            (ParamBlock::V, self.factors.v.as_slice()),
            (ParamBlock::P, self.factors.p.as_slice()),
            (ParamBlock::Lambda, self.coeffs.lambda.as_slice()),
        ];
        for (l, g) in self.gates.iter().enumerate() {
            out.push((ParamBlock::Gamma(l), &g.gamma));
        }
        for (l, g) in self.gates.iter().enumerate() {
            out.push((ParamBlock::Beta(l), &g.beta));
        }
        out.push((ParamBlock::HeadWeight, self.head.weight.as_slice()));
        out.push((ParamBlock::HeadBias, self.head.bias.as_slice()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(ParamBlock, &mut [f64])> {
        let mut out: Vec<(ParamBlock, &mut [f64])> = vec![
            (ParamBlock::U, self.factors.u.as_mut_slice()),
            (ParamBlock::V, self.factors.v.as_mut_slice()),
            (ParamBlock::P, self.factors.p.as_mut_slice()),
            (ParamBlock::Lambda, self.coeffs.lambda.as_mut_slice()),
        ];
        let (gammas, betas): (Vec<_>, Vec<_>) =
            self.gates.iter_mut().map(|g| (g.gamma.as_mut_slice(), g.beta.as_mut_slice())).unzip();
        for (l, g) in gammas.into_iter().enumerate() {
            out.push((ParamBlock::Gamma(l), g));
        }
        for (l, b) in betas.into_iter().enumerate() {
            out.push((ParamBlock::Beta(l), b));
        }
        out.push((ParamBlock::HeadWeight, self.head.weight.as_mut_slice()));
        out.push((ParamBlock::HeadBias, self.head.bias.as_mut_slice()));
        out
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            factors: GlobalFactors { u: z(&self.factors.u), v: z(&self.factors.v), p: z(&self.factors.p) },
            coeffs: CoefficientTable { lambda: z(&self.coeffs.lambda) },
            gates: self.gates.iter().map(|g| GateParams::zeros(g.width())).collect(),
            head: ItmHead { weight: z(&self.head.weight), bias: z(&self.head.bias) },
        }
    }

    pub fn count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub frozen: FrozenBackbone,
    pub params: TrainableParams,
}

/// Builds the frozen backbone and zero-effect trainable parameters from
/// `seed`.
///
/// `W0` entries are drawn from `N(0, 1/d)`. Both token tables share one
/// concept table, perturbed per modality by `embed_noise` relative to the
/// concept scale, so paired tokens start close but never identical.
pub fn build_frozen(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let d = config.width;
    let n = config.stack_len();
    let mut rng = SeededRng::new(seed, streams::BACKBONE);
    let w_std = 1.0 / libm::sqrt(d as f64);
    let weights = Tensor3::from_fn([d, d, n], |_, _, _| rng.gaussian(w_std));
    let stack = FrozenStack::new(weights, config.vision_layers, config.text_layers, config.fusion_layers)?;
    let scale = config.embed_scale * w_std;
    let concept = Matrix::from_fn(config.vocab, d, |_, _| rng.gaussian(scale));
    let noise = config.embed_noise * scale;
    let image_embed = Matrix::from_fn(config.vocab, d, |i, j| concept[(i, j)] + rng.gaussian(noise));
    let text_embed = Matrix::from_fn(config.vocab, d, |i, j| concept[(i, j)] + rng.gaussian(noise));
    let image_cls = Matrix::from_fn(1, d, |_, _| rng.gaussian(scale));
    let text_cls = Matrix::from_fn(1, d, |_, _| rng.gaussian(scale));
    let frozen = FrozenBackbone { stack, image_embed, text_embed, image_cls, text_cls };

    let (factors, coeffs) = init_adapter(d, n, config.rank, config.init_std, seed)?;
    let gates = if config.gated_query {
        let make = match config.gate_init {
            GateInit::Zeros => GateParams::zeros,
            GateInit::Ones => GateParams::ones,
        };
        (0..config.fusion_layers).map(|_| make(d)).collect()
    } else {
        Vec::new()
    };
    let mut head_rng = SeededRng::new(seed, streams::HEAD);
    let head = ItmHead {
        weight: Matrix::from_fn(d, 2, |_, _| head_rng.gaussian(config.init_std)),
        bias: Matrix::zeros(1, 2),
    };
    let params = TrainableParams { factors, coeffs, gates, head };
    Ok(Model { config: config.clone(), frozen, params })
}

impl Model {
    /// [`build_frozen`] with the config's own seed.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        build_frozen(config, config.seed)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::input(format!("token {t} outside vocabulary of {}", self.config.vocab)));
        }
        Ok(())
    }

    /// `[CLS]` followed by the token embeddings.
    pub fn embed(&self, branch: Branch, tokens: &[usize]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let (table, cls) = match branch {
            Branch::Vision => (&self.frozen.image_embed, &self.frozen.image_cls),
            Branch::Text => (&self.frozen.text_embed, &self.frozen.text_cls),
            _ => return Err(Error::argument("only the vision and text branches embed tokens")),
        };
        let d = self.config.width;
        let mut x = Matrix::zeros(tokens.len() + 1, d);
        x.row_mut(0).copy_from_slice(cls.row(0));
        for (p, &t) in tokens.iter().enumerate() {
            x.row_mut(p + 1).copy_from_slice(table.row(t));
        }
        Ok(x)
    }
}

/// One image-text batch. Item `i` pairs `images[i]` with `texts[i]`; the
/// matching head additionally sees mismatched pairs
/// `(images[negatives[i]], texts[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub images: Vec<Vec<usize>>,
    pub texts: Vec<Vec<usize>>,
    pub negatives: Vec<usize>,
    /// Seeds the random context vectors of [`ContextMode::Random`].
    pub context_seed: u64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.images.len() != self.texts.len() {
            return Err(Error::input(format!(
                "batch needs equal, nonzero image and text counts ({} vs {})",
                self.images.len(),
                self.texts.len()
            )));
        }
        if self.negatives.iter().any(|&n| n >= self.images.len()) {
            return Err(Error::input("negative index outside the batch"));
        }
        if !self.negatives.is_empty() && self.negatives.len() != self.texts.len() {
            return Err(Error::input("negatives must be empty or one per text"));
        }
        Ok(())
    }

    /// `(image, text, label)` for every matching-head example: positives
    /// first, then negatives.
    pub fn itm_pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut pairs: Vec<_> = (0..self.len()).map(|i| (i, i, 1)).collect();
        pairs.extend(self.negatives.iter().enumerate().map(|(t, &img)| (img, t, 0)));
        pairs
    }
}

/// Tape handles of the trainable blocks.
struct ParamVars {
    u: Var,
    vt: Var,
    p: Var,
    lambda: Var,
    gamma: Vec<Var>,
    beta: Vec<Var>,
    head_w: Var,
    head_b: Var,
    v: Var,
}

/// Nodes of interest from a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub similarity: Var,
    pub itm_logits: Var,
    pub loss_itc: Var,
    pub loss_itm: Var,
    pub loss_total: Var,
}

/// A tape-recorded forward pass over one model.
pub struct Forward<'m> {
    model: &'m Model,
    tape: Tape,
    vars: ParamVars,
    frozen_slices: Vec<Option<Var>>,
    scales: Vec<Option<Var>>,
    slice_uses: Vec<u32>,
}

impl<'m> Forward<'m> {
    /// Starts a pass. With `track` set the trainable parameters are tape
    /// leaves that receive gradients; otherwise they are constants.
    pub fn new(model: &'m Model, track: bool) -> Self {
        let mut tape = Tape::new();
        let mut leaf = |m: Matrix| if track { tape.param(m) } else { tape.constant(m) };
        let p = &model.params;
        let u = leaf(p.factors.u.clone());
        let v = leaf(p.factors.v.clone());
        let pf = leaf(p.factors.p.clone());
        let lambda = leaf(p.coeffs.lambda.clone());
        let gamma = p.gates.iter().map(|g| leaf(g.gamma.to_row())).collect();
        let beta = p.gates.iter().map(|g| leaf(g.beta.to_row())).collect();
        let head_w = leaf(p.head.weight.clone());
        let head_b = leaf(p.head.bias.clone());
        let vt = tape.transpose(v);
        let n = model.frozen.stack.len();
        Self {
            model,
            tape,
            vars: ParamVars { u, vt, p: pf, lambda, gamma, beta, head_w, head_b, v },
            frozen_slices: vec![None; n],
            scales: vec![None; n],
            slice_uses: vec![0; n],
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// How many times each stack slice has been projected through so far.
    pub fn slice_uses(&self) -> &[u32] {
        &self.slice_uses
    }

    fn slice_index(&self, branch: Branch, layer: usize, role: Role) -> Result<usize> {
        self.model.frozen.stack.slice_of(SliceKey { branch, layer, role })
    }

    /// `x · W0[k] + ((x · U) · diag(Λ[k] ⊙ P[k])) · Vᵀ` on the tape.
    fn project(&mut self, x: Var, k: usize) -> Result<Var> {
        self.slice_uses[k] += 1;
        let w0 = match self.frozen_slices[k] {
            Some(w) => w,
            None => {
                let w = self.tape.constant(self.model.frozen.stack.frozen_slice(k)?);
                self.frozen_slices[k] = Some(w);
                w
            }
        };
        let s = match self.scales[k] {
            Some(s) => s,
            None => {
                let lam = self.tape.row(self.vars.lambda, k)?;
                let p = self.tape.row(self.vars.p, k)?;
                let s = self.tape.hadamard(lam, p)?;
                self.scales[k] = Some(s);
                s
            }
        };
        let frozen = self.tape.matmul(x, w0)?;
        let xu = self.tape.matmul(x, self.vars.u)?;
        let scaled = self.tape.mul_row_broadcast(xu, s)?;
        let update = self.tape.matmul(scaled, self.vars.vt)?;
        self.tape.add(frozen, update)
    }

    fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let kt = self.tape.transpose(k);
        let scores = self.tape.matmul(q, kt)?;
        let scores = self.tape.scale(scores, attention_scale(self.model.config.width));
        let weights = self.tape.softmax_rows(scores);
        self.tape.matmul(weights, v)
    }

    /// Adapted attention with queries from `xq` and keys/values from `xkv`.
    fn adapted_attention(&mut self, xq: Var, xkv: Var, branch: Branch, layer: usize) -> Result<Var> {
        let q = self.project(xq, self.slice_index(branch, layer, Role::Query)?)?;
        let k = self.project(xkv, self.slice_index(branch, layer, Role::Key)?)?;
        let v = self.project(xkv, self.slice_index(branch, layer, Role::Value)?)?;
        self.attention(q, k, v)
    }

    /// Runs a unimodal encoder and returns the output sequence node.
    pub fn encode(&mut self, branch: Branch, tokens: &[usize]) -> Result<Var> {
        let layers = match branch {
            Branch::Vision => self.model.config.vision_layers,
            Branch::Text => self.model.config.text_layers,
            _ => return Err(Error::argument("encode takes the vision or text branch")),
        };
        let mut x = self.tape.constant(self.model.embed(branch, tokens)?);
        for l in 0..layers {
            let a = self.adapted_attention(x, x, branch, l)?;
            x = self.tape.add(x, a)?;
        }
        Ok(x)
    }

    /// Gated query blend of one `1 × E` fusion row `f` and query row `t`.
    fn gate(&mut self, f: Var, t: Var, layer: usize) -> Result<Var> {
        let (gamma, beta) = (self.vars.gamma[layer], self.vars.beta[layer]);
        let gt = self.tape.hadamard(gamma, t)?;
        let th = self.tape.tanh(gt);
        let tp = self.tape.add(th, beta)?;
        let z = self.tape.hadamard(tp, f)?;
        let g = match self.model.config.gate_mode {
            GateMode::Softmax => self.tape.softmax_rows(z),
            GateMode::Sigmoid => self.tape.sigmoid(z),
        };
        let gf = self.tape.hadamard(g, f)?;
        let gtp = self.tape.hadamard(g, tp)?;
        let rest = self.tape.sub(tp, gtp)?;
        self.tape.add(gf, rest)
    }

    /// Fusion encoder over an encoded text and image sequence. Returns the
    /// final `[CLS]` row and the last layer's self-attention `[CLS]` row
    /// (the text query feature).
    pub fn fuse(&mut self, text_seq: Var, image_seq: Var) -> Result<(Var, Var)> {
        let d = self.model.config.width;
        for seq in [text_seq, image_seq] {
            if self.tape.value(seq).cols() != d {
                return Err(Error::Shape { op: "fuse", left: self.tape.value(seq).shape(), right: (0, d) });
            }
        }
        let mut x = text_seq;
        let mut query = None;
        for l in 0..self.model.config.fusion_layers {
            let a = self.adapted_attention(x, x, Branch::FusionSelf, l)?;
            let s1 = self.tape.add(x, a)?;
            let c = self.adapted_attention(s1, image_seq, Branch::FusionCross, l)?;
            let plain = self.tape.add(s1, c)?;
            let t_cls = self.tape.row(s1, 0)?;
            x = if self.model.config.gated_query {
                let f_cls = self.tape.row(c, 0)?;
                let blended = self.gate(f_cls, t_cls, l)?;
                self.tape.set_row(plain, 0, blended)?
            } else {
                plain
            };
            query = Some(t_cls);
        }
        let cls = self.tape.row(x, 0)?;
        Ok((cls, query.expect("at least one fusion layer")))
    }

    /// `(normalize(img_cls_i) · normalize(txt_cls_j)) / τ`.
    fn similarity(&mut self, image_seqs: &[Var], text_seqs: &[Var]) -> Result<Var> {
        let img: Vec<Var> = image_seqs.iter().map(|&s| self.tape.row(s, 0)).collect::<Result<_>>()?;
        let txt: Vec<Var> = text_seqs.iter().map(|&s| self.tape.row(s, 0)).collect::<Result<_>>()?;
        let img = self.tape.vstack(&img)?;
        let txt = self.tape.vstack(&txt)?;
        let img = self.tape.normalize_rows(img);
        let txt = self.tape.normalize_rows(txt);
        let txt_t = self.tape.transpose(txt);
        let sim = self.tape.matmul(img, txt_t)?;
        Ok(self.tape.scale(sim, 1.0 / self.model.config.temperature))
    }

    /// Context enhancement on stacked fusion features `f` and queries `t`.
    fn enhance(&mut self, f: Var, t: Var, context_seed: u64) -> Result<Var> {
        let (b, e) = self.tape.value(f).shape();
        match self.model.config.context {
            ContextMode::Off => Ok(f),
            ContextMode::Enhance => {
                let tt = self.tape.transpose(t);
                let scores = self.tape.matmul(f, tt)?;
                let alpha = self.tape.softmax_rows(scores);
                let ctx = self.tape.matmul(alpha, t)?;
                self.tape.add(f, ctx)
            }
            ContextMode::Random => {
                let r = random_context(b, e, context_seed);
                let r = self.tape.constant(r);
                let rt = self.tape.transpose(r);
                let scores = self.tape.matmul(f, rt)?;
                let alpha = self.tape.softmax_rows(scores);
                let ctx = self.tape.matmul(alpha, r)?;
                self.tape.add(f, ctx)
            }
            ContextMode::Mean => {
                let alpha = self.tape.constant(uniform_weights(b));
                let ctx = self.tape.matmul(alpha, t)?;
                self.tape.add(f, ctx)
            }
        }
    }

    fn head(&mut self, features: Var) -> Result<Var> {
        let logits = self.tape.matmul(features, self.vars.head_w)?;
        self.tape.add_row_broadcast(logits, self.vars.head_b)
    }

    /// Full pass: contrastive similarity, matching logits and both losses.
    pub fn run(&mut self, batch: &PairBatch) -> Result<ForwardVars> {
        batch.validate()?;
        let image_seqs: Vec<Var> =
            batch.images.iter().map(|t| self.encode(Branch::Vision, t)).collect::<Result<_>>()?;
        let text_seqs: Vec<Var> =
            batch.texts.iter().map(|t| self.encode(Branch::Text, t)).collect::<Result<_>>()?;
        let similarity = self.similarity(&image_seqs, &text_seqs)?;

        let pairs = batch.itm_pairs();
        let mut fusion = Vec::with_capacity(pairs.len());
        let mut queries = Vec::with_capacity(pairs.len());
        for &(img, txt, _) in &pairs {
            let (f, q) = self.fuse(text_seqs[txt], image_seqs[img])?;
            fusion.push(f);
            queries.push(q);
        }
        let f = self.tape.vstack(&fusion)?;
        let t = self.tape.vstack(&queries)?;
        let enhanced = self.enhance(f, t, batch.context_seed)?;
        let itm_logits = self.head(enhanced)?;

        let diag: Vec<usize> = (0..batch.len()).collect();
        let sim_t = self.tape.transpose(similarity);
        let rows = self.tape.cross_entropy(similarity, &diag)?;
        let cols = self.tape.cross_entropy(sim_t, &diag)?;
        let both = self.tape.add(rows, cols)?;
        let loss_itc = self.tape.scale(both, 0.5);
        let labels: Vec<usize> = pairs.iter().map(|p| p.2).collect();
        let loss_itm = self.tape.cross_entropy(itm_logits, &labels)?;
        let loss_total = self.tape.add(loss_itc, loss_itm)?;
        Ok(ForwardVars { similarity, itm_logits, loss_itc, loss_itm, loss_total })
    }

    /// Backward sweep from `output`, collected per trainable block.
    pub fn gradients(&self, output: Var, seed: f64) -> TrainableParams {
        let grads = self.tape.backward_scaled(output, seed);
        self.collect(&grads)
    }

    fn collect(&self, grads: &Grads) -> TrainableParams {
        let g = |v: Var| grads.wrt(&self.tape, v);
        let row_vec = |v: Var| Vector::from(grads.wrt(&self.tape, v).as_slice());
        TrainableParams {
            factors: GlobalFactors { u: g(self.vars.u), v: g(self.vars.v), p: g(self.vars.p) },
            coeffs: CoefficientTable { lambda: g(self.vars.lambda) },
            gates: self
                .vars
                .gamma
                .iter()
                .zip(&self.vars.beta)
                .map(|(&ga, &be)| GateParams { gamma: row_vec(ga), beta: row_vec(be) })
                .collect(),
            head: ItmHead { weight: g(self.vars.head_w), bias: g(self.vars.head_b) },
        }
    }
}

/// Random Gaussian context vectors for [`ContextMode::Random`].
pub fn random_context(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed, streams::CONTEXT);
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn uniform_weights(b: usize) -> Matrix {
    Matrix::from_fn(b, b, |_, _| 1.0 / b as f64)
}

/// Encodes an image token sequence; returns the output sequence and its
/// `[CLS]` row.
pub fn encode_image(model: &Model, tokens: &[usize]) -> Result<(Matrix, Vector)> {
    encode(model, Branch::Vision, tokens)
}

pub fn encode_text(model: &Model, tokens: &[usize]) -> Result<(Matrix, Vector)> {
    encode(model, Branch::Text, tokens)
}

fn encode(model: &Model, branch: Branch, tokens: &[usize]) -> Result<(Matrix, Vector)> {
    let mut fwd = Forward::new(model, false);
    let seq = fwd.encode(branch, tokens)?;
    let seq = fwd.tape().value(seq).clone();
    let cls = Vector::from(seq.row(0));
    Ok((seq, cls))
}

/// Fusion `[CLS]` feature for an encoded text and image sequence.
pub fn fuse(model: &Model, text_seq: &Matrix, image_seq: &Matrix) -> Result<Vector> {
    let mut fwd = Forward::new(model, false);
    let t = fwd.tape.constant(text_seq.clone());
    let i = fwd.tape.constant(image_seq.clone());
    let (cls, _) = fwd.fuse(t, i)?;
    Ok(Vector::from(fwd.tape().value(cls).as_slice()))
}

/// Contrastive similarity matrix between image and text `[CLS]` features.
pub fn forward_itc(model: &Model, images: &[Vec<usize>], texts: &[Vec<usize>]) -> Result<Matrix> {
    let mut fwd = Forward::new(model, false);
    let imgs: Vec<Var> = images.iter().map(|t| fwd.encode(Branch::Vision, t)).collect::<Result<_>>()?;
    let txts: Vec<Var> = texts.iter().map(|t| fwd.encode(Branch::Text, t)).collect::<Result<_>>()?;
    let sim = fwd.similarity(&imgs, &txts)?;
    Ok(fwd.tape().value(sim).clone())
}

/// Values of one full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub similarity: Matrix,
    pub itm_logits: Matrix,
    pub itm_labels: Vec<usize>,
    pub loss_itc: f64,
    pub loss_itm: f64,
    pub loss_total: f64,
}

pub fn forward(model: &Model, batch: &PairBatch) -> Result<ForwardOutput> {
    let mut fwd = Forward::new(model, false);
    let vars = fwd.run(batch)?;
    let tape = fwd.tape();
    Ok(ForwardOutput {
        similarity: tape.value(vars.similarity).clone(),
        itm_logits: tape.value(vars.itm_logits).clone(),
        itm_labels: batch.itm_pairs().iter().map(|p| p.2).collect(),
        loss_itc: tape.scalar(vars.loss_itc),
        loss_itm: tape.scalar(vars.loss_itm),
        loss_total: tape.scalar(vars.loss_total),
    })
}

/// Matching logits over context-enhanced fusion features.
pub fn forward_itm(model: &Model, batch: &PairBatch) -> Result<Matrix> {
    forward(model, batch).map(|o| o.itm_logits)
}

/// The adapter-free model: frozen projections only, written with the plain
/// tensor and alignment functions.
pub mod reference {
    use super::*;
    use crate::align::{context_enhance, gated_query_transform, BatchFeatures};
    use crate::autodiff::normalize_rows;
    use crate::tensor::scaled_dot_attention;

    fn frozen_attention(model: &Model, xq: &Matrix, xkv: &Matrix, branch: Branch, layer: usize) -> Result<Matrix> {
        let stack = &model.frozen.stack;
        let w = |role| stack.frozen_slice(stack.slice_of(SliceKey { branch, layer, role })?);
        scaled_dot_attention(xq, xkv, xkv, &w(Role::Query)?, &w(Role::Key)?, &w(Role::Value)?)
    }

    pub fn encode(model: &Model, branch: Branch, tokens: &[usize]) -> Result<Matrix> {
        let layers = match branch {
            Branch::Vision => model.config.vision_layers,
            _ => model.config.text_layers,
        };
        let mut x = model.embed(branch, tokens)?;
        for l in 0..layers {
            let a = frozen_attention(model, &x, &x, branch, l)?;
            x = x.add(&a)?;
        }
        Ok(x)
    }

    /// Returns `(fusion_cls, query_cls)` like [`Forward::fuse`].
    pub fn fuse(model: &Model, text_seq: &Matrix, image_seq: &Matrix) -> Result<(Vector, Vector)> {
        let mut x = text_seq.clone();
        let mut query = Vector::zeros(0);
        for l in 0..model.config.fusion_layers {
            let s1 = x.add(&frozen_attention(model, &x, &x, Branch::FusionSelf, l)?)?;
            let c = frozen_attention(model, &s1, image_seq, Branch::FusionCross, l)?;
            let mut next = s1.add(&c)?;
            if model.config.gated_query {
                let g = gated_query_transform(c.row(0), s1.row(0), &model.params.gates[l], model.config.gate_mode)?;
                next.row_mut(0).copy_from_slice(&g);
            }
            query = Vector::from(s1.row(0));
            x = next;
        }
        Ok((Vector::from(x.row(0)), query))
    }

    pub fn forward_itc(model: &Model, images: &[Vec<usize>], texts: &[Vec<usize>]) -> Result<Matrix> {
        let cls = |branch, seqs: &[Vec<usize>]| -> Result<Matrix> {
            let rows = seqs
                .iter()
                .map(|t| encode(model, branch, t).map(|s| s.rows_range(0, 1)))
                .collect::<Result<Vec<_>>>()?;
            Matrix::vstack(&rows.iter().collect::<Vec<_>>())
        };
        let img = normalize_rows(&cls(Branch::Vision, images)?);
        let txt = normalize_rows(&cls(Branch::Text, texts)?);
        Ok(img.matmul(&txt.transpose())?.scale(1.0 / model.config.temperature))
    }

    pub fn forward_itm(model: &Model, batch: &PairBatch) -> Result<Matrix> {
        let images: Vec<Matrix> = batch.images.iter().map(|t| encode(model, Branch::Vision, t)).collect::<Result<_>>()?;
        let texts: Vec<Matrix> = batch.texts.iter().map(|t| encode(model, Branch::Text, t)).collect::<Result<_>>()?;
        let pairs = batch.itm_pairs();
        let mut f_rows = Vec::new();
        let mut t_rows = Vec::new();
        for &(img, txt, _) in &pairs {
            let (f, t) = fuse(model, &texts[txt], &images[img])?;
            f_rows.push(f.to_row());
            t_rows.push(t.to_row());
        }
        let f = Matrix::vstack(&f_rows.iter().collect::<Vec<_>>())?;
        let t = Matrix::vstack(&t_rows.iter().collect::<Vec<_>>())?;
        let (b, e) = f.shape();
        let enhanced = match model.config.context {
            ContextMode::Off => f,
            ContextMode::Enhance => context_enhance(&BatchFeatures::new(f, t)?)?.1,
            ContextMode::Random => context_enhance(&BatchFeatures::new(f, random_context(b, e, batch.context_seed))?)?.1,
            ContextMode::Mean => f.add(&uniform_weights(b).matmul(&t)?)?,
        };
        enhanced.matmul(&model.params.head.weight)?.add_row_broadcast(&model.params.head.bias)
    }
}
