//! Pre-norm decoder-only transformer with a hookable residual stream.
//!
//! `hidden[0]` is token plus positional embedding and `hidden[l]` is the
//! residual stream after block `l`. A [`PatchSpec`] overwrites one
//! `(layer, position)` vector before block `layer + 1` runs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{GradTape, Var};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: crate::tasks::VOCAB_SIZE,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > usize::from(u16::MAX) + 1 {
            return Err(Error::Config("vocab_size exceeds the u16 token range".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".into(), vec![self.vocab_size, d]),
            ("pos_emb".into(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.w_qkv", vec![d, 3 * d]),
                ("attn.b_qkv", vec![3 * d]),
                ("attn.w_out", vec![d, d]),
                ("attn.b_out", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.w_fc", vec![d, ff]),
                ("mlp.b_fc", vec![ff]),
                ("mlp.w_proj", vec![ff, d]),
                ("mlp.b_proj", vec![d]),
            ] {
                out.push((format!("blocks.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.gain".into(), vec![d]));
        out.push(("ln_f.bias".into(), vec![d]));
        out.push(("unembed".into(), vec![d, self.vocab_size]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

impl Block {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub unembed: Tensor,
}

/// Overwrites `hidden[layer][position]` with `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub layer: usize,
    pub position: usize,
    pub value: Vec<f32>,
}

/// Removes the edge `query -> key` from attention in blocks `1..=through_layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionKnockout {
    pub through_layer: usize,
    pub query: usize,
    pub key: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interventions {
    pub patches: Vec<PatchSpec>,
    pub knockouts: Vec<AttentionKnockout>,
    /// Absolute position of the first token; positions run on from here.
    pub position_offset: usize,
}

impl Interventions {
    pub fn patch(patch: PatchSpec) -> Self {
        Self {
            patches: vec![patch],
            ..Self::default()
        }
    }
}

/// Residual snapshots and logits of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<Token>,
    /// `n_layers + 1` tensors of shape `[tokens, d_model]`.
    pub hidden: Vec<Tensor>,
    /// `[tokens, vocab_size]`
    pub logits: Tensor,
}

impl ForwardTrace {
    /// Copy of the residual stream after block `layer` at `position`.
    pub fn read_hidden(&self, layer: usize, position: usize) -> Result<Vec<f32>> {
        let h = self.hidden.get(layer).ok_or(Error::Index {
            what: "layer",
            index: layer,
            limit: self.hidden.len(),
        })?;
        if position >= h.rows() {
            return Err(Error::Index {
                what: "position",
                index: position,
                limit: h.rows(),
            });
        }
        Ok(h.row(position).to_vec())
    }

    pub fn final_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }

    /// Argmax of the final-position logits, lowest id on ties.
    pub fn prediction(&self) -> Token {
        Token(argmax(self.final_logits()) as u16)
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Anything that can run a forward pass with residual-stream interventions.
pub trait HookedModel {
    fn config(&self) -> &ModelConfig;

    fn run(&self, tokens: &[Token], interventions: &Interventions) -> Result<ForwardTrace>;

    fn forward(&self, tokens: &[Token]) -> Result<ForwardTrace> {
        self.run(tokens, &Interventions::default())
    }

    fn forward_with_patch(&self, tokens: &[Token], patch: &PatchSpec) -> Result<ForwardTrace> {
        self.run(tokens, &Interventions::patch(patch.clone()))
    }
}

/// Tape handles for every parameter, in manifest order.
#[derive(Debug, Clone)]
pub(crate) struct ParamVars {
    pub all: Vec<Var>,
}

impl ParamVars {
    fn block(&self, l: usize, i: usize) -> Var {
        self.all[2 + 12 * l + i]
    }
}

/// Rows of a batched forward pass and their per-sequence boundaries.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl Batch {
    pub fn new(sequences: &[&[Token]]) -> Self {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let start = ids.len();
            ids.extend(seq.iter().map(|t| t.index()));
            positions.extend(0..seq.len());
            segments.push(start..ids.len());
        }
        Self {
            ids,
            positions,
            segments,
        }
    }
}

impl TransformerModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_from(config.seed, &[rng::label("init")]);
        let resid_scale = 1.0 / libm::sqrtf(2.0 * config.n_layers as f32);
        let tensors = config
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                let numel = shape.iter().product();
                let data: Vec<f32> = if name.ends_with(".gain") {
                    vec![1.0; numel]
                } else if shape.len() == 1 {
                    vec![0.0; numel]
                } else {
                    let scale = if name.ends_with("w_out") || name.ends_with("w_proj") {
                        0.02 * resid_scale
                    } else {
                        0.02
                    };
                    (0..numel)
                        .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
                        .collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_named_tensors(config, tensors)
    }

    /// Rebuilds a model from tensors in manifest order; names and shapes must match.
    pub fn from_named_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest();
        if manifest.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in manifest.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter {got_name} {:?} does not match manifest entry {name} {shape:?}",
                    t.shape()
                )));
            }
            t.ensure_finite("from_named_tensors")?;
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: next(),
                ln1_bias: next(),
                w_qkv: next(),
                b_qkv: next(),
                w_out: next(),
                b_out: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w_fc: next(),
                b_fc: next(),
                w_proj: next(),
                b_proj: next(),
            })
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f_gain: next(),
            ln_f_bias: next(),
            unembed: next(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.ln_f_gain, &self.ln_f_bias, &self.unembed]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.ln_f_gain, &mut self.ln_f_bias, &mut self.unembed]);
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.config
            .manifest()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.parameters())
            .collect()
    }

    pub(crate) fn register<'a>(&'a self, tape: &mut GradTape<'a>, trainable: bool) -> ParamVars {
        let all = self
            .parameters()
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.input(t) })
            .collect();
        ParamVars { all }
    }

    /// Records the forward graph and returns `hidden[0..=n_layers]`.
    pub(crate) fn build_hidden(
        &self,
        tape: &mut GradTape<'_>,
        pv: &ParamVars,
        batch: &Batch,
        patches: &[(usize, usize, &[f32])],
        knockouts: &[AttentionKnockout],
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        if let Some(seg) = batch.segments.iter().find(|s| s.len() > cfg.max_seq_len) {
            return Err(Error::SequenceTooLong {
                len: seg.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: id,
                limit: cfg.vocab_size,
            });
        }
        let tok = tape.embedding(pv.all[0], &batch.ids)?;
        let pos = tape.embedding(pv.all[1], &batch.positions)?;
        let mut x = tape.add(tok, pos)?;
        x = apply_patches(tape, x, 0, patches)?;
        let mut hidden = vec![x];
        for l in 0..cfg.n_layers {
            let blocked: Vec<(usize, usize)> = knockouts
                .iter()
                .filter(|k| l < k.through_layer)
                .map(|k| (k.query, k.key))
                .collect();
            let p = |i| pv.block(l, i);
            let h = tape.layer_norm(x, p(0), p(1), LAYER_NORM_EPS)?;
            let qkv = tape.matmul(h, p(2))?;
            let qkv = tape.add_row(qkv, p(3))?;
            let att = tape.causal_attention_masked(qkv, cfg.n_heads, &batch.segments, &blocked)?;
            let att = tape.matmul(att, p(4))?;
            let att = tape.add_row(att, p(5))?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, p(6), p(7), LAYER_NORM_EPS)?;
            let h = tape.matmul(h, p(8))?;
            let h = tape.add_row(h, p(9))?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, p(10))?;
            let h = tape.add_row(h, p(11))?;
            x = tape.add(x, h)?;
            x = apply_patches(tape, x, l + 1, patches)?;
            hidden.push(x);
        }
        Ok(hidden)
    }

    /// Final layer norm followed by the unembedding.
    pub(crate) fn build_logits(&self, tape: &mut GradTape<'_>, pv: &ParamVars, x: Var) -> Result<Var> {
        let n = pv.all.len();
        let h = tape.layer_norm(x, pv.all[n - 3], pv.all[n - 2], LAYER_NORM_EPS)?;
        tape.matmul(h, pv.all[n - 1])
    }

    /// Vocabulary logits for a single residual vector.
    pub fn lens_logits(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        let x = Tensor::new(vec![1, d], hidden.to_vec())?;
        let h = x.layer_norm(&self.ln_f_gain, &self.ln_f_bias, LAYER_NORM_EPS)?;
        Ok(h.matmul(&self.unembed)?.into_data())
    }

    fn check_patch(&self, patch: &PatchSpec, len: usize) -> Result<()> {
        if patch.layer > self.config.n_layers {
            return Err(Error::Index {
                what: "patch layer",
                index: patch.layer,
                limit: self.config.n_layers + 1,
            });
        }
        if patch.position >= len {
            return Err(Error::Index {
                what: "patch position",
                index: patch.position,
                limit: len,
            });
        }
        if patch.value.len() != self.config.d_model {
            return Err(Error::Shape {
                op: "patch",
                lhs: vec![self.config.d_model],
                rhs: vec![patch.value.len()],
            });
        }
        if patch.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "patch" });
        }
        Ok(())
    }
}

fn apply_patches(
    tape: &mut GradTape<'_>,
    mut x: Var,
    layer: usize,
    patches: &[(usize, usize, &[f32])],
) -> Result<Var> {
    for &(l, row, value) in patches {
        if l == layer {
            x = tape.replace_row(x, row, value)?;
        }
    }
    Ok(x)
}

impl HookedModel for TransformerModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn run(&self, tokens: &[Token], interventions: &Interventions) -> Result<ForwardTrace> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        let end = interventions.position_offset + tokens.len();
        if end > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: end,
                max: self.config.max_seq_len,
            });
        }
        for p in &interventions.patches {
            self.check_patch(p, tokens.len())?;
        }
        for k in &interventions.knockouts {
            if k.query >= tokens.len() || k.key >= tokens.len() || k.key >= k.query {
                return Err(Error::Contract(format!(
                    "knockout {} -> {} is not a causal edge of a {}-token input",
                    k.query,
                    k.key,
                    tokens.len()
                )));
            }
        }
        let patches: Vec<(usize, usize, &[f32])> = interventions
            .patches
            .iter()
            .map(|p| (p.layer, p.position, p.value.as_slice()))
            .collect();
        let mut tape = GradTape::new().with_finite_checks(true);
        let pv = self.register(&mut tape, false);
        let mut batch = Batch::new(&[tokens]);
        batch.positions.iter_mut().for_each(|p| *p += interventions.position_offset);
        let hidden = self.build_hidden(&mut tape, &pv, &batch, &patches, &interventions.knockouts)?;
        let logits = self.build_logits(&mut tape, &pv, *hidden.last().expect("n_layers + 1"))?;
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            hidden: hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: tape.value(logits).clone(),
        })
    }
}
