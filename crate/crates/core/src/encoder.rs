//! Small post-LN transformer encoder that reads `[BOS] C [SEP] Q O [SEP]`
//! for one option at a time and exposes the pooled vector of every block.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Real, Tensor, LAYER_NORM_EPS};
use crate::synth_data::{McqaInstance, Sentence, Token, BOS, SEP};
use crate::NUM_OPTIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Hidden state of the `BOS` position.
    FirstToken,
    /// Average over all positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Width of the feed-forward layer inside each block.
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            blocks: 4,
            hidden: 32,
            heads: 2,
            ffn_hidden: 64,
            vocab_size: 64,
            max_len: 80,
            pooling: Pooling::FirstToken,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigMismatch(m));
        if self.blocks == 0 {
            return fail("encoder needs at least one block".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.hidden < 2 || self.ffn_hidden == 0 {
            return fail("hidden and ffn widths must be positive (hidden >= 2)".into());
        }
        if self.max_len < 4 {
            return fail("max_len must leave room for the special tokens".into());
        }
        if self.vocab_size <= SEP as usize {
            return fail("vocabulary must include the special ids".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// One option's packed token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub token_ids: Vec<Token>,
    /// 0 for `BOS`, the context and the first `SEP`; 1 for question, option and final `SEP`.
    pub segment_ids: Vec<u8>,
    /// Positions of the two `SEP` markers.
    pub sep_positions: [usize; 2],
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Lays out `[BOS] C [SEP] Q O [SEP]`. When the result would exceed
/// `max_len`, context tokens are dropped from the end so that the sequence
/// is exactly `max_len` long; question and option are never cut.
pub fn pack(context: &[Sentence], question: &[Token], option: &[Token], max_len: usize) -> Result<PackedInput> {
    if option.is_empty() {
        return Err(Error::contract("option must contain at least one token"));
    }
    let tail = question.len() + option.len() + 1;
    if tail + 2 > max_len {
        return Err(Error::contract(format!(
            "question and option need {} positions, max_len is {max_len}",
            tail + 2
        )));
    }
    let budget = max_len - tail - 2;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(context.iter().flatten().copied().take(budget));
    let first_sep = ids.len();
    ids.push(SEP);
    let mut segments = vec![0u8; ids.len()];
    ids.extend_from_slice(question);
    ids.extend_from_slice(option);
    let second_sep = ids.len();
    ids.push(SEP);
    segments.resize(ids.len(), 1);
    Ok(PackedInput {
        token_ids: ids,
        segment_ids: segments,
        sep_positions: [first_sep, second_sep],
    })
}

/// Recovers the (possibly truncated) flattened context and the `Q O` tokens.
pub fn unpack(input: &PackedInput) -> (Vec<Token>, Vec<Token>) {
    let [first, second] = input.sep_positions;
    (
        input.token_ids[1..first].to_vec(),
        input.token_ids[first + 1..second].to_vec(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Handles of the encoder's tensors inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub segment_embedding: ParamId,
    pub embed_ln_gain: ParamId,
    pub embed_ln_bias: ParamId,
    pub blocks: Vec<BlockParams>,
}

pub(crate) fn normal_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Either draws fresh tensors into the store or looks existing ones up by name.
pub(crate) enum Source<'a, T, R: ?Sized> {
    Init(&'a mut ParamStore<T>, &'a mut R),
    Locate(&'a ParamStore<T>),
}

impl<T: Real, R: Rng + ?Sized> Source<'_, T, R> {
    pub(crate) fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match self {
            Source::Init(store, rng) => {
                let t = match init {
                    Init::Normal(std) => normal_tensor(shape, std, *rng),
                    Init::Const(c) => Tensor::full(shape, T::lit(c)),
                };
                store.insert(name, t)
            }
            Source::Locate(store) => {
                let id = store.expect_id(name)?;
                if store.get(id).shape() != shape {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Normal(f64),
    Const(f64),
}

impl EncoderParams {
    pub(crate) fn build<T: Real, R: Rng + ?Sized>(cfg: &EncoderConfig, src: &mut Source<'_, T, R>) -> Result<Self> {
        let (d, f) = (cfg.hidden, cfg.ffn_hidden);
        let w = Init::Normal(cfg.init_std);
        let zero = Init::Const(0.0);
        let one = Init::Const(1.0);
        let token_embedding = src.get("encoder.token_embedding", &[cfg.vocab_size, d], w)?;
        let position_embedding = src.get("encoder.position_embedding", &[cfg.max_len, d], w)?;
        let segment_embedding = src.get("encoder.segment_embedding", &[2, d], w)?;
        let embed_ln_gain = src.get("encoder.embed_ln.gain", &[d], one)?;
        let embed_ln_bias = src.get("encoder.embed_ln.bias", &[d], zero)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let p = |s: &str| format!("encoder.block{k}.{s}");
            blocks.push(BlockParams {
                wq: src.get(&p("attn.wq"), &[d, d], w)?,
                bq: src.get(&p("attn.bq"), &[d], zero)?,
                wk: src.get(&p("attn.wk"), &[d, d], w)?,
                bk: src.get(&p("attn.bk"), &[d], zero)?,
                wv: src.get(&p("attn.wv"), &[d, d], w)?,
                bv: src.get(&p("attn.bv"), &[d], zero)?,
                wo: src.get(&p("attn.wo"), &[d, d], w)?,
                bo: src.get(&p("attn.bo"), &[d], zero)?,
                ln1_gain: src.get(&p("ln1.gain"), &[d], one)?,
                ln1_bias: src.get(&p("ln1.bias"), &[d], zero)?,
                w1: src.get(&p("ffn.w1"), &[d, f], w)?,
                b1: src.get(&p("ffn.b1"), &[f], zero)?,
                w2: src.get(&p("ffn.w2"), &[f, d], w)?,
                b2: src.get(&p("ffn.b2"), &[d], zero)?,
                ln2_gain: src.get(&p("ln2.gain"), &[d], one)?,
                ln2_bias: src.get(&p("ln2.bias"), &[d], zero)?,
            });
        }
        Ok(EncoderParams {
            token_embedding,
            position_embedding,
            segment_embedding,
            embed_ln_gain,
            embed_ln_bias,
            blocks,
        })
    }

    /// Registers every encoder tensor as a leaf of `g` once, so several
    /// sequences in the same graph share (and accumulate into) the same leaves.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> BoundEncoder {
        let mut p = |id: ParamId| g.param(store, id);
        BoundEncoder {
            token_embedding: p(self.token_embedding),
            position_embedding: p(self.position_embedding),
            segment_embedding: p(self.segment_embedding),
            embed_ln: (p(self.embed_ln_gain), p(self.embed_ln_bias)),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    wq: p(b.wq),
                    bq: p(b.bq),
                    wk: p(b.wk),
                    bk: p(b.bk),
                    wv: p(b.wv),
                    bv: p(b.bv),
                    wo: p(b.wo),
                    bo: p(b.bo),
                    ln1: (p(b.ln1_gain), p(b.ln1_bias)),
                    w1: p(b.w1),
                    b1: p(b.b1),
                    w2: p(b.w2),
                    b2: p(b.b2),
                    ln2: (p(b.ln2_gain), p(b.ln2_bias)),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct BoundBlock {
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln1: (NodeId, NodeId),
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    ln2: (NodeId, NodeId),
}

/// Encoder weights registered on one graph.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    token_embedding: NodeId,
    position_embedding: NodeId,
    segment_embedding: NodeId,
    embed_ln: (NodeId, NodeId),
    blocks: Vec<BoundBlock>,
}

impl BoundEncoder {
    /// Pooled `1×d` output of each block. With `final_only` the list holds
    /// just the last block's vector.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        cfg: &EncoderConfig,
        input: &PackedInput,
        final_only: bool,
    ) -> Result<Vec<NodeId>> {
        let len = input.len();
        if len > cfg.max_len {
            return Err(Error::Index {
                what: "sequence length",
                index: len,
                limit: cfg.max_len,
            });
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let ids: Vec<usize> = input.token_ids.iter().map(|&t| t as usize).collect();
        let segs: Vec<usize> = input.segment_ids.iter().map(|&s| s as usize).collect();
        let positions: Vec<usize> = (0..len).collect();

        let tok = g.gather(self.token_embedding, &ids)?;
        let pos = g.gather(self.position_embedding, &positions)?;
        let seg = g.gather(self.segment_embedding, &segs)?;
        let sum = g.add_n(&[tok, pos, seg])?;
        let mut x = g.layer_norm(sum, self.embed_ln.0, self.embed_ln.1, eps)?;

        let last = self.blocks.len() - 1;
        let mut pooled = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            // Only the BOS row of the last block is observable under
            // first-token pooling, so its queries can be restricted to row 0.
            let cls_only = k == last && cfg.pooling == Pooling::FirstToken;
            x = self.block(g, cfg, block, x, cls_only, eps)?;
            if final_only && k != last {
                continue;
            }
            let p = match cfg.pooling {
                Pooling::FirstToken if cls_only => x,
                Pooling::FirstToken => g.select_row(x, 0)?,
                Pooling::Mean => g.mean_rows(x),
            };
            pooled.push(p);
        }
        Ok(pooled)
    }

    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        cfg: &EncoderConfig,
        b: &BoundBlock,
        x: NodeId,
        cls_only: bool,
        eps: T,
    ) -> Result<NodeId> {
        let dh = cfg.head_dim();
        let query_src = if cls_only { g.select_row(x, 0)? } else { x };

        let q = g.matmul(query_src, b.wq)?;
        let q = g.add_row(q, b.bq)?;
        let k = g.matmul(x, b.wk)?;
        let k = g.add_row(k, b.bk)?;
        let v = g.matmul(x, b.wv)?;
        let v = g.add_row(v, b.bv)?;

        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let out = g.matmul(merged, b.wo)?;
        let out = g.add_row(out, b.bo)?;
        let res = g.add(query_src, out)?;
        let x1 = g.layer_norm(res, b.ln1.0, b.ln1.1, eps)?;

        let hidden = g.matmul(x1, b.w1)?;
        let hidden = g.add_row(hidden, b.b1)?;
        let hidden = g.gelu(hidden);
        let ffn = g.matmul(hidden, b.w2)?;
        let ffn = g.add_row(ffn, b.b2)?;
        let res = g.add(x1, ffn)?;
        g.layer_norm(res, b.ln2.0, b.ln2.1, eps)
    }
}

/// `K × 4 × d` pooled representations: `reps[k]` is the `4×d` stack of
/// block `k` outputs, one row per option.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedOptionSet<T> {
    pub reps: Vec<Tensor<T>>,
}

fn check_tokens(cfg: &EncoderConfig, input: &PackedInput) -> Result<()> {
    if let Some(&bad) = input.token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad as usize,
            limit: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Pooled output of every block for one packed sequence, each of length `d`.
pub fn encode_option<T: Real>(input: &PackedInput, params: &ModelParams<T>) -> Result<Vec<Tensor<T>>> {
    let cfg = &params.config.encoder;
    check_tokens(cfg, input)?;
    let mut g = Graph::new();
    let bound = params.layout.encoder.bind(&mut g, &params.store);
    let pooled = bound.encode(&mut g, cfg, input, false)?;
    pooled
        .into_iter()
        .map(|n| g.value(n).clone().reshape(vec![cfg.hidden]))
        .collect()
}

/// Encodes `[C; (Q; O_i)]` for the four options with shared weights.
pub fn encode_option_set<T: Real>(instance: &McqaInstance, params: &ModelParams<T>) -> Result<EncodedOptionSet<T>> {
    if instance.options.len() != NUM_OPTIONS {
        return Err(Error::contract(format!(
            "expected {NUM_OPTIONS} options, got {}",
            instance.options.len()
        )));
    }
    let cfg = &params.config.encoder;
    let per_option = instance
        .options
        .iter()
        .map(|o| {
            let input = pack(&instance.context, &instance.question, o, cfg.max_len)?;
            encode_option(&input, params)
        })
        .collect::<Result<Vec<_>>>()?;
    let reps = (0..cfg.blocks)
        .map(|k| {
            let rows: Vec<&[T]> = per_option.iter().map(|p| p[k].data()).collect();
            Tensor::from_rows(&rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedOptionSet { reps })
}

/// Final-block pooled vector of `[Q; O]` with an empty context segment.
pub fn encode_qo<T: Real>(question: &[Token], option: &[Token], params: &ModelParams<T>) -> Result<Tensor<T>> {
    let cfg = &params.config.encoder;
    let input = pack(&[], question, option, cfg.max_len)?;
    check_tokens(cfg, &input)?;
    let mut g = Graph::new();
    let bound = params.layout.encoder.bind(&mut g, &params.store);
    let pooled = bound.encode(&mut g, cfg, &input, true)?;
    g.value(pooled[0]).clone().reshape(vec![cfg.hidden])
}
