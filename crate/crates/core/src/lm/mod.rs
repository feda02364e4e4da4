//! Causal decoder with a KV cache.
//!
//! Blocks are pre-norm (RMSNorm), rotary attention (half-split rotation per
//! head) followed by a SiLU-gated MLP. The same block code serves two paths:
//! a cache-free forward over a whole sequence (used for training and as the
//! reference) and a cached forward that appends keys/values to a
//! [`KvCache`] (prefill and decode).

pub mod tokenizer;

use std::ops::Range;

use crate::config::LmConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::weights::Ctx;

const NORM_EPS: f64 = 1e-6;

/// Keys and values of one layer, token-major `[filled, d_lm]`.
#[derive(Clone, Debug, Default)]
pub struct LayerCache<T: Real = f32> {
    k: Option<Tensor<T>>,
    v: Option<Tensor<T>>,
}

impl<T: Real> LayerCache<T> {
    fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |t| t.shape()[0])
    }

    fn append(&mut self, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        match (&mut self.k, &mut self.v) {
            (Some(kc), Some(vc)) => {
                kc.append_rows(k.data())?;
                vc.append_rows(v.data())
            }
            _ => {
                self.k = Some(k.clone());
                self.v = Some(v.clone());
                Ok(())
            }
        }
    }

    pub fn keys(&self) -> Option<&Tensor<T>> {
        self.k.as_ref()
    }

    pub fn values(&self) -> Option<&Tensor<T>> {
        self.v.as_ref()
    }
}

/// Per-layer attention keys and values for one generation session.
#[derive(Clone, Debug)]
pub struct KvCache<T: Real = f32> {
    layers: Vec<LayerCache<T>>,
    max_seq: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(cfg: &LmConfig) -> Self {
        KvCache {
            layers: (0..cfg.n_layers).map(|_| LayerCache { k: None, v: None }).collect(),
            max_seq: cfg.max_seq,
        }
    }

    /// Number of cached positions.
    pub fn filled_len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn layer(&self, l: usize) -> &LayerCache<T> {
        &self.layers[l]
    }
}

/// The decoder input: `[BOS][IMG_START][image tokens][IMG_END][prompt]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultimodalSequence {
    pub image_tokens: usize,
    pub prompt: Vec<u32>,
}

impl MultimodalSequence {
    pub fn new(image_tokens: usize, prompt: Vec<u32>) -> Self {
        MultimodalSequence { image_tokens, prompt }
    }

    pub fn len(&self) -> usize {
        3 + self.image_tokens + self.prompt.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Positions occupied by projected image tokens.
    pub fn image_span(&self) -> Range<usize> {
        2..2 + self.image_tokens
    }

    fn suffix(&self, extra: &[u32]) -> Vec<usize> {
        std::iter::once(tokenizer::IMG_END)
            .chain(self.prompt.iter().copied())
            .chain(extra.iter().copied())
            .map(|t| t as usize)
            .collect()
    }
}

/// Embeds the full sequence to `[len + extra.len(), d_lm]`, splicing the
/// projected image rows (`[1, n, d_lm]` or `[n, d_lm]`) into the image span.
/// `extra` tokens are appended after the prompt (teacher forcing).
pub fn embed_sequence<T: Real>(
    ctx: &mut Ctx<'_, T>,
    seq: &MultimodalSequence,
    image: Var,
    extra: &[u32],
) -> Result<Var> {
    let d = *ctx.g.shape(image).last().expect("non-empty shape");
    let rows: usize = ctx.g.value(image).numel() / d;
    if rows != seq.image_tokens {
        return Err(Error::dim(
            "embed_sequence",
            format!("image has {rows} tokens, sequence expects {}", seq.image_tokens),
        ));
    }
    let table = ctx.p("lm.embed")?;
    let prefix = ctx.g.embedding(table, &[tokenizer::BOS as usize, tokenizer::IMG_START as usize])?;
    let img = ctx.g.reshape(image, vec![rows, d])?;
    let suffix = ctx.g.embedding(table, &seq.suffix(extra))?;
    ctx.g.concat(&[prefix, img, suffix], 0)
}

/// Embeds plain token ids to `[n, d_lm]`.
pub fn embed_tokens<T: Real>(ctx: &mut Ctx<'_, T>, ids: &[u32]) -> Result<Var> {
    let table = ctx.p("lm.embed")?;
    let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    ctx.g.embedding(table, &ids)
}

/// Runs the decoder blocks over `x` (`[n, d_lm]`) and returns the final
/// normalized hidden states `[n, d_lm]`.
///
/// Without a cache, `x` is a whole sequence starting at position 0. With a
/// cache, `x` continues the cached positions and its keys/values are
/// appended; the cache must outlive the graph.
pub fn forward<'w, T: Real>(
    ctx: &mut Ctx<'w, T>,
    cfg: &LmConfig,
    mut x: Var,
    cache: Option<&'w mut KvCache<T>>,
) -> Result<Var> {
    let shape = ctx.g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_lm {
        return Err(Error::dim("lm.forward", format!("input {shape:?}, d_lm {}", cfg.d_lm)));
    }
    let n = shape[0];
    let pos0 = cache.as_ref().map_or(0, |c| c.filled_len());
    if pos0 + n > cfg.max_seq {
        return Err(Error::ContextOverflow {
            needed: pos0 + n,
            max_seq: cfg.max_seq,
        });
    }
    let mut layers = cache.map(|c| c.layers.iter_mut());
    let eps = T::lit(NORM_EPS);
    let theta = cfg.rope_theta as f64;
    for l in 0..cfg.n_layers {
        let p = format!("lm.layers.{l}");
        let gamma = ctx.p(&format!("{p}.attn_norm.gamma"))?;
        let h = ctx.g.rmsnorm(x, gamma, eps)?;
        let q = ctx.linear(h, &format!("{p}.attn.wq"), None)?;
        let k = ctx.linear(h, &format!("{p}.attn.wk"), None)?;
        let v = ctx.linear(h, &format!("{p}.attn.wv"), None)?;
        let q = ctx.g.rope(q, cfg.n_heads, pos0, theta)?;
        let k = ctx.g.rope(k, cfg.n_heads, pos0, theta)?;
        let (k_all, v_all) = match layers.as_mut().and_then(|it| it.next()) {
            None => (k, v),
            Some(layer) => {
                layer.append(ctx.g.value(k), ctx.g.value(v))?;
                let layer: &'w LayerCache<T> = layer;
                let kc = layer.k.as_ref().expect("appended");
                let vc = layer.v.as_ref().expect("appended");
                (ctx.g.param(kc, false), ctx.g.param(vc, false))
            }
        };
        let a = ctx.g.attention(q, k_all, v_all, cfg.n_heads, true)?;
        let a = ctx.linear(a, &format!("{p}.attn.wo"), None)?;
        x = ctx.g.add(x, a)?;

        let gamma = ctx.p(&format!("{p}.mlp_norm.gamma"))?;
        let h = ctx.g.rmsnorm(x, gamma, eps)?;
        let gate = ctx.linear(h, &format!("{p}.mlp.gate"), None)?;
        let gate = ctx.g.silu(gate)?;
        let up = ctx.linear(h, &format!("{p}.mlp.up"), None)?;
        let h = ctx.g.mul(gate, up)?;
        let h = ctx.linear(h, &format!("{p}.mlp.down"), None)?;
        x = ctx.g.add(x, h)?;
    }
    let gamma = ctx.p("lm.final_norm.gamma")?;
    ctx.g.rmsnorm(x, gamma, eps)
}

/// Projects hidden states `[n, d_lm]` to logits `[n, vocab]`.
pub fn logits<T: Real>(ctx: &mut Ctx<'_, T>, hidden: Var) -> Result<Var> {
    ctx.linear(hidden, "lm.head", None)
}

/// Logits of the last row of `hidden`.
pub fn last_logits<T: Real>(ctx: &mut Ctx<'_, T>, hidden: Var) -> Result<Var> {
    let n = ctx.g.shape(hidden)[0];
    let last = ctx.g.slice_rows(hidden, n - 1, 1)?;
    logits(ctx, last)
}

/// Teacher-forced log-probabilities `[len]` of `targets`, where the input
/// `x` (`[n, d_lm]`) has already been embedded and `targets[i]` is predicted
/// from position `first_pred + i`.
pub fn target_logprobs<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &LmConfig,
    x: Var,
    first_pred: usize,
    targets: &[u32],
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Contract("no target tokens to score".into()));
    }
    let hidden = forward(ctx, cfg, x, None)?;
    let rows = ctx.g.slice_rows(hidden, first_pred, targets.len())?;
    let lg = logits(ctx, rows)?;
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    ctx.g.log_softmax_gather(lg, &t)
}
