//! Patch encoder: image → `grid²` patch embeddings.
//!
//! A SigLIP-style bidirectional transformer at toy width. Patches are
//! embedded linearly, learned absolute positions are added, and every patch
//! token is emitted (no class token, no pooling, no final norm).

mod image;
pub mod synthetic;

pub use image::Image;

use crate::config::VisionConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::weights::{Ctx, Weights};

const LN_EPS: f64 = 1e-6;

/// Splits an image into flattened patches, `[1, grid², patch²·3]`.
///
/// Patches are enumerated row-major over the grid; inside a patch values are
/// ordered (row, column, channel). Pixels map to `[-1, 1]` via `x/127.5 − 1`.
pub fn patchify<T: Real>(img: &Image, cfg: &VisionConfig) -> Result<Tensor<T>> {
    if img.width() != cfg.image_size || img.height() != cfg.image_size {
        return Err(Error::Input(format!(
            "image is {}×{}, encoder expects {}×{}",
            img.width(),
            img.height(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let (grid, p) = (cfg.grid(), cfg.patch_size);
    let px = img.pixels();
    let mut data = Vec::with_capacity(cfg.seq_len() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for y in gy * p..(gy + 1) * p {
                let row = (y * cfg.image_size + gx * p) * 3;
                data.extend(px[row..row + p * 3].iter().map(|&v| T::lit(v as f64 / 127.5 - 1.0)));
            }
        }
    }
    Tensor::new(vec![1, cfg.seq_len(), cfg.patch_dim()], data)
}

/// Runs the encoder on flattened patches `[grid², patch_dim]` inside `ctx`,
/// returning `[grid², d_vision]`.
pub fn encode_patches<T: Real>(ctx: &mut Ctx<'_, T>, patches: Var, cfg: &VisionConfig) -> Result<Var> {
    let eps = T::lit(LN_EPS);
    let mut x = ctx.linear(patches, "vision.patch_embed.weight", Some("vision.patch_embed.bias"))?;
    let pos = ctx.p("vision.pos_embed")?;
    x = ctx.g.add(x, pos)?;
    for l in 0..cfg.n_layers {
        let p = format!("vision.layers.{l}");
        let (g1, b1) = (ctx.p(&format!("{p}.ln1.gamma"))?, ctx.p(&format!("{p}.ln1.beta"))?);
        let h = ctx.g.layernorm(x, g1, b1, eps)?;
        let q = ctx.linear(h, &format!("{p}.attn.wq"), Some(&format!("{p}.attn.bq")))?;
        let k = ctx.linear(h, &format!("{p}.attn.wk"), Some(&format!("{p}.attn.bk")))?;
        let v = ctx.linear(h, &format!("{p}.attn.wv"), Some(&format!("{p}.attn.bv")))?;
        let a = ctx.g.attention(q, k, v, cfg.n_heads, false)?;
        let a = ctx.linear(a, &format!("{p}.attn.wo"), Some(&format!("{p}.attn.bo")))?;
        x = ctx.g.add(x, a)?;

        let (g2, b2) = (ctx.p(&format!("{p}.ln2.gamma"))?, ctx.p(&format!("{p}.ln2.beta"))?);
        let h = ctx.g.layernorm(x, g2, b2, eps)?;
        let h = ctx.linear(h, &format!("{p}.mlp.fc1.weight"), Some(&format!("{p}.mlp.fc1.bias")))?;
        let h = ctx.g.gelu(h)?;
        let h = ctx.linear(h, &format!("{p}.mlp.fc2.weight"), Some(&format!("{p}.mlp.fc2.bias")))?;
        x = ctx.g.add(x, h)?;
    }
    Ok(x)
}

/// Encodes an image to `[1, grid², d_vision]` without recording gradients.
pub fn vision_encode<T: Real>(img: &Image, cfg: &VisionConfig, weights: &Weights<T>) -> Result<Tensor<T>> {
    let patches = patchify::<T>(img, cfg)?.reshape(vec![cfg.seq_len(), cfg.patch_dim()])?;
    let mut ctx = Ctx::inference(weights);
    let x = ctx.g.constant(patches);
    let out = encode_patches(&mut ctx, x, cfg)?;
    ctx.g.value(out).clone().reshape(vec![1, cfg.seq_len(), cfg.d_vision])
}
