//! Analytic token, energy and FLOP estimates.
//!
//! Hosted-API image pricing is modelled as pure 512-pixel tiling: each tile
//! costs 170 tokens, plus a flat 85 per image.

use serde::{Deserialize, Serialize};

use crate::config::LmConfig;
use crate::error::{Error, Result};

pub const TILE_PX: u64 = 512;
pub const TOKENS_PER_TILE: u64 = 170;
pub const BASE_TOKENS: u64 = 85;
pub const DEFAULT_JOULES_PER_TOKEN: f32 = 0.7;
pub const DEFAULT_BATTERY_JOULES: f32 = 50_000.0;

/// `(tiles, tokens)` for a `width × height` image.
pub fn openai_token_cost(width: i64, height: i64) -> Result<(u64, u64)> {
    if width < 1 || height < 1 {
        return Err(Error::Input(format!("image dimensions must be positive, got {width}x{height}")));
    }
    let tiles = (width as u64).div_ceil(TILE_PX) * (height as u64).div_ceil(TILE_PX);
    Ok((tiles, TOKENS_PER_TILE * tiles + BASE_TOKENS))
}

/// `(joules, fraction of battery)` for processing `tokens` tokens.
pub fn energy_estimate(tokens: i64, joules_per_token: f32, battery_joules: f32) -> Result<(f32, f32)> {
    if tokens < 0 {
        return Err(Error::Input(format!("token count must be nonnegative, got {tokens}")));
    }
    if !(joules_per_token >= 0.0 && joules_per_token.is_finite()) {
        return Err(Error::Input(format!("joules per token must be nonnegative, got {joules_per_token}")));
    }
    if !(battery_joules > 0.0 && battery_joules.is_finite()) {
        return Err(Error::Input(format!("battery capacity must be positive, got {battery_joules}")));
    }
    // f64 so that 765 · 0.7 lands on 535.5 rather than 535.49994.
    let joules = (tokens as f64 * joules_per_token as f64) as f32;
    Ok((joules, (joules as f64 / battery_joules as f64) as f32))
}

/// Forward FLOPs for a prompt of `n_tokens`: parameter matmuls plus the
/// quadratic attention score and value products.
pub fn prefill_flops(cfg: &LmConfig, n_tokens: usize) -> f64 {
    let (p, n) = (cfg.param_count() as f64, n_tokens as f64);
    2.0 * p * n + 2.0 * cfg.n_layers as f64 * n * n * cfg.d_lm as f64
}

/// FLOPs for one decode step attending over `context_len` positions.
pub fn decode_flops(cfg: &LmConfig, context_len: usize) -> f64 {
    2.0 * cfg.param_count() as f64 + 2.0 * cfg.n_layers as f64 * context_len as f64 * cfg.d_lm as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub image_tokens: u64,
    pub tile_count: u64,
    pub energy_joules: f32,
    pub prefill_flops: f64,
    pub decode_flops_per_token: f64,
    pub battery_fraction: f32,
}

impl CostReport {
    /// Hosted-API token count for the image, its energy at
    /// `joules_per_token`, and what prefilling that many tokens (and
    /// decoding one more) would cost on `lm`.
    pub fn for_image(
        width: i64,
        height: i64,
        joules_per_token: f32,
        battery_joules: f32,
        lm: &LmConfig,
    ) -> Result<Self> {
        let (tile_count, image_tokens) = openai_token_cost(width, height)?;
        let (energy_joules, battery_fraction) = energy_estimate(image_tokens as i64, joules_per_token, battery_joules)?;
        let n = image_tokens as usize;
        Ok(CostReport {
            image_tokens,
            tile_count,
            energy_joules,
            prefill_flops: prefill_flops(lm, n),
            decode_flops_per_token: decode_flops(lm, n + 1),
            battery_fraction,
        })
    }
}
