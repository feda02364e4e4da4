//! Image-token compression and alignment to the decoder width.
//!
//! The projector takes `[1, S, d_vision]` encoder output, layer-normalizes
//! each token, reduces the token count by the strategy ratio `r`, then maps
//! each token through a 2-layer GELU MLP to `d_lm`. Three compression steps
//! are available:
//!
//! * **reshape**: `r` consecutive tokens (row-major sequence order) are
//!   concatenated along the feature axis, `[1, S, d] → [1, S/r, r·d]`. The
//!   buffer is reinterpreted, nothing is computed.
//! * **conv1d**: the sequence is transposed to `[1, d, S]` and convolved with
//!   kernel = stride = `r`, no padding, channel count kept at `d`.
//! * **conv2d**: the sequence is viewed as `[1, d, S, 1]` and convolved with
//!   kernel `(r, 1)` and stride `(r, 1)`.
//!
//! All three share the same input norm and MLP head so that they differ only
//! in the compression step.

use crate::config::{CompressionKind, CompressionStrategy};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::weights::{Ctx, Weights};

fn check_input<T: Real>(g: &Graph<'_, T>, emb: Var, ratio: usize) -> Result<(usize, usize)> {
    let s = g.shape(emb);
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::dim("projector", format!("expected [1, S, d], got {s:?}")));
    }
    if ratio == 0 || s[1] % ratio != 0 {
        return Err(Error::Config(format!("ratio {ratio} does not divide sequence length {}", s[1])));
    }
    Ok((s[1], s[2]))
}

/// `[1, S, d] → [1, S/r, r·d]` by grouping consecutive tokens.
pub fn compress_reshape<T: Real>(g: &mut Graph<'_, T>, emb: Var, ratio: usize) -> Result<Var> {
    let (s, d) = check_input(g, emb, ratio)?;
    g.reshape(emb, vec![1, s / ratio, ratio * d])
}

/// `[1, S, d] → [1, S/r, d]` by a strided 1-D convolution with weights
/// `[d, d, r]`.
pub fn compress_conv1d<T: Real>(g: &mut Graph<'_, T>, emb: Var, weight: Var, ratio: usize) -> Result<Var> {
    check_input(g, emb, ratio)?;
    let x = g.transpose(emb, 1, 2)?;
    let y = g.conv1d(x, weight, ratio)?;
    g.transpose(y, 1, 2)
}

/// `[1, S, d] → [1, S/r, d]` by a `(r, 1)` 2-D convolution with weights
/// `[d, d, r, 1]` over a `[1, d, S, 1]` view.
pub fn compress_conv2d<T: Real>(g: &mut Graph<'_, T>, emb: Var, weight: Var, ratio: usize) -> Result<Var> {
    let (s, d) = check_input(g, emb, ratio)?;
    let x = g.transpose(emb, 1, 2)?;
    let x = g.reshape(x, vec![1, d, s, 1])?;
    let y = g.conv2d(x, weight, (ratio, 1))?;
    let y = g.reshape(y, vec![1, d, s / ratio])?;
    g.transpose(y, 1, 2)
}

const NORM_EPS: f64 = 1e-6;

/// Normalizes, compresses and projects `[1, S, d_vision]` to
/// `[1, S/r, d_lm]` using the `projector.*` weights bound in `ctx`.
pub fn project<T: Real>(ctx: &mut Ctx<'_, T>, emb: Var, strategy: CompressionStrategy) -> Result<Var> {
    let r = strategy.ratio;
    check_input(&ctx.g, emb, r)?;
    let (gamma, beta) = (ctx.p("projector.norm.gamma")?, ctx.p("projector.norm.beta")?);
    let emb = ctx.g.layernorm(emb, gamma, beta, T::lit(NORM_EPS))?;
    let compressed = match strategy.kind {
        CompressionKind::Reshape => compress_reshape(&mut ctx.g, emb, r)?,
        CompressionKind::Conv1d => {
            let w = ctx.p("projector.conv.weight")?;
            check_conv_weight(&ctx.g, w, 3, r)?;
            compress_conv1d(&mut ctx.g, emb, w, r)?
        }
        CompressionKind::Conv2d => {
            let w = ctx.p("projector.conv.weight")?;
            check_conv_weight(&ctx.g, w, 4, r)?;
            compress_conv2d(&mut ctx.g, emb, w, r)?
        }
    };
    let h = ctx.linear(compressed, "projector.mlp.fc1.weight", Some("projector.mlp.fc1.bias"))?;
    let h = ctx.g.gelu(h)?;
    ctx.linear(h, "projector.mlp.fc2.weight", Some("projector.mlp.fc2.bias"))
}

fn check_conv_weight<T: Real>(g: &Graph<'_, T>, w: Var, ndim: usize, ratio: usize) -> Result<()> {
    let s = g.shape(w);
    if s.len() != ndim || s[2] != ratio {
        return Err(Error::Checkpoint(crate::io::checkpoint::CheckpointError::ShapeMismatch {
            name: "projector.conv.weight".into(),
            expected: if ndim == 3 { vec![s[0], s[1], ratio] } else { vec![s[0], s[1], ratio, 1] },
            found: s.to_vec(),
        }));
    }
    Ok(())
}

/// Tensor-level projection without gradients.
pub fn project_tensor<T: Real>(
    emb: &Tensor<T>,
    strategy: CompressionStrategy,
    weights: &Weights<T>,
) -> Result<Tensor<T>> {
    let mut ctx = Ctx::inference(weights);
    let x = ctx.g.param(emb, false);
    let y = project(&mut ctx, x, strategy)?;
    Ok(ctx.g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, SUPPORTED_RATIOS};

    fn seq(s: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![1, s, d], |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn reshape_groups_consecutive_tokens() {
        let t = seq(729, 4);
        let mut g = Graph::no_grad();
        let x = g.param(&t, false);
        let y = compress_reshape(&mut g, x, 9).unwrap();
        assert_eq!(g.shape(y), &[1, 81, 36]);
        // Group 1 holds tokens 9..18.
        assert_eq!(&g.data(y)[36..72], &t.data()[36..72]);
        let back = g.reshape(y, vec![1, 729, 4]).unwrap();
        assert!(g.value(back).bit_eq(&t));
    }

    #[test]
    fn reshape_ratio_one_is_identity_and_81_gives_nine_tokens() {
        let t = seq(729, 2);
        let mut g = Graph::no_grad();
        let x = g.param(&t, false);
        let y1 = compress_reshape(&mut g, x, 1).unwrap();
        assert!(g.value(y1).bit_eq(&t));
        let y81 = compress_reshape(&mut g, x, 81).unwrap();
        assert_eq!(g.shape(y81), &[1, 9, 162]);
        assert!(matches!(compress_reshape(&mut g, x, 5), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_averaging_kernel_takes_window_means() {
        let d = 3;
        let t = seq(729, d);
        let mut w = vec![0.0; d * d * 9];
        for c in 0..d {
            for j in 0..9 {
                w[(c * d + c) * 9 + j] = 1.0 / 9.0;
            }
        }
        let w = Tensor::new(vec![d, d, 9], w).unwrap();
        let mut g = Graph::no_grad();
        let (x, wv) = (g.param(&t, false), g.param(&w, false));
        let y = compress_conv1d(&mut g, x, wv, 9).unwrap();
        assert_eq!(g.shape(y), &[1, 81, d]);
        for out_tok in [0usize, 40, 80] {
            for c in 0..d {
                let mean: f64 = (0..9).map(|j| t.data()[(out_tok * 9 + j) * d + c]).sum::<f64>() / 9.0;
                assert!((g.data(y)[out_tok * d + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_length_for_243_tokens_ratio_3() {
        let t = seq(243, 2);
        let w = Tensor::<f64>::ones(vec![2, 2, 3]);
        let mut g = Graph::no_grad();
        let (x, wv) = (g.param(&t, false), g.param(&w, false));
        let y = compress_conv1d(&mut g, x, wv, 3).unwrap();
        assert_eq!(g.shape(y)[1], (243 - 3) / 3 + 1);
        assert_eq!(g.shape(y)[1], 81);
    }

    #[test]
    fn conv2d_matches_conv1d_with_trailing_axis() {
        let d = 4;
        let t = seq(729, d);
        let w1 = Tensor::<f64>::from_fn(vec![d, d, 9], |i| ((i * 31 % 17) as f64 - 8.0) / 10.0);
        let w2 = w1.clone().reshape(vec![d, d, 9, 1]).unwrap();
        let mut g = Graph::no_grad();
        let x = g.param(&t, false);
        let (a, b) = (g.param(&w1, false), g.param(&w2, false));
        let y1 = compress_conv1d(&mut g, x, a, 9).unwrap();
        let y2 = compress_conv2d(&mut g, x, b, 9).unwrap();
        assert!(g.value(y1).bit_eq(g.value(y2)));
    }

    #[test]
    fn conv2d_ratio_one_identity_mix_is_noop() {
        let d = 3;
        let t = seq(27, d);
        let w = Tensor::<f64>::from_fn(vec![d, d, 1, 1], |i| if i / d == i % d { 1.0 } else { 0.0 });
        let mut g = Graph::no_grad();
        let (x, wv) = (g.param(&t, false), g.param(&w, false));
        let y = compress_conv2d(&mut g, x, wv, 1).unwrap();
        assert!(g.value(y).bit_eq(&t));
    }

    #[test]
    fn every_strategy_and_ratio_yields_729_over_r_tokens() {
        for kind in CompressionKind::ALL {
            for r in SUPPORTED_RATIOS {
                let cfg = ModelConfig::tiny().with_strategy(CompressionStrategy::new(kind, r));
                let w = Weights::<f32>::init(&cfg, 0);
                let emb = Tensor::<f32>::from_fn(vec![1, 729, cfg.vision.d_vision], |i| (i as f32 * 0.01).cos());
                let out = project_tensor(&emb, cfg.strategy, &w).unwrap();
                assert_eq!(out.shape(), &[1, 729 / r, cfg.lm.d_lm], "{kind} r={r}");
            }
        }
    }

    #[test]
    fn mismatched_weights_are_a_checkpoint_error() {
        let reshape_cfg = ModelConfig::tiny();
        let w = Weights::<f32>::init(&reshape_cfg, 0);
        let emb = Tensor::<f32>::zeros(vec![1, 729, reshape_cfg.vision.d_vision]);
        let conv = CompressionStrategy::new(CompressionKind::Conv1d, 9);
        assert!(matches!(project_tensor(&emb, conv, &w), Err(Error::Checkpoint(_))));
    }
}
