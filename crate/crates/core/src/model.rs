//! End-to-end model: encode → project → splice → prefill → decode.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CompressionStrategy, ModelConfig};
use crate::error::{Error, Result};
use crate::io::checkpoint;
use crate::lm::{self, tokenizer, KvCache, MultimodalSequence};
use crate::projector;
use crate::tensor::kernels;
use crate::tensor::{Real, Tensor, Var};
use crate::vision::{self, Image};
use crate::weights::{Ctx, Weights};

/// Decoding options.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationParams {
    pub max_new: usize,
    pub temperature: f32,
    pub seed: u64,
    pub greedy: bool,
    /// Stop as soon as EOS is produced. Benchmarks turn this off to decode
    /// a fixed number of tokens.
    pub stop_at_eos: bool,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_new: 32,
            temperature: 1.0,
            seed: 0,
            greedy: true,
            stop_at_eos: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    /// Generated ids, including a terminating EOS if one was produced.
    pub tokens: Vec<u32>,
    pub text: String,
    pub image_tokens: usize,
    /// Length of the prefilled sequence.
    pub prompt_len: usize,
    /// From the start of `generate` to the first emitted token.
    pub ttft: Duration,
    /// Emission time of each token, measured from the start of `generate`.
    pub token_times: Vec<Duration>,
}

impl GenerationResult {
    /// `(n − 1) / (t_n − t_1)`; `None` with fewer than two tokens.
    pub fn decode_tps(&self) -> Option<f64> {
        let n = self.token_times.len();
        if n < 2 {
            return None;
        }
        let span = (self.token_times[n - 1] - self.token_times[0]).as_secs_f64();
        (span > 0.0).then(|| (n - 1) as f64 / span)
    }
}

/// Per-token log-probabilities `[len]` of `response`, teacher-forced after
/// `[BOS][IMG_START][image][IMG_END][prompt]`. `vision_emb` is the encoder
/// output `[1, S, d_vision]`.
pub fn response_logprobs<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    vision_emb: Var,
    prompt: &[u32],
    response: &[u32],
) -> Result<Var> {
    if response.is_empty() {
        return Err(Error::Contract("response must contain at least one token".into()));
    }
    let image = projector::project(ctx, vision_emb, cfg.strategy)?;
    let seq = MultimodalSequence::new(cfg.image_tokens(), prompt.to_vec());
    let x = lm::embed_sequence(ctx, &seq, image, &response[..response.len() - 1])?;
    lm::target_logprobs(ctx, &cfg.lm, x, seq.len() - 1, response)
}

/// Sum of [`response_logprobs`], as a scalar variable.
pub fn sequence_logprob_var<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    vision_emb: Var,
    prompt: &[u32],
    response: &[u32],
) -> Result<Var> {
    let lp = response_logprobs(ctx, cfg, vision_emb, prompt, response)?;
    ctx.g.sum(lp)
}

/// A configuration with its weights.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, seed);
        Ok(Model { config, weights })
    }

    pub fn from_parts(config: ModelConfig, weights: Weights<T>) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Model { config, weights })
    }

    /// Switches the compression strategy, re-initializing only the projector.
    pub fn with_strategy(mut self, strategy: CompressionStrategy, seed: u64) -> Result<Self> {
        self.config = self.config.with_strategy(strategy);
        self.config.validate()?;
        self.weights.reinit_projector(&self.config, seed);
        Ok(self)
    }

    pub fn image_tokens(&self) -> usize {
        self.config.image_tokens()
    }

    /// Vision-encoder output `[1, S, d_vision]`.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor<T>> {
        vision::vision_encode(image, &self.config.vision, &self.weights)
    }

    /// Projected image tokens `[1, S/r, d_lm]`.
    pub fn project(&self, vision_emb: &Tensor<T>) -> Result<Tensor<T>> {
        projector::project_tensor(vision_emb, self.config.strategy, &self.weights)
    }

    /// Runs the whole sequence through the decoder, filling a fresh cache.
    /// Returns the next-token logits.
    pub fn prefill(&self, seq: &MultimodalSequence, image: &Tensor<T>) -> Result<(Vec<T>, KvCache<T>)> {
        let mut cache = KvCache::new(&self.config.lm);
        let logits = {
            let mut ctx = Ctx::inference(&self.weights);
            let img = ctx.g.param(image, false);
            let x = lm::embed_sequence(&mut ctx, seq, img, &[])?;
            let h = lm::forward(&mut ctx, &self.config.lm, x, Some(&mut cache))?;
            let lg = lm::last_logits(&mut ctx, h)?;
            ctx.g.data(lg).to_vec()
        };
        Ok((logits, cache))
    }

    /// Feeds one token through the cached decoder; the cache grows by one.
    pub fn decode_step(&self, cache: &mut KvCache<T>, token: u32) -> Result<Vec<T>> {
        if token as usize >= self.config.lm.vocab_size {
            return Err(Error::Input(format!("token id {token} outside vocabulary")));
        }
        let mut ctx = Ctx::inference(&self.weights);
        let x = lm::embed_tokens(&mut ctx, &[token])?;
        let h = lm::forward(&mut ctx, &self.config.lm, x, Some(cache))?;
        let lg = lm::last_logits(&mut ctx, h)?;
        Ok(ctx.g.data(lg).to_vec())
    }

    /// Full pipeline from pixels to text. Timing starts on entry, so the
    /// caller must load weights and decode the image beforehand.
    pub fn generate(&self, image: &Image, prompt: &str, params: &GenerationParams) -> Result<GenerationResult> {
        let start = Instant::now();
        let emb = self.encode_image(image)?;
        let projected = self.project(&emb)?;
        let seq = MultimodalSequence::new(self.image_tokens(), tokenizer::tokenize(prompt));
        let (mut logits, mut cache) = self.prefill(&seq, &projected)?;

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut tokens = Vec::with_capacity(params.max_new);
        let mut token_times = Vec::with_capacity(params.max_new);
        let mut last_time = Duration::ZERO;
        for i in 0..params.max_new {
            let tok = choose(&logits, params, &mut rng);
            // Strictly increasing timestamps even on coarse clocks.
            let mut t = start.elapsed();
            if t <= last_time {
                t = last_time + Duration::from_nanos(1);
            }
            last_time = t;
            tokens.push(tok);
            token_times.push(t);
            if (params.stop_at_eos && tok == tokenizer::EOS) || i + 1 == params.max_new {
                break;
            }
            logits = self.decode_step(&mut cache, tok)?;
        }
        let text = tokenizer::detokenize_lossy(&tokens)?;
        Ok(GenerationResult {
            ttft: token_times.first().copied().unwrap_or_default(),
            tokens,
            text,
            image_tokens: self.image_tokens(),
            prompt_len: seq.len(),
            token_times,
        })
    }

    /// `Σ log P(response | image, prompt)`, without gradients.
    pub fn sequence_logprob(&self, image: &Image, prompt: &str, response: &str) -> Result<f64> {
        let emb = self.encode_image(image)?;
        self.sequence_logprob_from_embedding(&emb, &tokenizer::tokenize(prompt), &tokenizer::tokenize(response))
    }

    /// As [`Model::sequence_logprob`], from a precomputed encoder output.
    pub fn sequence_logprob_from_embedding(&self, vision_emb: &Tensor<T>, prompt: &[u32], response: &[u32]) -> Result<f64> {
        let mut ctx = Ctx::inference(&self.weights);
        let x = ctx.g.param(vision_emb, false);
        let s = sequence_logprob_var(&mut ctx, &self.config, x, prompt, response)?;
        Ok(ctx.g.value(s).item()?.as_f64())
    }
}

impl Model<f32> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (weights, config) = checkpoint::load(path)?;
        Ok(Model { config, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.weights, &self.config, path)
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax<T: Real>(logits: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn choose<T: Real>(logits: &[T], params: &GenerationParams, rng: &mut ChaCha8Rng) -> u32 {
    if params.greedy || params.temperature <= 0.0 {
        return argmax(logits);
    }
    let inv_t = 1.0 / params.temperature as f64;
    let mut p: Vec<f64> = logits.iter().map(|x| x.as_f64() * inv_t).collect();
    kernels::softmax_in_place(&mut p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as u32;
        }
    }
    argmax(logits)
}
