//! Architectural hyperparameters shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::tokenizer;

/// Compression ratios the projector supports.
pub const SUPPORTED_RATIOS: [usize; 4] = [1, 3, 9, 81];

/// Patch encoder dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the encoder MLP.
    pub mlp_dim: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 216,
            patch_size: 8,
            d_vision: 32,
            n_layers: 2,
            n_heads: 2,
            mlp_dim: 64,
        }
    }
}

impl VisionConfig {
    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens emitted per image (`grid²`).
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per flattened RGB patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// True when `grid²` is divisible by every ratio in [`SUPPORTED_RATIOS`].
    pub fn supports_all_ratios(&self) -> bool {
        SUPPORTED_RATIOS.iter().all(|r| self.seq_len() % r == 0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vision.image_size", self.image_size),
            ("vision.patch_size", self.patch_size),
            ("vision.d_vision", self.d_vision),
            ("vision.n_heads", self.n_heads),
            ("vision.mlp_dim", self.mlp_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{field} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "vision.image_size {} is not divisible by vision.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_vision % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "vision.d_vision {} is not divisible by vision.n_heads {}",
                self.d_vision, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Causal decoder dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub d_lm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the gated MLP.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_theta: f32,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_lm: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 384,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq: 1024,
            rope_theta: 10_000.0,
        }
    }
}

impl LmConfig {
    pub fn head_dim(&self) -> usize {
        self.d_lm / self.n_heads
    }

    /// Parameter count of the decoder (embeddings, blocks, norm, head).
    pub fn param_count(&self) -> usize {
        let d = self.d_lm;
        let per_layer = 4 * d * d + 3 * d * self.d_ff + 2 * d;
        2 * self.vocab_size * d + self.n_layers * per_layer + d
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lm.d_lm", self.d_lm),
            ("lm.n_heads", self.n_heads),
            ("lm.d_ff", self.d_ff),
            ("lm.vocab_size", self.vocab_size),
            ("lm.max_seq", self.max_seq),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{field} must be positive")));
            }
        }
        if self.d_lm % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "lm.d_lm {} is not divisible by lm.n_heads {}",
                self.d_lm, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "lm head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Config("lm.rope_theta must be positive".into()));
        }
        Ok(())
    }
}

/// How the projector reduces the vision token count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionKind {
    /// Concatenate `ratio` consecutive tokens along the feature axis.
    Reshape,
    /// Strided 1-D convolution over the sequence, kernel = stride = ratio.
    Conv1d,
    /// Strided 2-D convolution with kernel `(ratio, 1)` over a `[S, 1]` view.
    Conv2d,
}

impl CompressionKind {
    pub const ALL: [CompressionKind; 3] = [Self::Reshape, Self::Conv1d, Self::Conv2d];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Reshape => "reshape",
            Self::Conv1d => "conv1d",
            Self::Conv2d => "conv2d",
        }
    }
}

impl std::str::FromStr for CompressionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reshape" => Ok(Self::Reshape),
            "conv1d" => Ok(Self::Conv1d),
            "conv2d" => Ok(Self::Conv2d),
            other => Err(Error::Config(format!(
                "unknown compression '{other}' (expected reshape|conv1d|conv2d)"
            ))),
        }
    }
}

impl std::fmt::Display for CompressionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionStrategy {
    pub kind: CompressionKind,
    pub ratio: usize,
}

impl CompressionStrategy {
    pub fn new(kind: CompressionKind, ratio: usize) -> Self {
        CompressionStrategy { kind, ratio }
    }

    /// Checks the ratio against [`SUPPORTED_RATIOS`] and the sequence length.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if !SUPPORTED_RATIOS.contains(&self.ratio) {
            return Err(Error::Config(format!(
                "strategy.ratio {} is not one of {SUPPORTED_RATIOS:?}",
                self.ratio
            )));
        }
        if seq_len % self.ratio != 0 {
            return Err(Error::Config(format!(
                "strategy.ratio {} does not divide {seq_len} vision tokens",
                self.ratio
            )));
        }
        Ok(())
    }
}

impl Default for CompressionStrategy {
    fn default() -> Self {
        CompressionStrategy::new(CompressionKind::Reshape, 9)
    }
}

/// Full model description: encoder, projector strategy and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub strategy: CompressionStrategy,
    /// Hidden width of the projector MLP.
    pub d_proj: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let lm = LmConfig::default();
        ModelConfig {
            vision: VisionConfig::default(),
            d_proj: lm.d_lm,
            lm,
            strategy: CompressionStrategy::default(),
        }
    }
}

impl ModelConfig {
    /// A smaller configuration used for training runs and tests: same
    /// 27×27 grid and tokenizer, one-pixel patches, a narrow encoder and a
    /// single-layer decoder.
    pub fn tiny() -> Self {
        let lm = LmConfig {
            d_lm: 128,
            n_layers: 1,
            n_heads: 1,
            d_ff: 256,
            ..LmConfig::default()
        };
        ModelConfig {
            vision: VisionConfig {
                d_vision: 16,
                n_layers: 1,
                n_heads: 2,
                mlp_dim: 32,
                image_size: 27,
                patch_size: 1,
                ..VisionConfig::default()
            },
            d_proj: lm.d_lm,
            lm,
            strategy: CompressionStrategy::default(),
        }
    }

    pub fn with_strategy(mut self, strategy: CompressionStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    /// Image tokens the decoder sees after compression.
    pub fn image_tokens(&self) -> usize {
        self.vision.seq_len() / self.strategy.ratio
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()?;
        self.strategy.validate(self.vision.seq_len())?;
        if self.d_proj == 0 {
            return Err(Error::Config("d_proj must be positive".into()));
        }
        if self.lm.vocab_size != tokenizer::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "lm.vocab_size {} must equal the byte tokenizer vocabulary {}",
                self.lm.vocab_size,
                tokenizer::VOCAB_SIZE
            )));
        }
        // BOS, IMG_START, image span, IMG_END, at least one text token.
        let framed = self.image_tokens() + 4;
        if self.lm.max_seq < framed {
            return Err(Error::Config(format!(
                "lm.max_seq {} cannot hold {} image tokens plus framing",
                self.lm.max_seq,
                self.image_tokens()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
