//! Finite-difference oracles shared by the gradient tests and the acceptance
//! runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use vlmkit::config::{CompressionKind, CompressionStrategy, LmConfig, ModelConfig, VisionConfig};
use vlmkit::lm::tokenizer;
use vlmkit::model::sequence_logprob_var;
use vlmkit::weights::{Ctx, Trainable};
use vlmkit::{Graph, Real, Result, Tensor, Var, Weights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Build<T> = Box<dyn for<'a> Fn(&mut Graph<'a, T>, &[Var]) -> Result<Var>>;

/// Central-difference step: 1e-3 in f32, 1e-6 in f64.
pub fn step<T: Real>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-3
    } else {
        1e-6
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

/// Fixed, sign-varying readout weights so that non-scalar outputs reduce
/// to a scalar whose gradient exercises every output element.
fn readout<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| T::lit((i as f64 * 0.7137 + 0.3).sin() + 0.25))
}

fn scalar_loss<'a, T: Real>(g: &mut Graph<'a, T>, y: Var) -> Result<Var> {
    if g.value(y).numel() == 1 {
        return Ok(y);
    }
    let r = g.constant(readout(g.shape(y)));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn eval<T: Real>(inputs: &[Tensor<T>], build: &Build<T>) -> f64 {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars).expect("forward");
    let l = scalar_loss(&mut g, y).expect("readout");
    g.value(l).data()[0].as_f64()
}

/// Largest relative error over all inputs between backprop and central
/// differences.
pub fn check_op<T: Real>(inputs: &[Tensor<T>], build: &Build<T>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            g.leaf(t)
        })
        .collect();
    let y = build(&mut g, &vars).expect("forward");
    let l = scalar_loss(&mut g, y).expect("readout");
    g.backward(l).expect("backward");

    let h = step::<T>();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[k].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = inputs[k].data()[j];
            plus[k].data_mut()[j] = x + T::lit(h);
            minus[k].data_mut()[j] = x - T::lit(h);
            numeric.push((eval(&plus, build) - eval(&minus, build)) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn randn<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Every differentiable op on small random inputs, by name.
pub fn op_cases<T: Real>(seed: u64) -> Vec<(&'static str, Vec<Tensor<T>>, Build<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: &[usize]| randn::<T>(s, &mut rng);
    let eps = T::lit(1e-5);
    vec![
        ("matmul", vec![r(&[4, 5]), r(&[5, 3])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_batched", vec![r(&[2, 3, 4]), r(&[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_bias", vec![r(&[2, 3, 4]), r(&[4])], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("scale", vec![r(&[5])], Box::new(|g, v| g.scale(v[0], T::lit(-1.7)))),
        (
            "layernorm",
            vec![r(&[2, 8]), r(&[8]), r(&[8])],
            Box::new(move |g, v| g.layernorm(v[0], v[1], v[2], eps)),
        ),
        ("rmsnorm", vec![r(&[3, 6]), r(&[6])], Box::new(move |g, v| g.rmsnorm(v[0], v[1], eps))),
        ("softmax", vec![r(&[3, 7])], Box::new(|g, v| g.softmax(v[0]))),
        ("gelu", vec![r(&[3, 5])], Box::new(|g, v| g.gelu(v[0]))),
        ("silu", vec![r(&[3, 5])], Box::new(|g, v| g.silu(v[0]))),
        ("log_sigmoid", vec![r(&[7])], Box::new(|g, v| g.log_sigmoid(v[0]))),
        ("conv1d", vec![r(&[1, 4, 27]), r(&[4, 4, 3])], Box::new(|g, v| g.conv1d(v[0], v[1], 3))),
        ("conv1d_overlap", vec![r(&[2, 2, 9]), r(&[3, 2, 4])], Box::new(|g, v| g.conv1d(v[0], v[1], 2))),
        ("conv2d", vec![r(&[1, 2, 18, 1]), r(&[2, 2, 9, 1])], Box::new(|g, v| g.conv2d(v[0], v[1], (9, 1)))),
        ("conv2d_square", vec![r(&[1, 2, 5, 5]), r(&[3, 2, 2, 2])], Box::new(|g, v| g.conv2d(v[0], v[1], (1, 2)))),
        ("reshape", vec![r(&[2, 6])], Box::new(|g, v| g.reshape(v[0], vec![3, 4]))),
        ("transpose", vec![r(&[2, 3, 4])], Box::new(|g, v| g.transpose(v[0], 0, 2))),
        ("concat", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice_rows", vec![r(&[5, 3])], Box::new(|g, v| g.slice_rows(v[0], 1, 3))),
        ("embedding", vec![r(&[6, 4])], Box::new(|g, v| g.embedding(v[0], &[3, 0, 3, 5]))),
        ("rope", vec![r(&[4, 8])], Box::new(|g, v| g.rope(v[0], 2, 3, 10_000.0))),
        (
            "attention_causal",
            vec![r(&[3, 4]), r(&[5, 4]), r(&[5, 4])],
            Box::new(|g, v| g.attention(v[0], v[1], v[2], 2, true)),
        ),
        (
            "attention_full",
            vec![r(&[2, 6]), r(&[4, 6]), r(&[4, 6])],
            Box::new(|g, v| g.attention(v[0], v[1], v[2], 3, false)),
        ),
        ("sum", vec![r(&[3, 3])], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![r(&[3, 3])], Box::new(|g, v| g.mean(v[0]))),
        ("log_softmax_gather", vec![r(&[3, 6])], Box::new(|g, v| g.log_softmax_gather(v[0], &[5, 0, 2]))),
        ("cross_entropy", vec![r(&[4, 5])], Box::new(|g, v| g.cross_entropy(v[0], &[1, 1, 4, 0]))),
    ]
}

/// A projector + decoder small enough for exhaustive finite differences:
/// 81 four-dimensional encoder tokens compressed 9×, a 1-layer decoder of
/// width 6.
pub fn composite_config(kind: CompressionKind) -> ModelConfig {
    ModelConfig {
        vision: VisionConfig {
            image_size: 9,
            patch_size: 1,
            d_vision: 4,
            n_layers: 0,
            n_heads: 1,
            mlp_dim: 4,
        },
        lm: LmConfig {
            d_lm: 6,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq: 64,
            rope_theta: 10_000.0,
        },
        strategy: CompressionStrategy::new(kind, 9),
        d_proj: 6,
    }
}

pub struct Composite<T: Real> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    pub vision_emb: Tensor<T>,
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub trainable: BTreeSet<String>,
}

impl<T: Real> Composite<T> {
    pub fn new(kind: CompressionKind, seed: u64) -> Self {
        let config = composite_config(kind);
        let mut weights = Weights::<T>::init(&config, seed);
        // Non-trivial norm and bias values so their gradients are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for (name, t) in weights.iter_mut() {
            if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") || name.ends_with("norm") {
                let noise: Tensor<T> = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
                for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
                    *x += *n;
                }
            }
        }
        let trainable = weights.names().filter(|n| !n.starts_with("vision.")).map(String::from).collect();
        let vision_emb = Tensor::randn(vec![1, 81, 4], 1.0, &mut rng);
        Composite {
            config,
            weights,
            vision_emb,
            prompt: tokenizer::tokenize("hi:"),
            response: tokenizer::tokenize("ok!"),
            trainable,
        }
    }

    pub fn param_count(&self) -> usize {
        self.trainable.iter().map(|n| self.weights.get(n).unwrap().numel()).sum()
    }

    fn loss(&self, weights: &Weights<f64>, vision_emb: &Tensor<f64>) -> f64 {
        let mut ctx = Ctx::inference(weights);
        let x = ctx.g.param(vision_emb, false);
        let s = sequence_logprob_var(&mut ctx, &self.config, x, &self.prompt, &self.response).unwrap();
        -ctx.g.value(s).data()[0]
    }

    /// Worst relative error over every projector and decoder tensor.
    ///
    /// The perturbed weights are rounded to `T`, but the loss is evaluated
    /// in f64: an f32 loss near 17 nats rounds to ~1e-6, which after
    /// dividing by 2h swamps the smaller decoder gradients.
    pub fn check(&self) -> (f64, String) {
        let mut ctx = Ctx::new(&self.weights, Trainable::Only(&self.trainable));
        let x = ctx.g.param(&self.vision_emb, false);
        let s = sequence_logprob_var(&mut ctx, &self.config, x, &self.prompt, &self.response).unwrap();
        let l = ctx.g.scale(s, -T::one()).unwrap();
        let bound: Vec<(String, Var)> = ctx.bound().map(|(n, v)| (n.to_string(), v)).collect();
        ctx.g.backward(l).unwrap();

        let h = step::<T>();
        let mut w64 = self.weights.cast::<f64>();
        let emb64 = self.vision_emb.cast::<f64>();
        let (mut worst, mut worst_name) = (0.0f64, String::new());
        for name in &self.trainable {
            let var = bound.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
            let numel = self.weights.get(name).unwrap().numel();
            let analytic: Vec<f64> = match var.and_then(|v| ctx.g.grad(v)) {
                Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; numel],
            };
            let mut numeric = Vec::with_capacity(numel);
            for j in 0..numel {
                let x0 = self.weights.get(name).unwrap().data()[j];
                let (xp, xm) = ((x0 + T::lit(h)).as_f64(), (x0 - T::lit(h)).as_f64());
                w64.get_mut(name).unwrap().data_mut()[j] = xp;
                let lp = self.loss(&w64, &emb64);
                w64.get_mut(name).unwrap().data_mut()[j] = xm;
                let lm = self.loss(&w64, &emb64);
                w64.get_mut(name).unwrap().data_mut()[j] = x0.as_f64();
                numeric.push((lp - lm) / (xp - xm));
            }
            let e = rel_err(&analytic, &numeric);
            if e > worst {
                worst = e;
                worst_name = name.clone();
            }
        }
        (worst, worst_name)
    }
}

/// A random valid configuration: small encoder and decoder, any strategy
/// and any ratio the token grid supports.
pub fn random_config(seed: u64) -> ModelConfig {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let grid = *[3usize, 9].choose(&mut rng).unwrap();
        let patch_size = rng.gen_range(1..=3);
        let vision_heads = rng.gen_range(1..=2);
        let lm_heads = rng.gen_range(1..=2);
        let cfg = ModelConfig {
            vision: VisionConfig {
                image_size: grid * patch_size,
                patch_size,
                d_vision: vision_heads * rng.gen_range(1..=4) * 2,
                n_layers: rng.gen_range(0..=2),
                n_heads: vision_heads,
                mlp_dim: rng.gen_range(1..=16),
            },
            lm: LmConfig {
                d_lm: lm_heads * 2 * rng.gen_range(1..=6),
                n_layers: rng.gen_range(0..=2),
                n_heads: lm_heads,
                d_ff: rng.gen_range(1..=24),
                vocab_size: tokenizer::VOCAB_SIZE,
                max_seq: rng.gen_range(96..=256),
                rope_theta: *[100.0f32, 10_000.0].choose(&mut rng).unwrap(),
            },
            strategy: CompressionStrategy::new(
                *CompressionKind::ALL.choose(&mut rng).unwrap(),
                *[1usize, 3, 9, 81].choose(&mut rng).unwrap(),
            ),
            d_proj: rng.gen_range(1..=24),
        };
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

/// A random decoder (1 to 3 layers, width ≤ 32, context 64) behind a 9×9
/// grid, with perturbed norm gains so every weight is generic.
pub fn random_decoder(seed: u64) -> ModelConfig {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heads = rng.gen_range(1..=4);
    let head_dim = 2 * rng.gen_range(1..=4);
    let mut cfg = composite_config(CompressionKind::ALL[rng.gen_range(0..3)]);
    cfg.strategy.ratio = [3, 9, 81][rng.gen_range(0..3)];
    cfg.lm = LmConfig {
        d_lm: n_heads * head_dim,
        n_layers: rng.gen_range(1..=3),
        n_heads,
        d_ff: rng.gen_range(4..=48),
        vocab_size: tokenizer::VOCAB_SIZE,
        max_seq: 64,
        rope_theta: 10_000.0,
    };
    cfg
}

/// Largest absolute gap between cached incremental decoding and a
/// cache-free recompute of every prefix, for one random instance.
///
/// Each instance draws a decoder, a projected image, a prompt and a
/// continuation so that the whole sequence fits in 64 positions.
pub fn kv_cache_gap(seed: u64) -> Result<f64> {
    use vlmkit::lm::{self, MultimodalSequence};
    use vlmkit::Model;
    use rand::Rng;
    let cfg = random_decoder(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xcac4e);
    let mut weights = Weights::<f32>::init(&cfg, seed);
    for (name, t) in weights.iter_mut() {
        if name.ends_with("gamma") {
            let noise: Tensor<f32> = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
            for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *x += *n;
            }
        }
    }
    let model = Model::from_parts(cfg.clone(), weights)?;
    let image_tokens = cfg.image_tokens();
    let image = Tensor::<f32>::randn(vec![1, image_tokens, cfg.lm.d_lm], 1.0, &mut rng);
    let total = rng.gen_range(3 + image_tokens + 1..=64);
    let prompt_len = rng.gen_range(0..total - 3 - image_tokens);
    let prompt: Vec<u32> = (0..prompt_len).map(|_| rng.gen_range(0..tokenizer::VOCAB_SIZE as u32)).collect();
    let seq = MultimodalSequence::new(image_tokens, prompt);
    let cont: Vec<u32> = (0..total - seq.len()).map(|_| rng.gen_range(0..tokenizer::VOCAB_SIZE as u32)).collect();

    let recompute = |extra: &[u32]| -> Result<Vec<f32>> {
        let mut ctx = Ctx::inference(&model.weights);
        let img = ctx.g.param(&image, false);
        let x = lm::embed_sequence(&mut ctx, &seq, img, extra)?;
        let h = lm::forward(&mut ctx, &cfg.lm, x, None)?;
        let lg = lm::last_logits(&mut ctx, h)?;
        Ok(ctx.g.data(lg).to_vec())
    };
    let gap = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);

    let (logits, mut cache) = model.prefill(&seq, &image)?;
    let mut worst = gap(&logits, &recompute(&[])?);
    for i in 0..cont.len() {
        let cached = model.decode_step(&mut cache, cont[i])?;
        worst = worst.max(gap(&cached, &recompute(&cont[..=i])?));
    }
    assert_eq!(cache.filled_len(), total);
    Ok(worst)
}

/// Sequences over `{0, 1, 2}` of length at most 6, indexed densely.
pub struct EditGraph {
    offsets: [usize; 8],
}

impl EditGraph {
    pub const MAX_LEN: usize = 6;

    pub fn new() -> Self {
        let mut offsets = [0; 8];
        for l in 0..=Self::MAX_LEN {
            offsets[l + 1] = offsets[l] + 3usize.pow(l as u32);
        }
        EditGraph { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets[Self::MAX_LEN + 1]
    }

    pub fn sequence(&self, index: usize) -> Vec<u8> {
        let len = (0..=Self::MAX_LEN).find(|&l| index < self.offsets[l + 1]).unwrap();
        let mut code = index - self.offsets[len];
        let mut s = vec![0u8; len];
        for x in s.iter_mut() {
            *x = (code % 3) as u8;
            code /= 3;
        }
        s
    }

    pub fn index(&self, s: &[u8]) -> usize {
        let code = s.iter().rev().fold(0, |acc, &x| acc * 3 + x as usize);
        self.offsets[s.len()] + code
    }

    /// Every sequence one insertion, deletion or substitution away, staying
    /// within the length bound.
    fn neighbours(&self, s: &[u8], out: &mut Vec<usize>) {
        out.clear();
        for i in 0..s.len() {
            let mut t = s.to_vec();
            t.remove(i);
            out.push(self.index(&t));
            for c in 0..3 {
                if c != s[i] {
                    let mut t = s.to_vec();
                    t[i] = c;
                    out.push(self.index(&t));
                }
            }
        }
        if s.len() < Self::MAX_LEN {
            for i in 0..=s.len() {
                for c in 0..3 {
                    let mut t = s.to_vec();
                    t.insert(i, c);
                    out.push(self.index(&t));
                }
            }
        }
    }

    /// Shortest edit-path lengths from `source` to every sequence, by
    /// breadth-first search. An optimal path between two sequences never
    /// needs to exceed the longer of the two, so the bound loses nothing.
    pub fn distances_from(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.count()];
        let mut queue = std::collections::VecDeque::from([source]);
        dist[source] = 0;
        let mut next = Vec::new();
        while let Some(u) = queue.pop_front() {
            self.neighbours(&self.sequence(u), &mut next);
            for &v in &next {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Number of pairs on which `levenshtein` disagrees with the search oracle.
pub fn levenshtein_disagreements() -> usize {
    let g = EditGraph::new();
    let mut bad = 0;
    for a in 0..g.count() {
        let sa = g.sequence(a);
        let dist = g.distances_from(a);
        for b in 0..g.count() {
            if vlmkit::training::prefs::levenshtein(&sa, &g.sequence(b)) != dist[b] {
                bad += 1;
            }
        }
    }
    bad
}

/// Every (strategy, ratio) whose projector output is not `[1, 729/r, d_lm]`
/// for the default configuration.
pub fn shape_contract_failures() -> Vec<String> {
    let base = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let emb = Tensor::<f32>::randn(vec![1, base.vision.seq_len(), base.vision.d_vision], 1.0, &mut rng);
    let mut failures = Vec::new();
    for kind in CompressionKind::ALL {
        for ratio in [1, 3, 9, 81] {
            let strategy = CompressionStrategy::new(kind, ratio);
            let cfg = base.clone().with_strategy(strategy);
            let weights = Weights::init(&cfg, 0);
            let want = vec![1, 729 / ratio, cfg.lm.d_lm];
            match vlmkit::projector::project_tensor(&emb, strategy, &weights) {
                Ok(t) if t.shape() == want.as_slice() => {}
                Ok(t) => failures.push(format!("{kind}-r{ratio}: {:?} != {want:?}", t.shape())),
                Err(e) => failures.push(format!("{kind}-r{ratio}: {e}")),
            }
        }
    }
    failures
}

/// Random printable text of 1 to `max` bytes.
pub fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    use rand::Rng;
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| rng.gen_range(b' '..=b'~') as char).collect()
}

/// Largest `|loss − ln 2|` over `n` random pairs scored by a policy that
/// equals its reference.
pub fn dpo_identity_gap(n: usize, seed: u64) -> Result<f64> {
    use vlmkit::training::{dpo_loss, DpoSample};
    use vlmkit::Model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f32>::from_parts(composite_config(CompressionKind::Conv1d), Weights::init(&composite_config(CompressionKind::Conv1d), seed))?;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let emb = Tensor::randn(vec![1, 81, 4], 1.0, &mut rng);
        let (prompt, chosen, rejected) = (random_text(&mut rng, 8), random_text(&mut rng, 12), random_text(&mut rng, 12));
        let s = DpoSample::new(&model, emb, &prompt, &chosen, &rejected)?;
        let loss = dpo_loss(&model, &model, &s, 0.1)?;
        worst = worst.max((loss - std::f64::consts::LN_2).abs());
    }
    Ok(worst)
}

/// A toy model with a one-layer encoder, small enough to run every stage in
/// a few seconds.
pub fn stage_toy() -> vlmkit::Model<f32> {
    let mut cfg = composite_config(CompressionKind::Conv2d);
    cfg.vision.n_layers = 1;
    vlmkit::Model::init(cfg, 3).unwrap()
}

/// Runs pretrain, SFT and DPO in sequence and reports every tensor that
/// changed outside its stage's mask, plus any projector tensor pretraining
/// failed to move.
pub fn stage_mask_violations(steps: usize) -> Result<Vec<String>> {
    use vlmkit::training::{stage_mask, synthetic_captions, synthetic_pairs, train_stage, Stage, StageData, TrainConfig};
    use vlmkit::Component;
    let mut model = stage_toy();
    let captions = StageData::Caption(synthetic_captions(&model, 8, 0)?);
    let mut violations = Vec::new();
    for stage in [Stage::Pretrain, Stage::Sft, Stage::Dpo] {
        let data = match stage {
            Stage::Dpo => StageData::Dpo(synthetic_pairs(&model, 8, 1)?),
            _ => captions.clone(),
        };
        let before = model.weights.clone();
        let cfg = TrainConfig {
            stage,
            steps,
            batch_size: 4,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let report = train_stage(&mut model, &cfg, &data, None)?;
        let mask = stage_mask(stage, before.names())?;
        if report.trainable != mask {
            violations.push(format!("{stage}: reported mask differs"));
        }
        for (name, t) in before.iter() {
            let after = model.weights.get(name).expect("tensor set is fixed");
            let same = t.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !mask.contains(name) && !same {
                violations.push(format!("{stage}: frozen {name} changed"));
            }
            if stage == Stage::Pretrain && Component::of(name) == Some(Component::Projector) && same {
                violations.push(format!("pretrain: projector tensor {name} did not move"));
            }
        }
    }
    Ok(violations)
}

/// Round-trips `n` random configurations with random weights (including
/// non-finite and subnormal values) and returns the ones that differ.
pub fn checkpoint_round_trip_failures(n: u64) -> Vec<String> {
    use vlmkit::io::checkpoint;
    let mut failures = Vec::new();
    for seed in 0..n {
        let cfg = random_config(seed);
        let mut weights = Weights::<f32>::init(&cfg, seed);
        if let Some((_, t)) = weights.iter_mut().next() {
            let special = [f32::NAN, f32::INFINITY, -0.0, f32::MIN_POSITIVE / 2.0];
            for (x, s) in t.data_mut().iter_mut().zip(special) {
                *x = s;
            }
        }
        let ok = checkpoint::to_bytes(&weights, &cfg)
            .and_then(|b| checkpoint::from_bytes(&b))
            .map(|(w, c)| c == cfg && w.bit_eq(&weights));
        match ok {
            Ok(true) => {}
            Ok(false) => failures.push(format!("config {seed}: mismatch")),
            Err(e) => failures.push(format!("config {seed}: {e}")),
        }
    }
    failures
}

/// Loads `trials` corrupted variants of a valid checkpoint (truncations,
/// byte flips, overwritten header fields). Returns how many were rejected;
/// a panic propagates and fails the caller.
pub fn checkpoint_fuzz(trials: usize, seed: u64) -> usize {
    use vlmkit::io::checkpoint;
    use rand::Rng;
    let cfg = random_config(seed);
    let bytes = checkpoint::to_bytes(&Weights::init(&cfg, seed), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    for _ in 0..trials {
        let mut b = bytes.clone();
        match rng.gen_range(0..4) {
            0 => b.truncate(rng.gen_range(0..bytes.len())),
            1 => {
                for _ in 0..rng.gen_range(1..8) {
                    let i = rng.gen_range(0..b.len());
                    b[i] ^= 1 << rng.gen_range(0..8);
                }
            }
            2 => {
                // Clobber a header-sized word anywhere in the structure.
                let i = rng.gen_range(0..b.len() - 4);
                b[i..i + 4].copy_from_slice(&rng.gen::<u32>().to_le_bytes());
            }
            _ => b.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>())),
        }
        if checkpoint::from_bytes(&b).is_err() {
            rejected += 1;
        }
    }
    rejected
}
