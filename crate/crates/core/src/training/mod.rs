//! Staged training: projector-only pretraining, supervised fine-tuning and
//! preference optimization on minimal-edit pairs.
//!
//! The vision encoder is frozen in every stage, so its output is computed
//! once per image and stored in the examples. Each sample of a minibatch is
//! differentiated on its own graph (in parallel); per-sample gradients are
//! then summed in sample order so that runs are bit-reproducible.

pub mod prefs;
pub mod sweep;

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::tokenizer;
use crate::model::{response_logprobs, sequence_logprob_var, Model};
use crate::tensor::{Real, Tensor, Var};
use crate::vision::{synthetic, Image};
use crate::weights::{Component, Ctx, Trainable, Weights};

pub use prefs::{build_pairs, dpo_loss_from_margin, dpo_margin, edit_distance, levenshtein, PairReport, PreferencePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft,
    Dpo,
}

impl Stage {
    pub fn trainable_components(self) -> &'static [Component] {
        match self {
            Stage::Pretrain => &[Component::Projector],
            Stage::Sft | Stage::Dpo => &[Component::Projector, Component::Lm],
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "sft" => Ok(Stage::Sft),
            "dpo" => Ok(Stage::Dpo),
            other => Err(Error::Config(format!("unknown stage {other:?} (pretrain|sft|dpo)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
        })
    }
}

/// The parameters a stage may update. Every name must carry a component
/// prefix.
pub fn stage_mask<'a>(stage: Stage, names: impl IntoIterator<Item = &'a str>) -> Result<BTreeSet<String>> {
    let allowed = stage.trainable_components();
    let mut mask = BTreeSet::new();
    for name in names {
        let c = Component::of(name)
            .ok_or_else(|| Error::Config(format!("parameter {name:?} has no component label")))?;
        if allowed.contains(&c) {
            mask.insert(name.to_string());
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f32,
    pub steps: usize,
    pub batch_size: usize,
    /// DPO temperature.
    pub beta: f32,
    /// Largest admitted normalized edit distance for preference pairs.
    pub tau: f32,
    pub seed: u64,
    pub momentum: f32,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f32>,
    /// Validation interval in steps; 0 evaluates only at the start and end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            learning_rate: 0.05,
            steps: 500,
            batch_size: 8,
            beta: 0.1,
            tau: 0.3,
            seed: 0,
            momentum: 0.9,
            grad_clip: Some(1.0),
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// `exp(mean_nll)`.
pub fn perplexity(mean_nll: f32) -> f32 {
    mean_nll.exp()
}

/// A captioning / instruction example with its precomputed encoder output.
/// The response is scored followed by EOS.
#[derive(Clone, Debug)]
pub struct CaptionExample<T: Real = f32> {
    pub vision_emb: Tensor<T>,
    pub prompt: Vec<u32>,
    pub targets: Vec<u32>,
}

impl<T: Real> CaptionExample<T> {
    pub fn new(vision_emb: Tensor<T>, prompt: &str, response: &str) -> Self {
        let mut targets = tokenizer::tokenize(response);
        targets.push(tokenizer::EOS);
        CaptionExample {
            vision_emb,
            prompt: tokenizer::tokenize(prompt),
            targets,
        }
    }
}

/// A preference pair with its precomputed encoder output and the frozen
/// reference log-probabilities of both responses.
#[derive(Clone, Debug)]
pub struct DpoSample<T: Real = f32> {
    pub vision_emb: Tensor<T>,
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl<T: Real> DpoSample<T> {
    /// Scores both responses under `reference`.
    pub fn new(reference: &Model<T>, vision_emb: Tensor<T>, prompt: &str, chosen: &str, rejected: &str) -> Result<Self> {
        let prompt = tokenizer::tokenize(prompt);
        let (chosen, rejected) = (tokenizer::tokenize(chosen), tokenizer::tokenize(rejected));
        let ref_chosen = reference.sequence_logprob_from_embedding(&vision_emb, &prompt, &chosen)?;
        let ref_rejected = reference.sequence_logprob_from_embedding(&vision_emb, &prompt, &rejected)?;
        Ok(DpoSample {
            vision_emb,
            prompt,
            chosen,
            rejected,
            ref_chosen,
            ref_rejected,
        })
    }
}

/// Training data for one stage.
#[derive(Clone, Debug)]
pub enum StageData {
    Caption(Vec<CaptionExample>),
    Dpo(Vec<DpoSample>),
}

impl StageData {
    pub fn len(&self) -> usize {
        match self {
            StageData::Caption(v) => v.len(),
            StageData::Dpo(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_stage(&self, stage: Stage) -> Result<()> {
        match (stage, self) {
            (Stage::Pretrain | Stage::Sft, StageData::Caption(_)) | (Stage::Dpo, StageData::Dpo(_)) => Ok(()),
            (Stage::Dpo, _) => Err(Error::Config("dpo stage needs preference pairs".into())),
            _ => Err(Error::Config(format!("{stage} stage needs caption/instruction examples"))),
        }
    }
}

/// Encodes images with the (frozen) vision encoder, in parallel.
pub fn encode_images<T: Real>(model: &Model<T>, images: &[&Image]) -> Result<Vec<Tensor<T>>> {
    images.par_iter().map(|img| model.encode_image(img)).collect()
}

/// `n` synthetic captioning examples for `model`'s image size.
pub fn synthetic_captions(model: &Model<f32>, n: usize, seed: u64) -> Result<Vec<CaptionExample>> {
    let samples = synthetic::generate(n, model.config.vision.image_size, seed);
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let embs = encode_images(model, &images)?;
    Ok(embs
        .into_iter()
        .zip(&samples)
        .map(|(e, s)| CaptionExample::new(e, synthetic::CAPTION_PROMPT, &s.caption))
        .collect())
}

/// `n` synthetic minimal-edit pairs (true caption vs. one wrong color word),
/// scored under `reference`.
pub fn synthetic_pairs(reference: &Model<f32>, n: usize, seed: u64) -> Result<Vec<DpoSample>> {
    let samples = synthetic::generate(n, reference.config.vision.image_size, seed);
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let embs = encode_images(reference, &images)?;
    embs.into_par_iter()
        .zip(samples.par_iter())
        .map(|(e, s)| {
            DpoSample::new(
                reference,
                e,
                synthetic::CAPTION_PROMPT,
                &s.caption,
                &synthetic::corrupt_caption(s),
            )
        })
        .collect()
}

type Grads<T> = BTreeMap<String, Vec<T>>;

/// Builds one sample's loss on a fresh graph, differentiates it and
/// returns the loss value with gradients of the masked weights.
fn sample_grads<'w, T: Real>(
    weights: &'w Weights<T>,
    mask: &'w BTreeSet<String>,
    build: impl FnOnce(&mut Ctx<'w, T>) -> Result<Var>,
) -> Result<(f64, Grads<T>)> {
    let mut ctx = Ctx::new(weights, Trainable::Only(mask));
    let loss = build(&mut ctx)?;
    let value = ctx.g.value(loss).item()?.as_f64();
    ctx.g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, v) in ctx.bound() {
        if let Some(g) = ctx.g.grad(v) {
            grads.insert(name.to_string(), g.to_vec());
        }
    }
    Ok((value, grads))
}

fn reduce<T: Real>(parts: Vec<(f64, Grads<T>)>) -> (f64, Grads<T>) {
    let mut total = 0.0;
    let mut acc: Grads<T> = BTreeMap::new();
    for (loss, grads) in parts {
        total += loss;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    (total, acc)
}

fn caption_nll<'w, T: Real>(ctx: &mut Ctx<'w, T>, model: &Model<T>, ex: &'w CaptionExample<T>) -> Result<Var> {
    let emb = ctx.g.param(&ex.vision_emb, false);
    let lp = response_logprobs(ctx, &model.config, emb, &ex.prompt, &ex.targets)?;
    let s = ctx.g.sum(lp)?;
    ctx.g.scale(s, -T::one())
}

fn total_targets<T: Real>(batch: &[CaptionExample<T>]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Contract("empty caption batch".into()));
    }
    if let Some(i) = batch.iter().position(|e| e.targets.len() < 2) {
        return Err(Error::Contract(format!("example {i} has an empty caption")));
    }
    Ok(batch.iter().map(|e| e.targets.len()).sum())
}

/// Mean cross-entropy per response token over the batch (image and prompt
/// positions are not scored).
pub fn caption_loss<T: Real>(model: &Model<T>, batch: &[CaptionExample<T>]) -> Result<f64> {
    let n = total_targets(batch)?;
    let parts: Vec<f64> = batch
        .par_iter()
        .map(|ex| {
            let mut ctx = Ctx::inference(&model.weights);
            let nll = caption_nll(&mut ctx, model, ex)?;
            Ok(ctx.g.value(nll).item()?.as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / n as f64)
}

/// [`caption_loss`] with gradients for the weights in `mask`.
pub fn caption_loss_grads<T: Real>(
    model: &Model<T>,
    batch: &[CaptionExample<T>],
    mask: &BTreeSet<String>,
) -> Result<(f64, BTreeMap<String, Vec<T>>)> {
    let n = T::lit(total_targets(batch)? as f64);
    let parts = batch
        .par_iter()
        .map(|ex| {
            sample_grads(&model.weights, mask, |ctx| {
                let nll = caption_nll(ctx, model, ex)?;
                ctx.g.scale(nll, T::one() / n)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(parts))
}

/// DPO loss of one sample, re-scoring the reference as well.
pub fn dpo_loss<T: Real>(policy: &Model<T>, reference: &Model<T>, sample: &DpoSample<T>, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    let score = |m: &Model<T>, resp: &[u32]| m.sequence_logprob_from_embedding(&sample.vision_emb, &sample.prompt, resp);
    let m = dpo_margin(
        score(policy, &sample.chosen)?,
        score(policy, &sample.rejected)?,
        score(reference, &sample.chosen)?,
        score(reference, &sample.rejected)?,
        beta,
    );
    Ok(dpo_loss_from_margin(m))
}

/// Mean margin `β·(Δchosen − Δrejected)` of `policy` against the stored
/// reference scores.
pub fn mean_dpo_margin<T: Real>(policy: &Model<T>, samples: &[DpoSample<T>], beta: f64) -> Result<f64> {
    let margins = dpo_margins(policy, samples, beta)?;
    Ok(margins.iter().sum::<f64>() / margins.len().max(1) as f64)
}

fn dpo_margins<T: Real>(policy: &Model<T>, samples: &[DpoSample<T>], beta: f64) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| {
            let c = policy.sequence_logprob_from_embedding(&s.vision_emb, &s.prompt, &s.chosen)?;
            let r = policy.sequence_logprob_from_embedding(&s.vision_emb, &s.prompt, &s.rejected)?;
            Ok(dpo_margin(c, r, s.ref_chosen, s.ref_rejected, beta))
        })
        .collect()
}

/// Mean DPO loss over a batch with gradients for `mask`; also returns the
/// mean margin.
pub fn dpo_loss_grads<T: Real>(
    policy: &Model<T>,
    batch: &[DpoSample<T>],
    beta: f64,
    mask: &BTreeSet<String>,
) -> Result<(f64, BTreeMap<String, Vec<T>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty preference batch".into()));
    }
    let inv_n = T::lit(1.0 / batch.len() as f64);
    let parts = batch
        .par_iter()
        .map(|s| {
            sample_grads(&policy.weights, mask, |ctx| {
                let emb = ctx.g.param(&s.vision_emb, false);
                let c = sequence_logprob_var(ctx, &policy.config, emb, &s.prompt, &s.chosen)?;
                let r = sequence_logprob_var(ctx, &policy.config, emb, &s.prompt, &s.rejected)?;
                let diff = ctx.g.sub(c, r)?;
                let offset = ctx.g.constant(Tensor::scalar(T::lit(s.ref_chosen - s.ref_rejected)));
                let diff = ctx.g.sub(diff, offset)?;
                let margin = ctx.g.scale(diff, T::lit(beta))?;
                let ls = ctx.g.log_sigmoid(margin)?;
                ctx.g.scale(ls, -inv_n)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(parts))
}

/// Plain SGD with heavy-ball momentum and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    pub grad_clip: Option<f32>,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(learning_rate: f32, momentum: f32, grad_clip: Option<f32>) -> Self {
        Sgd {
            learning_rate,
            momentum,
            grad_clip,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update; returns the (pre-clip) gradient norm.
    pub fn step(&mut self, weights: &mut Weights<f32>, grads: &BTreeMap<String, Vec<f32>>) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let scale = match self.grad_clip {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };
        for (name, g) in grads {
            let w = weights
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown tensor {name}")))?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, v), &g) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + scale * g;
                *w -= self.learning_rate * *v;
            }
        }
        Ok(norm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Minibatch loss before the update of this step.
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub val_ppl: Option<f64>,
    /// Mean held-out DPO margin (DPO stage only).
    pub val_margin: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub trainable: BTreeSet<String>,
    /// Loss over the whole training set before the first step.
    pub initial_loss: f64,
    /// Loss over the whole training set after the last step.
    pub final_loss: f64,
    pub metrics: Vec<StepMetrics>,
}

fn full_loss(model: &Model<f32>, data: &StageData, beta: f64) -> Result<f64> {
    match data {
        StageData::Caption(ex) => caption_loss(model, ex),
        StageData::Dpo(s) => {
            let m = dpo_margins(model, s, beta)?;
            Ok(m.iter().map(|&m| dpo_loss_from_margin(m)).sum::<f64>() / m.len() as f64)
        }
    }
}

struct Eval {
    loss: f64,
    ppl: Option<f64>,
    margin: Option<f64>,
}

fn evaluate(model: &Model<f32>, data: &StageData, beta: f64) -> Result<Eval> {
    match data {
        StageData::Caption(ex) => {
            let loss = caption_loss(model, ex)?;
            Ok(Eval {
                loss,
                ppl: Some(perplexity(loss as f32) as f64),
                margin: None,
            })
        }
        StageData::Dpo(s) => {
            let m = dpo_margins(model, s, beta)?;
            let n = m.len() as f64;
            // Perplexity of the preferred responses under the policy.
            let chosen: Vec<CaptionExample> = s
                .iter()
                .map(|s| CaptionExample {
                    vision_emb: s.vision_emb.clone(),
                    prompt: s.prompt.clone(),
                    targets: s.chosen.clone(),
                })
                .collect();
            let nll = caption_loss(model, &chosen)?;
            Ok(Eval {
                loss: m.iter().map(|&m| dpo_loss_from_margin(m)).sum::<f64>() / n,
                ppl: Some(perplexity(nll as f32) as f64),
                margin: Some(m.iter().sum::<f64>() / n),
            })
        }
    }
}

/// Runs one stage of minibatch SGD on the stage's trainable parameters.
///
/// Minibatches are drawn from a seeded per-epoch shuffle. Validation runs at
/// step 0, every `eval_every` steps and after the last update (reported as
/// step `steps`). Given the same model, data and config the resulting
/// weights are bit-identical.
pub fn train_stage(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    train: &StageData,
    val: Option<&StageData>,
) -> Result<TrainReport> {
    cfg.validate()?;
    train.check_stage(cfg.stage)?;
    if let Some(v) = val {
        v.check_stage(cfg.stage)?;
    }
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mask = stage_mask(cfg.stage, model.weights.names())?;
    let beta = cfg.beta as f64;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let initial_loss = full_loss(model, train, beta)?;
    log::info!("{} stage: {} trainable tensors, initial loss {initial_loss:.4}", cfg.stage, mask.len());

    let mut metrics = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let evaluate_now = step == 0 || step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let eval = match (val, evaluate_now) {
            (Some(v), true) => Some(evaluate(model, v, beta)?),
            _ => None,
        };
        if step == cfg.steps {
            let final_loss = full_loss(model, train, beta)?;
            metrics.push(StepMetrics {
                step,
                loss: final_loss,
                val_loss: eval.as_ref().map(|e| e.loss),
                val_ppl: eval.as_ref().and_then(|e| e.ppl),
                val_margin: eval.as_ref().and_then(|e| e.margin),
            });
            log::info!("{} stage done: loss {initial_loss:.4} → {final_loss:.4}", cfg.stage);
            return Ok(TrainReport {
                stage: cfg.stage,
                trainable: mask,
                initial_loss,
                final_loss,
                metrics,
            });
        }

        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (loss, grads) = match train {
            StageData::Caption(ex) => {
                let batch: Vec<CaptionExample> = idx.iter().map(|&i| ex[i].clone()).collect();
                caption_loss_grads(model, &batch, &mask)?
            }
            StageData::Dpo(s) => {
                let batch: Vec<DpoSample> = idx.iter().map(|&i| s[i].clone()).collect();
                dpo_loss_grads(model, &batch, beta, &mask)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if let Some(stray) = grads.keys().find(|k| !mask.contains(*k)) {
            return Err(Error::Contract(format!("gradient outside stage mask: {stray}")));
        }
        opt.step(&mut model.weights, &grads)?;
        if let Some(e) = &eval {
            match e.margin {
                Some(m) => log::info!("step {step}: loss {loss:.4} val {:.4} margin {m:.5}", e.loss),
                None => log::info!("step {step}: loss {loss:.4} val {:.4}", e.loss),
            }
        }
        metrics.push(StepMetrics {
            step,
            loss,
            val_loss: eval.as_ref().map(|e| e.loss),
            val_ppl: eval.as_ref().and_then(|e| e.ppl),
            val_margin: eval.as_ref().and_then(|e| e.margin),
        });
    }
    unreachable!("loop returns at the final step")
}

/// Writes `step,loss,val_loss,val_ppl`; missing validation values are empty.
pub fn write_metrics_csv(metrics: &[StepMetrics], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,loss,val_loss,val_ppl")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for m in metrics {
        writeln!(out, "{},{},{},{}", m.step, m.loss, opt(m.val_loss), opt(m.val_ppl))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny() -> Model<f32> {
        Model::init(ModelConfig::tiny(), 0).unwrap()
    }

    #[test]
    fn masks_follow_stages() {
        let m = tiny();
        let pre = stage_mask(Stage::Pretrain, m.weights.names()).unwrap();
        assert!(!pre.is_empty() && pre.iter().all(|n| n.starts_with("projector.")));
        let sft = stage_mask(Stage::Sft, m.weights.names()).unwrap();
        assert!(sft.iter().all(|n| !n.starts_with("vision.")));
        assert!(sft.iter().any(|n| n.starts_with("lm.")));
        assert_eq!(sft, stage_mask(Stage::Dpo, m.weights.names()).unwrap());
        assert!(matches!(stage_mask(Stage::Sft, ["decoder.w"]), Err(Error::Config(_))));
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(261f32.ln()) - 261.0).abs() < 1e-3);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.beta = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_and_data_must_agree() {
        let mut m = tiny();
        let data = StageData::Caption(synthetic_captions(&m, 2, 0).unwrap());
        let cfg = TrainConfig {
            stage: Stage::Dpo,
            steps: 1,
            ..Default::default()
        };
        assert!(matches!(train_stage(&mut m, &cfg, &data, None), Err(Error::Config(_))));
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let m = tiny();
        assert!(matches!(caption_loss(&m, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_stay_inside_the_mask() {
        let m = tiny();
        let ex = synthetic_captions(&m, 2, 1).unwrap();
        let mask = stage_mask(Stage::Pretrain, m.weights.names()).unwrap();
        let (_, grads) = caption_loss_grads(&m, &ex, &mask).unwrap();
        assert_eq!(grads.keys().cloned().collect::<BTreeSet<_>>(), mask);
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        let m = [StepMetrics {
            step: 0,
            loss: 1.5,
            val_loss: None,
            val_ppl: None,
            val_margin: None,
        }];
        write_metrics_csv(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,val_loss,val_ppl\n0,1.5,,\n");
    }
}
