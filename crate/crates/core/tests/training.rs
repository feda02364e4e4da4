mod common;

use vlmkit::lm::{tokenizer, MultimodalSequence};
use vlmkit::training::{
    dpo_loss_from_margin, dpo_margin, perplexity, synthetic_captions, train_stage, Stage, StageData, TrainConfig,
};
use vlmkit::{Graph, Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn stages_only_touch_their_masks() {
    let v = common::stage_mask_violations(3).unwrap();
    assert!(v.is_empty(), "{v:?}");
}

#[test]
fn dpo_loss_is_ln2_when_policy_equals_reference() {
    let gap = common::dpo_identity_gap(50, 0).unwrap();
    assert!(gap <= 1e-6, "max |loss − ln 2| = {gap:e}");
}

#[test]
fn dpo_loss_falls_as_the_chosen_response_gains() {
    // ∂loss/∂logπ(chosen) < 0 and ∂loss/∂logπ(rejected) > 0.
    let loss = |pc: f64, pr: f64| dpo_loss_from_margin(dpo_margin(pc, pr, -10.0, -12.0, 0.1));
    let h = 1e-4;
    for (pc, pr) in [(-10.0, -12.0), (-3.0, -30.0), (-40.0, -5.0)] {
        assert!(loss(pc + h, pr) < loss(pc, pr));
        assert!(loss(pc, pr + h) > loss(pc, pr));
    }
}

#[test]
fn log_probabilities_ignore_a_constant_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Tensor::<f32>::randn(vec![5, 261], 3.0, &mut rng);
    let targets = [0, 17, 260, 128, 3];
    let mut g = Graph::no_grad();
    let base = g.constant(logits.clone());
    let lp = g.log_softmax_gather(base, &targets).unwrap();
    for c in [-50.0f32, 0.5, 80.0] {
        let shifted = Tensor::new(vec![5, 261], logits.data().iter().map(|x| x + c).collect()).unwrap();
        let s = g.constant(shifted);
        let lps = g.log_softmax_gather(s, &targets).unwrap();
        for (a, b) in g.data(lp).iter().zip(g.data(lps)) {
            assert!((a - b).abs() <= 1e-5, "shift {c}: {a} vs {b}");
        }
    }
}

#[test]
fn perplexity_matches_the_product_of_step_probabilities() {
    // Teacher-forced scoring against probabilities read off incremental
    // decoding, one softmax per step.
    let model = Model::<f32>::from_parts(
        common::composite_config(vlmkit::CompressionKind::Reshape),
        common::Composite::<f32>::new(vlmkit::CompressionKind::Reshape, 9).weights,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = Tensor::<f32>::randn(vec![1, 81, 4], 1.0, &mut rng);
    let prompt = tokenizer::tokenize("q:");
    let response = tokenizer::tokenize("abcde");
    let lp = model.sequence_logprob_from_embedding(&emb, &prompt, &response).unwrap();

    let image = model.project(&emb).unwrap();
    let seq = MultimodalSequence::new(model.image_tokens(), prompt);
    let (mut logits, mut cache) = model.prefill(&seq, &image).unwrap();
    let mut product = 1.0f64;
    for &t in &response {
        let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
        let z: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
        product *= (logits[t as usize] as f64 - max).exp() / z;
        logits = model.decode_step(&mut cache, t).unwrap();
    }
    let direct = product.powf(-1.0 / response.len() as f64);
    let ppl = perplexity((-lp / response.len() as f64) as f32) as f64;
    assert!((ppl - direct).abs() / direct < 1e-4, "{ppl} vs {direct}");
}

#[test]
fn training_is_deterministic() {
    let run = |seed: u64| {
        let mut m = common::stage_toy();
        let data = StageData::Caption(synthetic_captions(&m, 8, 0).unwrap());
        let cfg = TrainConfig {
            stage: Stage::Sft,
            steps: 4,
            batch_size: 3,
            seed,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let r = train_stage(&mut m, &cfg, &data, None).unwrap();
        (m.weights, r.final_loss)
    };
    let (a, la) = run(0);
    let (b, lb) = run(0);
    assert!(a.bit_eq(&b));
    assert_eq!(la.to_bits(), lb.to_bits());
    let (c, _) = run(1);
    assert!(!a.bit_eq(&c), "a different shuffle seed changes the minibatches");
}

#[test]
fn stage_data_must_match_the_stage() {
    let mut m = common::stage_toy();
    let data = StageData::Caption(synthetic_captions(&m, 2, 0).unwrap());
    let cfg = TrainConfig {
        stage: Stage::Dpo,
        steps: 1,
        ..TrainConfig::default()
    };
    assert!(train_stage(&mut m, &cfg, &data, None).is_err());
    let empty = StageData::Caption(Vec::new());
    assert!(train_stage(&mut m, &TrainConfig::default(), &empty, None).is_err());
}
