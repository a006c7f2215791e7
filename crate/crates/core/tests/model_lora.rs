//! LoRA removal and scaling at the level of the whole model.

use desta_core::config::ProjectConfig;
use desta_core::encoder::EncoderOutput;
use desta_core::model::DestaModel;
use desta_core::rng::{normal_tensor, rng_for};
use desta_core::tensor::{Tape, Tensor};
use rand::Rng;

fn random_input(model: &DestaModel, seed: u64) -> (EncoderOutput, Vec<u32>) {
    let mut rng = rng_for(seed, "model-input");
    let e = &model.config.encoder;
    let layers = (0..e.selected_layers()).map(|_| normal_tensor(&mut rng, &[e.frames, e.dim], 1.0)).collect();
    let n = rng.random_range(1..12);
    let tokens = (0..n).map(|_| rng.random_range(0..256)).collect();
    (EncoderOutput { layers }, tokens)
}

fn logits(model: &DestaModel, enc: &EncoderOutput, tokens: &[u32]) -> Tensor {
    let mut tape = Tape::new();
    let v = model.logits(&mut tape, Some(enc), tokens).unwrap();
    tape.value(v).unwrap().clone()
}

fn randomize_lora_b(model: &mut DestaModel, seed: u64) {
    let names: Vec<String> = model
        .store
        .iter_sorted()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.starts_with("lora.") && n.ends_with(".b"))
        .collect();
    assert!(!names.is_empty());
    let mut rng = rng_for(seed, "lora-b");
    for n in names {
        let id = model.store.id(&n).unwrap();
        let shape = model.store.tensor(id).shape().to_vec();
        model.store.get_mut(id).tensor = normal_tensor(&mut rng, &shape, 0.3);
    }
}

fn pair() -> (DestaModel, DestaModel) {
    let cfg = ProjectConfig::toy();
    let with = DestaModel::new(cfg.model_config(None), 11).unwrap();
    let mut plain_cfg = cfg.model_config(None);
    plain_cfg.lora = None;
    let plain = DestaModel::new(plain_cfg, 11).unwrap();
    (with, plain)
}

#[test]
fn scale_zero_removes_trained_lora_exactly() {
    let (mut with, plain) = pair();
    randomize_lora_b(&mut with, 1);
    with.set_lora_scale(0.0).unwrap();
    for i in 0..20 {
        let (enc, toks) = random_input(&plain, i);
        assert_eq!(logits(&with, &enc, &toks).max_abs_diff(&logits(&plain, &enc, &toks)), 0.0);
    }
    // and the branch is live again once the scale is raised
    with.set_lora_scale(1.0).unwrap();
    let (enc, toks) = random_input(&plain, 99);
    assert!(logits(&with, &enc, &toks).max_abs_diff(&logits(&plain, &enc, &toks)) > 0.0);
}

#[test]
fn fresh_lora_is_inert_at_any_scale() {
    let (mut with, plain) = pair();
    for s in [1.0, 0.75, 0.3] {
        with.set_lora_scale(s).unwrap();
        let (enc, toks) = random_input(&plain, (s * 100.0) as u64);
        assert_eq!(logits(&with, &enc, &toks).max_abs_diff(&logits(&plain, &enc, &toks)), 0.0);
    }
}

#[test]
fn scale_one_is_training_behaviour_and_range_is_enforced() {
    let (mut with, _) = pair();
    randomize_lora_b(&mut with, 2);
    let (enc, toks) = random_input(&with, 5);
    let train_time = logits(&with, &enc, &toks);
    with.set_lora_scale(0.5).unwrap();
    with.set_lora_scale(1.0).unwrap();
    assert_eq!(logits(&with, &enc, &toks).max_abs_diff(&train_time), 0.0);
    assert!(with.set_lora_scale(1.01).is_err());
    assert!(with.set_lora_scale(-0.1).is_err());
    assert!(with.set_lora_scale(f64::NAN).is_err());
}

#[test]
fn backbone_is_frozen_and_lora_is_trainable() {
    let (with, _) = pair();
    for (_, p) in with.store.iter() {
        if p.name.starts_with("lm.") {
            assert!(p.frozen, "{} should be frozen", p.name);
        } else {
            assert!(!p.frozen, "{} should be trainable", p.name);
        }
    }
    let ckpt = with.trainable_checkpoint();
    assert!(ckpt.entries.keys().any(|k| k.starts_with("lora.")));
    assert!(ckpt.entries.keys().all(|k| !k.starts_with("lm.")));
}
