//! Evaluation harness: aggregation, matching, the zero-shot sweep and the
//! scale-zero equivalence with a LoRA-free model.

mod common;

use std::collections::BTreeMap;

use common::Toy;
use desta_core::config::ProjectConfig;
use desta_core::eval::{
    aggregate, evaluate_instances, exact_match, format_sweep_table, lora_scale_sweep, synthesize_tasks,
    zero_shot_responses, AllowedSetDetector, Dimension, DestaResponder, EvalError, InstanceResult, InstructionModel,
    Split, TaskInstance, SWEEP_SCALES,
};
use desta_core::model::DestaModel;
use desta_core::rng::{normal_tensor, rng_for};
use desta_core::tokenizer::Tokenizer;
use proptest::prelude::*;

fn results_strategy() -> impl Strategy<Value = Vec<InstanceResult>> {
    proptest::collection::vec((0usize..5, any::<bool>(), 0usize..=20, 1usize..=20), 1..30).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (d, seen, c, n))| {
                let split = if seen { Split::Seen } else { Split::Unseen };
                InstanceResult::from_counts(format!("i{i:03}"), Dimension::ALL[d], split, c.min(n), n).unwrap()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_matches_loop_oracle(results in results_strategy(), rot in 0usize..30) {
        let report = aggregate(&results).unwrap();

        // Oracle: explicit sums per group, instances weighted equally.
        let mut sums: BTreeMap<(Split, Dimension), (f64, usize)> = BTreeMap::new();
        let mut split_sums: BTreeMap<Split, (f64, usize)> = BTreeMap::new();
        let (mut total, mut count) = (0.0, 0);
        for r in &results {
            let e = sums.entry((r.split, r.dimension)).or_default();
            e.0 += r.accuracy;
            e.1 += 1;
            let e = split_sums.entry(r.split).or_default();
            e.0 += r.accuracy;
            e.1 += 1;
            total += r.accuracy;
            count += 1;
        }
        for split in Split::ALL {
            for dim in Dimension::ALL {
                let got = report.per_dimension[&split].get(&dim);
                match sums.get(&(split, dim)) {
                    Some(&(s, n)) => {
                        let g = got.unwrap();
                        prop_assert_eq!(g.count, n);
                        prop_assert!((g.mean - s / n as f64).abs() < 1e-9);
                    }
                    None => prop_assert!(got.is_none()),
                }
            }
            match split_sums.get(&split) {
                Some(&(s, n)) => prop_assert!((report.split_average[&split].mean - s / n as f64).abs() < 1e-9),
                None => prop_assert!(!report.split_average.contains_key(&split)),
            }
        }
        prop_assert!((report.overall.unwrap().mean - total / count as f64).abs() < 1e-9);

        // Input order does not matter.
        let mut shuffled = results.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(aggregate(&shuffled).unwrap(), report);
    }

    #[test]
    fn option_match_is_normalized_equality(
        opts in proptest::collection::btree_set("[a-z]{1,8}", 2..5),
        pick in 0usize..5,
        label_pick in 0usize..5,
        punct in "[.!? ]{0,2}",
        upper in any::<bool>(),
    ) {
        let opts: Vec<String> = opts.into_iter().collect();
        let pred_opt = &opts[pick % opts.len()];
        let label = &opts[label_pick % opts.len()];
        let mut pred = format!("{pred_opt}{punct}");
        if upper {
            pred = pred.to_uppercase();
        }
        prop_assert_eq!(exact_match(&pred, label, Some(&opts)), pred_opt == label);
    }
}

#[test]
fn aggregate_rejects_bad_input() {
    let a = InstanceResult::from_counts("a", Dimension::Con, Split::Seen, 1, 2).unwrap();
    assert!(matches!(aggregate(&[a.clone(), a.clone()]), Err(EvalError::Invalid(_))));
    let mut bad = a.clone();
    bad.accuracy = 101.0;
    assert!(aggregate(&[bad]).is_err());
    assert!(InstanceResult::from_counts("x", Dimension::Con, Split::Seen, 3, 2).is_err());
    assert!(InstanceResult::from_counts("x", Dimension::Con, Split::Seen, 0, 0).is_err());
}

/// Answers with the label when `obedient`, with free text otherwise.
struct Stub {
    obedient: bool,
    labels: BTreeMap<(String, String), String>,
    scales: Vec<f64>,
}

impl InstructionModel for Stub {
    fn set_lora_scale(&mut self, s: f64) -> Result<(), EvalError> {
        self.scales.push(s);
        Ok(())
    }
    fn respond(&mut self, audio_id: &str, instruction: &str) -> Result<String, EvalError> {
        Ok(if self.obedient {
            self.labels[&(audio_id.to_string(), instruction.to_string())].clone()
        } else {
            "the speaker sounds calm and measured".into()
        })
    }
}

fn stub(tasks: &[TaskInstance], obedient: bool) -> Stub {
    let labels = tasks
        .iter()
        .flat_map(|t| &t.samples)
        .map(|s| ((s.audio_id.clone(), s.instruction.clone()), s.label.clone()))
        .collect();
    Stub {
        obedient,
        labels,
        scales: Vec::new(),
    }
}

fn toy_tasks() -> (Toy, Vec<TaskInstance>) {
    let t = Toy::new(ProjectConfig::toy(), 6, 1);
    let tasks = synthesize_tasks(&t.metadata, 2, 3);
    (t, tasks)
}

#[test]
fn sweep_with_stub_models() {
    let (_, tasks) = toy_tasks();
    let n: usize = tasks.iter().map(|t| t.samples.len()).sum();

    let mut good = stub(&tasks, true);
    let rows = lora_scale_sweep(&mut good, &tasks, &SWEEP_SCALES, &AllowedSetDetector).unwrap();
    assert_eq!(good.scales, SWEEP_SCALES);
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!(r.report.n, n);
        assert_eq!(r.report.following_rate, 100.0);
        assert_eq!(r.report.accuracy, Some(100.0));
        assert_eq!(r.report.success_rate, 100.0);
        assert!(r.report.identity_holds());
    }

    let mut chatty = stub(&tasks, false);
    let rows = lora_scale_sweep(&mut chatty, &tasks, &[1.0, 0.0], &AllowedSetDetector).unwrap();
    for r in &rows {
        assert!(r.report.is_na());
        assert_eq!(r.report.success_rate, 0.0);
        assert!(r.report.identity_holds());
    }
    assert_eq!(format_sweep_table(&rows).matches("N/A").count(), 6);

    let err = lora_scale_sweep(&mut chatty, &tasks, &[0.5, 1.5], &AllowedSetDetector).unwrap_err();
    assert!(matches!(err, EvalError::Scale(_)));

    let (results, preds) = evaluate_instances(&mut stub(&tasks, true), &tasks).unwrap();
    assert_eq!(preds.len(), n);
    assert!(results.iter().all(|r| r.accuracy == 100.0));
}

#[test]
fn scale_zero_matches_lora_free_model() {
    let (t, tasks) = toy_tasks();
    let mut with = t.model();
    // Give the LoRA branch non-trivial weights so it would matter if used.
    let mut rng = rng_for(5, "lora");
    let names: Vec<String> = with
        .store
        .iter_sorted()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.starts_with("lora."))
        .collect();
    for n in &names {
        let id = with.store.id(n).unwrap();
        let shape = with.store.tensor(id).shape().to_vec();
        with.store.get_mut(id).tensor = normal_tensor(&mut rng, &shape, 0.5);
    }
    let mut ckpt = with.trainable_checkpoint();
    ckpt.entries.retain(|k, _| !k.starts_with("lora."));

    let mut plain_cfg = t.model_config();
    plain_cfg.lora = None;
    let mut plain = DestaModel::new(plain_cfg, t.cfg.seed).unwrap();
    plain.load_checkpoint(&ckpt).unwrap();

    let feats = t.features();
    let tok = Tokenizer::default();
    let mut a = DestaResponder::new(&mut with, tok.clone(), &tasks, &t.metadata, &feats, 6).unwrap();
    a.set_lora_scale(0.0).unwrap();
    let ra = zero_shot_responses(&mut a, &tasks).unwrap();
    a.set_lora_scale(1.0).unwrap();
    let ra_full = zero_shot_responses(&mut a, &tasks).unwrap();

    let mut b = DestaResponder::new(&mut plain, tok, &tasks, &t.metadata, &feats, 6).unwrap();
    b.set_lora_scale(0.0).unwrap();
    assert!(b.set_lora_scale(0.5).is_err());
    let rb = zero_shot_responses(&mut b, &tasks).unwrap();
    assert_eq!(ra, rb);
    assert_ne!(ra_full, rb, "LoRA weights had no effect at scale 1");
}
