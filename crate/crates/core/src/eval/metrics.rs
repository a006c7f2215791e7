use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Dimension, EvalError, Result, Split};

const TERMINAL_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '`'];

/// Case-fold, trim, and strip trailing punctuation (repeatedly, so `"yes!."`
/// and `"yes"` agree).
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.trim().to_lowercase();
    lowered
        .trim_end_matches(|c: char| c.is_whitespace() || TERMINAL_PUNCT.contains(&c))
        .trim()
        .to_string()
}

/// Whether `prediction` and `label` agree after normalization. `options` is
/// accepted for interface symmetry with multiple-choice tasks but does not
/// change the comparison.
pub fn exact_match(prediction: &str, label: &str, _options: Option<&[String]>) -> bool {
    normalize_answer(prediction) == normalize_answer(label)
}

/// Exact-match accuracy of one task instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance_id: String,
    pub dimension: Dimension,
    pub split: Split,
    /// Percent in [0, 100].
    pub accuracy: f64,
    pub samples: usize,
}

impl InstanceResult {
    pub fn from_counts(
        instance_id: impl Into<String>,
        dimension: Dimension,
        split: Split,
        correct: usize,
        total: usize,
    ) -> Result<Self> {
        if total == 0 || correct > total {
            return Err(EvalError::Invalid(format!("{correct}/{total} is not a valid count")));
        }
        Ok(Self {
            instance_id: instance_id.into(),
            dimension,
            split,
            accuracy: 100.0 * correct as f64 / total as f64,
            samples: total,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub mean: f64,
    pub count: usize,
}

/// Macro averages over instances: every instance weighs the same inside any
/// group, and the overall average runs over all instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_instance: Vec<InstanceResult>,
    pub per_dimension: BTreeMap<Split, BTreeMap<Dimension, GroupStat>>,
    pub split_average: BTreeMap<Split, GroupStat>,
    pub overall: Option<GroupStat>,
    pub notices: Vec<String>,
}

fn mean_of(values: &[f64]) -> Option<GroupStat> {
    (!values.is_empty()).then(|| GroupStat {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        count: values.len(),
    })
}

/// Reduces per-instance results. Input order does not matter: results are
/// sorted by instance id first so the floating-point sums are reproducible.
pub fn aggregate(results: &[InstanceResult]) -> Result<EvalReport> {
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    for w in sorted.windows(2) {
        if w[0].instance_id == w[1].instance_id {
            return Err(EvalError::Invalid(format!("duplicate instance `{}`", w[0].instance_id)));
        }
    }
    if let Some(bad) = sorted.iter().find(|r| !(0.0..=100.0).contains(&r.accuracy)) {
        return Err(EvalError::Invalid(format!(
            "instance `{}` has accuracy {} outside [0, 100]",
            bad.instance_id, bad.accuracy
        )));
    }

    let mut notices = Vec::new();
    let mut per_dimension = BTreeMap::new();
    let mut split_average = BTreeMap::new();
    for split in Split::ALL {
        let mut dims = BTreeMap::new();
        for dim in Dimension::ALL {
            let values: Vec<f64> = sorted
                .iter()
                .filter(|r| r.split == split && r.dimension == dim)
                .map(|r| r.accuracy)
                .collect();
            match mean_of(&values) {
                Some(stat) => {
                    dims.insert(dim, stat);
                }
                None => notices.push(format!("no instances for {}/{}", split.as_str(), dim.as_str())),
            }
        }
        per_dimension.insert(split, dims);
        let values: Vec<f64> = sorted.iter().filter(|r| r.split == split).map(|r| r.accuracy).collect();
        match mean_of(&values) {
            Some(stat) => {
                split_average.insert(split, stat);
            }
            None => notices.push(format!("no instances for split {}", split.as_str())),
        }
    }
    let all: Vec<f64> = sorted.iter().map(|r| r.accuracy).collect();
    let overall = mean_of(&all);
    if overall.is_none() {
        notices.push("no instances at all".into());
    }
    for n in &notices {
        log::info!("aggregate: {n}");
    }
    Ok(EvalReport {
        per_instance: sorted,
        per_dimension,
        split_average,
        overall,
        notices,
    })
}

/// One zero-shot answer together with what the question allowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResponse {
    pub question_id: String,
    pub text: String,
    pub label: String,
    pub allowed: Vec<String>,
}

/// Decides whether a response counts as following the instruction.
pub trait FollowDetector {
    fn follows(&self, response: &ZeroShotResponse) -> bool;
}

/// A response follows when its normalized form is one of the normalized
/// allowed answers.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllowedSetDetector;

impl FollowDetector for AllowedSetDetector {
    fn follows(&self, response: &ZeroShotResponse) -> bool {
        let text = normalize_answer(&response.text);
        response.allowed.iter().any(|a| normalize_answer(a) == text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub question_id: String,
    pub followed: bool,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub n: usize,
    pub followed: usize,
    pub correct_and_followed: usize,
    pub following_rate: f64,
    /// `None` when nothing followed the instruction.
    pub accuracy: Option<f64>,
    pub success_rate: f64,
    pub per_question: Vec<QuestionOutcome>,
}

/// `accuracy × following / 100`; the only place success is computed.
pub fn success_from_rates(accuracy: f64, following_rate: f64) -> f64 {
    accuracy * following_rate / 100.0
}

impl ZeroShotReport {
    /// Re-derives the success rate from the reported accuracy and following
    /// rate and compares bit-for-bit.
    pub fn identity_holds(&self) -> bool {
        match self.accuracy {
            Some(acc) => success_from_rates(acc, self.following_rate) == self.success_rate,
            None => self.success_rate == 0.0 && self.followed == 0,
        }
    }

    pub fn is_na(&self) -> bool {
        self.accuracy.is_none()
    }
}

pub fn zero_shot_metrics(responses: &[ZeroShotResponse], detector: &dyn FollowDetector) -> Result<ZeroShotReport> {
    if responses.is_empty() {
        return Err(EvalError::Empty("zero-shot responses".into()));
    }
    let per_question: Vec<QuestionOutcome> = responses
        .iter()
        .map(|r| {
            let followed = detector.follows(r);
            QuestionOutcome {
                question_id: r.question_id.clone(),
                followed,
                correct: followed && exact_match(&r.text, &r.label, Some(&r.allowed)),
            }
        })
        .collect();
    let n = per_question.len();
    let followed = per_question.iter().filter(|q| q.followed).count();
    let correct_and_followed = per_question.iter().filter(|q| q.correct).count();
    let following_rate = 100.0 * followed as f64 / n as f64;
    let accuracy = (followed > 0).then(|| 100.0 * correct_and_followed as f64 / followed as f64);
    let success_rate = accuracy.map_or(0.0, |a| success_from_rates(a, following_rate));
    Ok(ZeroShotReport {
        n,
        followed,
        correct_and_followed,
        following_rate,
        accuracy,
        success_rate,
        per_question,
    })
}

/// Distinct normalized answers; used to spot option collisions.
pub fn normalized_set(options: &[String]) -> BTreeSet<String> {
    options.iter().map(|o| normalize_answer(o)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn resp(text: &str, label: &str) -> ZeroShotResponse {
        ZeroShotResponse {
            question_id: format!("q-{text}-{label}"),
            text: text.into(),
            label: label.into(),
            allowed: vec!["yes".into(), "no".into()],
        }
    }

    #[test]
    fn normalization_examples() {
        assert!(exact_match("Yes.", "yes", None));
        assert!(!exact_match("No", "yes", None));
        assert!(exact_match("  FEMALE!? ", "female", None));
        assert!(!exact_match("yes sir", "yes", None));
        assert_eq!(normalize_answer("..."), "");
    }

    #[test]
    fn two_instances_average_to_fifty() {
        let r = aggregate(&[
            InstanceResult::from_counts("a", Dimension::Con, Split::Seen, 4, 4).unwrap(),
            InstanceResult::from_counts("b", Dimension::Con, Split::Seen, 0, 4).unwrap(),
        ])
        .unwrap();
        assert_eq!(r.per_dimension[&Split::Seen][&Dimension::Con].mean, 50.0);
        assert_eq!(r.split_average[&Split::Seen].count, 2);
        assert!(r.split_average.get(&Split::Unseen).is_none());
        assert!(r.notices.iter().any(|n| n == "no instances for split unseen"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = InstanceResult::from_counts("a", Dimension::Con, Split::Seen, 1, 1).unwrap();
        assert!(aggregate(&[a.clone(), a]).is_err());
    }

    #[test]
    fn zero_shot_hand_counts() {
        let all = vec![resp("yes", "yes"), resp("No.", "no")];
        let r = zero_shot_metrics(&all, &AllowedSetDetector).unwrap();
        assert_eq!((r.success_rate, r.accuracy, r.following_rate), (100.0, Some(100.0), 100.0));

        let half = vec![resp("yes", "yes"), resp("a woman", "no")];
        let r = zero_shot_metrics(&half, &AllowedSetDetector).unwrap();
        assert_eq!((r.success_rate, r.accuracy, r.following_rate), (50.0, Some(100.0), 50.0));

        let none = vec![resp("maybe", "yes")];
        let r = zero_shot_metrics(&none, &AllowedSetDetector).unwrap();
        assert!(r.is_na());
        assert!(r.identity_holds());

        assert!(matches!(zero_shot_metrics(&[], &AllowedSetDetector), Err(EvalError::Empty(_))));
    }

    proptest! {
        #[test]
        fn exact_match_reflexive_and_symmetric(a in "[A-Za-z .!?]{0,12}", b in "[A-Za-z .!?]{0,12}") {
            prop_assert!(exact_match(&a, &a, None));
            prop_assert_eq!(exact_match(&a, &b, None), exact_match(&b, &a, None));
        }

        #[test]
        fn identity_is_exact(flags in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let rs: Vec<ZeroShotResponse> = flags
                .iter()
                .enumerate()
                .map(|(i, &(follow, right))| ZeroShotResponse {
                    question_id: format!("q{i}"),
                    text: if !follow { "unsure".into() } else if right { "yes".into() } else { "no".into() },
                    label: "yes".into(),
                    allowed: vec!["yes".into(), "no".into()],
                })
                .collect();
            let r = zero_shot_metrics(&rs, &AllowedSetDetector).unwrap();
            prop_assert!(r.identity_holds());
            let direct = 100.0 * r.correct_and_followed as f64 / r.n as f64;
            prop_assert!((direct - r.success_rate).abs() < 1e-9);
        }
    }
}
