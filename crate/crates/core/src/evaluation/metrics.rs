//! Turn-level tracking accuracies and utterance-level text metrics.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{ActTriple, Dialog, DialogCorpus, Speaker, Turn, UNK};
use crate::error::{Result, VhdaError};

/// Which turns enter the accuracy denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TurnSelection {
    #[default]
    User,
    All,
}

impl TurnSelection {
    pub fn includes(self, turn: &Turn) -> bool {
        match self {
            TurnSelection::User => turn.speaker == Speaker::User,
            TurnSelection::All => true,
        }
    }
}

/// Labels of one evaluated turn, either gold or predicted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TurnLabels {
    pub goal: BTreeSet<ActTriple>,
    pub requests: BTreeSet<ActTriple>,
    pub informs: BTreeSet<ActTriple>,
}

impl TurnLabels {
    pub fn from_turn(turn: &Turn) -> Self {
        Self {
            goal: turn.goal.iter().cloned().collect(),
            requests: turn.requests().cloned().collect(),
            informs: turn.informs().cloned().collect(),
        }
    }
}

pub fn gold_labels(dialog: &Dialog, selection: TurnSelection) -> Vec<TurnLabels> {
    dialog
        .turns
        .iter()
        .filter(|t| selection.includes(t))
        .map(TurnLabels::from_turn)
        .collect()
}

fn exact_match_rate(
    pred: &[TurnLabels],
    gold: &[TurnLabels],
    f: impl Fn(&TurnLabels, &TurnLabels) -> bool,
) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(VhdaError::Alignment(format!(
            "{} predicted turns for {} gold turns",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(VhdaError::Alignment("no turns to evaluate".into()));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| f(p, g)).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Fraction of turns whose predicted goal equals the gold goal exactly.
pub fn joint_goal_accuracy(pred: &[TurnLabels], gold: &[TurnLabels]) -> Result<f64> {
    exact_match_rate(pred, gold, |p, g| p.goal == g.goal)
}

pub fn request_accuracy(pred: &[TurnLabels], gold: &[TurnLabels]) -> Result<f64> {
    exact_match_rate(pred, gold, |p, g| p.requests == g.requests)
}

pub fn inform_accuracy(pred: &[TurnLabels], gold: &[TurnLabels]) -> Result<f64> {
    exact_match_rate(pred, gold, |p, g| p.informs == g.informs)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub joint_goal_acc: f64,
    pub request_acc: f64,
    pub inform_acc: f64,
}

impl MetricReport {
    pub fn compute(pred: &[TurnLabels], gold: &[TurnLabels]) -> Result<Self> {
        Ok(Self {
            joint_goal_acc: joint_goal_accuracy(pred, gold)?,
            request_acc: request_accuracy(pred, gold)?,
            inform_acc: inform_accuracy(pred, gold)?,
        })
    }

    pub fn values(&self) -> [f64; 3] {
        [self.joint_goal_acc, self.request_acc, self.inform_acc]
    }

    pub fn from_values(v: [f64; 3]) -> Self {
        Self {
            joint_goal_acc: v[0],
            request_acc: v[1],
            inform_acc: v[2],
        }
    }
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_f1<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Unigram distribution over training tokens with additive smoothing; every
/// unseen token shares the unknown-token mass.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramModel {
    probs: HashMap<String, f64>,
    unknown: f64,
}

impl UnigramModel {
    pub fn build(corpus: &DialogCorpus, alpha: f64) -> Self {
        let mut counts: HashMap<String, f64> = HashMap::new();
        let mut total = 0.0;
        for w in corpus
            .dialogs
            .iter()
            .flat_map(|d| d.turns.iter().flat_map(|t| t.utterance.iter()))
        {
            *counts.entry(w.clone()).or_default() += 1.0;
            total += 1.0;
        }
        counts.entry(UNK.to_string()).or_default();
        let denom = total + alpha * counts.len() as f64;
        let probs: HashMap<String, f64> = counts.into_iter().map(|(w, c)| (w, (c + alpha) / denom)).collect();
        let unknown = probs[UNK];
        Self { probs, unknown }
    }

    /// A fixed distribution; tokens outside it get probability `unknown`.
    pub fn from_probs(probs: HashMap<String, f64>, unknown: f64) -> Self {
        Self { probs, unknown }
    }

    pub fn prob(&self, token: &str) -> f64 {
        self.probs.get(token).copied().unwrap_or(self.unknown)
    }

    /// Mean over utterances of the mean per-token negative log probability.
    pub fn cross_entropy(&self, utterances: &[Vec<String>]) -> f64 {
        let per: Vec<f64> = utterances
            .iter()
            .filter(|u| !u.is_empty())
            .map(|u| u.iter().map(|w| -self.prob(w).ln()).sum::<f64>() / u.len() as f64)
            .collect();
        if per.is_empty() {
            0.0
        } else {
            per.iter().sum::<f64>() / per.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        // longest subsequence of `a` (by subset enumeration) that is a
        // subsequence of `b`
        let is_subseq = |s: &[u8]| {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..(1 << a.len()))
            .filter_map(|mask| {
                let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subseq(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn rouge_examples() {
        let h: Vec<&str> = "a c".split(' ').collect();
        let r: Vec<&str> = "a b c".split(' ').collect();
        assert!((rouge_l_f1(&h, &r) - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l_f1(&r, &r), 1.0);
        assert_eq!(rouge_l_f1(&["x"], &["y"]), 0.0);
        assert_eq!(rouge_l_f1::<&str>(&[], &[]), 0.0);
    }

    #[test]
    fn accuracies() {
        let t = |g: &[(&str, &str)]| TurnLabels {
            goal: g.iter().map(|&(s, v)| ActTriple::inform(s, v)).collect(),
            ..Default::default()
        };
        let gold = vec![t(&[("a", "1")]), t(&[("a", "1"), ("b", "2")]), t(&[]), t(&[("c", "3")])];
        let mut pred = gold.clone();
        pred[3] = t(&[]);
        assert_eq!(joint_goal_accuracy(&pred, &gold).unwrap(), 0.75);
        assert_eq!(request_accuracy(&pred, &gold).unwrap(), 1.0);
        assert!(matches!(
            joint_goal_accuracy(&pred[..2], &gold),
            Err(VhdaError::Alignment(_))
        ));
        let mut missed = TurnLabels::default();
        missed.requests.insert(ActTriple::request("phone"));
        assert_eq!(request_accuracy(&[TurnLabels::default()], &[missed]).unwrap(), 0.0);
    }

    #[test]
    fn unigram_cases() {
        let m = UnigramModel::from_probs([("t1".to_string(), 0.75), ("t2".to_string(), 0.25)].into(), 0.0);
        let x = m.cross_entropy(&[vec!["t1".into(), "t2".into()]]);
        assert!((x - (-(0.75f64.ln()) - 0.25f64.ln()) / 2.0).abs() < 1e-12);
        assert!((x - 0.8370).abs() < 1e-4);
        let v = 5;
        let uniform = UnigramModel::from_probs((0..v).map(|i| (format!("w{i}"), 1.0 / v as f64)).collect(), 0.0);
        let u = uniform.cross_entropy(&[vec!["w1".into(), "w3".into(), "w3".into()]]);
        assert!((u - (v as f64).ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(
            a in prop::collection::vec(0u8..4, 0..10),
            b in prop::collection::vec(0u8..4, 0..10),
        ) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
            prop_assert_eq!(rouge_l_f1(&a, &b), rouge_l_f1(&b, &a));
        }
    }
}
