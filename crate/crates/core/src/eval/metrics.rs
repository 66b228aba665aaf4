use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Yes,
    No,
    Invalid,
}

impl Prediction {
    pub fn is_correct(self, gold: Label) -> bool {
        matches!(
            (self, gold),
            (Prediction::Yes, Label::Yes) | (Prediction::No, Label::No)
        )
    }
}

fn normalize_word(text: &str) -> String {
    text.trim()
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

/// First non-special generated token, matched case-insensitively against yes/no.
pub fn parse_binary_answer(tokens: &[u32], vocab: &Vocab) -> Prediction {
    let first = tokens
        .iter()
        .copied()
        .find(|&t| !vocab.is_special(t))
        .and_then(|t| vocab.token(t));
    match first.map(normalize_word).as_deref() {
        Some("yes") => Prediction::Yes,
        Some("no") => Prediction::No,
        _ => Prediction::Invalid,
    }
}

/// Lexicon objects that appear as whole generated tokens.
pub fn extract_objects(
    tokens: &[u32],
    vocab: &Vocab,
    lexicon: &BTreeSet<String>,
) -> BTreeSet<String> {
    tokens
        .iter()
        .filter(|&&t| !vocab.is_special(t))
        .filter_map(|&t| vocab.token(t))
        .map(normalize_word)
        .filter(|w| lexicon.contains(w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarySample {
    pub id: String,
    pub gold: Label,
    pub predicted: Prediction,
}

impl BinarySample {
    pub fn new(id: impl Into<String>, gold: Label, predicted: Prediction) -> Self {
        Self {
            id: id.into(),
            gold,
            predicted,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted.is_correct(self.gold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub invalid: usize,
    pub total: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-matrix metrics with "yes" as the positive class.
///
/// An invalid prediction is a false negative when the gold label is yes and
/// a false positive when it is no.
pub fn binary_metrics(samples: &[BinarySample]) -> Result<BinaryMetrics> {
    if samples.is_empty() {
        return Err(Error::param(
            "samples",
            "binary metrics need at least one sample",
        ));
    }
    let (mut tp, mut fp, mut tn, mut fn_, mut invalid) = (0, 0, 0, 0, 0);
    for s in samples {
        if s.predicted == Prediction::Invalid {
            invalid += 1;
        }
        match (s.gold, s.predicted) {
            (Label::Yes, Prediction::Yes) => tp += 1,
            (Label::Yes, _) => fn_ += 1,
            (Label::No, Prediction::No) => tn += 1,
            (Label::No, _) => fp += 1,
        }
    }
    let total = samples.len();
    Ok(BinaryMetrics {
        accuracy: ratio(tp + tn, total),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        tp,
        fp,
        tn,
        fn_,
        invalid,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerativeSample {
    pub id: String,
    pub mentioned: BTreeSet<String>,
    pub gt: BTreeSet<String>,
    pub cog_prone: BTreeSet<String>,
}

fn lower_set<I, S>(items: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    items
        .into_iter()
        .map(|s| s.as_ref().trim().to_lowercase())
        .collect()
}

impl GenerativeSample {
    /// Lowercases and deduplicates every set.
    pub fn new<I, S>(id: impl Into<String>, mentioned: I, gt: I, cog_prone: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            id: id.into(),
            mentioned: lower_set(mentioned),
            gt: lower_set(gt),
            cog_prone: lower_set(cog_prone),
        }
    }

    pub fn hallucinated(&self) -> impl Iterator<Item = &String> {
        self.mentioned.difference(&self.gt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmberMetrics {
    pub chair: f64,
    pub cover: f64,
    pub hal_rate: f64,
    pub cog: f64,
    pub samples: usize,
    /// Sorted ids of samples with an empty ground-truth set; left out of the Cover denominator.
    pub empty_gt: Vec<String>,
}

pub fn amber_metrics(samples: &[GenerativeSample]) -> Result<AmberMetrics> {
    if samples.is_empty() {
        return Err(Error::param(
            "samples",
            "generative metrics need at least one sample",
        ));
    }
    let (mut halluc, mut mentioned, mut covered, mut gt, mut with_halluc, mut cog) =
        (0, 0, 0, 0, 0, 0);
    let mut empty_gt = Vec::new();
    for s in samples {
        let h: Vec<&String> = s.hallucinated().collect();
        halluc += h.len();
        cog += h
            .iter()
            .filter(|o| s.cog_prone.contains(o.as_str()))
            .count();
        mentioned += s.mentioned.len();
        if !h.is_empty() {
            with_halluc += 1;
        }
        if s.gt.is_empty() {
            empty_gt.push(s.id.clone());
        } else {
            covered += s.mentioned.intersection(&s.gt).count();
            gt += s.gt.len();
        }
    }
    empty_gt.sort();
    Ok(AmberMetrics {
        chair: ratio(halluc, mentioned),
        cover: ratio(covered, gt),
        hal_rate: ratio(with_halluc, samples.len()),
        cog: ratio(cog, mentioned),
        samples: samples.len(),
        empty_gt,
    })
}

/// Groups `(image, sample)` pairs into per-image question pairs, in first-seen order.
pub fn pair_by_image(
    samples: &[(String, BinarySample)],
) -> Result<Vec<(BinarySample, BinarySample)>> {
    let mut groups: BTreeMap<&str, (usize, Vec<&BinarySample>)> = BTreeMap::new();
    for (i, (image, s)) in samples.iter().enumerate() {
        groups
            .entry(image.as_str())
            .or_insert_with(|| (i, Vec::new()))
            .1
            .push(s);
    }
    let mut ordered: Vec<_> = groups.into_iter().collect();
    ordered.sort_by_key(|(_, (first, _))| *first);
    ordered
        .into_iter()
        .map(|(image, (_, qs))| match qs.as_slice() {
            [a, b] => Ok(((*a).clone(), (*b).clone())),
            other => Err(Error::Domain(format!(
                "image {image:?} has {} questions, expected exactly 2",
                other.len()
            ))),
        })
        .collect()
}

/// `100 * accuracy + 100 * accuracy_plus`, in `[0, 200]`.
pub fn mme_score(pairs: &[(BinarySample, BinarySample)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::param(
            "pairs",
            "MME scoring needs at least one image",
        ));
    }
    let mut correct = 0usize;
    let mut both = 0usize;
    for (a, b) in pairs {
        let n = usize::from(a.is_correct()) + usize::from(b.is_correct());
        correct += n;
        if n == 2 {
            both += 1;
        }
    }
    let acc = (100 * correct) as f64 / (2 * pairs.len()) as f64;
    let acc_plus = (100 * both) as f64 / pairs.len() as f64;
    Ok(acc + acc_plus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bs(id: usize, gold: Label, pred: Prediction) -> BinarySample {
        BinarySample::new(format!("s{id}"), gold, pred)
    }

    #[test]
    fn confusion_example() {
        let mut v = Vec::new();
        v.extend((0..40).map(|i| bs(i, Label::Yes, Prediction::Yes)));
        v.extend((0..10).map(|i| bs(i, Label::No, Prediction::Yes)));
        v.extend((0..10).map(|i| bs(i, Label::Yes, Prediction::No)));
        v.extend((0..40).map(|i| bs(i, Label::No, Prediction::No)));
        let m = binary_metrics(&v).unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (0.8, 0.8, 0.8, 0.8)
        );
    }

    #[test]
    fn invalid_counts_against_either_side() {
        let v = [
            bs(0, Label::Yes, Prediction::Invalid),
            bs(1, Label::No, Prediction::Invalid),
        ];
        let m = binary_metrics(&v).unwrap();
        assert_eq!((m.tp, m.fp, m.tn, m.fn_, m.invalid), (0, 1, 0, 1, 2));
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert!(binary_metrics(&[]).is_err());
    }

    #[test]
    fn amber_example() {
        let s = [
            GenerativeSample::new("a", vec!["a", "b"], vec!["a"], vec![]),
            GenerativeSample::new("b", vec!["c"], vec!["c", "d"], vec![]),
        ];
        let m = amber_metrics(&s).unwrap();
        assert_eq!(m.chair, 1.0 / 3.0);
        assert_eq!(m.cover, 2.0 / 3.0);
        assert_eq!(m.hal_rate, 0.5);
        assert_eq!(m.cog, 0.0);
    }

    #[test]
    fn amber_empty_gt_flagged() {
        let s = [
            GenerativeSample::new("a", vec!["A", "a"], vec!["a"], vec!["x"]),
            GenerativeSample::new("b", vec!["x"], vec![], vec!["x"]),
        ];
        let m = amber_metrics(&s).unwrap();
        assert_eq!(m.empty_gt, vec!["b".to_owned()]);
        assert_eq!(m.cover, 1.0);
        assert_eq!(m.chair, 0.5);
        assert_eq!(m.cog, 0.5);
    }

    #[test]
    fn mme_examples() {
        let pair = |a: bool, b: bool| {
            let p = |ok: bool| if ok { Prediction::Yes } else { Prediction::No };
            (bs(0, Label::Yes, p(a)), bs(1, Label::Yes, p(b)))
        };
        let mut v: Vec<_> = (0..8).map(|_| pair(true, true)).collect();
        v.push(pair(true, false));
        v.push(pair(false, false));
        assert_eq!(mme_score(&v).unwrap(), 165.0);
        assert_eq!(mme_score(&[pair(true, true)]).unwrap(), 200.0);
        assert_eq!(
            mme_score(&[pair(false, true), pair(true, false)]).unwrap(),
            50.0
        );
    }

    #[test]
    fn pairing() {
        let s = vec![
            ("i1".to_owned(), bs(0, Label::Yes, Prediction::Yes)),
            ("i0".to_owned(), bs(1, Label::Yes, Prediction::Yes)),
            ("i1".to_owned(), bs(2, Label::No, Prediction::Yes)),
            ("i0".to_owned(), bs(3, Label::No, Prediction::No)),
        ];
        let pairs = pair_by_image(&s).unwrap();
        assert_eq!(pairs[0].0.id, "s0");
        assert_eq!(pairs[0].1.id, "s2");
        assert!(pair_by_image(&s[..3]).is_err());
    }

    #[test]
    fn answer_parsing() {
        let vocab = Vocab::new(
            ["<s>", "Yes", "no.", "maybe"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            [0],
        )
        .unwrap();
        assert_eq!(parse_binary_answer(&[0, 1, 3], &vocab), Prediction::Yes);
        assert_eq!(parse_binary_answer(&[2], &vocab), Prediction::No);
        assert_eq!(parse_binary_answer(&[3, 1], &vocab), Prediction::Invalid);
        assert_eq!(parse_binary_answer(&[0], &vocab), Prediction::Invalid);
    }
}
