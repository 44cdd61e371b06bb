//! Retrieval and answer-quality metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::model::{MEM, PAD, SEP};

/// `|gold ∩ top-k| / |gold|`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], gold: &[S], k: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("recall gold set"));
    }
    if k == 0 {
        return Err(Error::Config("recall cutoff must be at least 1".into()));
    }
    let top: Vec<&str> = ranked.iter().take(k).map(AsRef::as_ref).collect();
    let mut seen: Vec<&str> = gold.iter().map(AsRef::as_ref).collect();
    seen.sort_unstable();
    seen.dedup();
    let hits = seen.iter().filter(|g| top.contains(g)).count();
    Ok(hits as f64 / seen.len() as f64)
}

/// Lowercases and drops reserved tokens.
pub fn normalize<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| ![PAD, MEM, SEP].contains(t))
        .map(str::to_lowercase)
        .collect()
}

pub fn exact_match<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    f64::from(u8::from(normalize(pred) == normalize(gold)))
}

/// Token-level F1 with multiset counts.
pub fn f1_overlap<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    let (p, g) = (normalize(pred), normalize(gold));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1 when the gold answer occurs contiguously inside the prediction.
pub fn cover_em<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    let (p, g) = (normalize(pred), normalize(gold));
    let hit = g.is_empty() || p.windows(g.len()).any(|w| w == g.as_slice());
    f64::from(u8::from(hit))
}

/// Averaged metrics over an evaluation set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub em: f64,
    pub f1: f64,
    pub acc_cover: f64,
    pub n: usize,
}

pub const REPORT_CUTOFFS: [usize; 3] = [1, 3, 5];

/// One evaluated example: the ranking, gold ids, and the generated answer.
pub struct Scored<'a> {
    pub ranked: &'a [String],
    pub gold: &'a [String],
    pub prediction: &'a [String],
    pub answer: &'a [String],
}

impl EvalReport {
    pub fn from_examples<'a, I: IntoIterator<Item = Scored<'a>>>(items: I) -> Result<Self> {
        let mut r = EvalReport::default();
        for k in REPORT_CUTOFFS {
            r.recall_at.insert(k, 0.0);
        }
        for s in items {
            for k in REPORT_CUTOFFS {
                *r.recall_at.get_mut(&k).expect("cutoff present") += recall_at_k(s.ranked, s.gold, k)?;
            }
            r.em += exact_match(s.prediction, s.answer);
            r.f1 += f1_overlap(s.prediction, s.answer);
            r.acc_cover += cover_em(s.prediction, s.answer);
            r.n += 1;
        }
        if r.n == 0 {
            return Err(Error::Empty("evaluation set"));
        }
        let n = r.n as f64;
        for v in r.recall_at.values_mut() {
            *v /= n;
        }
        r.em /= n;
        r.f1 /= n;
        r.acc_cover /= n;
        Ok(r)
    }

    pub fn csv_header() -> &'static str {
        "n,recall@1,recall@3,recall@5,em,f1,acc"
    }

    pub fn to_csv_row(&self) -> String {
        let r = |k| self.recall_at.get(&k).copied().unwrap_or(0.0);
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.n,
            r(1),
            r(3),
            r(5),
            self.em,
            self.f1,
            self.acc_cover
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        writeln!(f, "{:<10} {:>8}", "n", self.n)?;
        for (k, v) in &self.recall_at {
            writeln!(f, "{:<10} {:>8.4}", format!("recall@{k}"), v)?;
        }
        writeln!(f, "{:<10} {:>8.4}", "em", self.em)?;
        writeln!(f, "{:<10} {:>8.4}", "f1", self.f1)?;
        write!(f, "{:<10} {:>8.4}", "acc", self.acc_cover)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn recall_definition() {
        assert_eq!(recall_at_k(&s(&["a", "b"]), &s(&["a"]), 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&s(&["a", "x", "y", "b"]), &s(&["a", "b"]), 3).unwrap(), 0.5);
        assert!(matches!(recall_at_k(&s(&["a"]), &s(&[]), 1), Err(Error::Empty(_))));
        assert!(recall_at_k(&s(&["a"]), &s(&["a"]), 0).is_err());
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match(&s(&["val1"]), &s(&["val1"])), 1.0);
        assert_eq!(exact_match(&s(&["val1", "x"]), &s(&["val1", "y"])), 0.0);
        assert_eq!(exact_match(&s(&["VAL1"]), &s(&["val1"])), 1.0);
        assert_eq!(exact_match(&s(&["val1", PAD]), &s(&["val1"])), 1.0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_overlap(&s(&["a", "b"]), &s(&["a", "b"])), 1.0);
        assert_eq!(f1_overlap(&s(&["a"]), &s(&["b"])), 0.0);
        assert_eq!(f1_overlap(&s(&["a", "b"]), &s(&["b", "c"])), 0.5);
        assert_eq!(f1_overlap(&s(&[]), &s(&[])), 1.0);
        assert_eq!(f1_overlap(&s(&["a"]), &s(&[])), 0.0);
        assert_eq!(f1_overlap(&s(&["a", "a"]), &s(&["a"])), 2.0 * 0.5 / 1.5);
    }

    #[test]
    fn cover_cases() {
        assert_eq!(cover_em(&s(&["x", "a", "b", "y"]), &s(&["a", "b"])), 1.0);
        assert_eq!(cover_em(&s(&["a", "b"]), &s(&["a", "b"])), 1.0);
        assert_eq!(cover_em(&s(&["a", "x", "b"]), &s(&["a", "b"])), 0.0);
    }

    #[test]
    fn report_renders() {
        let (ranked, gold, pred) = (s(&["d1", "d2"]), s(&["d2"]), s(&["v"]));
        let r = EvalReport::from_examples([Scored {
            ranked: &ranked,
            gold: &gold,
            prediction: &pred,
            answer: &pred,
        }])
        .unwrap();
        assert_eq!(r.recall_at[&1], 0.0);
        assert_eq!(r.recall_at[&3], 1.0);
        assert_eq!(r.to_csv_row(), "1,0.000000,1.000000,1.000000,1.000000,1.000000,1.000000");
        assert!(r.to_string().contains("recall@5"));
        assert!(EvalReport::from_examples(std::iter::empty()).is_err());
    }

    fn brute_contains(p: &[String], g: &[String]) -> bool {
        if g.is_empty() {
            return true;
        }
        (0..p.len()).any(|i| i + g.len() <= p.len() && (0..g.len()).all(|j| p[i + j] == g[j]))
    }

    fn tokens() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..6)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn metric_invariants(pred in tokens(), gold in tokens()) {
            let em = exact_match(&pred, &gold);
            prop_assert!(cover_em(&pred, &gold) >= em);
            if em == 1.0 {
                prop_assert_eq!(f1_overlap(&pred, &gold), 1.0);
            }
            prop_assert_eq!(cover_em(&pred, &gold) == 1.0, brute_contains(&pred, &gold));
            let f1 = f1_overlap(&pred, &gold);
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn recall_monotone_and_relabel_invariant(
            perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
            gold_n in 1usize..4,
            shift in 1usize..50,
        ) {
            let ranked: Vec<String> = perm.iter().map(|i| format!("d{i}")).collect();
            let gold: Vec<String> = (0..gold_n).map(|i| format!("d{i}")).collect();
            let relabel = |v: &[String]| -> Vec<String> { v.iter().map(|x| format!("{x}_{shift}")).collect() };
            let mut prev = 0.0;
            for k in 1..=8 {
                let r = recall_at_k(&ranked, &gold, k).unwrap();
                let top: Vec<&String> = ranked.iter().take(k).collect();
                let brute = gold.iter().filter(|g| top.contains(g)).count() as f64 / gold.len() as f64;
                prop_assert_eq!(r, brute);
                prop_assert!(r >= prev);
                prop_assert_eq!(r, recall_at_k(&relabel(&ranked), &relabel(&gold), k).unwrap());
                prev = r;
            }
        }
    }
}
