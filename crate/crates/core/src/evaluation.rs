//! Scoring of extraction and aspect-chain predictions.
//!
//! Every cell of the report is a micro F1 over per-dialogue exact matches:
//! items are projected out of each quadruple, matched within their dialogue
//! as multisets, and the counts are pooled over the corpus.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::{normalize_span, Dialogue, Polarity};
use crate::parsing::{AcrPrediction, AsuPrediction, QuadrupleFragment};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("invalid counts: correct {n_correct}, predicted {n_pred}, gold {n_gold}")]
    InvalidCounts { n_correct: usize, n_pred: usize, n_gold: usize },
    #[error("prediction for unknown dialogue `{0}`")]
    UnknownDialogue(String),
    #[error("dialogue `{0}` has more than one prediction record")]
    DuplicatePrediction(String),
    #[error("aspect chain ({dialogue_id}, {explicit}) is not in the gold data")]
    UnknownChain { dialogue_id: String, explicit: String },
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired samples, got {0}")]
    TooFewSamples(usize),
    #[error("differences have zero variance (mean difference {mean_difference})")]
    DegenerateVariance { mean_difference: f64 },
}

/// Size of the maximum one-to-one exact matching between two multisets,
/// returned as `(n_correct, n_pred, n_gold)`.
pub fn match_sets<T: Eq + Hash>(gold: &[T], pred: &[T]) -> (usize, usize, usize) {
    let mut counts: HashMap<&T, usize> = HashMap::with_capacity(gold.len());
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut correct = 0;
    for p in pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                correct += 1;
            }
        }
    }
    (correct, pred.len(), gold.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_correct: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

pub fn prf(n_correct: usize, n_pred: usize, n_gold: usize) -> Result<PrfScore, EvalError> {
    if n_correct > n_pred.min(n_gold) {
        return Err(EvalError::InvalidCounts { n_correct, n_pred, n_gold });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(n_correct, n_pred);
    let recall = ratio(n_correct, n_gold);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(PrfScore { precision, recall, f1, n_correct, n_pred, n_gold })
}

impl PrfScore {
    pub fn from_counts((n_correct, n_pred, n_gold): (usize, usize, usize)) -> Self {
        prf(n_correct, n_pred, n_gold).expect("counts come from a matching")
    }
}

// Serialized with both denominator conventions: `precision`/`recall` use
// predicted/gold counts, `swapped` divides by gold/predicted instead.
impl Serialize for PrfScore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Swapped {
            precision: f64,
            recall: f64,
        }
        #[derive(Serialize)]
        struct Cell {
            precision: f64,
            recall: f64,
            f1: f64,
            n_correct: usize,
            n_pred: usize,
            n_gold: usize,
            swapped: Swapped,
        }
        Cell {
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
            n_correct: self.n_correct,
            n_pred: self.n_pred,
            n_gold: self.n_gold,
            swapped: Swapped { precision: self.recall, recall: self.precision },
        }
        .serialize(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SingleScores {
    pub explicit: PrfScore,
    pub implicit: PrfScore,
    pub opinion: PrfScore,
    /// Polarity items carry their opinion span.
    pub polarity: PrfScore,
    /// Unweighted mean F1 over the polarity classes present in gold or
    /// predictions.
    pub polarity_macro_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairScores {
    pub explicit_opinion: PrfScore,
    pub explicit_implicit: PrfScore,
    pub implicit_opinion: PrfScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub single: SingleScores,
    pub pair: PairScores,
    pub quadruple: PrfScore,
}

type Span = String;
type Implicit = Option<String>;

/// Normalized projections of one quadruple, one item per report cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Projections {
    pub explicit: Span,
    pub implicit: Implicit,
    pub opinion: Span,
    pub polarity: (Span, Polarity),
    pub explicit_opinion: (Span, Span),
    pub explicit_implicit: (Span, Implicit),
    pub implicit_opinion: (Implicit, Span),
    pub quadruple: (Span, Implicit, Span, Polarity),
}

impl Projections {
    pub fn of(q: &QuadrupleFragment) -> Self {
        let e = normalize_span(&q.explicit);
        let i = q.implicit.as_deref().map(normalize_span);
        let o = normalize_span(&q.opinion);
        Projections {
            explicit: e.clone(),
            implicit: i.clone(),
            opinion: o.clone(),
            polarity: (o.clone(), q.polarity),
            explicit_opinion: (e.clone(), o.clone()),
            explicit_implicit: (e.clone(), i.clone()),
            implicit_opinion: (i.clone(), o.clone()),
            quadruple: (e, i, o, q.polarity),
        }
    }
}

/// Raw per-cell counts; additive across dialogues.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCounts {
    pub explicit: (usize, usize, usize),
    pub implicit: (usize, usize, usize),
    pub opinion: (usize, usize, usize),
    pub polarity: (usize, usize, usize),
    pub polarity_by_class: [(usize, usize, usize); 3],
    pub explicit_opinion: (usize, usize, usize),
    pub explicit_implicit: (usize, usize, usize),
    pub implicit_opinion: (usize, usize, usize),
    pub quadruple: (usize, usize, usize),
}

fn add(a: (usize, usize, usize), b: (usize, usize, usize)) -> (usize, usize, usize) {
    (a.0 + b.0, a.1 + b.1, a.2 + b.2)
}

impl CellCounts {
    fn merge(mut self, o: CellCounts) -> CellCounts {
        self.explicit = add(self.explicit, o.explicit);
        self.implicit = add(self.implicit, o.implicit);
        self.opinion = add(self.opinion, o.opinion);
        self.polarity = add(self.polarity, o.polarity);
        for k in 0..3 {
            self.polarity_by_class[k] = add(self.polarity_by_class[k], o.polarity_by_class[k]);
        }
        self.explicit_opinion = add(self.explicit_opinion, o.explicit_opinion);
        self.explicit_implicit = add(self.explicit_implicit, o.explicit_implicit);
        self.implicit_opinion = add(self.implicit_opinion, o.implicit_opinion);
        self.quadruple = add(self.quadruple, o.quadruple);
        self
    }

    pub fn report(&self) -> EvalReport {
        let s = PrfScore::from_counts;
        let classes: Vec<f64> = self.polarity_by_class.iter().filter(|c| c.1 + c.2 > 0).map(|&c| s(c).f1).collect();
        let polarity_macro_f1 =
            if classes.is_empty() { 0.0 } else { classes.iter().sum::<f64>() / classes.len() as f64 };
        EvalReport {
            single: SingleScores {
                explicit: s(self.explicit),
                implicit: s(self.implicit),
                opinion: s(self.opinion),
                polarity: s(self.polarity),
                polarity_macro_f1,
            },
            pair: PairScores {
                explicit_opinion: s(self.explicit_opinion),
                explicit_implicit: s(self.explicit_implicit),
                implicit_opinion: s(self.implicit_opinion),
            },
            quadruple: s(self.quadruple),
        }
    }
}

/// Counts for one dialogue's gold and predicted quadruples.
pub fn dialogue_counts(gold: &[QuadrupleFragment], pred: &[QuadrupleFragment]) -> CellCounts {
    let g: Vec<Projections> = gold.iter().map(Projections::of).collect();
    let p: Vec<Projections> = pred.iter().map(Projections::of).collect();
    fn cell<T: Eq + Hash + Clone>(
        g: &[Projections],
        p: &[Projections],
        f: impl Fn(&Projections) -> T,
    ) -> (usize, usize, usize) {
        let gi: Vec<T> = g.iter().map(&f).collect();
        let pi: Vec<T> = p.iter().map(&f).collect();
        match_sets(&gi, &pi)
    }
    let mut by_class = [(0, 0, 0); 3];
    for (k, class) in Polarity::ALL.iter().enumerate() {
        let gi: Vec<_> = g.iter().filter(|x| x.polarity.1 == *class).map(|x| &x.polarity).collect();
        let pi: Vec<_> = p.iter().filter(|x| x.polarity.1 == *class).map(|x| &x.polarity).collect();
        by_class[k] = match_sets(&gi, &pi);
    }
    CellCounts {
        explicit: cell(&g, &p, |x| x.explicit.clone()),
        implicit: cell(&g, &p, |x| x.implicit.clone()),
        opinion: cell(&g, &p, |x| x.opinion.clone()),
        polarity: cell(&g, &p, |x| x.polarity.clone()),
        polarity_by_class: by_class,
        explicit_opinion: cell(&g, &p, |x| x.explicit_opinion.clone()),
        explicit_implicit: cell(&g, &p, |x| x.explicit_implicit.clone()),
        implicit_opinion: cell(&g, &p, |x| x.implicit_opinion.clone()),
        quadruple: cell(&g, &p, |x| x.quadruple.clone()),
    }
}

/// Scores predictions against gold dialogues. Gold dialogues without a
/// prediction record count as predicting nothing.
pub fn evaluate(gold: &[Dialogue], pred: &[AsuPrediction]) -> Result<EvalReport, EvalError> {
    let known: HashMap<&str, ()> = gold.iter().map(|d| (d.dialogue_id.as_str(), ())).collect();
    let mut by_id: HashMap<&str, &[QuadrupleFragment]> = HashMap::new();
    for p in pred {
        if !known.contains_key(p.dialogue_id.as_str()) {
            return Err(EvalError::UnknownDialogue(p.dialogue_id.clone()));
        }
        if by_id.insert(p.dialogue_id.as_str(), &p.quadruples).is_some() {
            return Err(EvalError::DuplicatePrediction(p.dialogue_id.clone()));
        }
    }
    let counts = gold
        .par_iter()
        .map(|d| {
            let g: Vec<QuadrupleFragment> = d.quadruples.iter().map(QuadrupleFragment::from).collect();
            let p = by_id.get(d.dialogue_id.as_str()).copied().unwrap_or(&[]);
            dialogue_counts(&g, p)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(CellCounts::default(), CellCounts::merge);
    Ok(counts.report())
}

impl EvalReport {
    /// Text table in the usual Single / Pair / Quadruple column order, F1 x 100.
    pub fn to_table(&self) -> String {
        let cols = [
            ("Explicit", self.single.explicit.f1),
            ("Implicit", self.single.implicit.f1),
            ("Opinion", self.single.opinion.f1),
            ("Polarity", self.single.polarity.f1),
            ("E-O", self.pair.explicit_opinion.f1),
            ("E-I", self.pair.explicit_implicit.f1),
            ("I-O", self.pair.implicit_opinion.f1),
            ("Extraction", self.quadruple.f1),
        ];
        let mut out = String::new();
        out.push_str(&format!("{:<44}{:<33}{}\n", "Single", "Pair", "Quadruple"));
        for (name, _) in &cols {
            out.push_str(&format!("{name:>11}"));
        }
        out.push('\n');
        for (_, f1) in &cols {
            out.push_str(&format!("{:>11.2}", f1 * 100.0));
        }
        out.push('\n');
        out.push_str(&format!("Polarity macro-F1 over classes: {:.2}\n", self.single.polarity_macro_f1 * 100.0));
        out
    }
}

/// Non-zero labels of a chain as `(utterance index, label)` items.
pub fn chain_items(labels: &[u8]) -> Vec<(usize, u8)> {
    labels.iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, &l)| (i, l)).collect()
}

/// Aspect-chain F1 over non-zero labels. Gold chains without a prediction
/// count as all-zero predictions.
pub fn evaluate_acr(gold: &[Dialogue], pred: &[AcrPrediction]) -> Result<PrfScore, EvalError> {
    let mut gold_chains: BTreeMap<(String, String), &[u8]> = BTreeMap::new();
    for d in gold {
        for c in &d.aspect_chains {
            gold_chains.insert((d.dialogue_id.clone(), normalize_span(&c.explicit)), &c.labels);
        }
    }
    let mut pred_chains: HashMap<(String, String), &[u8]> = HashMap::new();
    for p in pred {
        let key = (p.dialogue_id.clone(), normalize_span(&p.explicit));
        if !gold_chains.contains_key(&key) {
            return Err(EvalError::UnknownChain { dialogue_id: p.dialogue_id.clone(), explicit: p.explicit.clone() });
        }
        if pred_chains.insert(key, &p.labels).is_some() {
            return Err(EvalError::DuplicatePrediction(format!("{} / {}", p.dialogue_id, p.explicit)));
        }
    }
    let mut total = (0, 0, 0);
    for (key, labels) in &gold_chains {
        let predicted = pred_chains.get(key).copied().unwrap_or(&[]);
        total = add(total, match_sets(&chain_items(labels), &chain_items(predicted)));
    }
    Ok(PrfScore::from_counts(total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTTest {
    pub t_statistic: f64,
    pub p_value: f64,
    pub degrees_of_freedom: f64,
    pub mean_difference: f64,
}

/// Two-sided paired t-test on per-dialogue scores.
pub fn significance(a: &[f64], b: &[f64]) -> Result<PairedTTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(EvalError::DegenerateVariance { mean_difference: mean });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(PairedTTest { t_statistic: t, p_value: p, degrees_of_freedom: df, mean_difference: mean })
}

impl fmt::Display for PairedTTest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t = {:.6}, df = {}, p = {:.6}, mean difference = {:.6}",
            self.t_statistic, self.degrees_of_freedom, self.p_value, self.mean_difference
        )
    }
}

/// Per-dialogue quadruple F1, the usual input to [`significance`].
pub fn per_dialogue_f1(gold: &[Dialogue], pred: &[AsuPrediction]) -> Result<Vec<f64>, EvalError> {
    let mut by_id: HashMap<&str, &[QuadrupleFragment]> = HashMap::new();
    for p in pred {
        if !gold.iter().any(|d| d.dialogue_id == p.dialogue_id) {
            return Err(EvalError::UnknownDialogue(p.dialogue_id.clone()));
        }
        by_id.insert(p.dialogue_id.as_str(), &p.quadruples);
    }
    Ok(gold
        .iter()
        .map(|d| {
            let g: Vec<QuadrupleFragment> = d.quadruples.iter().map(QuadrupleFragment::from).collect();
            let p = by_id.get(d.dialogue_id.as_str()).copied().unwrap_or(&[]);
            PrfScore::from_counts(dialogue_counts(&g, p).quadruple).f1
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_dialogue;

    #[test]
    fn identical_multisets_match_fully() {
        let items = ["a", "a", "b"];
        assert_eq!(match_sets(&items, &items), (3, 3, 3));
    }

    #[test]
    fn partial_overlap_counts() {
        assert_eq!(match_sets(&["a", "b", "c", "d"], &["a", "c", "x"]), (2, 3, 4));
        assert_eq!(match_sets(&["a", "a"], &["a", "a", "a"]), (2, 3, 2));
        assert_eq!(match_sets::<&str>(&["a", "b"], &[]), (0, 0, 2));
    }

    #[test]
    fn prf_values() {
        let s = prf(2, 3, 4).unwrap();
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 0.5);
        assert!((s.f1 - 4.0 / 7.0).abs() < 1e-12);
        let z = prf(0, 0, 5).unwrap();
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
        let one = prf(5, 5, 5).unwrap();
        assert_eq!((one.precision, one.recall, one.f1), (1.0, 1.0, 1.0));
        assert!(prf(4, 3, 5).is_err());
    }

    fn gold_as_pred(d: &Dialogue) -> AsuPrediction {
        AsuPrediction {
            dialogue_id: d.dialogue_id.clone(),
            quadruples: d.quadruples.iter().map(QuadrupleFragment::from).collect(),
        }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let d = worked_dialogue();
        let r = evaluate(std::slice::from_ref(&d), &[gold_as_pred(&d)]).unwrap();
        for cell in [
            r.single.explicit,
            r.single.implicit,
            r.single.opinion,
            r.single.polarity,
            r.pair.explicit_opinion,
            r.pair.explicit_implicit,
            r.pair.implicit_opinion,
            r.quadruple,
        ] {
            assert_eq!(cell.f1, 1.0);
        }
        assert_eq!(r.single.polarity_macro_f1, 1.0);
    }

    #[test]
    fn flipped_polarities_only_hurt_polarity_cells() {
        let d = worked_dialogue();
        let mut p = gold_as_pred(&d);
        for q in &mut p.quadruples {
            q.polarity = q.polarity.flipped();
        }
        let r = evaluate(&[d], &[p]).unwrap();
        assert_eq!(r.single.explicit.f1, 1.0);
        assert_eq!(r.single.implicit.f1, 1.0);
        assert_eq!(r.single.opinion.f1, 1.0);
        assert_eq!(r.pair.explicit_opinion.f1, 1.0);
        // every polarity is flipped on a 3-quadruple fixture
        assert_eq!(r.single.polarity.n_correct, 0);
        assert_eq!(r.quadruple.n_correct, 0);
        assert!(r.quadruple.f1 < 1.0 && r.single.polarity.f1 < 1.0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let d = worked_dialogue();
        let r = evaluate(&[d], &[]).unwrap();
        assert_eq!(r.quadruple.f1, 0.0);
        assert_eq!(r.single.explicit.f1, 0.0);
        assert_eq!(r.quadruple.n_gold, 3);
    }

    #[test]
    fn unknown_dialogue_is_rejected() {
        let p = AsuPrediction { dialogue_id: "nope".into(), quadruples: vec![] };
        assert_eq!(evaluate(&[worked_dialogue()], &[p]), Err(EvalError::UnknownDialogue("nope".into())));
    }

    fn acr(labels: Vec<u8>) -> AcrPrediction {
        AcrPrediction { dialogue_id: "c".into(), explicit: "X".into(), labels }
    }

    fn chain_dialogue(labels: Vec<u8>) -> Dialogue {
        let mut d = worked_dialogue();
        d.dialogue_id = "c".into();
        d.aspect_chains = vec![crate::corpus::AspectChain { explicit: "X".into(), labels }];
        d
    }

    #[test]
    fn acr_scores() {
        let g = chain_dialogue(vec![2, 0, 1, 0]);
        assert_eq!(evaluate_acr(std::slice::from_ref(&g), &[acr(vec![2, 0, 1, 0])]).unwrap().f1, 1.0);
        let s = evaluate_acr(std::slice::from_ref(&g), &[acr(vec![2, 0, 0, 0])]).unwrap();
        assert_eq!((s.n_correct, s.n_pred, s.n_gold), (1, 1, 2));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(evaluate_acr(std::slice::from_ref(&g), &[acr(vec![0, 0, 0, 0])]).unwrap().f1, 0.0);
        let mut stray = acr(vec![2, 0, 0, 0]);
        stray.explicit = "Y".into();
        assert!(matches!(evaluate_acr(&[g], &[stray]), Err(EvalError::UnknownChain { .. })));
    }

    #[test]
    fn paired_t_test_matches_reference() {
        // reference values from scipy.stats.ttest_rel
        let t = significance(&[0.5, 0.6, 0.7, 0.8], &[0.4, 0.5, 0.65, 0.7]).unwrap();
        assert!((t.t_statistic - 6.9999999999999885).abs() < 1e-9);
        assert!((t.p_value - 0.005986255697707127).abs() < 1e-9);
        let a = [0.61, 0.72, 0.55, 0.8, 0.67, 0.59, 0.74, 0.7];
        let b = [0.58, 0.7, 0.57, 0.71, 0.6, 0.6, 0.69, 0.66];
        let t = significance(&a, &b).unwrap();
        assert!((t.t_statistic - 2.5528888301902914).abs() < 1e-9);
        assert!((t.p_value - 0.03794328796316358).abs() < 1e-9);
        assert!((significance(&b, &a).unwrap().t_statistic + t.t_statistic).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_invalid_samples() {
        let a = [0.3, 0.5, 0.9];
        assert!(matches!(significance(&a, &a), Err(EvalError::DegenerateVariance { .. })));
        let b: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let shifted: Vec<f64> = b.iter().map(|x| x + 0.1).collect();
        assert!(matches!(significance(&shifted, &b), Err(EvalError::DegenerateVariance { .. })));
        assert_eq!(significance(&[1.0, 2.0], &[1.0]), Err(EvalError::LengthMismatch(2, 1)));
        assert_eq!(significance(&[1.0], &[1.0]), Err(EvalError::TooFewSamples(1)));
    }
}
