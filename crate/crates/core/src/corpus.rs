//! Dialogue corpus model: loading, mechanical validation, summary statistics
//! and inter-annotator agreement.
//!
//! A dataset file holds one JSON object per line:
//!
//! ```text
//! {"dialogue_id": "d1",
//!  "utterances": [{"index": 0, "speaker": "A", "text": "..."}],
//!  "quadruples": [{"explicit": "...", "explicit_utt": 2, "implicit": null, "implicit_utt": null,
//!                  "opinion": "...", "opinion_utt": 4, "polarity": "NEG"}],
//!  "aspect_chains": [{"explicit": "...", "labels": [0, 0, 2, 0, 1]}]}
//! ```
//!
//! Span identity everywhere in this crate is exact text equality after NFC
//! normalization and trimming of surrounding whitespace (see [`normalize_span`]).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::evaluation::{match_sets, prf};

/// Canonical form used for every span comparison.
pub fn normalize_span(text: &str) -> String {
    text.nfc().collect::<String>().trim().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POS")]
    Positive,
    #[serde(rename = "NEU")]
    Neutral,
    #[serde(rename = "NEG")]
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "POS",
            Polarity::Neutral => "NEU",
            Polarity::Negative => "NEG",
        }
    }

    /// Parses the canonical tags plus common spellings (`positive`, `neg`,
    /// `积极`, ...). Case-insensitive.
    pub fn from_label(label: &str) -> Option<Polarity> {
        let label = label.trim().to_lowercase();
        match label.as_str() {
            "pos" | "positive" | "积极" | "正面" | "正向" => Some(Polarity::Positive),
            "neu" | "neutral" | "中性" | "中立" => Some(Polarity::Neutral),
            "neg" | "negative" | "消极" | "负面" | "负向" => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn flipped(self) -> Polarity {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
            Polarity::Neutral => Polarity::Neutral,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
}

/// An annotated (explicit aspect, implicit aspect, opinion, polarity) tuple
/// with the utterances each span was taken from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadruple {
    pub explicit: String,
    pub explicit_utt: usize,
    pub implicit: Option<String>,
    pub implicit_utt: Option<usize>,
    pub opinion: String,
    pub opinion_utt: usize,
    pub polarity: Polarity,
}

/// Per-utterance labels for one explicit aspect: 2 = explicit mention,
/// 1 = coreferent mention, 0 = absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectChain {
    pub explicit: String,
    pub labels: Vec<u8>,
}

impl AspectChain {
    /// Number of utterances in which the aspect surfaces.
    pub fn len(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1 || l == 2).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
    #[serde(default)]
    pub quadruples: Vec<Quadruple>,
    #[serde(default)]
    pub aspect_chains: Vec<AspectChain>,
}

impl Dialogue {
    pub fn chain(&self, explicit: &str) -> Option<&AspectChain> {
        let key = normalize_span(explicit);
        self.aspect_chains.iter().find(|c| normalize_span(&c.explicit) == key)
    }
}

/// A mechanical annotation rule that a dialogue breaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    NoUtterances,
    UtteranceIndex { position: usize, found: usize },
    EmptyUtterance { index: usize },
    AnchorOutOfRange { quadruple: usize, field: &'static str, index: usize },
    AnchorOrder { quadruple: usize, explicit_utt: usize, opinion_utt: usize },
    ImplicitPairing { quadruple: usize },
    ImplicitUtterance { quadruple: usize, implicit_utt: usize, opinion_utt: usize },
    SpanNotFound { quadruple: usize, field: &'static str, utterance: usize },
    ChainLength { chain: usize, expected: usize, found: usize },
    LabelRange { chain: usize, position: usize, value: u8 },
    ChainWithoutExplicit { chain: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoUtterances => write!(f, "dialogue has no utterances"),
            Violation::UtteranceIndex { position, found } => {
                write!(f, "utterance at position {position} carries index {found}")
            }
            Violation::EmptyUtterance { index } => write!(f, "utterance {index} is empty"),
            Violation::AnchorOutOfRange { quadruple, field, index } => {
                write!(f, "quadruple {quadruple}: {field} = {index} is not an utterance index")
            }
            Violation::AnchorOrder { quadruple, explicit_utt, opinion_utt } => {
                write!(f, "quadruple {quadruple}: explicit_utt {explicit_utt} comes after opinion_utt {opinion_utt}")
            }
            Violation::ImplicitPairing { quadruple } => {
                write!(f, "quadruple {quadruple}: implicit and implicit_utt must be both present or both null")
            }
            Violation::ImplicitUtterance { quadruple, implicit_utt, opinion_utt } => {
                write!(f, "quadruple {quadruple}: implicit_utt {implicit_utt} differs from opinion_utt {opinion_utt}")
            }
            Violation::SpanNotFound { quadruple, field, utterance } => {
                write!(f, "quadruple {quadruple}: {field} span does not occur in utterance {utterance}")
            }
            Violation::ChainLength { chain, expected, found } => {
                write!(f, "aspect chain {chain}: {found} labels for {expected} utterances")
            }
            Violation::LabelRange { chain, position, value } => {
                write!(f, "aspect chain {chain}: label {value} at position {position} is outside 0..=2")
            }
            Violation::ChainWithoutExplicit { chain } => {
                write!(f, "aspect chain {chain} has no explicit (2) label")
            }
        }
    }
}

/// Guidelines that need human judgment and are therefore never checked.
pub const SEMANTIC_GUIDELINES: &[&str] = &[
    "The explicit aspect is the most specific aspect entity mentioned at or before the opinion's utterance.",
    "An aspect without any opinion expression is not annotated.",
    "A pronoun or coreferent of an explicit aspect in the opinion's utterance is the implicit aspect.",
    "A more specific aspect appearing later does not turn an earlier mention into an implicit aspect.",
    "Weak or merely implied sentiment expressions are not annotated as opinions.",
];

/// Returns every mechanical rule the dialogue violates. Violations are data:
/// this never fails.
pub fn validate(dialogue: &Dialogue) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = dialogue.utterances.len();
    if n == 0 {
        out.push(Violation::NoUtterances);
    }
    for (position, u) in dialogue.utterances.iter().enumerate() {
        if u.index != position {
            out.push(Violation::UtteranceIndex { position, found: u.index });
        }
        if u.text.trim().is_empty() {
            out.push(Violation::EmptyUtterance { index: position });
        }
    }

    let contains = |utt: usize, span: &str| {
        let text: String = dialogue.utterances[utt].text.nfc().collect();
        text.contains(&normalize_span(span))
    };

    for (qi, q) in dialogue.quadruples.iter().enumerate() {
        let mut in_range = true;
        let mut check = |field: &'static str, index: usize, out: &mut Vec<Violation>| {
            if index >= n {
                out.push(Violation::AnchorOutOfRange { quadruple: qi, field, index });
                in_range = false;
            }
        };
        check("explicit_utt", q.explicit_utt, &mut out);
        check("opinion_utt", q.opinion_utt, &mut out);
        if let Some(i) = q.implicit_utt {
            check("implicit_utt", i, &mut out);
        }

        if q.explicit_utt > q.opinion_utt {
            out.push(Violation::AnchorOrder {
                quadruple: qi,
                explicit_utt: q.explicit_utt,
                opinion_utt: q.opinion_utt,
            });
        }
        match (&q.implicit, q.implicit_utt) {
            (Some(_), Some(i)) if i != q.opinion_utt => {
                out.push(Violation::ImplicitUtterance { quadruple: qi, implicit_utt: i, opinion_utt: q.opinion_utt })
            }
            (Some(_), None) | (None, Some(_)) => out.push(Violation::ImplicitPairing { quadruple: qi }),
            _ => {}
        }
        if in_range {
            if q.opinion.trim().is_empty() || !contains(q.opinion_utt, &q.opinion) {
                out.push(Violation::SpanNotFound { quadruple: qi, field: "opinion", utterance: q.opinion_utt });
            }
            if q.explicit.trim().is_empty() || !contains(q.explicit_utt, &q.explicit) {
                out.push(Violation::SpanNotFound { quadruple: qi, field: "explicit", utterance: q.explicit_utt });
            }
        }
    }

    for (ci, chain) in dialogue.aspect_chains.iter().enumerate() {
        if chain.labels.len() != n {
            out.push(Violation::ChainLength { chain: ci, expected: n, found: chain.labels.len() });
        }
        for (position, &value) in chain.labels.iter().enumerate() {
            if value > 2 {
                out.push(Violation::LabelRange { chain: ci, position, value });
            }
        }
        if !chain.labels.contains(&2) {
            out.push(Violation::ChainWithoutExplicit { chain: ci });
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record at `{field}`: {message}")]
    Malformed { line: usize, field: String, message: String },
    #[error("dialogue {dialogue_id}: {violation}")]
    Invalid { dialogue_id: String, violation: Violation },
    #[error("dialogue_id {0} appears more than once")]
    DuplicateId(String),
    #[error("annotation sets cover different dialogues (only in first: {only_a:?}, only in second: {only_b:?})")]
    MismatchedIds { only_a: Vec<String>, only_b: Vec<String> },
}

/// Parses one JSONL record, naming the offending field on failure.
pub fn parse_record<T: serde::de::DeserializeOwned>(line: &str, line_no: usize) -> Result<T, CorpusError> {
    let mut de = serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let field = err.path().to_string();
        CorpusError::Malformed { line: line_no, field, message: err.into_inner().to_string() }
    })
}

/// Parses every non-blank line of a JSONL file into `T`, preserving order.
pub fn read_jsonl<T>(path: &Path) -> Result<Vec<T>, CorpusError>
where
    T: serde::de::DeserializeOwned + Send,
{
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_jsonl(&content)
}

pub fn parse_jsonl<T>(content: &str) -> Result<Vec<T>, CorpusError>
where
    T: serde::de::DeserializeOwned + Send,
{
    let lines: Vec<(usize, &str)> =
        content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l)).collect();
    lines.par_iter().map(|&(no, line)| parse_record(line, no)).collect()
}

/// Reads dialogues without checking annotation rules.
pub fn read_dialogues(path: &Path) -> Result<Vec<Dialogue>, CorpusError> {
    read_jsonl(path)
}

/// Loads a dataset and rejects it unless every dialogue passes [`validate`]
/// and dialogue ids are unique.
pub fn load_dataset(path: &Path) -> Result<Vec<Dialogue>, CorpusError> {
    let dialogues = read_dialogues(path)?;
    check_dataset(&dialogues)?;
    Ok(dialogues)
}

pub fn check_dataset(dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for d in dialogues {
        if !seen.insert(d.dialogue_id.as_str()) {
            return Err(CorpusError::DuplicateId(d.dialogue_id.clone()));
        }
        if let Some(violation) = validate(d).into_iter().next() {
            return Err(CorpusError::Invalid { dialogue_id: d.dialogue_id.clone(), violation });
        }
    }
    Ok(())
}

/// Serializes dialogues back to the line-delimited wire format.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_utterances: usize,
    pub n_dialogues: usize,
    /// Explicit aspect entities, one per aspect chain.
    pub n_explicit: usize,
    /// Coreferent mentions (label 1) across all chains.
    pub n_implicit: usize,
    pub chain_max: usize,
    pub chain_avg: f64,
    pub n_pos: usize,
    pub n_neu: usize,
    pub n_neg: usize,
    pub n_total: usize,
}

pub fn stats(dialogues: &[Dialogue]) -> DatasetStats {
    let mut s = DatasetStats { n_dialogues: dialogues.len(), ..Default::default() };
    let mut chain_total = 0usize;
    for d in dialogues {
        s.n_utterances += d.utterances.len();
        for chain in &d.aspect_chains {
            s.n_explicit += 1;
            s.n_implicit += chain.labels.iter().filter(|&&l| l == 1).count();
            let len = chain.len();
            chain_total += len;
            s.chain_max = s.chain_max.max(len);
        }
        for q in &d.quadruples {
            match q.polarity {
                Polarity::Positive => s.n_pos += 1,
                Polarity::Neutral => s.n_neu += 1,
                Polarity::Negative => s.n_neg += 1,
            }
        }
    }
    s.n_total = s.n_pos + s.n_neu + s.n_neg;
    if s.n_explicit > 0 {
        s.chain_avg = chain_total as f64 / s.n_explicit as f64;
    }
    s
}

impl DatasetStats {
    /// Plain-text table with the usual corpus-statistics columns.
    pub fn to_table(&self) -> String {
        let header =
            ["#Utterances", "#Dialogues", "#Explicit", "#Implicit", "#Max", "#Avg", "#POS", "#NEU", "#NEG", "#Total"];
        let row = [
            self.n_utterances.to_string(),
            self.n_dialogues.to_string(),
            self.n_explicit.to_string(),
            self.n_implicit.to_string(),
            self.chain_max.to_string(),
            format!("{:.2}", self.chain_avg),
            self.n_pos.to_string(),
            self.n_neu.to_string(),
            self.n_neg.to_string(),
            self.n_total.to_string(),
        ];
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &mut dyn Iterator<Item = &str>| {
            cells.zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        format!("{}\n{}\n", line(&mut header.iter().copied()), line(&mut row.iter().map(String::as_str)))
    }
}

/// Identity key of a quadruple for matching: normalized spans and polarity.
pub type QuadKey = (String, Option<String>, String, Polarity);

pub fn quad_key(q: &Quadruple) -> QuadKey {
    (normalize_span(&q.explicit), q.implicit.as_deref().map(normalize_span), normalize_span(&q.opinion), q.polarity)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Agreement {
    pub f1: f64,
    pub accuracy: f64,
    pub n_matched: usize,
    pub n_first: usize,
    pub n_second: usize,
}

/// Matching F1 (first annotator as gold) and set-overlap accuracy between two
/// annotations of the same dialogues, both as percentages.
pub fn agreement(a: &[Dialogue], b: &[Dialogue]) -> Result<Agreement, CorpusError> {
    let index = |ds: &[Dialogue]| -> Result<HashMap<String, Vec<QuadKey>>, CorpusError> {
        let mut map = HashMap::new();
        for d in ds {
            let keys = d.quadruples.iter().map(quad_key).collect();
            if map.insert(d.dialogue_id.clone(), keys).is_some() {
                return Err(CorpusError::DuplicateId(d.dialogue_id.clone()));
            }
        }
        Ok(map)
    };
    let a = index(a)?;
    let b = index(b)?;
    let ids_a: BTreeSet<&String> = a.keys().collect();
    let ids_b: BTreeSet<&String> = b.keys().collect();
    if ids_a != ids_b {
        return Err(CorpusError::MismatchedIds {
            only_a: ids_a.difference(&ids_b).map(|s| s.to_string()).collect(),
            only_b: ids_b.difference(&ids_a).map(|s| s.to_string()).collect(),
        });
    }

    let (mut matched, mut n_a, mut n_b) = (0, 0, 0);
    for (id, gold) in &a {
        let (c, p, g) = match_sets(gold, &b[id]);
        matched += c;
        n_b += p;
        n_a += g;
    }
    let union = n_a + n_b - matched;
    if union == 0 {
        return Ok(Agreement { f1: 100.0, accuracy: 100.0, n_matched: 0, n_first: 0, n_second: 0 });
    }
    let score = prf(matched, n_b, n_a).expect("matched counts are bounded");
    Ok(Agreement {
        f1: score.f1 * 100.0,
        accuracy: matched as f64 / union as f64 * 100.0,
        n_matched: matched,
        n_first: n_a,
        n_second: n_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn worked_dialogue_is_clean() {
        assert_eq!(validate(&fixtures::worked_dialogue()), vec![]);
    }

    #[test]
    fn explicit_after_opinion_is_one_violation() {
        let mut d = fixtures::worked_dialogue();
        d.quadruples[0].explicit_utt = 4;
        d.quadruples[0].opinion_utt = 2;
        d.quadruples[0].implicit = None;
        d.quadruples[0].implicit_utt = None;
        d.quadruples[0].opinion = "Wen Chaorong".into();
        d.quadruples[0].explicit = "this movie".into();
        assert_eq!(validate(&d), vec![Violation::AnchorOrder { quadruple: 0, explicit_utt: 4, opinion_utt: 2 }]);
    }

    #[test]
    fn short_chain_is_one_violation() {
        let mut d = fixtures::worked_dialogue();
        d.aspect_chains[0].labels.pop();
        assert_eq!(validate(&d), vec![Violation::ChainLength { chain: 0, expected: 5, found: 4 }]);
    }

    #[test]
    fn each_mutation_class_is_caught() {
        type Mutation = fn(&mut Dialogue);
        type Check = fn(&Violation) -> bool;
        let cases: Vec<(Mutation, Check)> = vec![
            (|d| d.utterances[1].index = 7, |v| matches!(v, Violation::UtteranceIndex { .. })),
            (|d| d.utterances[3].text = "  ".into(), |v| matches!(v, Violation::EmptyUtterance { .. })),
            (|d| d.quadruples[0].opinion_utt = 9, |v| matches!(v, Violation::AnchorOutOfRange { .. })),
            (|d| d.quadruples[0].implicit_utt = None, |v| matches!(v, Violation::ImplicitPairing { .. })),
            (|d| d.quadruples[0].implicit_utt = Some(3), |v| matches!(v, Violation::ImplicitUtterance { .. })),
            (
                |d| d.quadruples[0].opinion = "great fun".into(),
                |v| matches!(v, Violation::SpanNotFound { field: "opinion", .. }),
            ),
            (
                |d| d.quadruples[0].explicit = "Zhang".into(),
                |v| matches!(v, Violation::SpanNotFound { field: "explicit", .. }),
            ),
            (|d| d.aspect_chains[1].labels[0] = 3, |v| matches!(v, Violation::LabelRange { .. })),
            (
                |d| d.aspect_chains[0].labels = vec![0, 0, 1, 0, 1],
                |v| matches!(v, Violation::ChainWithoutExplicit { .. }),
            ),
            (|d| d.utterances.clear(), |v| matches!(v, Violation::NoUtterances)),
        ];
        for (i, (mutate, expected)) in cases.into_iter().enumerate() {
            let mut d = fixtures::worked_dialogue();
            mutate(&mut d);
            let found = validate(&d);
            assert!(found.iter().any(expected), "mutation {i} not flagged: {found:?}");
        }
    }

    #[test]
    fn polarity_outside_tag_set_names_field() {
        let line = r#"{"dialogue_id":"x","utterances":[{"index":0,"speaker":"A","text":"good"}],"quadruples":[{"explicit":"good","explicit_utt":0,"implicit":null,"implicit_utt":null,"opinion":"good","opinion_utt":0,"polarity":"GOOD"}],"aspect_chains":[]}"#;
        let err = parse_jsonl::<Dialogue>(line).unwrap_err();
        match err {
            CorpusError::Malformed { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "quadruples[0].polarity");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_content_loads_nothing() {
        assert!(parse_jsonl::<Dialogue>("").unwrap().is_empty());
        assert!(parse_jsonl::<Dialogue>("\n\n").unwrap().is_empty());
    }

    #[test]
    fn hand_counted_stats() {
        let d = Dialogue {
            dialogue_id: "s".into(),
            utterances: ["I saw Up", "ok", "it was lovely", "bye"]
                .iter()
                .enumerate()
                .map(|(i, t)| Utterance { index: i, speaker: "A".into(), text: t.to_string() })
                .collect(),
            quadruples: vec![Quadruple {
                explicit: "Up".into(),
                explicit_utt: 0,
                implicit: Some("it".into()),
                implicit_utt: Some(2),
                opinion: "lovely".into(),
                opinion_utt: 2,
                polarity: Polarity::Positive,
            }],
            aspect_chains: vec![AspectChain { explicit: "Up".into(), labels: vec![2, 0, 1, 0] }],
        };
        assert!(validate(&d).is_empty());
        let s = stats(&[d]);
        assert_eq!(s.n_explicit, 1);
        assert_eq!(s.n_implicit, 1);
        assert_eq!(s.chain_max, 2);
        assert_eq!(format!("{:.2}", s.chain_avg), "2.00");
        assert_eq!((s.n_pos, s.n_total, s.n_utterances, s.n_dialogues), (1, 1, 4, 1));
    }

    #[test]
    fn empty_dataset_stats_are_zero() {
        assert_eq!(stats(&[]), DatasetStats::default());
    }

    fn with_quads(id: &str, quads: Vec<Quadruple>) -> Dialogue {
        Dialogue {
            dialogue_id: id.into(),
            utterances: vec![Utterance { index: 0, speaker: "A".into(), text: "x".into() }],
            quadruples: quads,
            aspect_chains: vec![],
        }
    }

    fn q(e: &str, o: &str, p: Polarity) -> Quadruple {
        Quadruple {
            explicit: e.into(),
            explicit_utt: 0,
            implicit: None,
            implicit_utt: None,
            opinion: o.into(),
            opinion_utt: 0,
            polarity: p,
        }
    }

    #[test]
    fn agreement_arithmetic() {
        use Polarity::*;
        let a = vec![with_quads(
            "d",
            vec![q("a", "1", Positive), q("b", "2", Negative), q("c", "3", Positive), q("d", "4", Neutral)],
        )];
        let b = vec![with_quads("d", vec![q("a", "1", Positive), q("b", "2", Negative), q("z", "9", Positive)])];
        let ag = agreement(&a, &b).unwrap();
        assert!((ag.f1 - 57.142857142857146).abs() < 1e-9);
        assert!((ag.accuracy - 40.0).abs() < 1e-12);
        assert_eq!(agreement(&b, &a).unwrap().f1, ag.f1);

        let same = agreement(&a, &a).unwrap();
        assert_eq!((same.f1, same.accuracy), (100.0, 100.0));

        let disjoint = vec![with_quads("d", vec![q("q", "q", Neutral)])];
        let none = agreement(&a, &disjoint).unwrap();
        assert_eq!((none.f1, none.accuracy), (0.0, 0.0));
    }

    #[test]
    fn agreement_rejects_mismatched_ids() {
        let a = vec![with_quads("d1", vec![])];
        let b = vec![with_quads("d2", vec![])];
        assert!(matches!(agreement(&a, &b), Err(CorpusError::MismatchedIds { .. })));
    }
}
