//! Conversion between model text and structured annotations.
//!
//! Extraction outputs follow a fixed four-sentence template per quadruple:
//!
//! ```text
//! The opinion is "very good". The sentiment tendency is "POS". The opinion refers to the
//! explicit aspect "That River". The pronoun of "That River" is "the movie".
//! ```
//!
//! Several quadruples are emitted as consecutive blocks. The parser is
//! anchored on this template and tolerates quote variants, extra whitespace,
//! sentence reordering within a block and polarity synonyms. Anything it
//! cannot attribute to a complete block is kept as residue.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Polarity, Quadruple};

/// A quadruple as it appears in model output or prediction files: spans and
/// polarity, without utterance anchors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuadrupleFragment {
    pub explicit: String,
    pub implicit: Option<String>,
    pub opinion: String,
    pub polarity: Polarity,
}

impl From<&Quadruple> for QuadrupleFragment {
    fn from(q: &Quadruple) -> Self {
        QuadrupleFragment {
            explicit: q.explicit.clone(),
            implicit: q.implicit.clone(),
            opinion: q.opinion.clone(),
            polarity: q.polarity,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAsu {
    pub quadruples: Vec<QuadrupleFragment>,
    pub residue: Vec<String>,
}

impl ParsedAsu {
    pub fn is_complete(&self) -> bool {
        self.residue.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAcr {
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AcrParseError {
    #[error("found {found} labels, expected {expected}")]
    LengthMismatch { found: usize, expected: usize },
    #[error("no 0/1/2 label sequence in output")]
    NoSequence,
    #[error("utterance count must be at least 1")]
    NoUtterances,
}

/// One record of an extraction predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsuPrediction {
    pub dialogue_id: String,
    #[serde(default)]
    pub quadruples: Vec<QuadrupleFragment>,
}

/// One record of an aspect-chain predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcrPrediction {
    pub dialogue_id: String,
    pub explicit: String,
    pub labels: Vec<u8>,
}

pub fn render_asu_output(q: &QuadrupleFragment) -> String {
    let implicit = q.implicit.as_deref().unwrap_or("null");
    format!(
        "The opinion is \"{o}\". The sentiment tendency is \"{p}\". The opinion refers to the explicit aspect \"{e}\". The pronoun of \"{e}\" is \"{r}\".",
        o = q.opinion,
        p = q.polarity,
        e = q.explicit,
        r = implicit,
    )
}

/// Supervised target for a whole dialogue: one block per quadruple.
pub fn render_asu_target<'a, I>(quadruples: I) -> String
where
    I: IntoIterator<Item = &'a Quadruple>,
{
    quadruples.into_iter().map(|q| render_asu_output(&q.into())).collect::<Vec<_>>().join("\n")
}

/// Like [`render_asu_target`], for fragments that carry no anchors.
pub fn render_fragments(fragments: &[QuadrupleFragment]) -> String {
    fragments.iter().map(render_asu_output).collect::<Vec<_>>().join("\n")
}

pub fn render_acr_output(labels: &[u8]) -> String {
    let items: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn template_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r#"(?i)(?:"#,
            r#"the\s+opinion\s+is\s*"(?P<o>[^"]*)""#,
            r#"|the\s+sentiment\s+(?:tendency|polarity)\s+is\s*"(?P<p>[^"]*)""#,
            r#"|the\s+opinion\s+refers\s+to\s+the\s+explicit\s+aspect\s*"(?P<e>[^"]*)""#,
            r#"|the\s+pronoun\s+of\s*"(?P<rn>[^"]*)"\s*is\s*"(?P<r>[^"]*)""#,
            r#")\s*[.。]?"#,
        ))
        .expect("template regex compiles")
    })
}

fn normalize_quotes(text: &str) -> String {
    text.replace("``", "\"")
        .replace("''", "\"")
        .chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{FF02}' | '\u{00AB}' | '\u{00BB}' => '"',
            other => other,
        })
        .collect()
}

#[derive(Default)]
struct Block {
    opinion: Option<String>,
    polarity: Option<String>,
    explicit: Option<String>,
    pronoun: Option<(String, String)>,
    start: usize,
    end: usize,
}

impl Block {
    fn is_empty(&self) -> bool {
        self.opinion.is_none() && self.polarity.is_none() && self.explicit.is_none() && self.pronoun.is_none()
    }

    fn finish(self, text: &str, out: &mut ParsedAsu) {
        if self.is_empty() {
            return;
        }
        let fragment = (|| {
            let opinion = self.opinion?.trim().to_string();
            let polarity = Polarity::from_label(&self.polarity?)?;
            let explicit = self.explicit?.trim().to_string();
            let (_, implicit) = self.pronoun?;
            if opinion.is_empty() || explicit.is_empty() {
                return None;
            }
            let implicit = implicit.trim();
            let implicit = if implicit.is_empty() || implicit.eq_ignore_ascii_case("null") {
                None
            } else {
                Some(implicit.to_string())
            };
            Some(QuadrupleFragment { explicit, implicit, opinion, polarity })
        })();
        match fragment {
            Some(f) => out.quadruples.push(f),
            None => push_residue(&mut out.residue, &text[self.start..self.end]),
        }
    }
}

fn push_residue(residue: &mut Vec<String>, segment: &str) {
    let segment = segment.trim();
    if !segment.is_empty() {
        residue.push(segment.to_string());
    }
}

/// Extracts every complete template block from arbitrary text. Never fails.
pub fn parse_asu_output(text: &str) -> ParsedAsu {
    let text = normalize_quotes(text);
    let mut out = ParsedAsu::default();
    let mut block = Block::default();
    let mut cursor = 0;

    for caps in template_regex().captures_iter(&text) {
        let whole = caps.get(0).expect("group 0 always matches");
        push_residue(&mut out.residue, &text[cursor..whole.start()]);
        cursor = whole.end();

        let group = |name: &str| caps.name(name).map(|m| m.as_str().to_string());
        let occupied = if caps.name("o").is_some() {
            block.opinion.is_some()
        } else if caps.name("p").is_some() {
            block.polarity.is_some()
        } else if caps.name("e").is_some() {
            block.explicit.is_some()
        } else {
            block.pronoun.is_some()
        };
        if occupied {
            std::mem::take(&mut block).finish(&text, &mut out);
        }
        if block.is_empty() {
            block.start = whole.start();
        }
        block.end = whole.end();

        if let Some(o) = group("o") {
            block.opinion = Some(o);
        } else if let Some(p) = group("p") {
            block.polarity = Some(p);
        } else if let Some(e) = group("e") {
            block.explicit = Some(e);
        } else if let (Some(name), Some(r)) = (group("rn"), group("r")) {
            block.pronoun = Some((name, r));
        }
    }
    block.finish(&text, &mut out);
    push_residue(&mut out.residue, &text[cursor..]);
    out
}

fn is_label_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, ',' | '，' | '、' | ';' | '；' | '[' | ']' | '(' | ')' | '【' | '】')
}

/// Reads the first maximal run of 0/1/2 digits (separators allowed inside
/// the run) and checks it has one label per utterance.
pub fn parse_acr_output(text: &str, n_utterances: usize) -> Result<ParsedAcr, AcrParseError> {
    if n_utterances == 0 {
        return Err(AcrParseError::NoUtterances);
    }
    let mut labels = Vec::new();
    for c in text.chars() {
        match c {
            '0' | '1' | '2' => labels.push(c as u8 - b'0'),
            c if !labels.is_empty() && is_label_separator(c) => {}
            _ if !labels.is_empty() => break,
            _ => {}
        }
    }
    if labels.is_empty() {
        return Err(AcrParseError::NoSequence);
    }
    if labels.len() != n_utterances {
        return Err(AcrParseError::LengthMismatch { found: labels.len(), expected: n_utterances });
    }
    Ok(ParsedAcr { labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEMPLATE_OUTPUT: &str = "The opinion is \"very good\". The sentiment tendency is \"POS\". The opinion refers to the explicit aspect \"That River\". The pronoun of \"That River\" is \"the movie\".";

    fn that_river() -> QuadrupleFragment {
        QuadrupleFragment {
            explicit: "That River".into(),
            implicit: Some("the movie".into()),
            opinion: "very good".into(),
            polarity: Polarity::Positive,
        }
    }

    #[test]
    fn renders_reference_output() {
        assert_eq!(render_asu_output(&that_river()), TEMPLATE_OUTPUT);
    }

    #[test]
    fn absent_implicit_renders_null() {
        let mut q = that_river();
        q.implicit = None;
        assert!(render_asu_output(&q).ends_with("The pronoun of \"That River\" is \"null\"."));
    }

    #[test]
    fn parses_reference_output() {
        let parsed = parse_asu_output(TEMPLATE_OUTPUT);
        assert_eq!(parsed.quadruples, vec![that_river()]);
        assert!(parsed.is_complete());
    }

    #[test]
    fn empty_text_parses_to_nothing() {
        assert_eq!(parse_asu_output(""), ParsedAsu::default());
    }

    #[test]
    fn concatenated_blocks_parse_in_order() {
        let mut second = that_river();
        second.opinion = "boring".into();
        second.polarity = Polarity::Negative;
        second.implicit = None;
        let text = format!("{}{}", render_asu_output(&that_river()), render_asu_output(&second));
        let parsed = parse_asu_output(&text);
        assert_eq!(parsed.quadruples, vec![that_river(), second]);
        assert!(parsed.is_complete());
    }

    #[test]
    fn tolerates_curly_quotes_reordering_and_synonyms() {
        let text = "the opinion is \u{201C}very good\u{201D} .  The sentiment tendency is \u{201C}positive\u{201D}.\n The pronoun of \u{201C}That River\u{201D} is \u{201C}the movie\u{201D}. The opinion refers to the explicit aspect \u{201C}That River\u{201D}.";
        let parsed = parse_asu_output(text);
        assert_eq!(parsed.quadruples, vec![that_river()]);
        assert!(parsed.is_complete(), "{:?}", parsed.residue);
    }

    #[test]
    fn null_variants_mean_absent() {
        for r in ["null", "NULL", "Null", "", "  "] {
            let text = TEMPLATE_OUTPUT.replace("the movie", r);
            assert_eq!(parse_asu_output(&text).quadruples[0].implicit, None, "{r:?}");
        }
    }

    #[test]
    fn unknown_polarity_and_chatter_become_residue() {
        let text = format!("Sure! {}", TEMPLATE_OUTPUT.replace("POS", "GREAT"));
        let parsed = parse_asu_output(&text);
        assert!(parsed.quadruples.is_empty());
        assert_eq!(parsed.residue.len(), 2);
        assert_eq!(parsed.residue[0], "Sure!");
    }

    #[test]
    fn incomplete_block_is_residue_and_next_block_survives() {
        let text = format!("The opinion is \"meh\". {TEMPLATE_OUTPUT}");
        let parsed = parse_asu_output(&text);
        assert_eq!(parsed.quadruples, vec![that_river()]);
        assert_eq!(parsed.residue, vec!["The opinion is \"meh\"."]);
    }

    #[test]
    fn duplicate_blocks_are_all_kept() {
        let text = format!("{TEMPLATE_OUTPUT} {TEMPLATE_OUTPUT}");
        assert_eq!(parse_asu_output(&text).quadruples.len(), 2);
    }

    #[test]
    fn acr_bracketed_sequence() {
        assert_eq!(parse_acr_output("[2, 0, 1, 0]", 4).unwrap().labels, vec![2, 0, 1, 0]);
    }

    #[test]
    fn acr_run_without_separators() {
        assert_eq!(parse_acr_output("2010", 4).unwrap().labels, vec![2, 0, 1, 0]);
    }

    #[test]
    fn acr_length_mismatch() {
        assert_eq!(parse_acr_output("2,0,1", 4), Err(AcrParseError::LengthMismatch { found: 3, expected: 4 }));
    }

    #[test]
    fn acr_takes_first_run_only() {
        assert_eq!(parse_acr_output("labels: 2 0 1 0. later 1 1", 4).unwrap().labels, vec![2, 0, 1, 0]);
        assert_eq!(parse_acr_output("no digits here", 3), Err(AcrParseError::NoSequence));
        assert_eq!(parse_acr_output("2 0 1 0", 0), Err(AcrParseError::NoUtterances));
    }

    #[test]
    fn acr_render_round_trips() {
        let labels = vec![0, 2, 1, 1, 0];
        assert_eq!(parse_acr_output(&render_acr_output(&labels), 5).unwrap().labels, labels);
    }
}
