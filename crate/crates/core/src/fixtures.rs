//! Small built-in dialogues used by the default simulation scenario, the
//! CLI smoke tests and the unit tests.

use crate::corpus::{AspectChain, Dialogue, Polarity, Quadruple, Utterance};

fn utterances(lines: &[(&str, &str)]) -> Vec<Utterance> {
    lines
        .iter()
        .enumerate()
        .map(|(index, (speaker, text))| Utterance { index, speaker: speaker.to_string(), text: text.to_string() })
        .collect()
}

/// Five-utterance movie chat with two aspect chains. "Wen Chaorong" is
/// introduced in U3 and picked up as "this movie" in U5, where the negative
/// opinion lands.
pub fn worked_dialogue() -> Dialogue {
    Dialogue {
        dialogue_id: "worked-0001".into(),
        utterances: utterances(&[
            ("A", "I went to the cinema with a relative last weekend."),
            ("B", "Did you see Zhang Zhongwei? He is really good."),
            ("A", "No, we watched Wen Chaorong, a movie about a detective."),
            ("B", "I remember you recommended going together."),
            ("A", "Honestly this movie has a bad reputation, but Zhang Zhongwei was pretty good."),
        ]),
        quadruples: vec![
            Quadruple {
                explicit: "Wen Chaorong".into(),
                explicit_utt: 2,
                implicit: Some("this movie".into()),
                implicit_utt: Some(4),
                opinion: "bad reputation".into(),
                opinion_utt: 4,
                polarity: Polarity::Negative,
            },
            Quadruple {
                explicit: "Zhang Zhongwei".into(),
                explicit_utt: 1,
                implicit: Some("He".into()),
                implicit_utt: Some(1),
                opinion: "really good".into(),
                opinion_utt: 1,
                polarity: Polarity::Positive,
            },
            Quadruple {
                explicit: "Zhang Zhongwei".into(),
                explicit_utt: 4,
                implicit: None,
                implicit_utt: None,
                opinion: "pretty good".into(),
                opinion_utt: 4,
                polarity: Polarity::Positive,
            },
        ],
        aspect_chains: vec![
            AspectChain { explicit: "Wen Chaorong".into(), labels: vec![0, 0, 2, 0, 1] },
            AspectChain { explicit: "Zhang Zhongwei".into(), labels: vec![0, 2, 0, 0, 2] },
        ],
    }
}

/// Two short dialogues, one Chinese, for multi-record fixtures.
pub fn toy_corpus() -> Vec<Dialogue> {
    let second = Dialogue {
        dialogue_id: "toy-0002".into(),
        utterances: utterances(&[("甲", "昨天看了流浪地球。"), ("乙", "我也看了。"), ("甲", "这部电影特效很棒。")]),
        quadruples: vec![Quadruple {
            explicit: "流浪地球".into(),
            explicit_utt: 0,
            implicit: Some("这部电影".into()),
            implicit_utt: Some(2),
            opinion: "特效很棒".into(),
            opinion_utt: 2,
            polarity: Polarity::Positive,
        }],
        aspect_chains: vec![AspectChain { explicit: "流浪地球".into(), labels: vec![2, 0, 1] }],
    };
    vec![worked_dialogue(), second]
}
