use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{
    enumerate_trajectories, policy_gradient_step, trajectory_log_prob, ClipConfig, RlError, ToyPolicy, Trajectory,
};
use crate::corpus::{normalize_span, read_dialogues, Dialogue, Polarity};
use crate::fixtures::worked_dialogue;
use crate::parsing::{parse_acr_output, parse_asu_output, render_acr_output, render_fragments, QuadrupleFragment};
use crate::reward::{
    chain_f1, episode_reward, extraction_f1, normalize, AcrGeneration, GenerationMeta, GenerationResult, RewardConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Correct,
    WrongPolarity,
    WrongCoreference,
    #[default]
    Other,
}

/// One answer the policy can emit: an extraction output plus one chain
/// output per explicit aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    #[serde(default)]
    pub kind: CandidateKind,
    pub asu: String,
    #[serde(default)]
    pub acr: BTreeMap<String, String>,
    /// Fixed score list; when absent the policy's top-n logits are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

fn default_m() -> usize {
    3
}
fn default_n() -> usize {
    4
}
fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    0.05
}
fn default_epochs() -> usize {
    4
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Dialogue>,
    /// JSONL corpus to take the gold dialogue from, relative to the config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_id: Option<String>,
    pub candidates: Vec<Candidate>,
    #[serde(default = "default_m")]
    pub samples_per_episode: usize,
    #[serde(default = "default_n")]
    pub scores_per_output: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// PPO clip ratio; plain REINFORCE when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default = "default_epochs")]
    pub ppo_epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_logits: Option<Vec<f64>>,
}

fn fragment(explicit: &str, implicit: Option<&str>, opinion: &str, polarity: Polarity) -> QuadrupleFragment {
    QuadrupleFragment {
        explicit: explicit.into(),
        implicit: implicit.map(Into::into),
        opinion: opinion.into(),
        polarity,
    }
}

fn chains(wen: &[u8], zhang: &[u8]) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("Wen Chaorong".to_string(), render_acr_output(wen)),
        ("Zhang Zhongwei".to_string(), render_acr_output(zhang)),
    ])
}

impl Scenario {
    /// Built-in scenario on the worked movie dialogue: correct answers (one
    /// of them duplicated), a polarity flip, a coreference slip and
    /// unparseable text.
    pub fn faithful() -> Scenario {
        let gold = worked_dialogue();
        let gold_frags: Vec<QuadrupleFragment> = gold.quadruples.iter().map(QuadrupleFragment::from).collect();
        let correct = render_fragments(&gold_frags);
        let gold_chains = chains(&gold.aspect_chains[0].labels, &gold.aspect_chains[1].labels);

        let mut flipped = gold_frags.clone();
        flipped[0].polarity = Polarity::Positive;
        let slipped = vec![
            fragment("Zhang Zhongwei", Some("this movie"), "bad reputation", Polarity::Negative),
            gold_frags[1].clone(),
            gold_frags[2].clone(),
        ];
        // Three surface variants of the gold answer that parse identically,
        // plus a verbatim copy of the first one.
        let variants = [correct.clone(), correct.replace(". ", ".  "), correct.replace('"', "\u{201c}")];
        let mut candidates: Vec<Candidate> = variants
            .iter()
            .enumerate()
            .map(|(i, text)| Candidate {
                name: format!("correct-{}", i + 1),
                kind: CandidateKind::Correct,
                asu: text.clone(),
                acr: gold_chains.clone(),
                scores: None,
            })
            .collect();
        candidates.push(Candidate { name: "correct-copy".into(), ..candidates[0].clone() });
        candidates.extend([
            Candidate {
                name: "wrong-polarity".into(),
                kind: CandidateKind::WrongPolarity,
                asu: render_fragments(&flipped),
                acr: gold_chains,
                scores: None,
            },
            Candidate {
                name: "wrong-coreference".into(),
                kind: CandidateKind::WrongCoreference,
                asu: render_fragments(&slipped),
                acr: chains(&[0, 0, 2, 0, 0], &[0, 2, 0, 0, 1]),
                scores: None,
            },
            Candidate {
                name: "gibberish".into(),
                kind: CandidateKind::Other,
                asu: "movie movie the the good reputation".into(),
                acr: BTreeMap::new(),
                scores: None,
            },
        ]);
        Scenario {
            name: "faithful".into(),
            gold: Some(gold),
            gold_file: None,
            gold_id: None,
            candidates,
            samples_per_episode: default_m(),
            scores_per_output: default_n(),
            steps: default_steps(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            clip: None,
            ppo_epochs: default_epochs(),
            seed: default_seed(),
            reward: RewardConfig::default(),
            initial_logits: None,
        }
    }

    /// Same setup, but every candidate is the correct answer verbatim, so
    /// every episode repeats itself.
    pub fn repetitive() -> Scenario {
        let mut s = Scenario::faithful();
        let template = s.candidates[0].clone();
        s.name = "repetitive".into();
        s.candidates = (0..7).map(|i| Candidate { name: format!("copy-{i}"), ..template.clone() }).collect();
        s
    }

    pub fn named(name: &str) -> Option<Scenario> {
        match name {
            "faithful" | "default" => Some(Scenario::faithful()),
            "repetitive" => Some(Scenario::repetitive()),
            _ => None,
        }
    }

    /// Parses a TOML scenario. A `gold_file` is resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Scenario, RlError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| RlError::InvalidScenario(e.to_string()))?;
        if s.gold.is_none() {
            let Some(file) = &s.gold_file else {
                return Err(RlError::InvalidScenario("either gold or gold_file is required".into()));
            };
            let path = base_dir.map_or_else(|| Path::new(file).to_path_buf(), |b| b.join(file));
            let dialogues = read_dialogues(&path).map_err(|e| RlError::InvalidScenario(e.to_string()))?;
            let found = match &s.gold_id {
                Some(id) => dialogues.into_iter().find(|d| &d.dialogue_id == id),
                None => dialogues.into_iter().next(),
            };
            s.gold = Some(found.ok_or_else(|| RlError::InvalidScenario("gold dialogue not found".into()))?);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn gold(&self) -> Result<&Dialogue, RlError> {
        self.gold.as_ref().ok_or_else(|| RlError::InvalidScenario("gold dialogue not resolved".into()))
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: String| Err(RlError::InvalidScenario(m));
        let gold = self.gold()?;
        let k = self.candidates.len();
        if k < 2 {
            return bad(format!("need at least 2 candidates, got {k}"));
        }
        if k > super::MAX_CANDIDATES {
            return bad(format!("at most {} candidates", super::MAX_CANDIDATES));
        }
        let m = self.samples_per_episode;
        if m == 0 || m > k {
            return bad(format!("samples_per_episode must be in 1..={k}"));
        }
        enumerate_trajectories(k, m)?;
        let n = self.scores_per_output;
        if n < 2 || n > k {
            return bad(format!("scores_per_output must be in 2..={k}"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c < 1.0) {
                return bad("clip must lie in (0, 1)".into());
            }
        }
        if let Some(l) = &self.initial_logits {
            if l.len() != k || l.iter().any(|x| !x.is_finite()) {
                return bad("initial_logits must hold one finite value per candidate".into());
            }
        }
        self.reward.validate()?;
        let terms = CandidateTerms::of(self, gold);
        let mut any_correct = false;
        for (c, t) in self.candidates.iter().zip(&terms) {
            if let Some(s) = &c.scores {
                if s.len() < 2 || s.iter().any(|x| !x.is_finite()) {
                    return bad(format!("candidate {}: scores need at least 2 finite values", c.name));
                }
            }
            if c.kind == CandidateKind::Correct && !t.correct {
                return bad(format!("candidate {} is marked correct but does not match the gold", c.name));
            }
            any_correct |= t.correct;
        }
        if !any_correct {
            return bad("no candidate reproduces the gold annotation".into());
        }
        Ok(())
    }

    fn clip_config(&self) -> Option<ClipConfig> {
        self.clip.map(|ratio| ClipConfig { ratio, epochs: self.ppo_epochs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub expected_reward: f64,
    pub p_correct: f64,
    pub repetition_rate: f64,
}

/// Reward ingredients that depend only on the candidate, not on the policy.
struct CandidateTerms {
    r_rp: f64,
    r_ra: f64,
    correct: bool,
    text_id: usize,
    fixed_confidence: Option<f64>,
}

/// `−1 / Σ_i ĝ_i ln ĝ_i` for one normalized score list (the per-output part
/// of the confidence reward before the output-count factor).
fn list_confidence(raw: &[f64], cfg: &RewardConfig) -> f64 {
    let normalized = normalize(raw, cfg.degenerate_value).expect("validated score list");
    let inner: f64 = normalized
        .iter()
        .map(|&g| {
            let g = g.clamp(cfg.epsilon, 1.0 - cfg.epsilon);
            g * g.ln()
        })
        .sum();
    -1.0 / inner
}

impl CandidateTerms {
    fn of(s: &Scenario, gold: &Dialogue) -> Vec<CandidateTerms> {
        let n = gold.utterances.len();
        let mut ids: HashMap<String, usize> = HashMap::new();
        s.candidates
            .iter()
            .map(|c| {
                let r_rp = extraction_f1(&parse_asu_output(&c.asu).quadruples, gold);
                let chains: Vec<(String, Vec<u8>)> = gold
                    .aspect_chains
                    .iter()
                    .filter_map(|g| {
                        let text = chain_text(c, &g.explicit);
                        parse_acr_output(text, n).ok().map(|p| (g.explicit.clone(), p.labels))
                    })
                    .collect();
                let r_ra = chain_f1(&chains, gold);
                let next = ids.len();
                let text_id = *ids.entry(normalize_span(&c.asu)).or_insert(next);
                CandidateTerms {
                    r_rp,
                    r_ra,
                    correct: r_rp == 1.0 && (gold.aspect_chains.is_empty() || r_ra == 1.0),
                    text_id,
                    fixed_confidence: c.scores.as_ref().map(|sc| list_confidence(sc, &s.reward)),
                }
            })
            .collect()
    }
}

fn chain_text<'a>(c: &'a Candidate, explicit: &str) -> &'a str {
    let key = normalize_span(explicit);
    c.acr.iter().find(|(e, _)| normalize_span(e) == key).map_or("", |(_, t)| t.as_str())
}

/// Score list attached to outputs without fixed scores: the `n` largest
/// logits, descending.
fn logit_scores(policy: &ToyPolicy, n: usize) -> Vec<f64> {
    let mut l = policy.logits.clone();
    l.sort_by(|a, b| b.total_cmp(a));
    l.truncate(n);
    l
}

fn build_generations(
    s: &Scenario,
    gold: &Dialogue,
    actions: &[usize],
    default_scores: &[f64],
) -> (GenerationResult, Vec<AcrGeneration>) {
    let scores: Vec<Vec<f64>> =
        actions.iter().map(|&a| s.candidates[a].scores.clone().unwrap_or_else(|| default_scores.to_vec())).collect();
    let meta = GenerationMeta { backend: "rlsim".into(), latency_ms: 0.0 };
    let asu = GenerationResult {
        outputs: actions.iter().map(|&a| s.candidates[a].asu.clone()).collect(),
        scores: scores.clone(),
        meta: meta.clone(),
    };
    let acr = gold
        .aspect_chains
        .iter()
        .map(|g| AcrGeneration {
            explicit: g.explicit.clone(),
            generation: GenerationResult {
                outputs: actions.iter().map(|&a| chain_text(&s.candidates[a], &g.explicit).to_string()).collect(),
                scores: scores.clone(),
                meta: meta.clone(),
            },
        })
        .collect();
    (asu, acr)
}

struct Evaluator<'a> {
    scenario: &'a Scenario,
    terms: Vec<CandidateTerms>,
    trajectories: Vec<Vec<usize>>,
}

impl<'a> Evaluator<'a> {
    fn new(scenario: &'a Scenario, gold: &Dialogue) -> Result<Self, RlError> {
        Ok(Evaluator {
            scenario,
            terms: CandidateTerms::of(scenario, gold),
            trajectories: enumerate_trajectories(scenario.candidates.len(), scenario.samples_per_episode)?,
        })
    }

    /// Combined reward of a trajectory from cached terms; equals
    /// `episode_reward` on the corresponding generations.
    fn reward(&self, actions: &[usize], logit_confidence: f64, has_chains: bool) -> (f64, usize) {
        let cfg = &self.scenario.reward;
        let m = actions.len() as f64;
        let factor = if cfg.scale_by_outputs { m } else { 1.0 };
        let confidence: f64 =
            actions.iter().map(|&a| self.terms[a].fixed_confidence.unwrap_or(logit_confidence)).sum::<f64>() / factor;
        let r_acr = if has_chains { confidence } else { 0.0 };
        let mut seen = Vec::new();
        let mut p = 0;
        for &a in actions {
            let id = self.terms[a].text_id;
            if seen.contains(&id) {
                p += 1;
            } else {
                seen.push(id);
            }
        }
        let top = &self.terms[actions[0]];
        let shared = cfg.alpha * r_acr + cfg.gamma * (top.r_rp + top.r_ra);
        let total = if p == 0 { shared + cfg.beta * confidence } else { shared - cfg.beta * p as f64 };
        (total, p)
    }

    fn row(&self, step: usize, policy: &ToyPolicy, gold: &Dialogue) -> CurveRow {
        let s = self.scenario;
        let logit_confidence = list_confidence(&logit_scores(policy, s.scores_per_output), &s.reward);
        let has_chains = !gold.aspect_chains.is_empty();
        let m = s.samples_per_episode;
        let mut expected = 0.0;
        let mut repetition = 0.0;
        for t in &self.trajectories {
            let prob = trajectory_log_prob(policy, t).exp();
            let (r, p) = self.reward(t, logit_confidence, has_chains);
            expected += prob * r;
            if m > 1 {
                repetition += prob * p as f64 / (m - 1) as f64;
            }
        }
        let p_correct = policy.probabilities().iter().zip(&self.terms).filter(|(_, t)| t.correct).map(|(p, _)| p).sum();
        CurveRow { step, expected_reward: expected, p_correct, repetition_rate: repetition }
    }
}

/// Trains the toy policy on `scenario` and returns one curve row per step,
/// starting with the untrained policy at step 0.
pub fn simulate(scenario: &Scenario, seed: u64) -> Result<Vec<CurveRow>, RlError> {
    scenario.validate()?;
    let gold = scenario.gold()?;
    let k = scenario.candidates.len();
    let mut policy = match &scenario.initial_logits {
        Some(l) => ToyPolicy::new(l.clone())?,
        None => ToyPolicy::uniform(k)?,
    };
    let eval = Evaluator::new(scenario, gold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = scenario.clip_config();
    let mut curve = Vec::with_capacity(scenario.steps + 1);
    curve.push(eval.row(0, &policy, gold));
    for step in 1..=scenario.steps {
        let default_scores = logit_scores(&policy, scenario.scores_per_output);
        let mut batch = Vec::with_capacity(scenario.batch_size);
        for _ in 0..scenario.batch_size {
            let actions = policy.sample(scenario.samples_per_episode, &mut rng);
            let (asu, acr) = build_generations(scenario, gold, &actions, &default_scores);
            let reward = episode_reward(&asu, &acr, gold, &scenario.reward)?.total;
            batch.push(Trajectory { actions, reward });
        }
        policy = policy_gradient_step(&policy, &batch, scenario.learning_rate, clip)?;
        curve.push(eval.row(step, &policy, gold));
    }
    log::debug!("scenario {} finished with logits {:?}", scenario.name, policy.logits);
    Ok(curve)
}

pub fn curve_to_csv(curve: &[CurveRow]) -> String {
    let mut out = String::from("step,expected_reward,p_correct,repetition_rate\n");
    for r in curve {
        let _ = writeln!(out, "{},{:.8},{:.8},{:.8}", r.step, r.expected_reward, r.p_correct, r.repetition_rate);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenarios_validate() {
        Scenario::faithful().validate().unwrap();
        Scenario::repetitive().validate().unwrap();
        let terms = CandidateTerms::of(&Scenario::faithful(), &worked_dialogue());
        let correct: Vec<bool> = terms.iter().map(|t| t.correct).collect();
        assert_eq!(correct, [true, true, true, true, false, false, false]);
        assert_eq!(terms[0].text_id, terms[3].text_id);
        assert_ne!(terms[0].text_id, terms[1].text_id);
        assert_ne!(terms[0].text_id, terms[2].text_id);
    }

    #[test]
    fn cached_reward_matches_episode_reward() {
        let mut s = Scenario::faithful();
        s.candidates[4].scores = Some(vec![-0.5, -1.5, -4.0]);
        let gold = s.gold.clone().unwrap();
        let eval = Evaluator::new(&s, &gold).unwrap();
        let policy = ToyPolicy::new(vec![0.7, -0.2, 0.4, 1.3, -0.9, 0.1, 0.0]).unwrap();
        let scores = logit_scores(&policy, s.scores_per_output);
        let conf = list_confidence(&scores, &s.reward);
        for t in &eval.trajectories {
            let (asu, acr) = build_generations(&s, &gold, t, &scores);
            let full = episode_reward(&asu, &acr, &gold, &s.reward).unwrap();
            let (cached, p) = eval.reward(t, conf, true);
            assert_eq!(p, full.p);
            assert!((cached - full.total).abs() < 1e-9 * full.total.abs().max(1.0), "{t:?}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let s = Scenario::faithful();
        let back = Scenario::from_toml_str(&s.to_toml_string(), None).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = Scenario::faithful();
        s.candidates.truncate(1);
        assert!(s.validate().is_err());

        let mut s = Scenario::faithful();
        s.candidates.retain(|c| c.kind != CandidateKind::Correct);
        assert!(s.validate().is_err());

        let mut s = Scenario::faithful();
        s.candidates[4].kind = CandidateKind::Correct;
        assert!(s.validate().is_err());

        let mut s = Scenario::faithful();
        s.samples_per_episode = 8;
        assert!(s.validate().is_err());

        assert!(Scenario::from_toml_str("name = \"x\"\ncandidates = []\n", None).is_err());
    }

    #[test]
    fn repetitive_scenario_stays_on_penalty_branch() {
        let mut s = Scenario::repetitive();
        s.steps = 50;
        let curve = simulate(&s, 1).unwrap();
        let first = curve[0].expected_reward;
        for r in &curve {
            assert!((r.repetition_rate - 1.0).abs() < 1e-12);
            assert_eq!(r.expected_reward, first);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let mut s = Scenario::faithful();
        s.steps = 60;
        let a = curve_to_csv(&simulate(&s, 9).unwrap());
        let b = curve_to_csv(&simulate(&s, 9).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 62);
    }
}
