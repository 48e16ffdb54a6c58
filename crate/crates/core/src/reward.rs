//! Confidence-aware reward stack.
//!
//! Generation scores are min-max normalized per output, turned into an
//! entropy-style confidence reward ([`trusted_estimation`]), and combined with
//! task F1 rewards and a repetition penalty ([`trusted_reflexion`]):
//!
//! ```text
//! R = α·R_acr + β·R_asu + γ·(R_rp + R_ra)   if p = 0
//! R = α·R_acr − β·p     + γ·(R_rp + R_ra)   otherwise
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_span, Dialogue};
use crate::evaluation::{chain_items, dialogue_counts, match_sets, PrfScore};
use crate::parsing::{parse_acr_output, parse_asu_output, QuadrupleFragment};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("normalization needs at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("no score sets to estimate from")]
    EmptyScoreSets,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("generation has no outputs")]
    NoOutputs,
    #[error("{outputs} outputs but {score_lists} score lists")]
    ScoreCountMismatch { outputs: usize, score_lists: usize },
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub backend: String,
    #[serde(default)]
    pub latency_ms: f64,
}

/// Candidate outputs of one prompt, each with the score list the backend
/// reported for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub outputs: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    #[serde(default)]
    pub meta: GenerationMeta,
}

impl GenerationResult {
    pub fn new(outputs: Vec<String>, scores: Vec<Vec<f64>>, meta: GenerationMeta) -> Result<Self, RewardError> {
        let g = GenerationResult { outputs, scores, meta };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<(), RewardError> {
        if self.outputs.is_empty() {
            return Err(RewardError::NoOutputs);
        }
        if self.outputs.len() != self.scores.len() {
            return Err(RewardError::ScoreCountMismatch {
                outputs: self.outputs.len(),
                score_lists: self.scores.len(),
            });
        }
        for s in &self.scores {
            if s.len() < 2 {
                return Err(RewardError::TooFewScores(s.len()));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return Err(RewardError::NonFinite("generation scores"));
            }
        }
        Ok(())
    }

    /// The highest-ranked output, taken as the model's answer.
    pub fn top(&self) -> &str {
        self.outputs.first().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Normalized scores are clamped to `[epsilon, 1 - epsilon]` before logs.
    pub epsilon: f64,
    /// Normalized value assigned to every score when all scores tie.
    pub degenerate_value: f64,
    /// Multiply each inner term by the number of outputs `m`.
    pub scale_by_outputs: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 15.0,
            beta: 5.0,
            gamma: 3.0,
            epsilon: 1e-6,
            degenerate_value: 0.5,
            scale_by_outputs: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w.is_finite() && w > 0.0) {
                return Err(RewardError::InvalidConfig(format!("{name} must be positive, got {w}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(RewardError::InvalidConfig(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.degenerate_value) {
            return Err(RewardError::InvalidConfig(format!(
                "degenerate_value must lie in [0, 1], got {}",
                self.degenerate_value
            )));
        }
        Ok(())
    }
}

/// Min-max normalization onto `[0, 1]`. A flat score list (spread below
/// 1e-12) maps every entry to `degenerate_value`.
pub fn normalize(scores: &[f64], degenerate_value: f64) -> Result<Vec<f64>, RewardError> {
    if scores.len() < 2 {
        return Err(RewardError::TooFewScores(scores.len()));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(RewardError::NonFinite("scores"));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = max - min;
    if spread < 1e-12 {
        return Ok(vec![degenerate_value; scores.len()]);
    }
    Ok(scores.iter().map(|g| (g - min) / spread).collect())
}

/// Confidence reward over already-normalized score sets (one per output):
/// `−Σ_j 1 / Σ_i m·ĝ_ji·ln ĝ_ji`, with ĝ clamped away from 0 and 1.
/// Larger when scores sit near the ends of the range.
pub fn trusted_estimation(normalized: &[Vec<f64>], config: &RewardConfig) -> Result<f64, RewardError> {
    if normalized.is_empty() || normalized.iter().any(Vec::is_empty) {
        return Err(RewardError::EmptyScoreSets);
    }
    let m = if config.scale_by_outputs { normalized.len() as f64 } else { 1.0 };
    let (lo, hi) = (config.epsilon, 1.0 - config.epsilon);
    let mut total = 0.0;
    for set in normalized {
        if set.iter().any(|x| !x.is_finite()) {
            return Err(RewardError::NonFinite("normalized scores"));
        }
        let inner: f64 = set
            .iter()
            .map(|&g| {
                let g = g.clamp(lo, hi);
                m * g * g.ln()
            })
            .sum();
        total -= 1.0 / inner;
    }
    Ok(total)
}

/// Normalizes each raw score list, then applies [`trusted_estimation`].
pub fn trusted_estimation_raw(raw: &[Vec<f64>], config: &RewardConfig) -> Result<f64, RewardError> {
    let normalized = raw.iter().map(|s| normalize(s, config.degenerate_value)).collect::<Result<Vec<_>, _>>()?;
    trusted_estimation(&normalized, config)
}

/// Number of outputs equal (after span normalization) to an earlier output.
pub fn count_repetitions<S: AsRef<str>>(outputs: &[S]) -> usize {
    let mut seen = HashSet::new();
    outputs.iter().filter(|o| !seen.insert(normalize_span(o.as_ref()))).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acr: f64,
    pub r_asu: f64,
    pub r_rp: f64,
    pub r_ra: f64,
    pub p: usize,
    pub total: f64,
}

fn combine(r_acr: f64, r_asu: f64, r_rp: f64, r_ra: f64, p: usize, c: &RewardConfig) -> f64 {
    let shared = c.alpha * r_acr + c.gamma * (r_rp + r_ra);
    if p == 0 {
        shared + c.beta * r_asu
    } else {
        shared - c.beta * p as f64
    }
}

impl RewardBreakdown {
    /// Recomputes the combined reward from the stored terms.
    pub fn recompute(&self, config: &RewardConfig) -> f64 {
        combine(self.r_acr, self.r_asu, self.r_rp, self.r_ra, self.p, config)
    }

    pub fn is_penalized(&self) -> bool {
        self.p > 0
    }
}

pub fn trusted_reflexion(
    r_acr: f64,
    r_asu: f64,
    r_rp: f64,
    r_ra: f64,
    p: usize,
    config: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    if ![r_acr, r_asu, r_rp, r_ra].iter().all(|x| x.is_finite()) {
        return Err(RewardError::NonFinite("reward terms"));
    }
    Ok(RewardBreakdown { r_acr, r_asu, r_rp, r_ra, p, total: combine(r_acr, r_asu, r_rp, r_ra, p, config) })
}

/// Aspect-chain generation for one explicit aspect of the dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcrGeneration {
    pub explicit: String,
    pub generation: GenerationResult,
}

/// Quadruple F1 of predicted fragments against the dialogue's gold quadruples.
pub fn extraction_f1(predicted: &[QuadrupleFragment], gold: &Dialogue) -> f64 {
    let g: Vec<QuadrupleFragment> = gold.quadruples.iter().map(QuadrupleFragment::from).collect();
    PrfScore::from_counts(dialogue_counts(&g, predicted).quadruple).f1
}

/// Aspect-chain F1 pooled over the dialogue's gold chains. Chains without a
/// prediction count as all zeros.
pub fn chain_f1(predicted: &[(String, Vec<u8>)], gold: &Dialogue) -> f64 {
    let mut total = (0, 0, 0);
    for chain in &gold.aspect_chains {
        let key = normalize_span(&chain.explicit);
        let pred =
            predicted.iter().find(|(e, _)| normalize_span(e) == key).map(|(_, l)| chain_items(l)).unwrap_or_default();
        let c = match_sets(&chain_items(&chain.labels), &pred);
        total = (total.0 + c.0, total.1 + c.1, total.2 + c.2);
    }
    PrfScore::from_counts(total).f1
}

/// Full reward for one dialogue: confidence terms from the generation
/// scores, F1 terms from the parsed top outputs, repetitions among the
/// extraction outputs.
pub fn episode_reward(
    asu: &GenerationResult,
    acr: &[AcrGeneration],
    gold: &Dialogue,
    config: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    asu.check()?;
    let r_asu = trusted_estimation_raw(&asu.scores, config)?;
    let r_acr = if acr.is_empty() {
        0.0
    } else {
        let mut sum = 0.0;
        for a in acr {
            a.generation.check()?;
            sum += trusted_estimation_raw(&a.generation.scores, config)?;
        }
        sum / acr.len() as f64
    };

    let r_rp = extraction_f1(&parse_asu_output(asu.top()).quadruples, gold);
    let n = gold.utterances.len();
    let chains: Vec<(String, Vec<u8>)> = acr
        .iter()
        .filter_map(|a| parse_acr_output(a.generation.top(), n).ok().map(|parsed| (a.explicit.clone(), parsed.labels)))
        .collect();
    let r_ra = chain_f1(&chains, gold);
    let p = count_repetitions(&asu.outputs);
    trusted_reflexion(r_acr, r_asu, r_rp, r_ra, p, config)
}

/// One line of a reward log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub dialogue_id: String,
    #[serde(flatten)]
    pub breakdown: RewardBreakdown,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_dialogue;
    use crate::parsing::{render_acr_output, render_asu_target};

    const EPS: f64 = 1e-6;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 4.0, 6.0], 0.5).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize(&[7.0, 7.0, 7.0], 0.5).unwrap(), vec![0.5; 3]);
        let n = normalize(&[-3.2, -1.1, -0.4], 0.5).unwrap();
        assert_eq!(n[0], 0.0);
        assert!(close(n[1], 0.75, 1e-12));
        assert_eq!(n[2], 1.0);
        assert_eq!(normalize(&[1.0], 0.5), Err(RewardError::TooFewScores(1)));
    }

    #[test]
    fn estimation_hand_values() {
        let cfg = RewardConfig::default();
        // inner = ε ln ε + 0.5 ln 0.5 + (1-ε) ln(1-ε)
        let inner = EPS * EPS.ln() + 0.5 * 0.5f64.ln() + (1.0 - EPS) * (1.0 - EPS).ln();
        let r = trusted_estimation(&[vec![0.0, 0.5, 1.0]], &cfg).unwrap();
        assert!(close(r, -1.0 / inner, 1e-12));
        assert!(close(r, 2.885, 1e-3));

        let at_e = trusted_estimation(&[vec![0.0, (-1.0f64).exp(), 1.0]], &cfg).unwrap();
        assert!(close(at_e, std::f64::consts::E, 1e-3));
        let near_edge = trusted_estimation(&[vec![0.0, 0.05, 1.0]], &cfg).unwrap();
        assert!(close(near_edge, 6.68, 1e-2));
        assert!(near_edge > at_e);
    }

    #[test]
    fn estimation_with_two_identical_sets_sums_scaled_terms() {
        let cfg = RewardConfig::default();
        let set = vec![0.0, 0.3, 0.9, 1.0];
        let direct: f64 = {
            let inner: f64 = set
                .iter()
                .map(|&g: &f64| {
                    let g = g.clamp(EPS, 1.0 - EPS);
                    2.0 * g * g.ln()
                })
                .sum();
            -2.0 / inner
        };
        let r = trusted_estimation(&[set.clone(), set.clone()], &cfg).unwrap();
        assert!(close(r, direct, 1e-12));
        // the m factor cancels against the sum over m identical sets
        let single = trusted_estimation(std::slice::from_ref(&set), &cfg).unwrap();
        assert!(close(r, single, 1e-12));
        let unscaled = RewardConfig { scale_by_outputs: false, ..cfg };
        assert!(close(trusted_estimation(&[set.clone(), set], &unscaled).unwrap(), 2.0 * single, 1e-12));
    }

    #[test]
    fn two_point_sets_stay_finite() {
        let r = trusted_estimation_raw(&[vec![-1.0, -2.0]], &RewardConfig::default()).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }

    #[test]
    fn repetition_counts() {
        assert_eq!(count_repetitions(&["a", "b", "c"]), 0);
        assert_eq!(count_repetitions(&["a", "a", "a"]), 2);
        assert_eq!(count_repetitions::<&str>(&[]), 0);
        assert_eq!(count_repetitions(&["a", " a\n", "b", "a"]), 2);
    }

    #[test]
    fn reflexion_branches() {
        let cfg = RewardConfig::default();
        assert_eq!(trusted_reflexion(1.0, 2.0, 0.5, 0.5, 0, &cfg).unwrap().total, 28.0);
        assert_eq!(trusted_reflexion(1.0, 2.0, 0.5, 0.5, 2, &cfg).unwrap().total, 8.0);
        assert_eq!(trusted_reflexion(0.0, 0.0, 0.0, 0.0, 0, &cfg).unwrap().total, 0.0);
        assert!(trusted_reflexion(f64::NAN, 0.0, 0.0, 0.0, 0, &cfg).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(RewardConfig::default().validate().is_ok());
        assert!(RewardConfig { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { epsilon: 0.5, ..Default::default() }.validate().is_err());
    }

    fn generation(outputs: Vec<String>, scores: Vec<f64>) -> GenerationResult {
        let lists = vec![scores; outputs.len()];
        GenerationResult::new(outputs, lists, GenerationMeta::default()).unwrap()
    }

    fn acr_gens(d: &Dialogue, wrong: bool) -> Vec<AcrGeneration> {
        d.aspect_chains
            .iter()
            .map(|c| {
                let text = if wrong { "no idea".to_string() } else { render_acr_output(&c.labels) };
                AcrGeneration {
                    explicit: c.explicit.clone(),
                    generation: generation(vec![text, "[0, 0, 0, 0, 0]".into()], vec![-0.5, -2.0, -4.0]),
                }
            })
            .collect()
    }

    #[test]
    fn perfect_episode() {
        let d = worked_dialogue();
        let cfg = RewardConfig::default();
        let target = render_asu_target(&d.quadruples);
        let asu = generation(vec![target, "The opinion is \"x\".".into()], vec![-0.2, -1.5, -3.0]);
        let b = episode_reward(&asu, &acr_gens(&d, false), &d, &cfg).unwrap();
        assert_eq!((b.r_rp, b.r_ra, b.p), (1.0, 1.0, 0));
        assert!(close(b.total, cfg.alpha * b.r_acr + cfg.beta * b.r_asu + cfg.gamma * 2.0, 1e-9));
        assert_eq!(b.total, b.recompute(&cfg));
    }

    #[test]
    fn repeated_wrong_episode() {
        let d = worked_dialogue();
        let cfg = RewardConfig::default();
        let wrong = "The opinion is \"x\". The sentiment tendency is \"NEU\". The opinion refers to the explicit aspect \"y\". The pronoun of \"y\" is \"null\".".to_string();
        let asu = generation(vec![wrong.clone(), wrong.clone(), wrong], vec![-0.2, -1.5, -3.0]);
        let b = episode_reward(&asu, &acr_gens(&d, false), &d, &cfg).unwrap();
        assert_eq!((b.p, b.r_rp), (2, 0.0));
        assert!(close(b.total, cfg.alpha * b.r_acr - 2.0 * cfg.beta + cfg.gamma * b.r_ra, 1e-9));
    }

    #[test]
    fn gibberish_episode_is_finite() {
        let d = worked_dialogue();
        let asu = generation(vec!["qwe rty".into(), "zx cv".into()], vec![1.0, 0.5]);
        let b = episode_reward(&asu, &acr_gens(&d, true), &d, &RewardConfig::default()).unwrap();
        assert_eq!((b.r_rp, b.r_ra), (0.0, 0.0));
        assert!(b.total.is_finite());
    }

    #[test]
    fn generation_needs_score_spread_entries() {
        let err = GenerationResult::new(vec!["a".into()], vec![vec![1.0]], GenerationMeta::default());
        assert_eq!(err, Err(RewardError::TooFewScores(1)));
        assert_eq!(GenerationResult::new(vec![], vec![], GenerationMeta::default()), Err(RewardError::NoOutputs));
    }
}
