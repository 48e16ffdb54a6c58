use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest candidate set the exact enumeration accepts.
pub const MAX_CANDIDATES: usize = 64;
const MAX_TRAJECTORIES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RlError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("candidate space too large to enumerate ({0} trajectories)")]
    SpaceTooLarge(usize),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("empty trajectory batch")]
    EmptyBatch,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Reward(#[from] crate::reward::RewardError),
}

/// Gold token targets (one-hot, stored as indices) with predicted
/// distributions over a vocabulary of `vocab` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    targets: Vec<usize>,
    predicted: Vec<Vec<f64>>,
    vocab: usize,
}

impl TokenBatch {
    pub fn new(targets: Vec<usize>, predicted: Vec<Vec<f64>>) -> Result<Self, RlError> {
        if targets.is_empty() {
            return Err(RlError::ShapeMismatch("batch has no tokens".into()));
        }
        if targets.len() != predicted.len() {
            return Err(RlError::ShapeMismatch(format!(
                "{} targets but {} predicted rows",
                targets.len(),
                predicted.len()
            )));
        }
        let vocab = predicted[0].len();
        if vocab < 2 {
            return Err(RlError::ShapeMismatch("vocabulary needs at least 2 tokens".into()));
        }
        for (i, (row, &t)) in predicted.iter().zip(&targets).enumerate() {
            if row.len() != vocab {
                return Err(RlError::ShapeMismatch(format!("row {i} has {} entries, expected {vocab}", row.len())));
            }
            if t >= vocab {
                return Err(RlError::ShapeMismatch(format!("target {t} at row {i} outside vocabulary")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(RlError::ShapeMismatch(format!("row {i} is not a distribution (sum {sum})")));
            }
        }
        Ok(TokenBatch { targets, predicted, vocab })
    }

    /// Builds a batch from explicit one-hot gold rows.
    pub fn from_one_hot(gold: &[Vec<f64>], predicted: Vec<Vec<f64>>) -> Result<Self, RlError> {
        let targets = gold
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones.len() == 1 && ones.len() + zeros == row.len() {
                    Ok(ones[0])
                } else {
                    Err(RlError::ShapeMismatch(format!("gold row {i} is not one-hot")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if gold.iter().any(|r| r.len() != predicted.first().map_or(0, Vec::len)) {
            return Err(RlError::ShapeMismatch("gold and predicted widths differ".into()));
        }
        Self::new(targets, predicted)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

/// Token-level cross-entropy `−Σ_i ln ŷ_i[target_i]`, with ŷ clamped to
/// `[1e-12, 1]`. The extraction and chain losses are both this function;
/// the joint loss is their sum.
pub fn cross_entropy(batch: &TokenBatch) -> f64 {
    batch.targets.iter().zip(&batch.predicted).map(|(&t, row)| -row[t].clamp(1e-12, 1.0).ln()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(logits: Vec<f64>) -> Result<Self, RlError> {
        if logits.len() < 2 {
            return Err(RlError::ShapeMismatch("policy needs at least 2 candidates".into()));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(RlError::NonFiniteGradient);
        }
        Ok(ToyPolicy { logits })
    }

    pub fn uniform(k: usize) -> Result<Self, RlError> {
        Self::new(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.probabilities_among(&vec![true; self.logits.len()])
    }

    /// Softmax restricted to the candidates flagged `available`.
    pub fn probabilities_among(&self, available: &[bool]) -> Vec<f64> {
        let max =
            self.logits.iter().zip(available).filter(|(_, &a)| a).map(|(&l, _)| l).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> =
            self.logits.iter().zip(available).map(|(&l, &a)| if a { (l - max).exp() } else { 0.0 }).collect();
        let z: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / z).collect()
    }

    /// Draws `m` distinct candidates in order.
    pub fn sample<R: Rng>(&self, m: usize, rng: &mut R) -> Vec<usize> {
        let mut available = vec![true; self.logits.len()];
        let mut out = Vec::with_capacity(m);
        for _ in 0..m.min(self.logits.len()) {
            let probs = self.probabilities_among(&available);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, p) in probs.iter().enumerate() {
                if !available[i] {
                    continue;
                }
                acc += p;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            let pick = pick.expect("at least one candidate available");
            available[pick] = false;
            out.push(pick);
        }
        out
    }
}

/// An episode: the ordered candidate draws and the reward it earned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub reward: f64,
}

pub fn trajectory_log_prob(policy: &ToyPolicy, actions: &[usize]) -> f64 {
    let mut available = vec![true; policy.len()];
    let mut lp = 0.0;
    for &a in actions {
        let probs = policy.probabilities_among(&available);
        lp += probs[a].ln();
        available[a] = false;
    }
    lp
}

/// `∇_θ ln P(τ)`: for each draw, the indicator of the drawn candidate minus
/// the softmax over the candidates still available.
pub fn trajectory_grad_log_prob(policy: &ToyPolicy, actions: &[usize]) -> Vec<f64> {
    let mut available = vec![true; policy.len()];
    let mut grad = vec![0.0; policy.len()];
    for &a in actions {
        let probs = policy.probabilities_among(&available);
        for (g, p) in grad.iter_mut().zip(&probs) {
            *g -= p;
        }
        grad[a] += 1.0;
        available[a] = false;
    }
    grad
}

/// Every ordered selection of `horizon` distinct candidates out of `k`.
pub fn enumerate_trajectories(k: usize, horizon: usize) -> Result<Vec<Vec<usize>>, RlError> {
    if k > MAX_CANDIDATES {
        return Err(RlError::SpaceTooLarge(k));
    }
    if horizon == 0 || horizon > k {
        return Err(RlError::ShapeMismatch(format!("horizon {horizon} with {k} candidates")));
    }
    let count = (0..horizon).try_fold(1usize, |acc, i| acc.checked_mul(k - i));
    match count {
        Some(c) if c <= MAX_TRAJECTORIES => {}
        Some(c) => return Err(RlError::SpaceTooLarge(c)),
        None => return Err(RlError::SpaceTooLarge(usize::MAX)),
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(horizon);
    let mut used = vec![false; k];
    fn rec(k: usize, horizon: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == horizon {
            out.push(current.clone());
            return;
        }
        for a in 0..k {
            if !used[a] {
                used[a] = true;
                current.push(a);
                rec(k, horizon, current, used, out);
                current.pop();
                used[a] = false;
            }
        }
    }
    rec(k, horizon, &mut current, &mut used, &mut out);
    Ok(out)
}

/// Exact `J(θ) = Σ_τ P(τ; θ)·R(τ)` by enumeration.
pub fn expected_objective<F>(policy: &ToyPolicy, horizon: usize, reward: F) -> Result<f64, RlError>
where
    F: Fn(&[usize]) -> f64,
{
    let trajectories = enumerate_trajectories(policy.len(), horizon)?;
    Ok(trajectories.iter().map(|t| trajectory_log_prob(policy, t).exp() * reward(t)).sum())
}

/// Exact `∇J(θ) = Σ_τ P(τ)·R(τ)·∇ ln P(τ)` by enumeration.
pub fn exact_gradient<F>(policy: &ToyPolicy, horizon: usize, reward: F) -> Result<Vec<f64>, RlError>
where
    F: Fn(&[usize]) -> f64,
{
    let mut grad = vec![0.0; policy.len()];
    for t in enumerate_trajectories(policy.len(), horizon)? {
        let weight = trajectory_log_prob(policy, &t).exp() * reward(&t);
        for (g, d) in grad.iter_mut().zip(trajectory_grad_log_prob(policy, &t)) {
            *g += weight * d;
        }
    }
    Ok(grad)
}

/// REINFORCE estimate with the batch-mean reward as baseline:
/// `mean_b (R_b − R̄)·∇ ln P(τ_b)`.
pub fn reinforce_gradient(policy: &ToyPolicy, batch: &[Trajectory]) -> Result<Vec<f64>, RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let baseline = batch_baseline(batch);
    let mut grad = vec![0.0; policy.len()];
    for t in batch {
        let advantage = t.reward - baseline;
        if advantage == 0.0 {
            continue;
        }
        for (g, d) in grad.iter_mut().zip(trajectory_grad_log_prob(policy, &t.actions)) {
            *g += advantage * d;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(RlError::NonFiniteGradient);
    }
    Ok(grad)
}

/// Clipped-surrogate settings for the PPO variant of the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub ratio: f64,
    pub epochs: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { ratio: 0.2, epochs: 4 }
    }
}

/// One update from a batch of trajectories. Without `clip` this is a
/// REINFORCE ascent step; with it, `epochs` ascent steps on the clipped
/// surrogate `mean_b min(r_b·A_b, clip(r_b, 1−ε, 1+ε)·A_b)` against a
/// frozen copy of the incoming policy.
pub fn policy_gradient_step(
    policy: &ToyPolicy,
    batch: &[Trajectory],
    learning_rate: f64,
    clip: Option<ClipConfig>,
) -> Result<ToyPolicy, RlError> {
    for t in batch {
        if t.actions.iter().any(|&a| a >= policy.len()) {
            return Err(RlError::ShapeMismatch("action index outside candidate range".into()));
        }
    }
    let Some(clip) = clip else {
        let grad = reinforce_gradient(policy, batch)?;
        return apply(policy, &grad, learning_rate);
    };
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let baseline = batch_baseline(batch);
    let old_log_probs: Vec<f64> = batch.iter().map(|t| trajectory_log_prob(policy, &t.actions)).collect();
    let mut current = policy.clone();
    for _ in 0..clip.epochs.max(1) {
        let mut grad = vec![0.0; policy.len()];
        for (t, old_lp) in batch.iter().zip(&old_log_probs) {
            let advantage = t.reward - baseline;
            let ratio = (trajectory_log_prob(&current, &t.actions) - old_lp).exp();
            let active = if advantage >= 0.0 { ratio < 1.0 + clip.ratio } else { ratio > 1.0 - clip.ratio };
            if !active || advantage == 0.0 {
                continue;
            }
            for (g, d) in grad.iter_mut().zip(trajectory_grad_log_prob(&current, &t.actions)) {
                *g += ratio * advantage * d;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        current = apply(&current, &grad, learning_rate)?;
    }
    Ok(current)
}

/// Batch-mean reward. Returned exactly when all rewards agree, so a batch
/// with no reward differences yields a zero update.
fn batch_baseline(batch: &[Trajectory]) -> f64 {
    let first = batch[0].reward;
    if batch.iter().all(|t| t.reward == first) {
        return first;
    }
    batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64
}

fn apply(policy: &ToyPolicy, grad: &[f64], learning_rate: f64) -> Result<ToyPolicy, RlError> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(RlError::NonFiniteGradient);
    }
    let logits = policy.logits.iter().zip(grad).map(|(l, g)| l + learning_rate * g).collect();
    Ok(ToyPolicy { logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_examples() {
        let exact = TokenBatch::new(vec![1, 0], vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(cross_entropy(&exact) <= 1e-9);

        let uniform = TokenBatch::new(vec![0, 3, 2], vec![vec![0.25; 4]; 3]).unwrap();
        assert!((cross_entropy(&uniform) - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&uniform) - 4.1589).abs() < 1e-4);

        let half = TokenBatch::new(vec![0], vec![vec![0.5, 0.5]]).unwrap();
        assert!((cross_entropy(&half) - 2f64.ln()).abs() < 1e-12);

        let zero = TokenBatch::new(vec![0], vec![vec![0.0, 1.0]]).unwrap();
        assert!((cross_entropy(&zero) - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn token_batch_shapes() {
        assert!(TokenBatch::new(vec![0], vec![vec![0.5, 0.4]]).is_err());
        assert!(TokenBatch::new(vec![2], vec![vec![0.5, 0.5]]).is_err());
        assert!(TokenBatch::new(vec![0, 1], vec![vec![0.5, 0.5]]).is_err());
        assert!(TokenBatch::new(vec![0], vec![vec![1.0]]).is_err());
        assert!(TokenBatch::from_one_hot(&[vec![0.0, 1.0]], vec![vec![0.3, 0.7]]).is_ok());
        assert!(TokenBatch::from_one_hot(&[vec![0.5, 0.5]], vec![vec![0.3, 0.7]]).is_err());
    }

    #[test]
    fn objective_examples() {
        let uniform = ToyPolicy::uniform(2).unwrap();
        let r = |t: &[usize]| t[0] as f64;
        assert!((expected_objective(&uniform, 1, r).unwrap() - 0.5).abs() < 1e-12);
        let tilted = ToyPolicy::new(vec![0.0, 3f64.ln()]).unwrap();
        assert!((expected_objective(&tilted, 1, r).unwrap() - 0.75).abs() < 1e-12);
        let any = ToyPolicy::new(vec![0.3, -1.2, 2.0]).unwrap();
        assert!((expected_objective(&any, 2, |_| 1.7).unwrap() - 1.7).abs() < 1e-12);
        assert!(matches!(expected_objective(&ToyPolicy::uniform(65).unwrap(), 1, r), Err(RlError::SpaceTooLarge(_))));
    }

    #[test]
    fn trajectory_probabilities_sum_to_one() {
        let p = ToyPolicy::new(vec![0.4, -0.3, 1.1, 0.0, -2.0]).unwrap();
        for h in 1..=4 {
            let total: f64 =
                enumerate_trajectories(5, h).unwrap().iter().map(|t| trajectory_log_prob(&p, t).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "horizon {h}: {total}");
        }
    }

    #[test]
    fn equal_rewards_leave_policy_unchanged() {
        let p = ToyPolicy::new(vec![0.2, -0.1, 0.5]).unwrap();
        let batch: Vec<Trajectory> =
            [0, 1, 2, 2, 0].iter().map(|&a| Trajectory { actions: vec![a], reward: 4.2 }).collect();
        assert_eq!(policy_gradient_step(&p, &batch, 0.5, None).unwrap(), p);
        assert_eq!(policy_gradient_step(&p, &batch, 0.5, Some(ClipConfig::default())).unwrap(), p);
    }

    #[test]
    fn sampled_training_matches_exact_ascent_on_two_arms() {
        let reward = |t: &[usize]| t[0] as f64;
        let mut sampled = ToyPolicy::uniform(2).unwrap();
        let mut exact = ToyPolicy::uniform(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..400 {
            let batch: Vec<Trajectory> = (0..32)
                .map(|_| {
                    let actions = sampled.sample(1, &mut rng);
                    let r = reward(&actions);
                    Trajectory { actions, reward: r }
                })
                .collect();
            sampled = policy_gradient_step(&sampled, &batch, 0.5, None).unwrap();
            let g = exact_gradient(&exact, 1, reward).unwrap();
            exact = apply(&exact, &g, 0.5).unwrap();
        }
        let ps = sampled.probabilities()[1];
        let pe = exact.probabilities()[1];
        assert!(ps > 0.97, "sampled p = {ps}");
        assert!(pe > 0.97, "exact p = {pe}");
    }

    fn central_difference<F: Fn(&[usize]) -> f64 + Copy>(p: &ToyPolicy, horizon: usize, reward: F) -> Vec<f64> {
        let h = 1e-5;
        (0..p.len())
            .map(|i| {
                let mut up = p.clone();
                up.logits[i] += h;
                let mut down = p.clone();
                down.logits[i] -= h;
                (expected_objective(&up, horizon, reward).unwrap()
                    - expected_objective(&down, horizon, reward).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn reinforce_estimate_agrees_with_finite_differences() {
        // Low-discrepancy batch: action a appears round(N·π(a)) times, so the
        // estimator's sampling error is O(1/N) rather than O(1/√N).
        let rewards = [0.2, 1.0, -0.5, 0.6];
        let reward = |t: &[usize]| rewards[t[0]];
        let p = ToyPolicy::new(vec![0.3, -0.4, 0.1, 0.8]).unwrap();
        let probs = p.probabilities();
        let n = 100_000usize;
        let mut batch = Vec::with_capacity(n);
        let mut cumulative = 0.0;
        let mut emitted = 0usize;
        for (a, pa) in probs.iter().enumerate() {
            cumulative += pa;
            let upto = (cumulative * n as f64).round() as usize;
            for _ in emitted..upto {
                batch.push(Trajectory { actions: vec![a], reward: rewards[a] });
            }
            emitted = upto;
        }
        let estimate = reinforce_gradient(&p, &batch).unwrap();
        let fd = central_difference(&p, 1, reward);
        for (e, f) in estimate.iter().zip(&fd) {
            assert!((e - f).abs() < 1e-4, "{estimate:?} vs {fd:?}");
        }
    }

    #[test]
    fn iid_reinforce_estimate_is_within_sampling_error() {
        let rewards = [0.2, 1.0, -0.5, 0.6];
        let p = ToyPolicy::new(vec![0.3, -0.4, 0.1, 0.8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch: Vec<Trajectory> = (0..100_000)
            .map(|_| {
                let actions = p.sample(1, &mut rng);
                let reward = rewards[actions[0]];
                Trajectory { actions, reward }
            })
            .collect();
        let estimate = reinforce_gradient(&p, &batch).unwrap();
        let exact = exact_gradient(&p, 1, |t| rewards[t[0]]).unwrap();
        for (e, x) in estimate.iter().zip(&exact) {
            // per-sample magnitude is below 1.5, so 4 standard errors < 0.02
            assert!((e - x).abs() < 0.02, "{estimate:?} vs {exact:?}");
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences_for_ordered_draws() {
        let reward = |t: &[usize]| (t[0] as f64) * 0.7 - (t[1] as f64 - 1.0).powi(2) * 0.3;
        let p = ToyPolicy::new(vec![0.5, -0.2, 0.9, -1.1]).unwrap();
        let g = exact_gradient(&p, 2, reward).unwrap();
        let fd = central_difference(&p, 2, reward);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn small_exact_steps_never_decrease_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rewards: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let reward = |t: &[usize]| rewards[t[0]];
            let mut p = ToyPolicy::new((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let mut j = expected_objective(&p, 1, reward).unwrap();
            for _ in 0..50 {
                let g = exact_gradient(&p, 1, reward).unwrap();
                p = apply(&p, &g, 0.1).unwrap();
                let next = expected_objective(&p, 1, reward).unwrap();
                assert!(next >= j - 1e-12);
                j = next;
            }
        }
    }

    #[test]
    fn clipped_update_moves_toward_better_arm_but_stays_bounded() {
        let p = ToyPolicy::uniform(2).unwrap();
        let batch = vec![Trajectory { actions: vec![0], reward: 0.0 }, Trajectory { actions: vec![1], reward: 1.0 }];
        let clipped = policy_gradient_step(&p, &batch, 0.2, Some(ClipConfig { ratio: 0.2, epochs: 50 })).unwrap();
        let loose = policy_gradient_step(&p, &batch, 0.2, Some(ClipConfig { ratio: 100.0, epochs: 50 })).unwrap();
        let pc = clipped.probabilities()[1];
        // updates stop once the ratio leaves [0.8, 1.2], i.e. past p = 0.6
        assert!(pc > 0.5 && pc < 0.65, "{pc}");
        assert!(loose.probabilities()[1] > 0.8);
    }

    #[test]
    fn sampling_draws_distinct_candidates() {
        let p = ToyPolicy::new(vec![5.0, 0.0, 0.0, -5.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut s = p.sample(3, &mut rng);
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
    }
}
