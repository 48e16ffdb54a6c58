//! Small-scale policy optimization against the reward stack.
//!
//! The "model" is a softmax policy over a finite set of candidate answers.
//! An episode draws `m` distinct candidates in sequence (each draw is a
//! softmax over the candidates not yet drawn, like the ranked beams of a
//! beam search), so a trajectory is an ordered selection and
//! `P(τ) = Π_t softmax(θ | remaining)[a_t]`. For `m = 1` this reduces to a
//! plain contextual bandit with `J(θ) = Σ_a π(a)·R(a)`.

mod policy;
mod scenario;

pub use policy::{
    cross_entropy, enumerate_trajectories, exact_gradient, expected_objective, policy_gradient_step,
    reinforce_gradient, trajectory_grad_log_prob, trajectory_log_prob, ClipConfig, RlError, TokenBatch, ToyPolicy,
    Trajectory, MAX_CANDIDATES,
};
pub use scenario::{curve_to_csv, simulate, Candidate, CandidateKind, CurveRow, Scenario};
