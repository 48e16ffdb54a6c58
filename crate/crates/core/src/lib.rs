//! Toolkit for aspect-sentiment quadruple extraction from dialogues with
//! LLM backends: corpus handling, prompt construction, output parsing,
//! evaluation, confidence-aware rewards and a small policy-gradient
//! simulator that exercises the reward design end to end.

pub mod corpus;
pub mod evaluation;
pub mod fixtures;
pub mod gateway;
pub mod parsing;
pub mod prompting;
pub mod reward;
pub mod rlsim;

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use corpus::{AspectChain, DatasetStats, Dialogue, Polarity, Quadruple, Utterance};
pub use evaluation::{EvalReport, PrfScore};
pub use parsing::{ParsedAcr, ParsedAsu, QuadrupleFragment};
pub use prompting::{PromptTemplate, Task};
pub use reward::{GenerationResult, RewardBreakdown, RewardConfig};
