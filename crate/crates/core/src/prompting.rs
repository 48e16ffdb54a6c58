//! Prompt construction for the extraction (ASU) and aspect-chain (ACR) tasks.
//!
//! A prompt is `instruction + joiner + rendered dialogue`. ACR instructions
//! carry an [`ASPECT_PLACEHOLDER`] that is replaced by the target explicit
//! aspect.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dialogue;

pub const ASPECT_PLACEHOLDER: &str = "{aspect}";

pub const ASU_INSTRUCTION: &str = "You are now an information extraction model. Please help me to extract opinions from the input and tell me the sentiment polarity of the opinions, what the explicit aspect referred to by the opinion is, and what pronoun is used for the explicit aspect in the utterance where the opinion occurs.";

pub const ACR_INSTRUCTION: &str = "You are now an classification model to judge which utterance in this dialogue appears to be the coreference of {aspect}, outputs 2 if it is an explicit aspect, 1 if it is an implicit aspect, and otherwise 0. Output a sequence of 0, 1, and 2, the length of which is the number of dialogues.";

pub const ASU_INSTRUCTION_ZH: &str = "你现在是一个信息抽取模型。请帮我从输入中抽取观点，并告诉我观点的情感极性、观点所指的显式方面是什么，以及在观点所在的话语中该显式方面使用了什么代词。";

pub const ACR_INSTRUCTION_ZH: &str = "你现在是一个分类模型，请判断对话中哪些话语出现了{aspect}的共指，显式方面输出2，隐式方面输出1，否则输出0。输出一个由0、1、2组成的序列，其长度为对话的话语数。";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ASU", alias = "asu")]
    Asu,
    #[serde(rename = "ACR", alias = "acr")]
    Acr,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Asu => "ASU",
            Task::Acr => "ACR",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "asu" => Ok(Task::Asu),
            "acr" => Ok(Task::Acr),
            other => Err(format!("unknown task `{other}` (expected asu or acr)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template is for {found} but {expected} was requested")]
    TaskMismatch { expected: Task, found: Task },
    #[error("ACR instruction lacks the {ASPECT_PLACEHOLDER} placeholder")]
    MissingPlaceholder,
    #[error("template instruction is empty")]
    EmptyInstruction,
    #[error("unknown template name `{0}`")]
    UnknownName(String),
    #[error("cannot read template {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: Task,
    pub instruction: String,
    #[serde(default = "default_joiner")]
    pub joiner: String,
}

fn default_joiner() -> String {
    "\n".to_string()
}

impl PromptTemplate {
    pub fn new(task: Task, instruction: impl Into<String>, joiner: impl Into<String>) -> Result<Self, PromptError> {
        let t = PromptTemplate { task, instruction: instruction.into(), joiner: joiner.into() };
        t.check()?;
        Ok(t)
    }

    /// The English default instruction for `task`, joined by a newline.
    pub fn default_for(task: Task) -> Self {
        let instruction = match task {
            Task::Asu => ASU_INSTRUCTION,
            Task::Acr => ACR_INSTRUCTION,
        };
        PromptTemplate { task, instruction: instruction.to_string(), joiner: default_joiner() }
    }

    /// Built-in templates: `asu`, `acr`, `asu-zh`, `acr-zh`.
    pub fn named(name: &str) -> Result<Self, PromptError> {
        let (task, instruction) = match name {
            "asu" | "asu-en" => (Task::Asu, ASU_INSTRUCTION),
            "acr" | "acr-en" => (Task::Acr, ACR_INSTRUCTION),
            "asu-zh" => (Task::Asu, ASU_INSTRUCTION_ZH),
            "acr-zh" => (Task::Acr, ACR_INSTRUCTION_ZH),
            other => return Err(PromptError::UnknownName(other.to_string())),
        };
        Ok(PromptTemplate { task, instruction: instruction.to_string(), joiner: default_joiner() })
    }

    /// Reads a TOML template document with `task`, `instruction` and an
    /// optional `joiner`.
    pub fn from_toml_str(text: &str) -> Result<Self, PromptError> {
        let t: PromptTemplate =
            toml::from_str(text).map_err(|e| PromptError::Load { path: "<inline>".into(), message: e.to_string() })?;
        t.check()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PromptError::Load { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            PromptError::Load { message, .. } => PromptError::Load { path: path.display().to_string(), message },
            other => other,
        })
    }

    fn check(&self) -> Result<(), PromptError> {
        if self.instruction.trim().is_empty() {
            return Err(PromptError::EmptyInstruction);
        }
        if self.task == Task::Acr && !self.instruction.contains(ASPECT_PLACEHOLDER) {
            return Err(PromptError::MissingPlaceholder);
        }
        Ok(())
    }

    fn expect_task(&self, expected: Task) -> Result<(), PromptError> {
        if self.task != expected {
            return Err(PromptError::TaskMismatch { expected, found: self.task });
        }
        Ok(())
    }
}

/// One `speaker: text` line per utterance.
pub fn render_dialogue(dialogue: &Dialogue) -> String {
    dialogue.utterances.iter().map(|u| format!("{}: {}", u.speaker, u.text)).collect::<Vec<_>>().join("\n")
}

pub fn build_asu_input(dialogue: &Dialogue, template: &PromptTemplate) -> Result<String, PromptError> {
    template.expect_task(Task::Asu)?;
    if template.instruction.trim().is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    Ok(format!("{}{}{}", template.instruction, template.joiner, render_dialogue(dialogue)))
}

pub fn build_acr_input(dialogue: &Dialogue, explicit: &str, template: &PromptTemplate) -> Result<String, PromptError> {
    template.expect_task(Task::Acr)?;
    if !template.instruction.contains(ASPECT_PLACEHOLDER) {
        return Err(PromptError::MissingPlaceholder);
    }
    if dialogue.chain(explicit).is_none() {
        log::warn!("dialogue {}: `{explicit}` does not anchor any aspect chain", dialogue.dialogue_id);
    }
    let instruction = template.instruction.replace(ASPECT_PLACEHOLDER, explicit);
    Ok(format!("{instruction}{}{}", template.joiner, render_dialogue(dialogue)))
}

/// A prompt ready to be sent to a generation backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub dialogue_id: String,
    pub task: Task,
    #[serde(default)]
    pub explicit: Option<String>,
    pub prompt: String,
}

pub fn asu_prompt_id(dialogue_id: &str) -> String {
    format!("{dialogue_id}::asu")
}

pub fn acr_prompt_id(dialogue_id: &str, explicit: &str) -> String {
    format!("{dialogue_id}::acr::{explicit}")
}

/// Splits a prompt id back into dialogue id, task and (for chain prompts)
/// the explicit aspect. Inverse of [`asu_prompt_id`] and [`acr_prompt_id`].
pub fn parse_prompt_id(prompt_id: &str) -> Option<(String, Task, Option<String>)> {
    if let Some(id) = prompt_id.strip_suffix("::asu") {
        return Some((id.to_string(), Task::Asu, None));
    }
    let (id, explicit) = prompt_id.split_once("::acr::")?;
    Some((id.to_string(), Task::Acr, Some(explicit.to_string())))
}

/// ASU prompt for every dialogue.
pub fn asu_prompts(dialogues: &[Dialogue], template: &PromptTemplate) -> Result<Vec<PromptRecord>, PromptError> {
    dialogues
        .iter()
        .map(|d| {
            Ok(PromptRecord {
                prompt_id: asu_prompt_id(&d.dialogue_id),
                dialogue_id: d.dialogue_id.clone(),
                task: Task::Asu,
                explicit: None,
                prompt: build_asu_input(d, template)?,
            })
        })
        .collect()
}

/// One ACR prompt per aspect chain of every dialogue.
pub fn acr_prompts(dialogues: &[Dialogue], template: &PromptTemplate) -> Result<Vec<PromptRecord>, PromptError> {
    let mut out = Vec::new();
    for d in dialogues {
        for chain in &d.aspect_chains {
            out.push(PromptRecord {
                prompt_id: acr_prompt_id(&d.dialogue_id, &chain.explicit),
                dialogue_id: d.dialogue_id.clone(),
                task: Task::Acr,
                explicit: Some(chain.explicit.clone()),
                prompt: build_acr_input(d, &chain.explicit, template)?,
            });
        }
    }
    Ok(out)
}
