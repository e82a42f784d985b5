//! The instruction registry: the prompt program produced at bootstrap and
//! consumed front-to-back. Once execution starts the list is immutable;
//! there is no runtime re-planning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::messages::{Message, MessageKind};

pub const PLAN_FUNCTION: &str = "provide_detailed_sub_task_steps_for_sub_agents";

/// Guidance limit from the bootstrap prompt; longer programs are accepted
/// with a warning because the limit is advice to the model, not a contract.
pub const ADVISED_MAX_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionStatus {
    Pending,
    InProgress,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub index_k: usize,
    pub text: String,
    pub status: InstructionStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramOrigin {
    Bootstrapped,
    UserProvided,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
    #[error("the steps array is empty")]
    EmptyProgram,
    #[error("no pending instruction left")]
    ProgramExhausted,
    #[error("instruction status may only move forward (index {index})")]
    InvalidTransition { index: usize },
}

/// The prompt program `I`: an ordered, fixed-length list of instructions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptProgram {
    instructions: Vec<Instruction>,
    origin: ProgramOrigin,
}

#[derive(Deserialize)]
struct StepsArgs {
    steps: Vec<String>,
}

impl PromptProgram {
    pub fn from_steps(steps: Vec<String>, origin: ProgramOrigin) -> Result<Self, ProgramError> {
        if steps.is_empty() {
            return Err(ProgramError::EmptyProgram);
        }
        let instructions = steps
            .into_iter()
            .enumerate()
            .map(|(index_k, text)| Instruction {
                index_k,
                text,
                status: InstructionStatus::Pending,
            })
            .collect();
        Ok(PromptProgram {
            instructions,
            origin,
        })
    }

    /// Parses the planning tool call of a bootstrap response into a program.
    /// Instruction texts are stored verbatim, untrimmed.
    pub fn parse_bootstrap_response(response: &Message) -> Result<Self, ProgramError> {
        if response.kind != MessageKind::LlmResponse {
            return Err(ProgramError::MalformedToolCall(
                "response is not an LLM message".to_string(),
            ));
        }
        let call = response.tool_call.as_ref().ok_or_else(|| {
            ProgramError::MalformedToolCall("response carries no tool call".to_string())
        })?;
        if call.name != PLAN_FUNCTION {
            return Err(ProgramError::MalformedToolCall(format!(
                "expected a call to {PLAN_FUNCTION}, got {}",
                call.name
            )));
        }
        let args: StepsArgs = serde_json::from_str(&call.arguments)
            .map_err(|e| ProgramError::MalformedToolCall(format!("arguments: {e}")))?;
        if args.steps.len() > ADVISED_MAX_STEPS {
            log::warn!(
                "bootstrap produced {} steps, more than the advised {}",
                args.steps.len(),
                ADVISED_MAX_STEPS
            );
        }
        Self::from_steps(args.steps, ProgramOrigin::Bootstrapped)
    }

    /// Returns the lowest-index pending instruction, marking it in-progress.
    pub fn pop_front(&mut self) -> Result<Instruction, ProgramError> {
        let slot = self
            .instructions
            .iter_mut()
            .find(|i| i.status == InstructionStatus::Pending)
            .ok_or(ProgramError::ProgramExhausted)?;
        slot.status = InstructionStatus::InProgress;
        Ok(slot.clone())
    }

    pub fn mark_done(&mut self, index: usize) -> Result<(), ProgramError> {
        self.transition(index, InstructionStatus::Done)
    }

    pub fn mark_failed(&mut self, index: usize) -> Result<(), ProgramError> {
        self.transition(index, InstructionStatus::Failed)
    }

    fn transition(&mut self, index: usize, to: InstructionStatus) -> Result<(), ProgramError> {
        let slot = self
            .instructions
            .get_mut(index)
            .ok_or(ProgramError::InvalidTransition { index })?;
        if slot.status != InstructionStatus::InProgress {
            return Err(ProgramError::InvalidTransition { index });
        }
        slot.status = to;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn origin(&self) -> ProgramOrigin {
        self.origin
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn all_done(&self) -> bool {
        self.instructions
            .iter()
            .all(|i| i.status == InstructionStatus::Done)
    }

    /// JSON dump written to the run directory as `prompt_program.json`.
    pub fn dump(&self) -> serde_json::Value {
        serde_json::json!({
            "origin": self.origin,
            "steps": self.instructions.iter().map(|i| i.text.clone()).collect::<Vec<_>>(),
        })
    }
}
