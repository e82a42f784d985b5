//! The append-only run trace: one JSONL event per control-unit transition.
//!
//! The trace is the replay contract. A scripted backend consumes the
//! `llm_response` events of a prior trace verbatim, and replay re-derives
//! every other event. Each event carries a chained digest over the whole
//! prefix, so any single-byte edit anywhere in the file is detected at the
//! exact event where it happened.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::{EvaluatorReport, SyntaxErrorEntry};
use crate::messages::{Message, ToolCallPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    RunStarted,
    LlmResponse,
    BootstrapRetry,
    BootstrapFailed,
    ProgramLoaded,
    InstructionLoaded,
    ToolDispatched,
    FunctionResponse,
    EvaluatorRan,
    ErrorFeedback,
    CycleMessage,
    StepCompleteRefused,
    OverflowDetected,
    SummaryRequested,
    WindowReset,
    MessagesFlushed,
    InstructionDone,
    RetriesExhausted,
    RunCompleted,
    RunFailed,
}

/// Evaluator outcome view embedded in events (raw output stays out of the
/// trace; the rendered error-feedback message carries what the LLM saw).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorSummary {
    pub syntax_errors: Vec<SyntaxErrorEntry>,
    pub tests_passed: u32,
    pub tests_failed: u32,
    pub is_clean: bool,
}

impl From<&EvaluatorReport> for EvaluatorSummary {
    fn from(report: &EvaluatorReport) -> Self {
        EvaluatorSummary {
            syntax_errors: report.syntax_errors.clone(),
            tests_passed: report.tests_passed,
            tests_failed: report.tests_failed,
            is_clean: report.is_clean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub turn: u64,
    pub phase: String,
    pub event_type: EventType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCallPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator_report: Option<EvaluatorSummary>,
    pub temperature: f64,
    pub retries: u32,
    pub token_total: usize,
    /// sha256 over the previous event's chain and this event's canonical
    /// serialization with `chain` emptied.
    #[serde(default)]
    pub chain: String,
}

impl TraceEvent {
    pub fn canonical_line(&self) -> String {
        serde_json::to_string(self).expect("trace events always serialize")
    }
}

pub fn compute_chain(previous_chain: &str, event: &TraceEvent) -> String {
    let mut unchained = event.clone();
    unchained.chain = String::new();
    let mut hasher = Sha256::new();
    hasher.update(previous_chain.as_bytes());
    hasher.update(unchained.canonical_line().as_bytes());
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line} is not a valid trace event: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("chain broken at event {index} (turn {turn}): the trace was edited or corrupted")]
    ChainBroken { index: usize, turn: u64 },
}

/// Receives events in order. The control unit records through this, so runs
/// can stream to disk while replays collect in memory.
pub trait TraceSink {
    fn record(&mut self, event: TraceEvent) -> Result<(), TraceError>;
}

/// Streams chained events to a JSONL file.
pub struct TraceWriter {
    out: BufWriter<File>,
    previous_chain: String,
    count: usize,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, TraceError> {
        Ok(TraceWriter {
            out: BufWriter::new(File::create(path)?),
            previous_chain: String::new(),
            count: 0,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

impl TraceSink for TraceWriter {
    fn record(&mut self, mut event: TraceEvent) -> Result<(), TraceError> {
        event.chain = compute_chain(&self.previous_chain, &event);
        self.previous_chain = event.chain.clone();
        writeln!(self.out, "{}", event.canonical_line())?;
        self.out.flush()?;
        self.count += 1;
        Ok(())
    }
}

/// Collects chained events in memory (replay side).
#[derive(Default)]
pub struct MemorySink {
    pub events: Vec<TraceEvent>,
    previous_chain: String,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TraceSink for MemorySink {
    fn record(&mut self, mut event: TraceEvent) -> Result<(), TraceError> {
        event.chain = compute_chain(&self.previous_chain, &event);
        self.previous_chain = event.chain.clone();
        self.events.push(event);
        Ok(())
    }
}

/// Records to two sinks at once (stream to disk and keep in memory).
pub struct TeeSink<'a, A: TraceSink, B: TraceSink> {
    pub first: &'a mut A,
    pub second: &'a mut B,
}

impl<A: TraceSink, B: TraceSink> TraceSink for TeeSink<'_, A, B> {
    fn record(&mut self, event: TraceEvent) -> Result<(), TraceError> {
        self.first.record(event.clone())?;
        self.second.record(event)
    }
}

/// Parses a trace file without verifying the chain.
pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TraceEvent =
            serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
                line: i + 1,
                detail: e.to_string(),
            })?;
        events.push(event);
    }
    Ok(events)
}

/// Verifies the chained digests; reports the first edited event.
pub fn verify_chain(events: &[TraceEvent]) -> Result<(), TraceError> {
    let mut previous = String::new();
    for (index, event) in events.iter().enumerate() {
        let expected = compute_chain(&previous, event);
        if event.chain != expected {
            return Err(TraceError::ChainBroken {
                index,
                turn: event.turn,
            });
        }
        previous = event.chain.clone();
    }
    Ok(())
}

/// The canned LLM responses of a trace, in order: what a scripted backend
/// replays.
pub fn scripted_responses(events: &[TraceEvent]) -> Vec<Message> {
    events
        .iter()
        .filter(|e| e.event_type == EventType::LlmResponse)
        .filter_map(|e| e.message.clone())
        .collect()
}
