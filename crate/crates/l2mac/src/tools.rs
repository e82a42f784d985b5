//! Function schemas advertised to the LLM, plus parsing and dispatch of the
//! calls it makes.
//!
//! Parse or argument errors never abort the run: they become function
//! response messages so the LLM can correct itself in-context. Dispatch is
//! total — every validated call yields exactly one function response.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::file_store::{FileSizeLimit, FileStore, StoreError};
use crate::instructions::PLAN_FUNCTION;
use crate::messages::{Message, MessageKind};
use crate::sandbox::{ProcessRunner, SandboxError};
use crate::tokens::{truncate_to_tokens, TokenCounter};

pub const STEP_COMPLETE_FUNCTION: &str = "sub_task_step_complete";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToolName {
    ProvideSteps,
    StepComplete,
    ViewFiles,
    RunPythonFile,
    PytestFiles,
    WriteFiles,
    DeleteFiles,
}

impl ToolName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ToolName::ProvideSteps => PLAN_FUNCTION,
            ToolName::StepComplete => STEP_COMPLETE_FUNCTION,
            ToolName::ViewFiles => "view_files",
            ToolName::RunPythonFile => "run_python_file",
            ToolName::PytestFiles => "pytest_files",
            ToolName::WriteFiles => "write_files",
            ToolName::DeleteFiles => "delete_files",
        }
    }

    pub fn parse(name: &str) -> Option<ToolName> {
        match name {
            n if n == PLAN_FUNCTION => Some(ToolName::ProvideSteps),
            STEP_COMPLETE_FUNCTION => Some(ToolName::StepComplete),
            "view_files" => Some(ToolName::ViewFiles),
            "run_python_file" => Some(ToolName::RunPythonFile),
            "pytest_files" => Some(ToolName::PytestFiles),
            "write_files" => Some(ToolName::WriteFiles),
            "delete_files" => Some(ToolName::DeleteFiles),
            _ => None,
        }
    }
}

/// One advertised function: name, description and JSON-schema parameters,
/// serialized verbatim onto the wire.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

fn schema(name: &str, description: &str, parameters: Value) -> ToolSchema {
    ToolSchema {
        name: name.to_string(),
        description: description.to_string(),
        parameters,
    }
}

/// The full function set, bootstrap planner included.
pub fn all_schemas() -> &'static [ToolSchema] {
    static SCHEMAS: OnceLock<Vec<ToolSchema>> = OnceLock::new();
    SCHEMAS.get_or_init(|| {
        vec![
            schema(
                PLAN_FUNCTION,
                "For producing a step-by-step plan, where each step paragraph is a detailed sub-task step for a separate sub-agent (large language model agent) to complete. Within each detailed step paragraph, always include a last sentence to create and run tests when implementing or writing code in that same step.",
                json!({
                    "type": "object",
                    "properties": {
                        "steps": {
                            "type": "array",
                            "description": "List of strings, where each string is a separate step sub-task paragraph for a separate sub-agent to complete. Within each detailed step paragraph, always include a last sentence to create and run tests when implementing or writing code in that same step.",
                            "items": {
                                "type": "string"
                            }
                        }
                    },
                    "required": ["steps"]
                }),
            ),
            schema(
                STEP_COMPLETE_FUNCTION,
                "Call this function when the user specified sub task step has been completed.",
                json!({
                    "type": "object",
                    "properties": {}
                }),
            ),
            schema(
                "view_files",
                "Print out the file contents into the response to view.",
                json!({
                    "type": "object",
                    "properties": {
                        "files": {
                            "type": "array",
                            "description": "list of the files to view",
                            "items": {
                                "type": "string"
                            }
                        }
                    },
                    "required": ["files"]
                }),
            ),
            schema(
                "run_python_file",
                "Run python file and return the output to the response to view. That is with 'python3 file_name_to_run'.",
                json!({
                    "type": "object",
                    "properties": {
                        "file_name_to_run": {
                            "type": "string",
                            "description": "file name to run"
                        },
                        "arguments": {
                            "type": "array",
                            "description": "optional run arguments",
                            "items": {
                                "type": "string"
                            }
                        }
                    },
                    "required": ["file_name_to_run"]
                }),
            ),
            schema(
                "pytest_files",
                "Run pytest on the input file names and print out the results to the response to view. If no file names are provided, pytest runs on all files.",
                json!({
                    "type": "object",
                    "properties": {
                        "files_to_test": {
                            "type": "array",
                            "description": "file names to run pytest on",
                            "items": {
                                "type": "string"
                            }
                        }
                    }
                }),
            ),
            schema(
                "write_files",
                "Write out multiple files and it will be combined into the existing codebase. Always output the whole file. You always indent code with tabs.",
                json!({
                    "type": "object",
                    "properties": {
                        "files_and_contents": {
                            "type": "array",
                            "description": "list of files and their contents.",
                            "items": {
                                "type": "object",
                                "properties": {
                                    "file_path": {
                                        "type": "string",
                                        "description": "Path to the file"
                                    },
                                    "file_contents": {
                                        "type": "string",
                                        "description": "Contents of the file"
                                    }
                                },
                                "required": ["file_path", "file_contents"]
                            }
                        }
                    },
                    "required": ["files_and_contents"]
                }),
            ),
            schema(
                "delete_files",
                "Delete files. Specify the file names, and these files will be deleted. If you specify the file name '-1' all files in the folder will be deleted.",
                json!({
                    "type": "object",
                    "properties": {
                        "files": {
                            "type": "array",
                            "description": "list of the files to delete. If you provide a file name of '-1' all files in the folder will be deleted.",
                            "items": {
                                "type": "string"
                            }
                        }
                    },
                    "required": ["files"]
                }),
            ),
        ]
    })
}

/// Functions available while executing an instruction (everything except
/// the bootstrap planner).
pub fn runtime_schemas() -> Vec<ToolSchema> {
    all_schemas()
        .iter()
        .filter(|s| s.name != PLAN_FUNCTION)
        .cloned()
        .collect()
}

/// Names interpolated into the cycle messages, in advertised order.
pub fn runtime_function_names() -> Vec<&'static str> {
    all_schemas()
        .iter()
        .map(|s| s.name.as_str())
        .filter(|n| *n != PLAN_FUNCTION)
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ToolParseError {
    #[error("unknown function '{0}'")]
    UnknownTool(String),
    #[error("malformed arguments for '{name}': {problem}")]
    MalformedArguments { name: String, problem: String },
}

impl ToolParseError {
    /// Error text fed back to the LLM as a function response.
    pub fn render(&self, counter: &dyn TokenCounter) -> Message {
        let text = match self {
            ToolParseError::UnknownTool(name) => format!(
                "{{\"status\": \"error\", \"message\": {}}}",
                Value::String(format!(
                    "Unknown function '{name}'. Only use the functions you have been provided with."
                ))
            ),
            ToolParseError::MalformedArguments { name, problem } => format!(
                "{{\"status\": \"error\", \"message\": {}}}",
                Value::String(format!(
                    "Arguments for function '{name}' are not a valid RFC8259 JSON request: {problem}"
                ))
            ),
        };
        Message::function_response(text, counter)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct FileAndContents {
    pub file_path: String,
    pub file_contents: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct WriteFilesArgs {
    pub files_and_contents: Vec<FileAndContents>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ViewFilesArgs {
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RunPythonArgs {
    pub file_name_to_run: String,
    #[serde(default)]
    pub arguments: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PytestArgs {
    // optional by schema: absent means "run on all files"
    #[serde(default)]
    pub files_to_test: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DeleteFilesArgs {
    pub files: Vec<String>,
}

/// A parsed, schema-validated tool call.
#[derive(Debug, Clone)]
pub enum ToolCall {
    ProvideSteps { steps: Vec<String> },
    StepComplete,
    ViewFiles(ViewFilesArgs),
    RunPythonFile(RunPythonArgs),
    PytestFiles(PytestArgs),
    WriteFiles(WriteFilesArgs),
    DeleteFiles(DeleteFilesArgs),
}

impl ToolCall {
    pub fn name(&self) -> ToolName {
        match self {
            ToolCall::ProvideSteps { .. } => ToolName::ProvideSteps,
            ToolCall::StepComplete => ToolName::StepComplete,
            ToolCall::ViewFiles(_) => ToolName::ViewFiles,
            ToolCall::RunPythonFile(_) => ToolName::RunPythonFile,
            ToolCall::PytestFiles(_) => ToolName::PytestFiles,
            ToolCall::WriteFiles(_) => ToolName::WriteFiles,
            ToolCall::DeleteFiles(_) => ToolName::DeleteFiles,
        }
    }
}

fn parse_args<T: serde::de::DeserializeOwned>(
    name: &str,
    arguments: &str,
) -> Result<T, ToolParseError> {
    serde_json::from_str(arguments).map_err(|e| ToolParseError::MalformedArguments {
        name: name.to_string(),
        problem: e.to_string(),
    })
}

/// Parses and validates the tool call carried by an LLM response message.
pub fn parse_tool_call(raw: &Message) -> Result<ToolCall, ToolParseError> {
    debug_assert_eq!(raw.kind, MessageKind::LlmResponse);
    let payload = raw
        .tool_call
        .as_ref()
        .expect("parse_tool_call requires a tool call payload");
    let name = ToolName::parse(&payload.name)
        .ok_or_else(|| ToolParseError::UnknownTool(payload.name.clone()))?;
    let arguments = if payload.arguments.trim().is_empty() {
        "{}"
    } else {
        payload.arguments.as_str()
    };
    match name {
        ToolName::ProvideSteps => {
            #[derive(Deserialize)]
            struct Steps {
                steps: Vec<String>,
            }
            let args: Steps = parse_args(payload.name.as_str(), arguments)?;
            Ok(ToolCall::ProvideSteps { steps: args.steps })
        }
        ToolName::StepComplete => {
            // accept any object; the schema has no properties
            let _: Value = parse_args(payload.name.as_str(), arguments)?;
            Ok(ToolCall::StepComplete)
        }
        ToolName::ViewFiles => Ok(ToolCall::ViewFiles(parse_args(
            payload.name.as_str(),
            arguments,
        )?)),
        ToolName::RunPythonFile => Ok(ToolCall::RunPythonFile(parse_args(
            payload.name.as_str(),
            arguments,
        )?)),
        ToolName::PytestFiles => Ok(ToolCall::PytestFiles(parse_args(
            payload.name.as_str(),
            arguments,
        )?)),
        ToolName::WriteFiles => Ok(ToolCall::WriteFiles(parse_args(
            payload.name.as_str(),
            arguments,
        )?)),
        ToolName::DeleteFiles => Ok(ToolCall::DeleteFiles(parse_args(
            payload.name.as_str(),
            arguments,
        )?)),
    }
}

/// Everything dispatch needs from the control unit for one call.
pub struct DispatchContext<'a> {
    pub store: &'a mut FileStore,
    pub sandbox: &'a dyn ProcessRunner,
    pub counter: &'a dyn TokenCounter,
    /// Cap for captured process output, already clamped to the remaining
    /// context margin by the caller.
    pub max_output_tokens: usize,
    /// Half-margin cap for any single written file, when enforced.
    pub max_file_tokens: Option<usize>,
    pub timeout: Duration,
}

/// Outcome of a dispatched call: the function response plus whether the
/// store was mutated (which obliges the control unit to re-evaluate).
#[derive(Debug)]
pub struct DispatchResult {
    pub message: Message,
    pub store_changed: bool,
}

fn json_error_response(text: String, counter: &dyn TokenCounter) -> Message {
    Message::function_response(
        format!("{{\"status\": \"error\", \"message\": {}}}", Value::String(text)),
        counter,
    )
}

/// Routes a validated call to the file store or the sandbox. Total: every
/// call produces exactly one function response, panics included.
pub fn dispatch(call: &ToolCall, ctx: &mut DispatchContext<'_>) -> DispatchResult {
    let outcome = catch_unwind(AssertUnwindSafe(|| dispatch_inner(call, ctx)));
    match outcome {
        Ok(result) => result,
        Err(panic) => {
            let detail = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            DispatchResult {
                message: json_error_response(
                    format!("internal tool failure: {detail}"),
                    ctx.counter,
                ),
                store_changed: false,
            }
        }
    }
}

fn dispatch_inner(call: &ToolCall, ctx: &mut DispatchContext<'_>) -> DispatchResult {
    match call {
        ToolCall::ViewFiles(args) => DispatchResult {
            message: ctx.store.view_files(&args.files, ctx.counter),
            store_changed: false,
        },
        ToolCall::WriteFiles(args) => dispatch_write(args, ctx),
        ToolCall::DeleteFiles(args) => dispatch_delete(args, ctx),
        ToolCall::RunPythonFile(args) => {
            let mut argv = vec![args.file_name_to_run.clone()];
            argv.extend(args.arguments.iter().cloned());
            run_in_store_copy(ctx, &argv, Some(&args.file_name_to_run))
        }
        ToolCall::PytestFiles(args) => {
            let mut argv = vec!["-m".to_string(), "pytest".to_string()];
            if let Some(files) = &args.files_to_test {
                argv.extend(files.iter().cloned());
            }
            let first_file = args.files_to_test.as_ref().and_then(|f| f.first());
            run_in_store_copy(ctx, &argv, first_file.map(String::as_str))
        }
        // handled by the control unit; responding here keeps dispatch total
        ToolCall::StepComplete | ToolCall::ProvideSteps { .. } => DispatchResult {
            message: json_error_response(
                format!(
                    "function '{}' is handled by the control unit and cannot be dispatched as a tool",
                    call.name().as_str()
                ),
                ctx.counter,
            ),
            store_changed: false,
        },
    }
}

fn dispatch_write(args: &WriteFilesArgs, ctx: &mut DispatchContext<'_>) -> DispatchResult {
    let files: Vec<(String, String)> = args
        .files_and_contents
        .iter()
        .map(|f| (f.file_path.clone(), f.file_contents.clone()))
        .collect();
    let limit = ctx.max_file_tokens.map(|max_tokens| FileSizeLimit {
        max_tokens,
        counter: ctx.counter,
    });
    match ctx.store.write_files(&files, limit.as_ref()) {
        Ok(()) => DispatchResult {
            message: Message::function_response(
                "{\"write_files_status\": \"success\"}",
                ctx.counter,
            ),
            store_changed: true,
        },
        Err(err @ (StoreError::Path(_) | StoreError::FileTooLarge { .. } | StoreError::BinaryContent(_))) => {
            DispatchResult {
                message: json_error_response(format!("write_files rejected: {err}"), ctx.counter),
                store_changed: false,
            }
        }
        Err(err) => DispatchResult {
            message: json_error_response(format!("write_files failed: {err}"), ctx.counter),
            store_changed: false,
        },
    }
}

fn dispatch_delete(args: &DeleteFilesArgs, ctx: &mut DispatchContext<'_>) -> DispatchResult {
    match ctx.store.delete_files(&args.files) {
        Ok((deleted, missing)) => {
            let mut message = format!("Deleted {} file(s).", deleted.len());
            if !missing.is_empty() {
                message.push_str(&format!(" File not found: {}.", missing.join(", ")));
            }
            DispatchResult {
                message: Message::function_response(
                    format!(
                        "{{\"delete_files_status\": \"success\", \"message\": {}}}",
                        Value::String(message)
                    ),
                    ctx.counter,
                ),
                store_changed: !deleted.is_empty(),
            }
        }
        Err(err) => DispatchResult {
            message: json_error_response(format!("delete_files failed: {err}"), ctx.counter),
            store_changed: false,
        },
    }
}

/// Stages the store into a throwaway directory and runs python3 there.
/// Nothing a child writes can leak back into the store.
fn run_in_store_copy(
    ctx: &mut DispatchContext<'_>,
    argv: &[String],
    validate_path: Option<&str>,
) -> DispatchResult {
    if let Some(path) = validate_path {
        if crate::file_store::normalize_path(path).is_err() {
            return DispatchResult {
                message: json_error_response(
                    format!("invalid file path: {path}"),
                    ctx.counter,
                ),
                store_changed: false,
            };
        }
    }
    let staged = match tempfile::tempdir() {
        Ok(dir) => dir,
        Err(e) => {
            return DispatchResult {
                message: json_error_response(format!("sandbox staging failed: {e}"), ctx.counter),
                store_changed: false,
            }
        }
    };
    if let Err(e) = ctx.store.mirror_to(staged.path()) {
        return DispatchResult {
            message: json_error_response(format!("sandbox staging failed: {e}"), ctx.counter),
            store_changed: false,
        };
    }
    let result = ctx
        .sandbox
        .run("python3", argv, staged.path(), ctx.timeout);
    let output = match result {
        Ok(out) => {
            let mut text = out.combined();
            if out.timed_out {
                text.push_str(&format!(
                    "\nProcess timed out after {} seconds and was killed.",
                    ctx.timeout.as_secs()
                ));
            } else if out.exit_code != Some(0) {
                text.push_str(&format!(
                    "\nProcess exited with code {}.",
                    out.exit_code.map_or("unknown".to_string(), |c| c.to_string())
                ));
            }
            text
        }
        Err(SandboxError::Disallowed(p)) => format!("program '{p}' is not allowed in the sandbox"),
        Err(SandboxError::Spawn { program, source }) => {
            format!("failed to start '{program}': {source}")
        }
    };
    let sanitized = sanitize_sandbox_output(&output, staged.path());
    let (truncated, _) = truncate_to_tokens(&sanitized, ctx.max_output_tokens, ctx.counter);
    DispatchResult {
        message: Message::function_response(
            format!("{{\"output\": {}}}", Value::String(truncated)),
            ctx.counter,
        ),
        store_changed: false,
    }
}

/// Scrubs run-specific noise (the staging path and wall-clock timings) so
/// captured output is byte-stable across replays on the same machine.
pub fn sanitize_sandbox_output(text: &str, staged_root: &Path) -> String {
    static TIMING: OnceLock<regex::Regex> = OnceLock::new();
    let timing = TIMING.get_or_init(|| regex::Regex::new(r"in \d+\.\d+s").expect("static regex"));
    let replaced = text.replace(&staged_root.display().to_string(), "<sandbox>");
    timing.replace_all(&replaced, "in Xs").into_owned()
}
