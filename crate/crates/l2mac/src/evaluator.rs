//! The evaluator E(D): errors-only syntax checking plus the self-generated
//! test suite, run over a throwaway copy of the file store. A non-empty
//! report is rendered into an error-feedback message for in-context
//! correction; an empty one gates instruction completion.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::file_store::FileStore;
use crate::messages::Message;
use crate::sandbox::{ProcessRunner, SandboxError};
use crate::tokens::{truncate_to_tokens, TokenCounter};
use crate::tools::sanitize_sandbox_output;

/// Commands the evaluator shells out to. The defaults mirror the code
/// instantiation: an errors-only lint pass and pytest with default
/// discovery. Other domains swap the commands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub checker_cmd: String,
    pub checker_args: Vec<String>,
    pub test_cmd: Vec<String>,
    pub timeout_s: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checker_cmd: "pylint".to_string(),
            checker_args: vec!["--disable=all".to_string(), "--enable=E".to_string()],
            test_cmd: vec![
                "python3".to_string(),
                "-m".to_string(),
                "pytest".to_string(),
            ],
            timeout_s: 120,
        }
    }
}

impl EvalConfig {
    /// Errors-only checking through the bundled checker script, for
    /// environments without pylint on the path. Same output format, same
    /// error classes (syntax errors and undefined names).
    pub fn with_bundled_checker(mut self, script: &Path) -> Self {
        self.checker_cmd = "python3".to_string();
        self.checker_args = vec![script.display().to_string()];
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxErrorEntry {
    pub path: String,
    pub line: u32,
    pub code: String,
    pub message: String,
}

/// Result of one evaluator pass. Equality intentionally covers every field;
/// outputs are sanitized of wall-clock noise before they get here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorReport {
    pub syntax_errors: Vec<SyntaxErrorEntry>,
    pub tests_passed: u32,
    pub tests_failed: u32,
    pub raw_output: String,
}

impl EvaluatorReport {
    pub fn clean() -> Self {
        EvaluatorReport {
            syntax_errors: Vec::new(),
            tests_passed: 0,
            tests_failed: 0,
            raw_output: String::new(),
        }
    }

    pub fn is_clean(&self) -> bool {
        self.syntax_errors.is_empty() && self.tests_failed == 0
    }
}

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("evaluator unavailable: {0}")]
    Unavailable(String),
    #[error("evaluator staging failed: {0}")]
    Staging(String),
}

/// Domain-specific output checking over the file store. The code evaluator
/// is the production implementation; tests inject scripted ones.
pub trait Evaluator {
    fn evaluate(&mut self, store: &FileStore) -> Result<EvaluatorReport, EvaluatorError>;
}

/// Syntax checker + test runner for generated Python codebases, with a
/// content-hash cache: the report is a pure function of the store.
pub struct CodeEvaluator<'a> {
    sandbox: &'a dyn ProcessRunner,
    config: EvalConfig,
    cache: std::collections::HashMap<String, EvaluatorReport>,
}

impl<'a> CodeEvaluator<'a> {
    pub fn new(sandbox: &'a dyn ProcessRunner, config: EvalConfig) -> Self {
        CodeEvaluator {
            sandbox,
            config,
            cache: std::collections::HashMap::new(),
        }
    }

    pub fn config(&self) -> &EvalConfig {
        &self.config
    }
}

impl Evaluator for CodeEvaluator<'_> {
    fn evaluate(&mut self, store: &FileStore) -> Result<EvaluatorReport, EvaluatorError> {
        let key = store.content_hash();
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let report = evaluate(store, self.sandbox, &self.config)?;
        self.cache.insert(key, report.clone());
        Ok(report)
    }
}

/// Evaluator double that serves queued reports in order, then stays clean.
/// Used by offline harnesses that exercise the control unit without
/// spawning checker or test processes.
#[derive(Debug, Default)]
pub struct ScriptedEvaluator {
    queue: std::collections::VecDeque<EvaluatorReport>,
}

impl ScriptedEvaluator {
    pub fn new(reports: Vec<EvaluatorReport>) -> Self {
        ScriptedEvaluator {
            queue: reports.into(),
        }
    }

    pub fn always_clean() -> Self {
        Self::default()
    }
}

impl Evaluator for ScriptedEvaluator {
    fn evaluate(&mut self, _store: &FileStore) -> Result<EvaluatorReport, EvaluatorError> {
        Ok(self.queue.pop_front().unwrap_or_else(EvaluatorReport::clean))
    }
}

/// Python source files, in listing order.
fn python_files(store: &FileStore) -> Vec<String> {
    store
        .list_files()
        .into_iter()
        .filter(|p| p.ends_with(".py"))
        .collect()
}

/// Test files: basename starts with `test_`.
pub fn test_files(store: &FileStore) -> Vec<String> {
    python_files(store)
        .into_iter()
        .filter(|p| {
            Path::new(p)
                .file_name()
                .map(|n| n.to_string_lossy().starts_with("test_"))
                .unwrap_or(false)
        })
        .collect()
}

/// Runs the configured checker and test runner over a staged copy of the
/// store and aggregates the outcome.
pub fn evaluate(
    store: &FileStore,
    sandbox: &dyn ProcessRunner,
    config: &EvalConfig,
) -> Result<EvaluatorReport, EvaluatorError> {
    let sources = python_files(store);
    if sources.is_empty() {
        return Ok(EvaluatorReport::clean());
    }
    let staged = tempfile::tempdir().map_err(|e| EvaluatorError::Staging(e.to_string()))?;
    store
        .mirror_to(staged.path())
        .map_err(|e| EvaluatorError::Staging(e.to_string()))?;
    let timeout = Duration::from_secs(config.timeout_s);

    let mut raw_output = String::new();
    let mut syntax_errors = Vec::new();

    let mut checker_args = config.checker_args.clone();
    checker_args.extend(sources.iter().cloned());
    match sandbox.run(&config.checker_cmd, &checker_args, staged.path(), timeout) {
        Ok(out) => {
            let text = sanitize_sandbox_output(&out.combined(), staged.path());
            syntax_errors = parse_checker_output(&text);
            if out.timed_out {
                raw_output.push_str("Syntax checker timed out.\n");
            }
            raw_output.push_str(&text);
        }
        Err(SandboxError::Spawn { program, source }) => {
            return Err(EvaluatorError::Unavailable(format!(
                "checker '{program}' cannot be started: {source}"
            )));
        }
        Err(SandboxError::Disallowed(program)) => {
            return Err(EvaluatorError::Unavailable(format!(
                "checker '{program}' is not allowlisted"
            )));
        }
    }

    let mut tests_passed = 0;
    let mut tests_failed = 0;
    if !test_files(store).is_empty() {
        let (cmd, args) = config
            .test_cmd
            .split_first()
            .ok_or_else(|| EvaluatorError::Unavailable("empty test command".to_string()))?;
        match sandbox.run(cmd, args, staged.path(), timeout) {
            Ok(out) => {
                let text = sanitize_sandbox_output(&out.combined(), staged.path());
                let counts = parse_test_summary(&text);
                tests_passed = counts.passed;
                // collection errors and internal errors gate completion too
                tests_failed = counts.failed + counts.errors;
                if out.timed_out {
                    tests_failed += 1;
                    raw_output.push_str("\nTest run timed out.\n");
                } else if counts.passed == 0
                    && counts.failed == 0
                    && counts.errors == 0
                    && out.exit_code != Some(0)
                    && out.exit_code != Some(5)
                {
                    // unparseable failure (exit 5 is "no tests collected")
                    tests_failed = 1;
                }
                if !raw_output.is_empty() && !raw_output.ends_with('\n') {
                    raw_output.push('\n');
                }
                raw_output.push_str(&text);
            }
            Err(SandboxError::Spawn { program, source }) => {
                return Err(EvaluatorError::Unavailable(format!(
                    "test runner '{program}' cannot be started: {source}"
                )));
            }
            Err(SandboxError::Disallowed(program)) => {
                return Err(EvaluatorError::Unavailable(format!(
                    "test runner '{program}' is not allowlisted"
                )));
            }
        }
    }

    Ok(EvaluatorReport {
        syntax_errors,
        tests_passed,
        tests_failed,
        raw_output,
    })
}

/// Parses `path:line:col: CODE: message` lines (the errors-only checker
/// format shared by pylint and the bundled checker).
pub fn parse_checker_output(text: &str) -> Vec<SyntaxErrorEntry> {
    let pattern = regex::Regex::new(r"^(?P<path>[^:\s][^:]*):(?P<line>\d+):(?:\d+:)?\s*(?P<code>[CEFRW]\d{4}):\s*(?P<message>.*)$")
        .expect("static regex");
    let mut errors = Vec::new();
    for line in text.lines() {
        if let Some(caps) = pattern.captures(line) {
            let code = caps["code"].to_string();
            if !code.starts_with('E') {
                continue;
            }
            errors.push(SyntaxErrorEntry {
                path: caps["path"].to_string(),
                line: caps["line"].parse().unwrap_or(0),
                code,
                message: caps["message"].trim().to_string(),
            });
        }
    }
    errors
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct TestCounts {
    pub passed: u32,
    pub failed: u32,
    pub errors: u32,
}

/// Extracts pass/fail/error counts from a pytest summary line such as
/// `== 3 passed, 1 failed in 0.12s ==`.
pub fn parse_test_summary(text: &str) -> TestCounts {
    let pattern =
        regex::Regex::new(r"(\d+) (passed|failed|error)").expect("static regex");
    let mut counts = TestCounts::default();
    for caps in pattern.captures_iter(text) {
        let n: u32 = caps[1].parse().unwrap_or(0);
        match &caps[2] {
            "passed" => counts.passed = n,
            "failed" => counts.failed = n,
            "error" => counts.errors = n,
            _ => {}
        }
    }
    counts
}

/// Renders a dirty report into the error-feedback message; a clean report
/// renders nothing.
pub fn render_error_message(
    report: &EvaluatorReport,
    max_tokens: usize,
    counter: &dyn TokenCounter,
) -> Option<Message> {
    if report.is_clean() {
        return None;
    }
    let mut body = String::from(
        "Error feedback from the evaluator. The sub task step cannot complete until these are fixed.\n",
    );
    if !report.syntax_errors.is_empty() {
        body.push_str(&format!(
            "\nSyntax errors ({}):\n",
            report.syntax_errors.len()
        ));
        for err in &report.syntax_errors {
            body.push_str(&format!(
                "{}:{}: {} {}\n",
                err.path, err.line, err.code, err.message
            ));
        }
    }
    if report.tests_failed > 0 {
        body.push_str(&format!(
            "\nTest results ({} passed, {} failed):\n",
            report.tests_passed, report.tests_failed
        ));
        body.push_str(&report.raw_output);
        if !body.ends_with('\n') {
            body.push('\n');
        }
    }
    let (truncated, _) = truncate_to_tokens(&body, max_tokens, counter);
    Some(Message::function_response(truncated, counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::LocalProcessRunner;
    use crate::tokens::HeuristicTokenizer;

    const T: HeuristicTokenizer = HeuristicTokenizer;

    fn bundled_config() -> EvalConfig {
        let script = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../tools/pycheck.py")
            .canonicalize()
            .expect("bundled checker exists");
        EvalConfig::default().with_bundled_checker(&script)
    }

    fn store_with(files: &[(&str, &str)]) -> (tempfile::TempDir, FileStore) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FileStore::create(dir.path().join("ws")).unwrap();
        let owned: Vec<(String, String)> = files
            .iter()
            .map(|(p, c)| (p.to_string(), c.to_string()))
            .collect();
        store.write_files(&owned, None).unwrap();
        (dir, store)
    }

    #[test]
    fn empty_store_is_clean_with_zero_tests() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::create(dir.path().join("ws")).unwrap();
        let sandbox = LocalProcessRunner::default();
        let report = evaluate(&store, &sandbox, &bundled_config()).unwrap();
        assert!(report.is_clean());
        assert_eq!(report.tests_passed, 0);
        assert_eq!(report.tests_failed, 0);
    }

    #[test]
    fn clean_code_with_passing_test_is_clean() {
        let (_g, store) = store_with(&[
            ("app.py", "def add(a, b):\n\treturn a + b\n"),
            (
                "test_app.py",
                "import app\n\ndef test_add():\n\tassert app.add(1, 2) == 3\n",
            ),
        ]);
        let sandbox = LocalProcessRunner::default();
        let report = evaluate(&store, &sandbox, &bundled_config()).unwrap();
        assert!(report.is_clean(), "report: {report:?}");
        assert_eq!(report.tests_passed, 1);
    }

    #[test]
    fn undefined_name_is_reported_as_syntax_error() {
        // the bad name lives in an uncalled function so tests still pass
        let (_g, store) = store_with(&[(
            "app.py",
            "def broken():\n\treturn undefined_thing\n",
        )]);
        let sandbox = LocalProcessRunner::default();
        let report = evaluate(&store, &sandbox, &bundled_config()).unwrap();
        assert!(!report.is_clean());
        assert_eq!(report.syntax_errors.len(), 1);
        assert_eq!(report.syntax_errors[0].code, "E0602");
        assert_eq!(report.syntax_errors[0].path, "app.py");
        assert_eq!(report.syntax_errors[0].line, 2);
    }

    #[test]
    fn failing_test_marks_report_dirty() {
        let (_g, store) = store_with(&[(
            "test_bad.py",
            "def test_wrong():\n\tassert 1 == 2\n",
        )]);
        let sandbox = LocalProcessRunner::default();
        let report = evaluate(&store, &sandbox, &bundled_config()).unwrap();
        assert!(!report.is_clean());
        assert_eq!(report.tests_failed, 1);
    }

    #[test]
    fn evaluate_is_idempotent_on_unchanged_store() {
        let (_g, store) = store_with(&[
            ("app.py", "VALUE = 41\n"),
            (
                "test_app.py",
                "import app\n\ndef test_value():\n\tassert app.VALUE == 41\n",
            ),
        ]);
        let sandbox = LocalProcessRunner::default();
        let first = evaluate(&store, &sandbox, &bundled_config()).unwrap();
        let second = evaluate(&store, &sandbox, &bundled_config()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_checker_binary_is_unavailable() {
        let (_g, store) = store_with(&[("app.py", "x = 1\n")]);
        let sandbox = LocalProcessRunner::with_allowlist(vec!["definitely-not-here".into()]);
        let config = EvalConfig {
            checker_cmd: "definitely-not-here".into(),
            checker_args: vec![],
            test_cmd: vec!["python3".into(), "-m".into(), "pytest".into()],
            timeout_s: 10,
        };
        assert!(matches!(
            evaluate(&store, &sandbox, &config),
            Err(EvaluatorError::Unavailable(_))
        ));
    }

    #[test]
    fn checker_line_parser_handles_pylint_format() {
        let text = "************* Module app\napp.py:5:0: E0602: Undefined variable 'x' (undefined-variable)\napp.py:9:0: W0611: Unused import os (unused-import)\n";
        let errors = parse_checker_output(text);
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].code, "E0602");
        assert_eq!(errors[0].line, 5);
    }

    #[test]
    fn test_summary_parser_reads_mixed_line() {
        let counts = parse_test_summary("=== 3 passed, 1 failed in 0.21s ===");
        assert_eq!(counts.passed, 3);
        assert_eq!(counts.failed, 1);
        let counts = parse_test_summary("==== 1 error in 0.02s ====");
        assert_eq!(counts.errors, 1);
    }

    #[test]
    fn clean_report_renders_nothing() {
        assert!(render_error_message(&EvaluatorReport::clean(), 1000, &T).is_none());
    }

    #[test]
    fn two_syntax_errors_render_with_path_and_line() {
        let report = EvaluatorReport {
            syntax_errors: vec![
                SyntaxErrorEntry {
                    path: "a.py".into(),
                    line: 3,
                    code: "E0602".into(),
                    message: "Undefined variable 'x'".into(),
                },
                SyntaxErrorEntry {
                    path: "b.py".into(),
                    line: 7,
                    code: "E0001".into(),
                    message: "invalid syntax".into(),
                },
            ],
            tests_passed: 0,
            tests_failed: 0,
            raw_output: String::new(),
        };
        let msg = render_error_message(&report, 1000, &T).unwrap();
        assert!(msg.content.contains("a.py:3: E0602 Undefined variable 'x'"));
        assert!(msg.content.contains("b.py:7: E0001 invalid syntax"));
    }

    #[test]
    fn oversized_test_output_is_truncated_with_notice() {
        let report = EvaluatorReport {
            syntax_errors: vec![],
            tests_passed: 0,
            tests_failed: 1,
            raw_output: "F".repeat(30_000),
        };
        let msg = render_error_message(&report, 500, &T).unwrap();
        assert!(msg.token_count <= 500);
        assert!(msg.content.contains("output truncated"));
    }
}
