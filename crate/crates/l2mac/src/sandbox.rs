//! Allowlisted subprocess execution with wall-clock timeout and full output
//! capture. Executions are jailed to a working directory (a throwaway copy
//! of the file store) and never given a shell.

use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

/// Environment forced onto every child for determinism: no pytest plugin
/// autoloading, no bytecode caches, fixed hash seed.
const CHILD_ENV: &[(&str, &str)] = &[
    ("PYTEST_DISABLE_PLUGIN_AUTOLOAD", "1"),
    ("PYTHONDONTWRITEBYTECODE", "1"),
    ("PYTHONHASHSEED", "0"),
];

#[derive(Debug, Clone)]
pub struct ProcessOutput {
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
}

impl ProcessOutput {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0) && !self.timed_out
    }

    /// stdout followed by stderr, as shown to the LLM.
    pub fn combined(&self) -> String {
        let mut out = self.stdout.clone();
        if !self.stderr.is_empty() {
            if !out.is_empty() && !out.ends_with('\n') {
                out.push('\n');
            }
            out.push_str(&self.stderr);
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("program '{0}' is not on the sandbox allowlist")]
    Disallowed(String),
    #[error("failed to spawn '{program}': {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
}

/// Synchronous, blocking process execution. At most one child runs per
/// runner at a time.
pub trait ProcessRunner {
    fn run(
        &self,
        program: &str,
        args: &[String],
        cwd: &Path,
        timeout: Duration,
    ) -> Result<ProcessOutput, SandboxError>;
}

/// Runs allowlisted programs on the local machine.
#[derive(Debug, Clone)]
pub struct LocalProcessRunner {
    allowed: Vec<String>,
}

impl Default for LocalProcessRunner {
    fn default() -> Self {
        LocalProcessRunner {
            allowed: vec!["python3".to_string()],
        }
    }
}

impl LocalProcessRunner {
    pub fn with_allowlist(allowed: Vec<String>) -> Self {
        LocalProcessRunner { allowed }
    }
}

fn drain_pipe(mut pipe: impl Read) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

impl ProcessRunner for LocalProcessRunner {
    fn run(
        &self,
        program: &str,
        args: &[String],
        cwd: &Path,
        timeout: Duration,
    ) -> Result<ProcessOutput, SandboxError> {
        if !self.allowed.iter().any(|a| a == program) {
            return Err(SandboxError::Disallowed(program.to_string()));
        }
        let mut command = Command::new(program);
        command
            .args(args)
            .current_dir(cwd)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for (key, value) in CHILD_ENV {
            command.env(key, value);
        }
        let mut child = command.spawn().map_err(|source| SandboxError::Spawn {
            program: program.to_string(),
            source,
        })?;

        let stdout = drain_pipe(child.stdout.take().expect("stdout piped"));
        let stderr = drain_pipe(child.stderr.take().expect("stderr piped"));

        let deadline = Instant::now() + timeout;
        let mut timed_out = false;
        let exit_code = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status.code(),
                Ok(None) => {
                    if Instant::now() >= deadline {
                        timed_out = true;
                        let _ = child.kill();
                        let _ = child.wait();
                        break None;
                    }
                    thread::sleep(Duration::from_millis(10));
                }
                Err(_) => break None,
            }
        };

        Ok(ProcessOutput {
            exit_code,
            stdout: stdout.join().unwrap_or_default(),
            stderr: stderr.join().unwrap_or_default(),
            timed_out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runner() -> LocalProcessRunner {
        LocalProcessRunner::default()
    }

    #[test]
    fn disallowed_program_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = runner()
            .run("rm", &["-rf".into(), "/".into()], dir.path(), Duration::from_secs(1))
            .unwrap_err();
        assert!(matches!(err, SandboxError::Disallowed(_)));
    }

    #[test]
    fn captures_stdout_and_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let out = runner()
            .run(
                "python3",
                &["-c".into(), "print('hello')".into()],
                dir.path(),
                Duration::from_secs(10),
            )
            .unwrap();
        assert!(out.success());
        assert_eq!(out.stdout, "hello\n");
    }

    #[test]
    fn captures_stderr_and_nonzero_exit() {
        let dir = tempfile::tempdir().unwrap();
        let out = runner()
            .run(
                "python3",
                &["-c".into(), "import sys; sys.exit(3)".into()],
                dir.path(),
                Duration::from_secs(10),
            )
            .unwrap();
        assert_eq!(out.exit_code, Some(3));
        assert!(!out.success());
    }

    #[test]
    fn timeout_kills_the_child() {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let out = runner()
            .run(
                "python3",
                &["-c".into(), "import time; time.sleep(30)".into()],
                dir.path(),
                Duration::from_millis(300),
            )
            .unwrap();
        assert!(out.timed_out);
        assert!(started.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn runs_in_the_given_cwd() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("marker.txt"), "here").unwrap();
        let out = runner()
            .run(
                "python3",
                &["-c".into(), "print(open('marker.txt').read())".into()],
                dir.path(),
                Duration::from_secs(10),
            )
            .unwrap();
        assert_eq!(out.stdout, "here\n");
    }
}
