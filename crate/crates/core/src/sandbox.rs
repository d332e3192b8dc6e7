//! Runs toolchain commands over a code workspace with timeouts, a cleared
//! environment and capped output capture.
//!
//! Commands are argv templates; `{workspace}` expands to the absolute
//! workspace path and `{entry}` to the entry file. Test cases go through a
//! test adapter: one process per case, the case input on stdin, the
//! expected text compared with stdout after trailing whitespace is
//! stripped.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("tool `{0}` is not installed or not on PATH")]
    ToolMissing(String),
    #[error("test adapter `{0}` is missing from the workspace")]
    AdapterMissing(String),
    #[error("workspace {0} does not exist")]
    MissingWorkspace(PathBuf),
    #[error("invalid toolchain config: {0}")]
    InvalidConfig(String),
    #[error("could not run command: {0}")]
    Io(#[from] std::io::Error),
}

/// Bytes kept per stream: the first and last half of this budget.
pub const CAPTURE_CAP: usize = 64 * 1024;
/// Time between the polite and the forced kill of a timed-out command.
pub const KILL_GRACE: Duration = Duration::from_secs(2);

const ENV_ALLOWLIST: &[&str] = &["PATH", "HOME", "LANG", "LC_ALL", "TMPDIR"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolchainConfig {
    pub language: String,
    pub compile_command: Vec<String>,
    pub test_command: Vec<String>,
    pub run_command: Vec<String>,
    pub timeout_seconds: f64,
    #[serde(default)]
    pub allowed_dependencies: Vec<String>,
    /// File the test command needs inside the workspace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_adapter: Option<String>,
    /// Extra environment variables on top of the allowlist.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
}

/// Byte-compiles every `.py` file below the directory in `argv[1]`.
const PY_COMPILE: &str = "import pathlib, sys\nok = True\nfor p in sorted(pathlib.Path(sys.argv[1]).rglob('*.py')):\n    try:\n        compile(p.read_text(), str(p.relative_to(sys.argv[1])), 'exec')\n    except SyntaxError as e:\n        ok = False\n        print(f'{e.filename}:{e.lineno}: {type(e).__name__}: {e.msg}', file=sys.stderr)\n        if e.text:\n            print('    ' + e.text.rstrip(), file=sys.stderr)\nsys.exit(0 if ok else 1)\n";

impl ToolchainConfig {
    /// CPython 3 with the bundled harness as test adapter.
    pub fn python() -> ToolchainConfig {
        ToolchainConfig {
            language: "python".into(),
            compile_command: vec!["python3".into(), "-B".into(), "-c".into(), PY_COMPILE.into(), "{workspace}".into()],
            test_command: vec!["python3".into(), "-B".into(), "{workspace}/_harness.py".into()],
            run_command: vec!["python3".into(), "-B".into(), "{workspace}/{entry}".into()],
            timeout_seconds: 30.0,
            allowed_dependencies: Vec::new(),
            test_adapter: Some("_harness.py".into()),
            env: BTreeMap::from([("PYTHONHASHSEED".to_string(), "0".to_string())]),
        }
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.timeout_seconds.is_nan() || self.timeout_seconds <= 0.0 {
            return Err(SandboxError::InvalidConfig("timeout_seconds must be positive".into()));
        }
        for (name, argv) in [("compile_command", &self.compile_command), ("test_command", &self.test_command), ("run_command", &self.run_command)] {
            if argv.is_empty() || argv[0].trim().is_empty() {
                return Err(SandboxError::InvalidConfig(format!("{name} is empty")));
            }
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_seconds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Compile,
    Test,
    Run,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub phase: Phase,
    /// `None` when the process was killed by a signal.
    pub exit_code: Option<i32>,
    pub killed: bool,
    pub stdout: String,
    pub stderr: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stdout_truncated: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stderr_truncated: bool,
    pub duration_ms: u64,
    pub timed_out: bool,
}

impl ExecutionReport {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0) && !self.timed_out
    }

    /// Both streams, stderr first, for diagnostics matching and prompts.
    pub fn diagnostics(&self) -> String {
        match (self.stderr.trim().is_empty(), self.stdout.trim().is_empty()) {
            (false, false) => format!("{}\n{}", self.stderr.trim_end(), self.stdout.trim_end()),
            (false, true) => self.stderr.trim_end().to_string(),
            (true, _) => self.stdout.trim_end().to_string(),
        }
    }
}

/// Head-and-tail capture of one stream.
struct Capture {
    head: Vec<u8>,
    tail: std::collections::VecDeque<u8>,
    total: usize,
}

impl Capture {
    fn new() -> Capture {
        Capture {
            head: Vec::new(),
            tail: std::collections::VecDeque::new(),
            total: 0,
        }
    }

    fn push(&mut self, chunk: &[u8]) {
        let half = CAPTURE_CAP / 2;
        for &b in chunk {
            if self.head.len() < half {
                self.head.push(b);
            } else {
                if self.tail.len() == half {
                    self.tail.pop_front();
                }
                self.tail.push_back(b);
            }
        }
        self.total += chunk.len();
    }

    fn finish(self) -> (String, bool) {
        let kept = self.head.len() + self.tail.len();
        let truncated = self.total > kept;
        let mut bytes = self.head;
        if truncated {
            let marker = format!("\n[... {} bytes truncated ...]\n", self.total - kept);
            bytes.extend_from_slice(marker.as_bytes());
        }
        bytes.extend(self.tail);
        (String::from_utf8_lossy(&bytes).into_owned(), truncated)
    }
}

fn reader<R: Read + Send + 'static>(mut stream: R) -> thread::JoinHandle<Capture> {
    thread::spawn(move || {
        let mut cap = Capture::new();
        let mut buf = [0u8; 8192];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => cap.push(&buf[..n]),
            }
        }
        cap
    })
}

fn expand(argv: &[String], workspace: &str, entry: &str) -> Vec<String> {
    argv.iter().map(|a| a.replace("{workspace}", workspace).replace("{entry}", entry)).collect()
}

fn kill_group(pid: u32, signal: i32) {
    // SAFETY: signalling a process group we created; failure only means it
    // has already exited.
    unsafe {
        libc::killpg(pid as libc::pid_t, signal);
    }
}

fn absolute(workspace: &Path) -> Result<PathBuf, SandboxError> {
    if !workspace.is_dir() {
        return Err(SandboxError::MissingWorkspace(workspace.to_path_buf()));
    }
    Ok(workspace.canonicalize()?)
}

/// Runs one command in its own process group with `input` on stdin.
fn run_command(
    phase: Phase,
    workspace: &Path,
    argv: &[String],
    entry: &str,
    input: &[u8],
    cfg: &ToolchainConfig,
) -> Result<ExecutionReport, SandboxError> {
    let ws = absolute(workspace)?;
    let ws_text = ws.to_string_lossy().into_owned();
    let argv = expand(argv, &ws_text, entry);
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(&ws)
        .env_clear()
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for key in ENV_ALLOWLIST {
        if let Ok(v) = std::env::var(key) {
            cmd.env(key, v);
        }
    }
    cmd.envs(&cfg.env);

    let started = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(SandboxError::ToolMissing(argv[0].clone())),
        Err(e) => return Err(e.into()),
    };
    let pid = child.id();
    let mut stdin = child.stdin.take().expect("piped stdin");
    let input = input.to_vec();
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let out = reader(child.stdout.take().expect("piped stdout"));
    let err = reader(child.stderr.take().expect("piped stderr"));

    let deadline = started + cfg.timeout();
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        let now = Instant::now();
        if now >= deadline {
            timed_out = true;
            kill_group(pid, libc::SIGTERM);
            let grace_end = now + KILL_GRACE;
            loop {
                if child.try_wait()?.is_some() {
                    break;
                }
                if Instant::now() >= grace_end {
                    kill_group(pid, libc::SIGKILL);
                    break;
                }
                thread::sleep(Duration::from_millis(10));
            }
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(5).min(deadline - now));
    };
    // stray descendants may still hold the pipes open
    kill_group(pid, libc::SIGKILL);
    let _ = writer.join();
    let (stdout, stdout_truncated) = out.join().expect("stdout reader").finish();
    let (stderr, stderr_truncated) = err.join().expect("stderr reader").finish();
    let duration_ms = started.elapsed().as_millis() as u64;

    Ok(ExecutionReport {
        phase,
        exit_code: if timed_out { None } else { status.code() },
        killed: timed_out || status.signal().is_some(),
        stdout: stdout.replace(&ws_text, "{workspace}"),
        stderr: stderr.replace(&ws_text, "{workspace}"),
        stdout_truncated,
        stderr_truncated,
        duration_ms,
        timed_out,
    })
}

pub fn compile(workspace: &Path, cfg: &ToolchainConfig) -> Result<ExecutionReport, SandboxError> {
    cfg.validate()?;
    run_command(Phase::Compile, workspace, &cfg.compile_command, "", b"", cfg)
}

pub fn execute(workspace: &Path, entry: &str, input: &str, cfg: &ToolchainConfig) -> Result<ExecutionReport, SandboxError> {
    cfg.validate()?;
    run_command(Phase::Run, workspace, &cfg.run_command, entry, input.as_bytes(), cfg)
}

/// One adapter invocation: what goes to stdin and what should come back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessCase {
    pub name: String,
    pub stdin: String,
    /// `None` for expectations that only a reviewer can judge.
    pub expected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail { expected: String, actual: String },
    Error,
    /// Ran cleanly, but the expectation is a predicate the harness does
    /// not judge.
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case: HarnessCase,
    pub report: ExecutionReport,
    pub verdict: Verdict,
}

fn strip_trailing(s: &str) -> String {
    s.lines().map(str::trim_end).collect::<Vec<_>>().join("\n").trim_end().to_string()
}

pub fn run_tests(workspace: &Path, cases: &[HarnessCase], cfg: &ToolchainConfig) -> Result<Vec<CaseOutcome>, SandboxError> {
    cfg.validate()?;
    if let Some(adapter) = &cfg.test_adapter {
        if !workspace.join(adapter).is_file() {
            return Err(SandboxError::AdapterMissing(adapter.clone()));
        }
    }
    let mut outcomes = Vec::with_capacity(cases.len());
    for case in cases {
        let report = run_command(Phase::Test, workspace, &cfg.test_command, "", case.stdin.as_bytes(), cfg)?;
        let verdict = if !report.success() {
            Verdict::Error
        } else {
            match &case.expected {
                None => Verdict::Deferred,
                Some(expected) => {
                    let (want, got) = (strip_trailing(expected), strip_trailing(&report.stdout));
                    if want == got {
                        Verdict::Pass
                    } else {
                        Verdict::Fail { expected: want, actual: got }
                    }
                }
            }
        };
        outcomes.push(CaseOutcome {
            case: case.clone(),
            report,
            verdict,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in files {
            std::fs::write(dir.path().join(name), text).unwrap();
        }
        dir
    }

    fn quick() -> ToolchainConfig {
        let mut cfg = ToolchainConfig::python();
        cfg.timeout_seconds = 10.0;
        cfg
    }

    #[test]
    fn valid_source_compiles() {
        let dir = ws(&[("a.py", "def f() -> int:\n    return 1\n")]);
        let r = compile(dir.path(), &quick()).unwrap();
        assert!(r.success(), "{r:?}");
    }

    #[test]
    fn unbalanced_bracket_fails_with_a_diagnostic() {
        let dir = ws(&[("a.py", "def f() -> int:\n    return (1\n")]);
        let r = compile(dir.path(), &quick()).unwrap();
        assert_ne!(r.exit_code, Some(0));
        assert!(r.stderr.contains("a.py:2: SyntaxError"), "{}", r.stderr);
    }

    #[test]
    fn missing_tool_is_reported() {
        let mut cfg = quick();
        cfg.compile_command = vec!["no-such-compiler-xyz".into()];
        let dir = ws(&[]);
        assert!(matches!(compile(dir.path(), &cfg), Err(SandboxError::ToolMissing(t)) if t == "no-such-compiler-xyz"));
    }

    #[test]
    fn execute_feeds_stdin() {
        let dir = ws(&[("echo.py", "import sys\nsys.stdout.write(sys.stdin.read())\n")]);
        let r = execute(dir.path(), "echo.py", "x", &quick()).unwrap();
        assert_eq!(r.stdout, "x");
        assert_eq!(r.phase, Phase::Run);
    }

    #[test]
    fn timeout_kills_the_process_group() {
        let dir = ws(&[("spin.py", "import subprocess, sys\nsubprocess.Popen([sys.executable, '-c', 'while True: pass'])\nwhile True:\n    pass\n")]);
        let mut cfg = quick();
        cfg.timeout_seconds = 1.0;
        let r = execute(dir.path(), "spin.py", "", &cfg).unwrap();
        assert!(r.timed_out);
        assert!(r.killed);
        assert_eq!(r.exit_code, None);
        assert!(r.duration_ms >= 1000 && r.duration_ms < 1000 + KILL_GRACE.as_millis() as u64 + 1000, "{}", r.duration_ms);
    }

    #[test]
    fn missing_entry_is_a_nonzero_exit() {
        let dir = ws(&[]);
        let r = execute(dir.path(), "nope.py", "", &quick()).unwrap();
        assert_ne!(r.exit_code, Some(0));
        assert!(r.stderr.contains("nope.py"), "{}", r.stderr);
        // the absolute path never leaks into captured output
        assert!(r.stderr.contains("{workspace}/nope.py"), "{}", r.stderr);
    }

    #[test]
    fn environment_is_cleared() {
        std::env::set_var("PAPYRUS_SECRET_FOR_TEST", "s3cret");
        let dir = ws(&[("env.py", "import os\nprint(os.environ.get('PAPYRUS_SECRET_FOR_TEST', 'absent'))\n")]);
        let r = execute(dir.path(), "env.py", "", &quick()).unwrap();
        assert_eq!(r.stdout.trim(), "absent");
    }

    #[test]
    fn long_output_is_truncated_with_a_marker() {
        let dir = ws(&[("big.py", "import sys\nsys.stdout.write('a' * 40000 + 'b' * 40000)\n")]);
        let r = execute(dir.path(), "big.py", "", &quick()).unwrap();
        assert!(r.stdout_truncated);
        assert!(r.stdout.starts_with('a') && r.stdout.ends_with('b'));
        assert!(r.stdout.contains("[... 14464 bytes truncated ...]"));
        assert!(!r.stderr_truncated);
    }

    #[test]
    fn test_verdicts_follow_the_comparison_rule() {
        let adapter = "import sys\nv = sys.stdin.read()\nif v == 'crash':\n    raise SystemExit(3)\nprint(v)\n";
        let dir = ws(&[("_harness.py", adapter)]);
        let case = |name: &str, stdin: &str, expected: Option<&str>| HarnessCase {
            name: name.into(),
            stdin: stdin.into(),
            expected: expected.map(str::to_string),
        };
        let cases = [
            case("pass", "42", Some("42  \n")),
            case("fail", "41", Some("42")),
            case("error", "crash", Some("42")),
            case("predicate", "7", None),
        ];
        let out = run_tests(dir.path(), &cases, &quick()).unwrap();
        assert_eq!(out[0].verdict, Verdict::Pass);
        assert_eq!(out[1].verdict, Verdict::Fail { expected: "42".into(), actual: "41".into() });
        assert_eq!(out[2].verdict, Verdict::Error);
        assert_eq!(out[2].report.exit_code, Some(3));
        assert_eq!(out[3].verdict, Verdict::Deferred);
    }

    #[test]
    fn missing_adapter_is_an_error() {
        let dir = ws(&[]);
        assert!(matches!(run_tests(dir.path(), &[], &quick()), Err(SandboxError::AdapterMissing(_))));
    }

    #[test]
    fn exit_codes_are_deterministic() {
        let dir = ws(&[("x.py", "import sys\nsys.exit(len(sys.stdin.read()))\n")]);
        let codes: Vec<_> = (0..3).map(|_| execute(dir.path(), "x.py", "abc", &quick()).unwrap().exit_code).collect();
        assert_eq!(codes, [Some(3); 3]);
    }

    #[test]
    fn config_invariants_are_checked() {
        let mut cfg = quick();
        cfg.timeout_seconds = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = quick();
        cfg.test_command.clear();
        assert!(cfg.validate().is_err());
    }
}
