use std::collections::BTreeMap;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CompileScope, LaunchFailure, LaunchOutcome, RawResult, Toolchain, ToolchainError};
use crate::model::{parse_json, Diagnostic, Location, Severity, SourceUnit, TestCase};

pub const DEFAULT_DIAG_PATTERN: &str =
    r"^(?P<path>[^:\s]+):(?P<line>\d+):\s*(?P<severity>error|warning):\s*(?P<message>.*)$";

/// Command templates run with `sh -c` in the workspace root.
///
/// `{scope}` expands to the unit path or `integration`; `{cases}` (test
/// command only) to a JSON file holding the cases to run. The test command
/// prints one `<case id> PASS` or `<case id> FAIL <actual>` line per case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandConfig {
    pub compile_cmd: String,
    pub launch_cmd: String,
    pub test_cmd: String,
    /// Regex with named groups `path`, `line`, `severity`, `message` and
    /// optionally `type`.
    #[serde(default = "default_pattern")]
    pub diag_pattern: String,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
}

fn default_pattern() -> String {
    DEFAULT_DIAG_PATTERN.to_owned()
}

fn default_timeout() -> u64 {
    120
}

impl CommandConfig {
    pub fn load(path: &Path) -> Result<Self, ToolchainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolchainError::Unavailable(format!("{}: {e}", path.display())))?;
        parse_json(&text).map_err(|e| ToolchainError::Unavailable(format!("{}: {e}", path.display())))
    }
}

pub struct CommandToolchain {
    config: CommandConfig,
    root: PathBuf,
    pattern: Regex,
}

struct Output {
    status: i32,
    text: String,
}

impl CommandToolchain {
    pub fn new(config: CommandConfig, root: impl Into<PathBuf>) -> Result<Self, ToolchainError> {
        let pattern = Regex::new(&config.diag_pattern)
            .map_err(|e| ToolchainError::Unavailable(format!("bad diag_pattern: {e}")))?;
        Ok(Self {
            config,
            root: root.into(),
            pattern,
        })
    }

    fn run(&self, cmd: &str) -> Result<Output, ToolchainError> {
        let unavailable = |e: std::io::Error| ToolchainError::Unavailable(format!("{cmd}: {e}"));
        let mut sink = tempfile::tempfile().map_err(unavailable)?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .current_dir(&self.root)
            .stdin(Stdio::null())
            .stdout(sink.try_clone().map_err(unavailable)?)
            .stderr(sink.try_clone().map_err(unavailable)?)
            .spawn()
            .map_err(unavailable)?;
        let deadline = Instant::now() + Duration::from_secs(self.config.timeout_seconds);
        let status = loop {
            if let Some(status) = child.try_wait().map_err(unavailable)? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ToolchainError::Unavailable(format!(
                    "`{cmd}` timed out after {}s",
                    self.config.timeout_seconds
                )));
            }
            thread::sleep(Duration::from_millis(10));
        };
        let code = status.code().unwrap_or(-1);
        if code == 127 {
            return Err(ToolchainError::Unavailable(format!("`{cmd}`: command not found")));
        }
        let mut text = String::new();
        sink.seek(SeekFrom::Start(0)).map_err(unavailable)?;
        sink.read_to_string(&mut text).map_err(unavailable)?;
        Ok(Output { status: code, text })
    }

    /// One diagnostic per output line: located when the line matches the
    /// pattern, a message-only warning otherwise.
    pub fn parse_diagnostics(&self, text: &str) -> Vec<Diagnostic> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| match self.pattern.captures(line) {
                Some(c) => Diagnostic {
                    severity: match c.name("severity").map(|m| m.as_str().to_ascii_lowercase()) {
                        Some(s) if s.starts_with("warn") => Severity::Warning,
                        _ => Severity::Error,
                    },
                    error_type: c
                        .name("type")
                        .map_or("compile-error", |m| m.as_str())
                        .to_owned(),
                    location: Location {
                        path: c.name("path").map_or("", |m| m.as_str()).to_owned(),
                        line: c.name("line").and_then(|m| m.as_str().parse().ok()).unwrap_or(0),
                    },
                    message: c.name("message").map_or(line, |m| m.as_str()).trim().to_owned(),
                    suggested_fix: None,
                },
                None => Diagnostic {
                    severity: Severity::Warning,
                    error_type: "unparsed".into(),
                    location: Location {
                        path: String::new(),
                        line: 0,
                    },
                    message: line.to_owned(),
                    suggested_fix: None,
                },
            })
            .collect()
    }
}

impl Toolchain for CommandToolchain {
    fn compile(&self, scope: &CompileScope, _units: &[SourceUnit]) -> Result<Vec<Diagnostic>, ToolchainError> {
        let out = self.run(&self.config.compile_cmd.replace("{scope}", scope.label()))?;
        let mut diags = self.parse_diagnostics(&out.text);
        if out.status != 0 && !diags.iter().any(|d| d.severity == Severity::Error) {
            diags.push(Diagnostic {
                severity: Severity::Error,
                error_type: "exit-status".into(),
                location: Location {
                    path: scope.label().to_owned(),
                    line: 0,
                },
                message: format!("compile command exited with status {}", out.status),
                suggested_fix: None,
            });
        }
        Ok(diags)
    }

    fn launch_check(&self, _units: &[SourceUnit]) -> Result<LaunchOutcome, ToolchainError> {
        let out = self.run(&self.config.launch_cmd)?;
        let failures = if out.status == 0 {
            Vec::new()
        } else {
            vec![LaunchFailure {
                module_id: None,
                path: None,
                detail: format!("exit status {}: {}", out.status, out.text.trim()),
            }]
        };
        Ok(LaunchOutcome {
            ok: failures.is_empty(),
            failures,
            ordinal: 0,
        })
    }

    fn run_tests(
        &self,
        cases: &[TestCase],
        _units: &[SourceUnit],
    ) -> Result<BTreeMap<String, RawResult>, ToolchainError> {
        let file = tempfile::NamedTempFile::new()
            .map_err(|e| ToolchainError::Unavailable(format!("cases file: {e}")))?;
        std::fs::write(file.path(), crate::model::to_canonical_json(&cases))
            .map_err(|e| ToolchainError::Unavailable(format!("cases file: {e}")))?;
        let cmd = self
            .config
            .test_cmd
            .replace("{cases}", &file.path().display().to_string());
        let out = self.run(&cmd)?;
        let mut results: BTreeMap<String, RawResult> = BTreeMap::new();
        for line in out.text.lines() {
            let mut parts = line.trim().splitn(3, ' ');
            let (Some(id), Some(verdict)) = (parts.next(), parts.next()) else {
                continue;
            };
            let actual = parts.next().unwrap_or("").to_owned();
            match verdict {
                "PASS" => results.insert(id.to_owned(), RawResult { passed: true, actual }),
                "FAIL" => results.insert(id.to_owned(), RawResult { passed: false, actual }),
                _ => None,
            };
        }
        for case in cases {
            results.entry(case.id.clone()).or_insert_with(|| RawResult {
                passed: false,
                actual: "no result reported".into(),
            });
        }
        Ok(results)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toolchain(compile: &str, timeout: u64) -> (tempfile::TempDir, CommandToolchain) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CommandConfig {
            compile_cmd: compile.into(),
            launch_cmd: "true".into(),
            test_cmd: "echo c1 PASS; echo c2 FAIL got 3".into(),
            diag_pattern: default_pattern(),
            timeout_seconds: timeout,
        };
        let tc = CommandToolchain::new(cfg, dir.path()).unwrap();
        (dir, tc)
    }

    #[test]
    fn silent_success() {
        let (_d, tc) = toolchain("true", 5);
        assert!(tc.compile(&CompileScope::Integration, &[]).unwrap().is_empty());
    }

    #[test]
    fn matching_line_is_located() {
        let (_d, tc) = toolchain("echo 'src/A.java:12: error: missing semicolon'; exit 1", 5);
        let d = tc.compile(&CompileScope::Integration, &[]).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].location, Location { path: "src/A.java".into(), line: 12 });
        assert_eq!(d[0].message, "missing semicolon");
        assert_eq!(d[0].severity, Severity::Error);
    }

    #[test]
    fn unparsed_lines_kept_and_exit_status_reported() {
        let (_d, tc) = toolchain("echo something odd; exit 2", 5);
        let d = tc.compile(&CompileScope::Unit("x".into()), &[]).unwrap();
        assert_eq!(d[0].error_type, "unparsed");
        assert_eq!(d[0].message, "something odd");
        assert_eq!(d[1].error_type, "exit-status");
    }

    #[test]
    fn scope_placeholder_expands() {
        let (_d, tc) = toolchain("echo \"{scope}:1: warning: seen\"", 5);
        let d = tc.compile(&CompileScope::Unit("src/T.unit.json".into()), &[]).unwrap();
        assert_eq!(d[0].location.path, "src/T.unit.json");
        assert_eq!(d[0].severity, Severity::Warning);
    }

    #[test]
    fn timeout_is_unavailable() {
        let (_d, tc) = toolchain("sleep 5", 0);
        assert!(matches!(
            tc.compile(&CompileScope::Integration, &[]),
            Err(ToolchainError::Unavailable(_))
        ));
    }

    #[test]
    fn missing_command_is_unavailable() {
        let (_d, tc) = toolchain("definitely-not-a-command-xyz", 5);
        assert!(matches!(
            tc.compile(&CompileScope::Integration, &[]),
            Err(ToolchainError::Unavailable(_))
        ));
    }

    #[test]
    fn test_lines_parsed() {
        let (_d, tc) = toolchain("true", 5);
        let r = tc.run_tests(&[], &[]).unwrap();
        assert!(r["c1"].passed);
        assert_eq!(r["c2"].actual, "got 3");
    }
}
