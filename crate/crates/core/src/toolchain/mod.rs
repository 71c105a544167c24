//! Compile, launch-check and test-run adapters.

mod command;
mod stub;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Diagnostic, SourceUnit, TestCase};

pub use command::{CommandConfig, CommandToolchain};
pub use stub::StubToolchain;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompileScope {
    /// A single unit, identified by its workspace-relative path.
    Unit(String),
    /// Every unit together.
    Integration,
}

impl CompileScope {
    pub fn label(&self) -> &str {
        match self {
            Self::Unit(p) => p,
            Self::Integration => crate::model::INTEGRATION_SCOPE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchFailure {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchOutcome {
    pub ok: bool,
    pub failures: Vec<LaunchFailure>,
    pub ordinal: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResult {
    pub passed: bool,
    pub actual: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ToolchainError {
    #[error("toolchain unavailable: {0}")]
    Unavailable(String),
    #[error("unknown unit {0}")]
    UnknownUnit(String),
}

/// Units are passed explicitly: the stub toolchain interprets their bodies,
/// the command toolchain expects them already written to the workspace.
pub trait Toolchain: Send + Sync {
    /// Diagnostics for `scope`. Unit scope resolves references against
    /// every unit in `units`.
    fn compile(&self, scope: &CompileScope, units: &[SourceUnit]) -> Result<Vec<Diagnostic>, ToolchainError>;

    /// Launch check of the integrated build; the returned ordinal is 0 and
    /// assigned by the caller.
    fn launch_check(&self, units: &[SourceUnit]) -> Result<LaunchOutcome, ToolchainError>;

    fn run_tests(
        &self,
        cases: &[TestCase],
        units: &[SourceUnit],
    ) -> Result<BTreeMap<String, RawResult>, ToolchainError>;
}

impl<T: Toolchain + ?Sized> Toolchain for Box<T> {
    fn compile(&self, scope: &CompileScope, units: &[SourceUnit]) -> Result<Vec<Diagnostic>, ToolchainError> {
        (**self).compile(scope, units)
    }
    fn launch_check(&self, units: &[SourceUnit]) -> Result<LaunchOutcome, ToolchainError> {
        (**self).launch_check(units)
    }
    fn run_tests(
        &self,
        cases: &[TestCase],
        units: &[SourceUnit],
    ) -> Result<BTreeMap<String, RawResult>, ToolchainError> {
        (**self).run_tests(cases, units)
    }
}
