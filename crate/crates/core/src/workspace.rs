//! On-disk project layout and append-only artifact store.
//!
//! ```text
//! inputs/     srs.json, add.json (verbatim copies)
//! artifacts/  plan-v{N}.json, {kind}-{ordinal}.json, state files
//! src/        generated units
//! tests/      {module}/cases.json
//! audit/      queue.json, amendments/
//! ```
//!
//! Plans are versioned and ordinal artifacts (logs, reports, events) are
//! appended; neither is ever overwritten. A lock file at the root keeps a
//! single writer per workspace.

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::model::{parse_json, to_canonical_json, Add, CodePlan, ImprovementRecord, SchemaError, Srs, SourceUnit, TestCase};

pub const LOCK_FILE: &str = ".appforge.lock";
pub const IMPROVEMENT_LOG: &str = "improvement-log.json";
const LAYOUT: &[&str] = &["inputs", "artifacts", "src", "tests", "audit"];
const ARCHIVE: &str = "archive";

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("{0} is not empty (use force to archive its contents)")]
    NotEmpty(PathBuf),
    #[error("{0} is locked by another invocation")]
    Locked(PathBuf),
    #[error("{0} already exists and artifacts are append-only")]
    Conflict(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} is not a workspace (missing inputs/)")]
    NotAWorkspace(PathBuf),
    #[error("improvement record references missing artifact {0}")]
    DanglingReference(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Schema { path: String, source: SchemaError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(root: &Path) -> Result<Self, WorkspaceError> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(WorkspaceError::Locked(root.to_owned())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Workspace {
    root: PathBuf,
    _lock: Option<LockGuard>,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace")
            .field("root", &self.root)
            .field("locked", &self._lock.is_some())
            .finish()
    }
}

impl Workspace {
    /// Creates the layout under `root` and stores the input documents
    /// verbatim. With `force`, existing contents move to `archive/<n>/`.
    pub fn init(root: &Path, srs_text: &str, add_text: &str, force: bool) -> Result<Self, WorkspaceError> {
        let srs: Srs = parse_json(srs_text).map_err(|source| WorkspaceError::Schema {
            path: "srs".into(),
            source,
        })?;
        srs.validate().map_err(|source| WorkspaceError::Schema {
            path: "srs".into(),
            source,
        })?;
        let add: Add = parse_json(add_text).map_err(|source| WorkspaceError::Schema {
            path: "add".into(),
            source,
        })?;
        add.validate().map_err(|source| WorkspaceError::Schema {
            path: "add".into(),
            source,
        })?;

        fs::create_dir_all(root).map_err(io_err(root))?;
        let existing: Vec<PathBuf> = fs::read_dir(root)
            .map_err(io_err(root))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.file_name().is_none_or(|n| n != ARCHIVE))
            .collect();
        if !existing.is_empty() {
            if !force {
                return Err(WorkspaceError::NotEmpty(root.to_owned()));
            }
            if root.join(LOCK_FILE).exists() {
                return Err(WorkspaceError::Locked(root.to_owned()));
            }
            let archive = root.join(ARCHIVE);
            let mut n = 1;
            while archive.join(n.to_string()).exists() {
                n += 1;
            }
            let dest = archive.join(n.to_string());
            fs::create_dir_all(&dest).map_err(io_err(&dest))?;
            for p in existing {
                let target = dest.join(p.file_name().expect("dir entries have names"));
                fs::rename(&p, &target).map_err(io_err(&p))?;
            }
        }
        let lock = LockGuard::acquire(root)?;
        for dir in LAYOUT {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let ws = Self {
            root: root.to_owned(),
            _lock: Some(lock),
        };
        ws.write_new("inputs/srs.json", srs_text)?;
        ws.write_new("inputs/add.json", add_text)?;
        Ok(ws)
    }

    /// Opens an existing workspace for writing.
    pub fn open(root: &Path) -> Result<Self, WorkspaceError> {
        if !root.join("inputs").is_dir() {
            return Err(WorkspaceError::NotAWorkspace(root.to_owned()));
        }
        let lock = LockGuard::acquire(root)?;
        Ok(Self {
            root: root.to_owned(),
            _lock: Some(lock),
        })
    }

    /// Opens an existing workspace for reading only; takes no lock.
    pub fn open_read_only(root: &Path) -> Result<Self, WorkspaceError> {
        if !root.join("inputs").is_dir() {
            return Err(WorkspaceError::NotAWorkspace(root.to_owned()));
        }
        Ok(Self {
            root: root.to_owned(),
            _lock: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn inputs(&self) -> Result<(Srs, Add), WorkspaceError> {
        Ok((self.read_json("inputs/srs.json")?, self.read_json("inputs/add.json")?))
    }

    fn write_new(&self, rel: &str, text: &str) -> Result<(), WorkspaceError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => return Err(WorkspaceError::Conflict(rel.to_owned())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        std::io::Write::write_all(&mut file, text.as_bytes()).map_err(io_err(&path))
    }

    /// Writes (or replaces) a mutable state file.
    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), WorkspaceError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, to_canonical_json(value)).map_err(io_err(&path))
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T, WorkspaceError> {
        let path = self.path(rel);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(WorkspaceError::NotFound(rel.to_owned())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        parse_json(&text).map_err(|source| WorkspaceError::Schema {
            path: rel.to_owned(),
            source,
        })
    }

    pub fn plan_path(version: u32) -> String {
        format!("artifacts/plan-v{version}.json")
    }

    pub fn persist_plan(&self, plan: &CodePlan) -> Result<String, WorkspaceError> {
        let rel = Self::plan_path(plan.version);
        self.write_new(&rel, &to_canonical_json(plan))?;
        Ok(rel)
    }

    pub fn load_plan(&self, version: u32) -> Result<CodePlan, WorkspaceError> {
        self.read_json(&Self::plan_path(version))
    }

    pub fn plan_versions(&self) -> Vec<u32> {
        self.numbered("plan-v")
    }

    pub fn ordinal_path(kind: &str, ordinal: u64) -> String {
        format!("artifacts/{kind}-{ordinal}.json")
    }

    /// Appends an ordinal artifact; an existing ordinal is a conflict.
    pub fn persist_ordinal<T: Serialize>(&self, kind: &str, ordinal: u64, value: &T) -> Result<String, WorkspaceError> {
        let rel = Self::ordinal_path(kind, ordinal);
        self.write_new(&rel, &to_canonical_json(value))?;
        Ok(rel)
    }

    pub fn load_ordinal<T: DeserializeOwned>(&self, kind: &str, ordinal: u64) -> Result<T, WorkspaceError> {
        self.read_json(&Self::ordinal_path(kind, ordinal))
    }

    /// Ordinals present for `kind`, ascending.
    pub fn ordinals(&self, kind: &str) -> Vec<u64> {
        self.numbered::<u64>(&format!("{kind}-"))
    }

    fn numbered<N: std::str::FromStr + Ord>(&self, prefix: &str) -> Vec<N> {
        let mut out: Vec<N> = fs::read_dir(self.path("artifacts"))
            .into_iter()
            .flatten()
            .filter_map(Result::ok)
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix(prefix)?.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        out.sort();
        out
    }

    pub fn write_unit(&self, unit: &SourceUnit) -> Result<(), WorkspaceError> {
        self.write_json(&unit.path, unit)
    }

    pub fn read_unit(&self, path: &str) -> Result<SourceUnit, WorkspaceError> {
        self.read_json(path)
    }

    pub fn cases_path(module_id: &str) -> String {
        format!("tests/{module_id}/cases.json")
    }

    pub fn write_cases(&self, module_id: &str, cases: &[TestCase]) -> Result<(), WorkspaceError> {
        self.write_json(&Self::cases_path(module_id), &cases)
    }

    pub fn improvement_log(&self) -> Result<Vec<ImprovementRecord>, WorkspaceError> {
        match self.read_json(&format!("artifacts/{IMPROVEMENT_LOG}")) {
            Err(WorkspaceError::NotFound(_)) => Ok(Vec::new()),
            other => other,
        }
    }

    /// Appends `record` with the next ordinal and returns it. The trigger
    /// must name an existing artifact.
    pub fn record_improvement(&self, mut record: ImprovementRecord) -> Result<u64, WorkspaceError> {
        if record.trigger.is_empty() || !self.exists(&record.trigger) {
            return Err(WorkspaceError::DanglingReference(record.trigger));
        }
        let mut log = self.improvement_log()?;
        record.ordinal = log.last().map_or(1, |r| r.ordinal + 1);
        let ordinal = record.ordinal;
        log.push(record);
        self.write_json(&format!("artifacts/{IMPROVEMENT_LOG}"), &log)?;
        Ok(ordinal)
    }
}
