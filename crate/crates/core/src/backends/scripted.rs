use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{canonical_json, fingerprint, BackendError, GenRequest, GenResponse, GeneratorBackend, RequestKind};
use crate::model::parse_json;

/// One scripted response. Either `fingerprint` or both `kind` and `context`
/// identify the request it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RequestKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advisory: Option<String>,
}

impl FixtureEntry {
    pub fn for_request(kind: RequestKind, context: Value, payload: Value) -> Self {
        Self {
            note: None,
            kind: Some(kind),
            context: Some(context),
            fingerprint: None,
            payload,
            advisory: None,
        }
    }

    pub fn key(&self) -> Result<String, BackendError> {
        let computed = match (&self.kind, &self.context) {
            (Some(kind), Some(ctx)) => Some(fingerprint(*kind, ctx)),
            (_, None) => None,
            (None, Some(_)) => {
                return Err(BackendError::Fixture("fixture has a `context` but no `kind`".into()));
            }
        };
        match (computed, &self.fingerprint) {
            (Some(c), Some(f)) if &c != f => Err(BackendError::Fixture(format!(
                "fixture fingerprint {f} does not match its context ({c})"
            ))),
            (Some(c), _) => Ok(c),
            (None, Some(f)) => Ok(f.clone()),
            (None, None) => Err(BackendError::Fixture("fixture has no request key".into())),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FixtureFile {
    Many(Vec<FixtureEntry>),
    One(FixtureEntry),
}

/// Answers requests from a fingerprint-keyed fixture table. A request with
/// no fixture is an error carrying the canonical context, so the missing
/// fixture can be written from the message alone.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    table: RwLock<BTreeMap<String, GenResponse>>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Result<Self, BackendError> {
        let backend = Self::default();
        backend.insert_all(entries)?;
        Ok(backend)
    }

    /// Loads every `*.json` file under `dir` (recursively, in path order).
    /// A file holds one entry or an array of entries; later files win.
    pub fn from_dir(dir: &Path) -> Result<Self, BackendError> {
        Self::new(load_fixture_dir(dir)?)
    }

    pub fn len(&self) -> usize {
        self.table.read().expect("fixture lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert_all(&self, entries: impl IntoIterator<Item = FixtureEntry>) -> Result<(), BackendError> {
        let mut table = self.table.write().expect("fixture lock poisoned");
        for e in entries {
            let key = e.key()?;
            table.insert(
                key,
                GenResponse {
                    payload: e.payload,
                    advisory: e.advisory,
                },
            );
        }
        Ok(())
    }
}

pub(crate) fn load_fixture_dir(dir: &Path) -> Result<Vec<FixtureEntry>, BackendError> {
    let mut files = Vec::new();
    collect_json(dir, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let text = fs::read_to_string(&path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        let parsed: FixtureFile =
            parse_json(&text).map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        match parsed {
            FixtureFile::Many(v) => out.extend(v),
            FixtureFile::One(e) => out.push(e),
        }
    }
    Ok(out)
}

fn collect_json(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<(), BackendError> {
    let entries = fs::read_dir(dir).map_err(|e| BackendError::Fixture(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", dir.display())))?
            .path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}

impl GeneratorBackend for ScriptedBackend {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        self.table
            .read()
            .expect("fixture lock poisoned")
            .get(&req.fingerprint)
            .cloned()
            .ok_or_else(|| BackendError::NoFixture {
                kind: req.kind,
                fingerprint: req.fingerprint.clone(),
                context: canonical_json(&req.context),
            })
    }

    fn amend(&self, fixtures: &[FixtureEntry]) -> Result<(), BackendError> {
        self.insert_all(fixtures.iter().cloned())
    }
}
