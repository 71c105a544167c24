//! Generator backends.
//!
//! Every generative step (plan proposals, unit bodies, fixes) is a
//! [`GenRequest`] answered by a [`GeneratorBackend`]. Requests carry a
//! fingerprint over their kind and canonicalized context, which is what the
//! scripted backend keys its fixture table on.

mod fault;
mod remote;
mod scripted;

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::model::{from_value, ApiManifest, PlanProposal, SchemaError, StubBody};

pub use fault::{AttemptRange, FaultInjectingBackend, FaultSchedule, FaultSpec};
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{FixtureEntry, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestKind {
    PlanProposal,
    PlanRevision,
    SourceUnit,
    FixSnippet,
    Rectification,
    ApiProposal,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PlanProposal => "plan-proposal",
            Self::PlanRevision => "plan-revision",
            Self::SourceUnit => "source-unit",
            Self::FixSnippet => "fix-snippet",
            Self::Rectification => "rectification",
            Self::ApiProposal => "api-proposal",
        }
    }

    pub fn schema_id(self) -> &'static str {
        match self {
            Self::PlanProposal | Self::PlanRevision => SCHEMA_PLAN,
            Self::SourceUnit | Self::FixSnippet => SCHEMA_STUB_BODY,
            Self::Rectification => SCHEMA_RECTIFICATION,
            Self::ApiProposal => SCHEMA_API,
        }
    }

    /// Kinds whose payload is a unit body for the context's `module_id`.
    pub fn produces_unit_body(self) -> bool {
        matches!(self, Self::SourceUnit | Self::FixSnippet)
    }
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const SCHEMA_PLAN: &str = "code-plan-proposal/v1";
pub const SCHEMA_STUB_BODY: &str = "stub-body/v1";
pub const SCHEMA_RECTIFICATION: &str = "rectification/v1";
pub const SCHEMA_API: &str = "api-manifest/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitPatch {
    pub module_id: String,
    pub body: StubBody,
}

/// Answer to a rectification request: replacement bodies, and optionally a
/// replacement API manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectificationPayload {
    #[serde(default)]
    pub units: Vec<UnitPatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ApiManifest>,
}

/// Checks `payload` against the response shape named by `schema_id`.
pub fn validate_payload(schema_id: &str, payload: &Value) -> Result<(), SchemaError> {
    match schema_id {
        SCHEMA_PLAN => {
            let p: PlanProposal = from_value(payload)?;
            if p.steps.is_empty() {
                return Err(SchemaError::new("steps", "plan proposal has no steps"));
            }
            Ok(())
        }
        SCHEMA_STUB_BODY => from_value::<StubBody>(payload)?.validate(),
        SCHEMA_RECTIFICATION => {
            let r: RectificationPayload = from_value(payload)?;
            for (i, u) in r.units.iter().enumerate() {
                u.body
                    .validate()
                    .map_err(|e| SchemaError::new(format!("units[{i}].body.{}", e.field), e.message))?;
            }
            if let Some(m) = &r.manifest {
                m.validate()
                    .map_err(|e| SchemaError::new(format!("manifest.{}", e.field), e.message))?;
            }
            Ok(())
        }
        SCHEMA_API => {
            // duplicates are allowed here and merged by the coding agent
            let m: ApiManifest = from_value(payload)?;
            for (i, e) in m.entries.iter().enumerate() {
                if e.library_name.trim().is_empty() {
                    return Err(SchemaError::new(format!("entries[{i}].library_name"), "empty library name"));
                }
                if e.version_constraint.trim().is_empty() {
                    return Err(SchemaError::new(
                        format!("entries[{i}].version_constraint"),
                        "empty version constraint",
                    ));
                }
            }
            Ok(())
        }
        other => Err(SchemaError::new("schema_id", format!("unknown schema {other}"))),
    }
}

/// JSON with object keys sorted at every level and no insignificant
/// whitespace.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("strings serialize"));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&serde_json::to_string(scalar).expect("scalars serialize")),
    }
}

/// SHA-256 over the canonical form of `{"context": .., "kind": ..}`, hex.
pub fn fingerprint(kind: RequestKind, context: &Value) -> String {
    let envelope = serde_json::json!({ "kind": kind.as_str(), "context": context });
    hex::encode(Sha256::digest(canonical_json(&envelope).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub kind: RequestKind,
    pub context: Value,
    pub schema_id: String,
    pub fingerprint: String,
}

impl GenRequest {
    pub fn new(kind: RequestKind, context: Value) -> Self {
        Self {
            fingerprint: fingerprint(kind, &context),
            schema_id: kind.schema_id().to_owned(),
            kind,
            context,
        }
    }

    /// First 12 hex digits of the fingerprint.
    pub fn digest(&self) -> &str {
        &self.fingerprint[..12.min(self.fingerprint.len())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advisory: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("no fixture for {kind} request {fingerprint}; context: {context}")]
    NoFixture {
        kind: RequestKind,
        fingerprint: String,
        /// Canonical JSON of the request context.
        context: String,
    },
    #[error("payload for schema {schema_id} rejected: {source}")]
    Schema { schema_id: String, source: SchemaError },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("fixture error: {0}")]
    Fixture(String),
}

pub trait GeneratorBackend: Send + Sync {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError>;

    /// Adds or replaces fixtures (used when a reviewer amends a run).
    fn amend(&self, _fixtures: &[FixtureEntry]) -> Result<(), BackendError> {
        Err(BackendError::Unsupported("fixture amendments"))
    }

    /// Internal state to persist alongside a run, e.g. fault attempt counts.
    fn checkpoint(&self) -> Value {
        Value::Null
    }

    fn restore(&self, _state: &Value) -> Result<(), BackendError> {
        Ok(())
    }
}

impl<B: GeneratorBackend + ?Sized> GeneratorBackend for Box<B> {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        (**self).generate(req)
    }
    fn amend(&self, fixtures: &[FixtureEntry]) -> Result<(), BackendError> {
        (**self).amend(fixtures)
    }
    fn checkpoint(&self) -> Value {
        (**self).checkpoint()
    }
    fn restore(&self, state: &Value) -> Result<(), BackendError> {
        (**self).restore(state)
    }
}

/// Sends a request, validates the payload against its schema and decodes it.
pub fn request<T: DeserializeOwned>(
    backend: &dyn GeneratorBackend,
    kind: RequestKind,
    context: Value,
) -> Result<(T, GenRequest), BackendError> {
    let req = GenRequest::new(kind, context);
    let resp = backend.generate(&req)?;
    let schema_err = |source| BackendError::Schema {
        schema_id: req.schema_id.clone(),
        source,
    };
    validate_payload(&req.schema_id, &resp.payload).map_err(schema_err)?;
    let payload = from_value(&resp.payload).map_err(schema_err)?;
    Ok((payload, req))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fingerprint_ignores_field_order() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":{"x":[1,2],"y":"z"}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":{"y":"z","x":[1,2]},"a":1}"#).unwrap();
        assert_eq!(
            fingerprint(RequestKind::SourceUnit, &a),
            fingerprint(RequestKind::SourceUnit, &b)
        );
    }

    #[test]
    fn fingerprint_separates_kinds_and_requirement_ids() {
        let a = json!({"requirements": ["REQ-001", "REQ-002"]});
        let b = json!({"requirements": ["REQ-001", "REQ-003"]});
        assert_ne!(
            fingerprint(RequestKind::PlanProposal, &a),
            fingerprint(RequestKind::PlanProposal, &b)
        );
        assert_ne!(
            fingerprint(RequestKind::PlanProposal, &a),
            fingerprint(RequestKind::PlanRevision, &a)
        );
    }

    #[test]
    fn empty_plan_proposal_fingerprint_is_frozen() {
        // sha256 of {"context":{},"kind":"plan-proposal"}, computed externally
        assert_eq!(
            fingerprint(RequestKind::PlanProposal, &json!({})),
            "4152c8bb401f4a43459898a686cd825988192cc379977e005c40451de7236b58"
        );
    }

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v = json!({"b": [{"d": 1, "c": 2}], "a": null});
        assert_eq!(canonical_json(&v), r#"{"a":null,"b":[{"c":2,"d":1}]}"#);
    }

    #[test]
    fn stub_body_schema_rejects_unknown_fields() {
        let err = validate_payload(SCHEMA_STUB_BODY, &json!({"declares": ["a"], "source": "x"})).unwrap_err();
        assert_eq!(err.field, "source");
        assert!(validate_payload(SCHEMA_STUB_BODY, &json!({"declares": ["a"]})).is_ok());
    }

    #[test]
    fn api_schema_allows_duplicates_but_not_empty_constraints() {
        let dup = json!({"entries": [
            {"library_name": "fx", "version_constraint": "17"},
            {"library_name": "fx", "version_constraint": "17"}
        ]});
        assert!(validate_payload(SCHEMA_API, &dup).is_ok());
        let bad = json!({"entries": [{"library_name": "fx", "version_constraint": ""}]});
        assert!(validate_payload(SCHEMA_API, &bad).is_err());
    }
}
