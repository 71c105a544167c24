use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendError, FixtureEntry, GenRequest, GenResponse, GeneratorBackend, RequestKind};
use crate::model::{from_value, DefectMarker, MarkerKind};

/// Inclusive range of 1-based body attempts for one module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttemptRange {
    pub from: u32,
    pub to: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub module_id: String,
    pub kind: MarkerKind,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_signature: Option<String>,
    /// `None` injects into every body the module ever receives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts: Option<AttemptRange>,
}

impl FaultSpec {
    fn applies(&self, attempt: u32) -> bool {
        self.attempts.is_none_or(|r| (r.from..=r.to).contains(&attempt))
    }

    fn marker(&self) -> DefectMarker {
        DefectMarker {
            kind: self.kind,
            detail: self.detail.clone(),
            target_signature: self.target_signature.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSchedule {
    pub faults: Vec<FaultSpec>,
}

/// Adds defect markers to unit bodies produced by an inner backend,
/// according to a schedule keyed by module and attempt number.
pub struct FaultInjectingBackend<B> {
    inner: B,
    schedule: FaultSchedule,
    attempts: Mutex<BTreeMap<String, u32>>,
}

impl<B: GeneratorBackend> FaultInjectingBackend<B> {
    pub fn new(inner: B, schedule: FaultSchedule) -> Self {
        Self {
            inner,
            schedule,
            attempts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn attempts(&self, module_id: &str) -> u32 {
        self.attempts
            .lock()
            .expect("fault lock poisoned")
            .get(module_id)
            .copied()
            .unwrap_or(0)
    }

    fn inject(&self, module_id: &str, body: &mut Value) {
        let attempt = {
            let mut counts = self.attempts.lock().expect("fault lock poisoned");
            let n = counts.entry(module_id.to_owned()).or_insert(0);
            *n += 1;
            *n
        };
        let markers: Vec<Value> = self
            .schedule
            .faults
            .iter()
            .filter(|f| f.module_id == module_id && f.applies(attempt))
            .map(|f| serde_json::to_value(f.marker()).expect("markers serialize"))
            .collect();
        if markers.is_empty() {
            return;
        }
        if let Value::Object(map) = body {
            let list = map
                .entry("defect_markers")
                .or_insert_with(|| Value::Array(Vec::new()));
            if let Value::Array(items) = list {
                for m in markers {
                    if !items.contains(&m) {
                        items.push(m);
                    }
                }
            }
        }
    }
}

impl<B: GeneratorBackend> GeneratorBackend for FaultInjectingBackend<B> {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        let mut resp = self.inner.generate(req)?;
        if req.kind.produces_unit_body() {
            if let Some(m) = req.context.get("module_id").and_then(Value::as_str) {
                self.inject(m, &mut resp.payload);
            }
        } else if req.kind == RequestKind::Rectification {
            if let Some(Value::Array(units)) = resp.payload.get_mut("units") {
                for unit in units {
                    let Some(m) = unit.get("module_id").and_then(Value::as_str).map(str::to_owned) else {
                        continue;
                    };
                    if let Some(body) = unit.get_mut("body") {
                        self.inject(&m, body);
                    }
                }
            }
        }
        Ok(resp)
    }

    fn amend(&self, fixtures: &[FixtureEntry]) -> Result<(), BackendError> {
        self.inner.amend(fixtures)
    }

    fn checkpoint(&self) -> Value {
        serde_json::json!({
            "attempts": *self.attempts.lock().expect("fault lock poisoned"),
            "inner": self.inner.checkpoint(),
        })
    }

    fn restore(&self, state: &Value) -> Result<(), BackendError> {
        if state.is_null() {
            return Ok(());
        }
        let attempts: BTreeMap<String, u32> = state
            .get("attempts")
            .map(from_value)
            .transpose()
            .map_err(|e| BackendError::Fixture(format!("fault checkpoint: {e}")))?
            .unwrap_or_default();
        *self.attempts.lock().expect("fault lock poisoned") = attempts;
        self.inner.restore(state.get("inner").unwrap_or(&Value::Null))
    }
}
