//! Knowledge store queried by the agents.
//!
//! Documents belong to one of three corpora, each with a fixed set of
//! pillars. Retrieval is exact keyword overlap: descending overlap count,
//! ties broken by ascending document id, zero-overlap documents excluded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::model::{parse_json, SchemaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corpus {
    SrsAdd,
    Coding,
    Testing,
}

impl Corpus {
    pub fn pillars(self) -> &'static [&'static str] {
        match self {
            Corpus::SrsAdd => &["SRSs", "ADDs", "Standards"],
            Corpus::Coding => &[
                "Open Source Projects",
                "API Library",
                "Domain Experts",
                "Coding Standards",
                "Coding Tools",
            ],
            Corpus::Testing => &[
                "Testing Projects",
                "Testing Criteria",
                "Testing Standards",
                "Testing Tools",
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeDoc {
    pub id: String,
    pub corpus: Corpus,
    pub pillar: String,
    pub keywords: Vec<String>,
    #[serde(default)]
    pub body: String,
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("pillar `{pillar}` does not belong to corpus {corpus:?}")]
    Pillar { corpus: Corpus, pillar: String },
    #[error("document `{id}`: keyword `{keyword}` is not a lowercase token")]
    Keyword { id: String, keyword: String },
    #[error("document has an empty id")]
    EmptyId,
    #[error("{path}: {source}")]
    Schema { path: String, source: SchemaError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Lowercase alphanumeric tokens of free text.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Default)]
pub struct KnowledgeBase {
    docs: RwLock<BTreeMap<String, KnowledgeDoc>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `*.json` file in `dir`, in file-name order.
    pub fn load_pack(dir: &Path) -> Result<Self, KbError> {
        let kb = Self::new();
        let io = |source| KbError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        for path in files {
            let text = fs::read_to_string(&path).map_err(|source| KbError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let doc: KnowledgeDoc = parse_json(&text).map_err(|source| KbError::Schema {
                path: path.display().to_string(),
                source,
            })?;
            kb.ingest(doc)?;
        }
        Ok(kb)
    }

    /// Stores `doc`, replacing any previous document with the same id.
    pub fn ingest(&self, doc: KnowledgeDoc) -> Result<String, KbError> {
        if doc.id.trim().is_empty() {
            return Err(KbError::EmptyId);
        }
        if !doc.corpus.pillars().contains(&doc.pillar.as_str()) {
            return Err(KbError::Pillar {
                corpus: doc.corpus,
                pillar: doc.pillar,
            });
        }
        if let Some(bad) = doc
            .keywords
            .iter()
            .find(|k| k.is_empty() || k.chars().any(char::is_whitespace) || k.to_lowercase() != **k)
        {
            return Err(KbError::Keyword {
                id: doc.id.clone(),
                keyword: bad.clone(),
            });
        }
        let id = doc.id.clone();
        self.docs.write().expect("kb lock poisoned").insert(id.clone(), doc);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<KnowledgeDoc> {
        self.docs.read().expect("kb lock poisoned").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.docs.read().expect("kb lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Up to `k` documents of `corpus` (and `pillar`, when given) ranked by
    /// keyword overlap with `keywords`.
    pub fn query(
        &self,
        corpus: Corpus,
        pillar: Option<&str>,
        keywords: &BTreeSet<String>,
        k: usize,
    ) -> Vec<KnowledgeDoc> {
        let docs = self.docs.read().expect("kb lock poisoned");
        let mut scored: Vec<(usize, &KnowledgeDoc)> = docs
            .values()
            .filter(|d| d.corpus == corpus)
            .filter(|d| pillar.is_none_or(|p| d.pillar == p))
            .map(|d| {
                let kw: BTreeSet<&str> = d.keywords.iter().map(String::as_str).collect();
                let overlap = kw.iter().filter(|w| keywords.contains(**w)).count();
                (overlap, d)
            })
            .filter(|(overlap, _)| *overlap > 0)
            .collect();
        // docs iterate in id order, so a stable sort keeps id tie-breaks
        scored.sort_by_key(|s| std::cmp::Reverse(s.0));
        scored.into_iter().take(k).map(|(_, d)| d.clone()).collect()
    }
}
