//! Closed-loop code generation pipeline driven by structured requirements
//! (SRS) and architecture (ADD) documents.
//!
//! Three agents cooperate through a shared artifact model:
//!
//! * [`copa`] turns the documents into a versioned [`model::CodePlan`] and a
//!   [`model::ProjectStructure`], and revises the plan on compiler or launch
//!   feedback.
//! * [`ca`] derives the API manifest, generates source units in dependency
//!   order, compiles them, self-debugs, checks the integrated launch and
//!   rectifies test defects.
//! * [`ta`] maps requirements to method contracts, derives test cases
//!   (positive, negative, boundary, exception, property) and evaluates runs
//!   into structured reports.
//!
//! [`orchestrator`] routes feedback between them under budgets and escalates
//! to an audit queue when a budget runs out. Every generative step goes
//! through a [`backends::GeneratorBackend`], so with the scripted backend and
//! the stub toolchain a whole run is a deterministic function of its inputs.

pub mod backends;
pub mod ca;
pub mod copa;
pub mod graph;
pub mod kb;
pub mod model;
pub mod orchestrator;
pub mod scenario;
pub mod ta;
pub mod toolchain;
pub mod workspace;

pub use backends::{GenRequest, GenResponse, GeneratorBackend, RequestKind};
pub use kb::KnowledgeBase;
pub use model::{CodePlan, SchemaError, SourceUnit};
pub use orchestrator::{Budgets, RunOutcome};
pub use toolchain::Toolchain;
pub use workspace::Workspace;
