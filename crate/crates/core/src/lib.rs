//! Private computation over replicated servers at the optimal download rate.
//!
//! A client wants the value of one linear combination (out of M publicly known
//! combinations) of K datasets replicated across N non-colluding servers,
//! without revealing to any server which combination it wants. The protocol
//! here achieves this at download rate (1 + 1/N + ... + 1/N^(K-1))^-1, which
//! is information-theoretically optimal.
//!
//! Module map:
//! - [`gf`]: prime-field arithmetic and linear algebra.
//! - [`model`]: datasets, the combination matrix, and message evaluation.
//! - [`planner`]: private query-plan generation (index + sign assignment,
//!   randomization, wire ordering).
//! - [`redundancy`]: per-vertex linear dependencies among query values and the
//!   public download-compression matrices built from them.
//! - [`wire`] / [`server`]: binary wire format and the stateless answer engine.
//! - [`client`]: retrieval orchestration and decoding.
//! - [`privacy`]: executable audits that a server's view is independent of the
//!   desired index.
//! - [`analysis`]: closed-form rates and measured-vs-theory reporting.

pub mod analysis;
pub mod client;
pub mod gf;
pub mod model;
pub mod planner;
pub mod privacy;
pub mod redundancy;
pub mod server;
pub mod wire;

pub use gf::{FieldContext, GfError, Matrix};
pub use model::{BasisChange, CombinationMatrix, DatasetStore, MessageView, ModelError};
pub use planner::{Mutation, Query, QueryPlan, Randomizer, Term, Vertex, WireQuery};
pub use redundancy::{BasisSelection, CompressionSpec, RedundancyRelation};
pub use server::ServerEngine;
