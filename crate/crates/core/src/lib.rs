//! Unrestricted-hop relation path extraction over knowledge graphs.
//!
//! A question is answered by extending a relation path one hop at a time
//! from its topic entity. A learned scorer picks each hop and also decides
//! when to stop, by checking whether any one-hop extension outscores the
//! path found so far. No maximum hop count is fixed in advance.

pub mod config;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod eval;
pub mod kg;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};
pub use kg::{EntityId, KnowledgeGraph, RelationId};
