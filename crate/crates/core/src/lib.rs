//! Query-driven task-oriented dialogue: query generation, top-n knowledge
//! retrieval, and knowledge-grounded response generation, with evaluation
//! and data tooling.

pub mod backends;
pub mod data;
pub mod eval;
pub mod kb;
pub mod pipeline;
pub mod retriever;
pub mod synth;
