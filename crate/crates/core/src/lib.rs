//! Dense knowledge retrieval for task-oriented dialogue, trained from
//! positive and negative feedback of a black-box response generator.

pub mod corpus;
pub mod encoder;
pub mod feedback;
pub mod generator;
pub mod metrics;
pub mod pretrain;
pub mod retriever;
pub mod runtime;
pub mod synthetic;
pub mod text;
