//! In-context learning benchmark for vision-language models on
//! histopathology tiles.

pub mod corpus;
pub mod embed_store;
pub mod evalstat;
pub mod gateway;
pub mod probe;
pub mod prompt;
pub mod reply;
pub mod seed;
pub mod shots;
pub mod runner;
