pub mod atlas;
pub mod cartograph;
pub mod corpus;
pub mod curate;
pub mod genclient;
pub mod geometry;
pub mod lod;
pub mod pipeline;
pub mod project;
pub mod server;
pub mod synth;
pub mod trails;
