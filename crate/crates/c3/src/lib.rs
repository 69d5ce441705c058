//! Std companion to `c3-core`: file formats, the chat gateway, caption
//! augmentation, consistency verification and the pipeline commands.

pub mod augmenter;
pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod embedding_io;
pub mod extraction;
pub mod gateway;
pub mod pipeline;
pub mod synth;
pub mod templates;
