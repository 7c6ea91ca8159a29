pub mod analysis;
pub mod ast;
pub mod bank;
pub mod campaign;
pub mod config;
pub mod constraints;
pub mod coverage;
pub mod fsan;
pub mod fusion;
pub mod gateway;
pub mod library;
pub mod prompt;
pub mod rewrite;
pub mod sanitizer;
pub mod scheduler;
pub mod toolchain;
