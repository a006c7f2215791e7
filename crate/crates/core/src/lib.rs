pub mod adapter;
pub mod caption;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod eval;
pub mod jsonl;
pub mod lm;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod tokenizer;
