pub mod cli;
pub mod config;
pub mod detector;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod scoring;
pub mod seed;
pub mod synthdata;
