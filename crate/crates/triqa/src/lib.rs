pub mod audio;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod walnet;
