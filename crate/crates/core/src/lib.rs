pub mod cli;
pub mod data;
pub mod encoder;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod text;
pub mod trainer;
