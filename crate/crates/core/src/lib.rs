pub mod bench;
pub mod correction;
pub mod degeneracy;
pub mod engine;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod randomness;
pub mod sampling;
pub mod solvers;
pub mod sprt;
pub mod synth;
