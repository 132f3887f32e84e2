pub mod complete;
pub mod fish;
pub mod generate;
pub mod mask;
pub mod metrics;
pub mod rigidity;
pub mod sample;
pub mod sweep;
