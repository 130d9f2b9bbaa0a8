pub mod bench;
pub mod dist;
pub mod experiments;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod store;
pub mod theory;
