pub mod autograd;
pub mod checks;
pub mod checkpoint;
pub mod dsp;
pub mod metrics;
pub mod model;
pub mod pooling;
pub mod synth;
pub mod train;
