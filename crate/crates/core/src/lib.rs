pub mod alignment;
pub mod backend;
pub mod frontend;
pub mod geometry;
pub mod pipeline;
pub mod simulator;
pub mod tum;
pub mod uncertainty;
