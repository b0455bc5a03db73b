pub mod dataset;
pub mod density;
pub mod distance;
pub mod importance;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod synthetic;
