//! Small restoration network: shallow conv, groups of attention blocks with
//! residual-in-residual wiring, and a sub-pixel head.

mod config;
pub mod data;
mod net;
mod store;
mod train;

pub use config::{ModelConfig, Variant};
pub use net::{deep_graph, forward_graph, layout, restore_graph, shallow_graph, Model};
pub use store::{Bound, ParamStore};
pub use train::{grad_check_model, train_toy, Task, TrainOutcome, TrainSettings};
