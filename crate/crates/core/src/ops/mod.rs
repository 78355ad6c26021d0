//! Forward kernels on plain tensors, plus the reverse kernels the tape uses.

pub mod attend;
pub mod conv;
pub mod linalg;
pub mod pool;
pub mod spatial;

pub use attend::{attend, AttendPhases, BiasIndex, KeySet};
pub use conv::{conv2d, conv2d_depthwise, PadMode};
pub use linalg::{gelu, linear_project, softmax_rows};
pub use pool::{avg_pool_adaptive, cell_range, max_pool_adaptive, Pool};
pub use spatial::{gather_hw, gather_sources, pixel_shuffle, round_clamp};
