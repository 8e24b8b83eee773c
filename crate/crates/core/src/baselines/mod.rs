//! Comparison heatmappers: sensitivity analysis, Taylor decomposition at a
//! searched nearest root, and the LRP αβ and ε rules.

mod lrp;
mod nearest_root;
mod sensitivity;

pub use lrp::{lrp_alphabeta, lrp_epsilon, lrp_heatmap};
pub use nearest_root::{nearest_root, nearest_root_taylor, RootSearch, RootSearchConfig};
pub use sensitivity::{sensitivity_heatmap, SensitivityMode, DEFAULT_SENSITIVITY_STEP};
