//! Network construction, forward passes and complexity accounting.

mod arch;
mod complexity;
mod network;

pub use arch::{ArchSpec, Block, NetKind};
pub use complexity::{
    count_complexity, gmlp_predict_series, gmlp_train_series, mlp_series, receptive_field, ComplexityReport,
};
pub use network::{ForwardOptions, ForwardPass, Model, Param};
