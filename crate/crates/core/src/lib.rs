pub mod analysis;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pseudolabel;
pub mod synthdata;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::IGNORE;
