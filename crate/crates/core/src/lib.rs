pub mod augment;
pub mod bank;
pub mod error;
pub mod fusion;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
pub use types::{box_area, clip_box, BBox, Detection, Domain, LabelKind, LabelSet, Seed};
