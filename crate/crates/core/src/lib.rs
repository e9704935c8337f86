//! Multi-kink quantile regression for longitudinal data.

pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod qif;
pub mod qr;
pub mod seed;
pub mod sim;
pub mod wi;

pub use error::{MkqrError, Result};
pub use model::{LongitudinalDataset, Observation, QuantileLevel, Subject, ThetaParams};
