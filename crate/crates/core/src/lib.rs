pub mod baseline;
pub mod data;
pub mod error;
pub mod forecast;
pub mod gp;
pub mod model;
pub mod posterior;
pub mod seir;
pub mod svi;
pub mod synth;

pub use error::{Error, Result};
