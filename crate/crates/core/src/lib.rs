pub mod addr;
pub mod attack;
pub mod checker;
pub mod error;
pub mod experiment;
pub mod fabric;
pub mod fm;
pub mod host;
pub mod mac;
pub mod mem;
pub mod metrics;
pub mod par;
pub mod sim;
pub mod space;
pub mod table;
pub mod trace;
pub mod verify;

pub use error::{Error, Result};
