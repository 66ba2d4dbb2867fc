//! Height-driven attention (HANet), a toy segmentation network that hosts it, and
//! the label statistics that motivate it.

pub mod error;
pub mod hanet;
pub mod io;
pub mod kv;
pub mod posenc;
pub mod scenestats;
pub mod toyseg;
pub mod verify;

pub use error::{CoreError, Result};
pub use hanet::{Hanet, HanetConfig};
