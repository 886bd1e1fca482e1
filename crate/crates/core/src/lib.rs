//! Steady-state potential-flow networks: modelling, simulation, mixed-integer
//! configuration search and stability analysis.

pub mod continuous;
pub mod discrete;
pub mod models;
pub mod network;
pub mod stability;
pub mod state;
pub mod tighten;

pub use continuous::*;
pub use discrete::*;
pub use models::*;
pub use network::*;
pub use stability::*;
pub use state::*;
pub use tighten::*;
