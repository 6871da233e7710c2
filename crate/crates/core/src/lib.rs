pub mod config;
pub mod convergence;
pub mod env;
pub mod evaluation;
pub mod federation;
pub mod grid;
pub mod market;
pub mod nn;
pub mod ppo;
pub mod scenario;
pub mod transport;
