pub mod broker;
pub mod client;
pub mod frame;
pub mod registry;
pub mod runner;
pub mod scheduler;
pub mod schema;
pub mod statestore;
pub mod value;
