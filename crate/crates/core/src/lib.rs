pub mod advisor;
pub mod api;
pub mod catalog;
pub mod datastore;
pub mod engine;
pub mod exemplars;
pub mod kernel;
pub mod logistics;
pub mod orchestrator;
pub mod platform;
pub mod program;
pub mod rsvd;
pub mod sim;
pub mod topology;
pub mod value;
pub mod vault;
pub mod world;
