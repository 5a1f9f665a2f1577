pub mod analysis;
pub mod client;
pub mod datagen;
pub mod orchestrator;
pub mod quantkit;
pub mod server;
pub mod sslcore;
pub mod streams;
