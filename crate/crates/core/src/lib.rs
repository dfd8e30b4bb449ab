pub mod batching;
pub mod bbpe;
pub mod corpus;
pub mod heads;
pub mod metrics;
pub mod neural;
pub mod pretrain;
