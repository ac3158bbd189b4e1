pub mod contrastive;
pub mod evaluator;
pub mod hashing;
pub mod prompts;
pub mod rank_training;
pub mod reranker;
pub mod retriever;
pub mod scorer_gateway;
pub mod store;
pub mod synthetic;
pub mod throughput;
pub mod trec;
pub mod types;
