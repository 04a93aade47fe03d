//! Transaction trace language model and anomaly ranking for EVM contracts.
//!
//! Pipeline: [`trace_ingest`] parses traces, [`itr`] builds and linearizes the
//! intermediate tree, [`tokenizer`] and [`embed`] produce model input,
//! [`model`] and [`train`] fit the causal transformer, and [`ids`] ranks a
//! contract's history by log-likelihood. [`metrics`] and [`baselines`] cover
//! evaluation; [`synth`] generates templated traces for tests and benchmarks.

pub mod baselines;
pub mod embed;
pub mod error;
pub mod ids;
pub mod itr;
pub mod metrics;
pub mod model;
pub mod rpc;
pub mod synth;
pub mod tokenizer;
pub mod train;
pub mod trace_ingest;

pub use embed::{ContextRole, EmbeddingTables};
pub use error::{Error, Result};
pub use ids::{AlarmConfig, Cutoff, RankedReport, ScoredTx};
pub use itr::{ItrNode, ItrTree, NodeKind, NodePayload, Step, TreePath};
pub use metrics::{ConfusionCounts, CostMatrix, EvalTable, JointDistribution};
pub use model::{ModelConfig, ModelParams};
pub use tokenizer::{EncodedTrace, TokenizedNode, Vocabulary};
pub use train::TrainConfig;
pub use trace_ingest::{Label, RawCallFrame, RawLogEvent, RawStateAccess, RawTrace};
