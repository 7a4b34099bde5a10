//! Runtime for a ReAct agent that reconfigures its own sub-goal, strategy,
//! toolbox and context between stages, plus the trajectory ledger used to
//! build fine-tuning data from its runs.

pub mod codec;
pub mod config;
pub mod engine;
pub mod ledger;
pub mod llm;
pub mod orchestrator;
pub mod prompt;
pub mod scenario;
pub mod tools;

#[cfg(test)]
mod test_http;

pub use codec::{ToolCall, ToolSchema};
pub use config::{
    ExecutionSummary, GlobalHistoryPool, GlobalToolPool, ReconfigRequest, StageConfiguration,
    UpdateContent,
};
pub use engine::{EngineCall, EngineError, EngineOutput, ReconfigEngine};
pub use ledger::{LedgerError, Outcome, RunStatus, Trajectory};
pub use llm::{BackendError, ChatBackend, ChatMessage, Completion, SamplingParams};
pub use orchestrator::{AblationMode, Component, ContextBudget, Orchestrator, RunLimits};
pub use tools::{Observation, Step, ToolRegistry, ToolSession};

pub type KtoParams64 = ledger::KtoParams<f64>;
pub type KtoParams32 = ledger::KtoParams<f32>;
pub type LogprobBundle64 = ledger::LogprobBundle<f64>;
pub type LogprobBundle32 = ledger::LogprobBundle<f32>;
