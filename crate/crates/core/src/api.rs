//! Request and response bodies of the HTTP service, shared by the server
//! and the client.

use serde::{Deserialize, Serialize};

use crate::cost::CostBreakdown;
use crate::harness::report::Verdict;
use crate::harness::{Answer, FlintConfig, QueryId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Flint,
    Local,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flint" => Ok(Mode::Flint),
            "local" => Ok(Mode::Local),
            other => Err(format!("unknown mode {other:?} (expected flint or local)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Flint => "flint",
            Mode::Local => "local",
        })
    }
}

/// Fields every query-shaped request may override. `config` replaces the
/// server's configuration wholesale; `input` and `partitions` are then
/// applied on top of it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Overrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<FlintConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partitions: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub records: u64,
    pub seed: u64,
    /// `bucket/prefix`
    pub out: String,
    pub parts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub query: QueryId,
    pub mode: Mode,
    #[serde(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub query: QueryId,
    pub mode: Mode,
    pub answer: Answer,
    /// Engine runs only; local runs carry no modeled latency or cost.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostBreakdown>,
    #[serde(default)]
    pub invocations: u64,
    #[serde(default)]
    pub queue_calls: u64,
    /// Engine runs are checked against the oracle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_difference: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchRequest {
    /// Empty means all seven.
    #[serde(default)]
    pub queries: Vec<QueryId>,
    #[serde(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRequest {
    pub query: QueryId,
    #[serde(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}
