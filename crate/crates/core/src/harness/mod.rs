//! Taxi benchmark: synthetic data, the seven queries, a single-process
//! oracle, and a bench loop that compares the two and reports latency and
//! cost.

pub mod config;
pub mod datagen;
pub mod local;
pub mod queries;
pub mod report;

use std::sync::Arc;

pub use config::{ConfigError, FlintConfig, HarnessConfig};
pub use datagen::{generate_dataset, DataLocation, GenSummary};
pub use queries::{first_difference, Answer, QueryId, UnknownQuery};
pub use report::{BenchReport, QueryReport, Verdict};

use crate::api::{Mode, RunResponse};
use crate::cost::{cost_of_run, CostBreakdown};
use crate::faas::{FaasError, FaasRuntime};
use crate::functions::FunctionRegistry;
use crate::plan::{build_plan, PhysicalPlan, PlanError};
use crate::queue::{QueueError, QueueService};
use crate::scheduler::{execute_plan, Environment, QueryResult, ResultValue, RunFailure};
use crate::store::{ObjectStore, StoreError};
use local::LocalError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bad data location: {0}")]
    Location(String),
    #[error("no dataset at {0}; run gen first")]
    NoDataset(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Faas(#[from] FaasError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("run failed: {0}")]
    Run(#[from] Box<RunFailure>),
    #[error("oracle failed: {0}")]
    Local(#[from] LocalError),
    #[error("unexpected result shape: {0}")]
    Answer(String),
}

/// One engine run, with the environment it ran in so callers can audit the
/// invocation log or queue stats afterwards.
pub struct FlintRun {
    pub query: QueryId,
    pub plan: PhysicalPlan,
    pub result: QueryResult,
    pub answer: Answer,
    pub cost: CostBreakdown,
    pub env: Environment,
}

pub struct Harness {
    store: Arc<ObjectStore>,
    registry: Arc<FunctionRegistry>,
    config: FlintConfig,
}

impl Harness {
    pub fn new(config: FlintConfig) -> Result<Self, HarnessError> {
        Self::with_store(Arc::new(ObjectStore::in_memory()), config)
    }

    pub fn with_store(store: Arc<ObjectStore>, config: FlintConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        DataLocation::parse(&config.harness.data).map_err(HarnessError::Location)?;
        Ok(Harness {
            store,
            registry: Arc::new(queries::registry()),
            config,
        })
    }

    pub fn config(&self) -> &FlintConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<ObjectStore> {
        &self.store
    }

    pub fn registry(&self) -> &Arc<FunctionRegistry> {
        &self.registry
    }

    pub fn location(&self) -> DataLocation {
        DataLocation::parse(&self.config.harness.data).expect("checked in constructor")
    }

    pub fn generate(&self) -> Result<GenSummary, HarnessError> {
        let h = &self.config.harness;
        Ok(generate_dataset(
            &self.store,
            &self.location(),
            h.records,
            h.seed,
            h.parts,
        )?)
    }

    pub fn has_dataset(&self) -> Result<bool, HarnessError> {
        let loc = self.location();
        Ok(!self
            .store
            .list_prefix(&loc.bucket, &loc.trips_prefix())?
            .is_empty())
    }

    /// Fresh queue service and function runtime over the shared store.
    pub fn environment(&self) -> Result<Environment, HarnessError> {
        let queue = QueueService::new(self.config.queue.clone())?;
        let faas = FaasRuntime::with_faults(
            self.config.limits.clone(),
            self.config.harness.faults.clone(),
        )?;
        Ok(Environment::new(
            Arc::clone(&self.store),
            Arc::new(queue),
            faas,
            Arc::clone(&self.registry),
        ))
    }

    pub fn plan(&self, q: QueryId) -> Result<PhysicalPlan, HarnessError> {
        let loc = self.location();
        let lineage = queries::lineage(q, &loc, self.config.harness.partitions);
        let catalog = self
            .store
            .list_prefix(&lineage.source.bucket, &lineage.source.prefix)?;
        if catalog.is_empty() {
            return Err(HarnessError::NoDataset(loc.to_string()));
        }
        Ok(build_plan(
            &lineage,
            self.config.harness.split_size_bytes,
            &catalog,
            &self.registry,
        )?)
    }

    pub fn run_flint(&self, q: QueryId) -> Result<FlintRun, HarnessError> {
        let plan = self.plan(q)?;
        let env = self.environment()?;
        let result = execute_plan(&plan, &env, &self.config.harness.scheduler).map_err(Box::new)?;
        let answer = Answer::from_result(&result.value).map_err(HarnessError::Answer)?;
        let cost = cost_of_run(&result.metrics, &self.config.prices);
        Ok(FlintRun {
            query: q,
            plan,
            result,
            answer,
            cost,
            env,
        })
    }

    pub fn run_local(&self, q: QueryId) -> Result<Answer, HarnessError> {
        let loc = self.location();
        if !self.has_dataset()? {
            return Err(HarnessError::NoDataset(loc.to_string()));
        }
        let lineage = queries::lineage(q, &loc, self.config.harness.partitions);
        let value: ResultValue = local::run_local(&lineage, &self.store, &self.registry)?;
        Answer::from_result(&value).map_err(HarnessError::Answer)
    }

    /// Runs each query on the engine and the oracle and compares.
    pub fn run_query(&self, q: QueryId) -> Result<QueryReport, HarnessError> {
        let flint = self.run_flint(q)?;
        let local = self.run_local(q)?;
        let diff = first_difference(&flint.answer, &local);
        Ok(QueryReport {
            query: q,
            title: q.title().to_string(),
            latency_s: flint.result.metrics.wall_clock_ms / 1000.0,
            cost_usd: flint.cost.total,
            cost: flint.cost,
            invocations: flint.result.metrics.total_invocations,
            queue_calls: flint.result.metrics.total_queue_calls,
            verdict: if diff.is_none() {
                Verdict::Ok
            } else {
                Verdict::Mismatch
            },
            first_difference: diff,
            flint: flint.answer,
            local,
        })
    }

    /// `run_query` for the engine, the bare oracle answer for local mode.
    pub fn run(&self, q: QueryId, mode: Mode) -> Result<RunResponse, HarnessError> {
        Ok(match mode {
            Mode::Local => RunResponse {
                query: q,
                mode,
                answer: self.run_local(q)?,
                latency_s: None,
                cost: None,
                invocations: 0,
                queue_calls: 0,
                verdict: None,
                first_difference: None,
            },
            Mode::Flint => {
                let r = self.run_query(q)?;
                RunResponse {
                    query: q,
                    mode,
                    answer: r.flint,
                    latency_s: Some(r.latency_s),
                    cost: Some(r.cost),
                    invocations: r.invocations,
                    queue_calls: r.queue_calls,
                    verdict: Some(r.verdict),
                    first_difference: r.first_difference,
                }
            }
        })
    }

    pub fn bench(&self, queries: &[QueryId]) -> Result<BenchReport, HarnessError> {
        let mut reports = Vec::with_capacity(queries.len());
        for &q in queries {
            tracing::info!(query = %q, "running");
            reports.push(self.run_query(q)?);
        }
        let h = &self.config.harness;
        Ok(BenchReport {
            v: report::REPORT_VERSION,
            dataset: self.location().to_string(),
            records: h.records,
            seed: h.seed,
            queries: reports,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Harness {
        let mut cfg = FlintConfig::default();
        cfg.harness.records = 3_000;
        cfg.harness.parts = 3;
        cfg.harness.partitions = 4;
        cfg.harness.split_size_bytes = 64 * 1024;
        cfg.limits.time_scale = 1e-3;
        Harness::new(cfg).unwrap()
    }

    #[test]
    fn missing_dataset_is_reported() {
        let h = small();
        assert!(matches!(
            h.run_flint(QueryId::new(0).unwrap()),
            Err(HarnessError::NoDataset(_))
        ));
        assert!(matches!(
            h.run_local(QueryId::new(0).unwrap()),
            Err(HarnessError::NoDataset(_))
        ));
    }

    #[test]
    fn every_query_matches_the_oracle() {
        let h = small();
        h.generate().unwrap();
        let report = h.bench(&QueryId::ALL).unwrap();
        for q in &report.queries {
            assert_eq!(
                q.verdict,
                Verdict::Ok,
                "{}: {:?}",
                q.query,
                q.first_difference
            );
            assert!(q.invocations > 0 && q.cost_usd > 0.0);
        }
        assert_eq!(
            report.render_table().lines().count(),
            2 + QueryId::ALL.len()
        );
    }

    #[test]
    fn rejects_bad_location() {
        let mut cfg = FlintConfig::default();
        cfg.harness.data = "/".into();
        assert!(matches!(Harness::new(cfg), Err(HarnessError::Location(_))));
    }
}
