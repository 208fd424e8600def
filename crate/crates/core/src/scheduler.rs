//! Driver-side orchestration of a physical plan.
//!
//! Stages run strictly one after another: every task of stage `i` reports
//! `Done` before any task of stage `i + 1` is launched. Within a stage all
//! tasks are launched at once and the runtime's slot pool bounds how many
//! run concurrently. Chained tasks are relaunched as soon as their report
//! arrives. Failed invocations are retried from scratch under a new attempt
//! number, which gives the retry its own batch namespace; downstream readers
//! accept only the attempt that finished.
//!
//! Every queue the run creates is deleted before `execute_plan` returns,
//! whether the run succeeds or fails.

use std::collections::BTreeMap;
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};

use crate::cost::RunMetrics;
use crate::executor::descriptor::*;
use crate::executor::{executor_handler, TaskServices, EXECUTOR_FUNCTION_ID};
use crate::faas::{FaasError, FaasRuntime, FailureReason, InvocationRecord, Outcome};
use crate::functions::FunctionRegistry;
use crate::plan::{Action, PhysicalPlan, Stage, StageInput, StageOutput};
use crate::queue::{QueueError, QueueService};
use crate::record::Datum;
use crate::store::{ObjectRef, ObjectStore, StoreError};

/// The simulated cloud a plan runs on.
#[derive(Clone)]
pub struct Environment {
    pub store: Arc<ObjectStore>,
    pub queue: Arc<QueueService>,
    pub faas: Arc<FaasRuntime>,
    pub registry: Arc<FunctionRegistry>,
}

impl Environment {
    /// Wires the services together and registers the executor function.
    pub fn new(
        store: Arc<ObjectStore>,
        queue: Arc<QueueService>,
        faas: Arc<FaasRuntime>,
        registry: Arc<FunctionRegistry>,
    ) -> Self {
        let env = Environment {
            store,
            queue,
            faas,
            registry,
        };
        env.faas
            .register(EXECUTOR_FUNCTION_ID, executor_handler(env.task_services()));
        env
    }

    pub fn task_services(&self) -> TaskServices {
        TaskServices {
            store: Arc::clone(&self.store),
            queue: Arc::clone(&self.queue),
            registry: Arc::clone(&self.registry),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub flush_threshold_bytes: u64,
    /// Tasks stop ingesting this fraction of the time limit before it.
    pub safety_margin_fraction: f64,
    /// Re-executions allowed per task after a failed invocation.
    pub retry_budget: u32,
    pub trace_records: bool,
    /// Bucket for overflowed descriptors and staged partial outputs.
    pub scratch_bucket: String,
    /// Ship side-input tables inside each descriptor instead of by reference.
    pub inline_side_inputs: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            flush_threshold_bytes: 64 << 20,
            safety_margin_fraction: 0.05,
            retry_budget: 2,
            trace_records: false,
            scratch_bucket: "flint-scratch".into(),
            inline_side_inputs: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("stage {stage_id} failed at task {task_id}: {reason}")]
    StageFailed {
        stage_id: u32,
        task_id: u32,
        reason: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResultValue {
    Count { count: i64 },
    Collected { items: Vec<Datum> },
    Saved { bucket: String, keys: Vec<String> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkManifest {
    pub link: u32,
    pub invocation_id: u64,
    pub start_seq: u64,
    pub end_seq: u64,
    pub duration_ms: f64,
    pub billed_duration_ms: u64,
    pub overflowed: bool,
    /// `None` for failed invocations.
    pub report: Option<ExecutorReport>,
    pub failure: Option<FailureReason>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttemptManifest {
    pub attempt: u32,
    pub links: Vec<LinkManifest>,
    pub succeeded: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task_id: u32,
    pub attempts: Vec<AttemptManifest>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage_id: u32,
    pub num_tasks: u32,
    /// Queues this stage wrote its shuffle output to.
    pub output_queues: Vec<String>,
    /// Per input partition, the batches each source task was expected to have sent.
    pub expected_batches: Vec<Vec<ExpectedBatches>>,
    pub tasks: Vec<TaskManifest>,
}

impl StageManifest {
    pub fn links(&self) -> impl Iterator<Item = &LinkManifest> {
        self.tasks
            .iter()
            .flat_map(|t| t.attempts.iter())
            .flat_map(|a| a.links.iter())
    }
}

/// Everything a run did, for cost accounting and audits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub plan_id: String,
    pub stages: Vec<StageManifest>,
    pub queues_created: Vec<String>,
    pub queues_deleted: Vec<String>,
    /// Queue API calls made by the executors.
    pub executor_queue_calls: u64,
    /// Create and delete calls made by the scheduler.
    pub driver_queue_calls: u64,
}

impl RunManifest {
    pub fn total_queue_calls(&self) -> u64 {
        self.executor_queue_calls + self.driver_queue_calls
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkManifest> {
        self.stages.iter().flat_map(StageManifest::links)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub value: ResultValue,
    pub metrics: RunMetrics,
    pub manifest: RunManifest,
}

/// A failed run still reports what it did.
#[derive(Debug)]
pub struct RunFailure {
    pub error: SchedulerError,
    pub manifest: RunManifest,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `plan` to completion.
#[allow(clippy::result_large_err)]
pub fn execute_plan(
    plan: &PhysicalPlan,
    env: &Environment,
    config: &SchedulerConfig,
) -> Result<QueryResult, RunFailure> {
    let mut run = Run {
        plan,
        env,
        config,
        manifest: RunManifest {
            plan_id: plan.plan_id.clone(),
            ..RunManifest::default()
        },
        live_queues: Vec::new(),
        records: Vec::new(),
    };
    let outcome = run.stages();
    run.cleanup();
    let metrics = run.metrics();
    match outcome {
        Ok(value) => Ok(QueryResult {
            value,
            metrics,
            manifest: run.manifest,
        }),
        Err(error) => Err(RunFailure {
            error,
            manifest: run.manifest,
        }),
    }
}

struct Run<'a> {
    plan: &'a PhysicalPlan,
    env: &'a Environment,
    config: &'a SchedulerConfig,
    manifest: RunManifest,
    live_queues: Vec<String>,
    records: Vec<InvocationRecord>,
}

struct Completion {
    task_id: u32,
    link: u32,
    overflow: Option<ObjectRef>,
    record: InvocationRecord,
}

#[derive(Default)]
struct TaskState {
    attempt: u32,
    sent: Vec<u64>,
    results: Vec<Vec<u8>>,
    last_consumed: u64,
    done: bool,
}

/// Finished stage output handed to the next stage.
struct StageOutcome {
    /// Per task: accepted attempt, batches sent per destination partition.
    accepted: Vec<(u32, Vec<u64>)>,
    results: Vec<Vec<Vec<u8>>>,
}

impl Run<'_> {
    fn stages(&mut self) -> Result<ResultValue, SchedulerError> {
        let side_inputs = self.side_inputs()?;
        let mut upstream: Option<StageOutcome> = None;
        let mut input_queues: Vec<String> = Vec::new();
        for stage in &self.plan.stages {
            let mut sm = StageManifest {
                stage_id: stage.stage_id,
                num_tasks: stage.num_tasks,
                ..StageManifest::default()
            };
            if let StageOutput::ShuffleWrite { num_partitions, .. } = &stage.output {
                for p in 0..*num_partitions {
                    let name = self.plan.queue_name(stage.stage_id, p);
                    self.env.queue.create_queue(&name)?;
                    self.manifest.driver_queue_calls += 1;
                    self.manifest.queues_created.push(name.clone());
                    self.live_queues.push(name.clone());
                    sm.output_queues.push(name);
                }
            }
            if let (StageInput::QueuePartitions { .. }, Some(up)) = (&stage.input, &upstream) {
                sm.expected_batches = (0..stage.num_tasks as usize)
                    .map(|p| {
                        up.accepted
                            .iter()
                            .enumerate()
                            .map(|(src, (attempt, sent))| ExpectedBatches {
                                src_task_id: src as u32,
                                attempt: *attempt,
                                batches: sent[p] as u32,
                            })
                            .collect()
                    })
                    .collect();
            }
            self.manifest.stages.push(sm);
            let outcome = self.run_stage(stage, &input_queues, &side_inputs)?;
            for q in input_queues.drain(..) {
                self.delete_queue(&q);
            }
            input_queues = self.manifest.stages.last().unwrap().output_queues.clone();
            upstream = Some(outcome);
        }
        let last = upstream.expect("plans have at least one stage");
        self.assemble(self.plan.result_stage(), last)
    }

    fn side_inputs(&self) -> Result<Vec<SideInputSpec>, SchedulerError> {
        self.plan
            .side_inputs
            .iter()
            .map(|s| {
                let source = if self.config.inline_side_inputs {
                    let body = self.env.store.get_object(&s.object)?;
                    SideInputSource::Inline {
                        csv: String::from_utf8_lossy(&body).into_owned(),
                    }
                } else {
                    SideInputSource::Object {
                        object: s.object.clone(),
                    }
                };
                Ok(SideInputSpec {
                    name: s.name.clone(),
                    source,
                })
            })
            .collect()
    }

    fn descriptor(
        &self,
        stage: &Stage,
        task_id: u32,
        attempt: u32,
        continuation: Option<Continuation>,
        input_queues: &[String],
        side_inputs: &[SideInputSpec],
    ) -> TaskDescriptor {
        let input = match &stage.input {
            StageInput::ObjectSplits { splits } => InputSpec::ObjectSplit {
                range: splits[task_id as usize].clone(),
            },
            StageInput::QueuePartitions { merge_fn_id, .. } => InputSpec::QueuePartition {
                queue: input_queues[task_id as usize].clone(),
                expected: self.manifest.stages.last().unwrap().expected_batches[task_id as usize]
                    .clone(),
                merge_fn_id: merge_fn_id.clone(),
            },
        };
        let output = match &stage.output {
            StageOutput::ShuffleWrite {
                num_partitions,
                partitioner_id,
            } => OutputSpec::ShuffleWrite {
                queues: self.manifest.stages.last().unwrap().output_queues.clone(),
                partitioner_id: partitioner_id.clone(),
                num_partitions: *num_partitions,
            },
            StageOutput::Result { action } => OutputSpec::Result {
                action: action.clone(),
            },
        };
        TaskDescriptor {
            v: WIRE_VERSION,
            plan_id: self.plan.plan_id.clone(),
            stage_id: stage.stage_id,
            task_id,
            attempt,
            pipeline: stage.pipeline.clone(),
            input,
            output,
            continuation,
            // only per-record functions see side inputs
            side_inputs: if stage.pipeline.is_empty() {
                Vec::new()
            } else {
                side_inputs.to_vec()
            },
            settings: ExecutorSettings {
                flush_threshold_bytes: self.config.flush_threshold_bytes,
                safety_margin_ms: self.env.faas.limits().time_limit_ms as f64
                    * self.config.safety_margin_fraction,
                trace_records: self.config.trace_records,
                scratch_bucket: self.config.scratch_bucket.clone(),
            },
        }
    }

    /// Sends `desc` inline, or through the object store when its encoding
    /// exceeds the payload limit.
    fn launch(&self, desc: &TaskDescriptor, tx: &mpsc::Sender<Completion>) -> Result<(), String> {
        let mut payload = desc.encode();
        let mut overflow = None;
        if payload.len() > self.env.faas.limits().payload_limit_bytes {
            let obj = ObjectRef::new(
                self.config.scratch_bucket.clone(),
                format!(
                    "{}/overflow/s{}-t{}-a{}-l{}.json",
                    desc.plan_id,
                    desc.stage_id,
                    desc.task_id,
                    desc.attempt,
                    desc.link()
                ),
            )
            .map_err(|e| e.to_string())?;
            self.env
                .store
                .put_object(&obj, &payload)
                .map_err(|e| e.to_string())?;
            payload = serde_json::to_vec(&OverflowStub {
                v: WIRE_VERSION,
                payload_overflow_ref: obj.clone(),
            })
            .expect("stub serializes");
            overflow = Some(obj);
        }
        let tx = tx.clone();
        let (task_id, link) = (desc.task_id, desc.link());
        self.env
            .faas
            .invoke_with_callback(EXECUTOR_FUNCTION_ID, payload, move |record| {
                let _ = tx.send(Completion {
                    task_id,
                    link,
                    overflow,
                    record,
                });
            })
            .map(|_| ())
            .map_err(|e: FaasError| e.to_string())
    }

    fn run_stage(
        &mut self,
        stage: &Stage,
        input_queues: &[String],
        side_inputs: &[SideInputSpec],
    ) -> Result<StageOutcome, SchedulerError> {
        let n = stage.num_tasks;
        let num_partitions = match &stage.output {
            StageOutput::ShuffleWrite { num_partitions, .. } => *num_partitions as usize,
            StageOutput::Result { .. } => 0,
        };
        let split_len = |task: u32| match &stage.input {
            StageInput::ObjectSplits { splits } => Some(splits[task as usize].length),
            StageInput::QueuePartitions { .. } => None,
        };
        let mut tasks: Vec<TaskState> = (0..n)
            .map(|_| TaskState {
                sent: vec![0; num_partitions],
                ..TaskState::default()
            })
            .collect();
        self.manifest.stages.last_mut().unwrap().tasks = (0..n)
            .map(|task_id| TaskManifest {
                task_id,
                attempts: vec![AttemptManifest::default()],
            })
            .collect();

        let (tx, rx) = mpsc::channel::<Completion>();
        let mut in_flight = 0usize;
        let mut failure: Option<SchedulerError> = None;
        let fail = |task_id: u32, reason: String| SchedulerError::StageFailed {
            stage_id: stage.stage_id,
            task_id,
            reason,
        };

        for task_id in 0..n {
            let desc = self.descriptor(stage, task_id, 0, None, input_queues, side_inputs);
            match self.launch(&desc, &tx) {
                Ok(()) => in_flight += 1,
                Err(e) => {
                    failure = Some(fail(task_id, e));
                    break;
                }
            }
        }

        let mut remaining = n;
        while in_flight > 0 {
            let c = rx.recv().expect("sender held by this loop");
            in_flight -= 1;
            if let Some(obj) = &c.overflow {
                let _ = self.env.store.delete_object(obj);
            }
            self.records.push(c.record.clone());
            let report = match &c.record.outcome {
                Outcome::Completed { response, .. } => Some(ExecutorReport::decode(response)),
                Outcome::Failed { .. } => None,
            };
            let link = LinkManifest {
                link: c.link,
                invocation_id: c.record.invocation_id,
                start_seq: c.record.start_seq,
                end_seq: c.record.end_seq,
                duration_ms: c.record.duration_ms,
                billed_duration_ms: c.record.billed_duration_ms,
                overflowed: c.overflow.is_some(),
                report: report.as_ref().and_then(|r| r.as_ref().ok()).cloned(),
                failure: match &c.record.outcome {
                    Outcome::Failed { reason } => Some(reason.clone()),
                    Outcome::Completed { .. } => None,
                },
            };
            if let Some(Ok(r)) = &report {
                self.manifest.executor_queue_calls += r.queue_calls;
            }
            self.manifest.stages.last_mut().unwrap().tasks[c.task_id as usize]
                .attempts
                .last_mut()
                .unwrap()
                .links
                .push(link);
            if failure.is_some() {
                continue;
            }

            let t = &mut tasks[c.task_id as usize];
            let next = match report {
                Some(Ok(r)) => match validate_report(
                    &r,
                    stage,
                    num_partitions,
                    c.link,
                    t.last_consumed,
                    split_len(c.task_id),
                ) {
                    Ok(()) => {
                        for (acc, s) in t.sent.iter_mut().zip(&r.messages_sent_per_partition) {
                            *acc += s;
                        }
                        if let Some(bytes) = r.materialized_result {
                            t.results.push(bytes);
                        }
                        match r.status {
                            TaskStatus::Done => {
                                t.done = true;
                                remaining -= 1;
                                self.manifest.stages.last_mut().unwrap().tasks
                                    [c.task_id as usize]
                                    .attempts
                                    .last_mut()
                                    .unwrap()
                                    .succeeded = true;
                                None
                            }
                            TaskStatus::Chained { continuation } => {
                                t.last_consumed = continuation.bytes_consumed;
                                Some((t.attempt, Some(continuation)))
                            }
                        }
                    }
                    Err(e) => {
                        failure = Some(fail(c.task_id, format!("malformed report: {e}")));
                        None
                    }
                },
                Some(Err(e)) => {
                    failure = Some(fail(c.task_id, format!("malformed report: {e}")));
                    None
                }
                None => {
                    let reason = match &c.record.outcome {
                        Outcome::Failed { reason } => reason.to_string(),
                        Outcome::Completed { .. } => unreachable!(),
                    };
                    if t.attempt < self.config.retry_budget {
                        tracing::debug!(stage = stage.stage_id, task = c.task_id, %reason, "retrying task");
                        if let StageInput::QueuePartitions { .. } = &stage.input {
                            // whatever the dead attempt received becomes visible again
                            if let Err(e) = self
                                .env
                                .queue
                                .release_in_flight(&input_queues[c.task_id as usize])
                            {
                                failure = Some(fail(c.task_id, e.to_string()));
                                continue;
                            }
                        }
                        *t = TaskState {
                            attempt: t.attempt + 1,
                            sent: vec![0; num_partitions],
                            ..TaskState::default()
                        };
                        self.manifest.stages.last_mut().unwrap().tasks[c.task_id as usize]
                            .attempts
                            .push(AttemptManifest {
                                attempt: t.attempt,
                                ..AttemptManifest::default()
                            });
                        Some((t.attempt, None))
                    } else {
                        failure = Some(fail(c.task_id, reason));
                        None
                    }
                }
            };
            if let Some((attempt, continuation)) = next {
                let desc = self.descriptor(
                    stage,
                    c.task_id,
                    attempt,
                    continuation,
                    input_queues,
                    side_inputs,
                );
                match self.launch(&desc, &tx) {
                    Ok(()) => in_flight += 1,
                    Err(e) => failure = Some(fail(c.task_id, e)),
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        debug_assert_eq!(remaining, 0);
        Ok(StageOutcome {
            accepted: tasks.iter().map(|t| (t.attempt, t.sent.clone())).collect(),
            results: tasks.into_iter().map(|t| t.results).collect(),
        })
    }

    fn assemble(
        &self,
        stage: &Stage,
        outcome: StageOutcome,
    ) -> Result<ResultValue, SchedulerError> {
        let StageOutput::Result { action } = &stage.output else {
            unreachable!("last stage is the result stage");
        };
        let bad = |task_id: usize, e: String| SchedulerError::StageFailed {
            stage_id: stage.stage_id,
            task_id: task_id as u32,
            reason: format!("malformed report: {e}"),
        };
        match action {
            Action::Count => {
                let mut count = 0i64;
                for (task, parts) in outcome.results.iter().enumerate() {
                    for bytes in parts {
                        let d = Datum::decode(bytes).map_err(|e| bad(task, e.to_string()))?;
                        count += d
                            .as_int()
                            .ok_or_else(|| bad(task, format!("count result {d}")))?;
                    }
                }
                Ok(ResultValue::Count { count })
            }
            Action::Collect => {
                let mut items = Vec::new();
                for (task, parts) in outcome.results.iter().enumerate() {
                    for bytes in parts {
                        match Datum::decode(bytes).map_err(|e| bad(task, e.to_string()))? {
                            Datum::List(xs) => items.extend(xs),
                            d => return Err(bad(task, format!("collect result {d}"))),
                        }
                    }
                }
                Ok(ResultValue::Collected { items })
            }
            Action::SaveAsText { bucket, prefix } => Ok(ResultValue::Saved {
                bucket: bucket.clone(),
                keys: (0..stage.num_tasks)
                    .map(|t| crate::executor::save_key(prefix, t))
                    .collect(),
            }),
        }
    }

    fn delete_queue(&mut self, name: &str) {
        if let Some(i) = self.live_queues.iter().position(|q| q == name) {
            self.live_queues.remove(i);
            // a queue that vanished underneath us needs no further cleanup
            let _ = self.env.queue.delete_queue(name);
            self.manifest.driver_queue_calls += 1;
            self.manifest.queues_deleted.push(name.to_string());
        }
    }

    fn cleanup(&mut self) {
        for q in self.live_queues.clone() {
            self.delete_queue(&q);
        }
        let prefix = format!("{}/", self.plan.plan_id);
        if let Ok(keys) = self
            .env
            .store
            .list_prefix(&self.config.scratch_bucket, &prefix)
        {
            for (key, _) in keys {
                if let Ok(obj) = ObjectRef::new(self.config.scratch_bucket.clone(), key) {
                    let _ = self.env.store.delete_object(&obj);
                }
            }
        }
    }

    fn metrics(&self) -> RunMetrics {
        let start = self
            .records
            .iter()
            .map(|r| r.start_ms)
            .fold(f64::INFINITY, f64::min);
        let end = self
            .records
            .iter()
            .map(|r| r.end_ms)
            .fold(f64::NEG_INFINITY, f64::max);
        let wall = if self.records.is_empty() {
            0.0
        } else {
            end - start
        };
        RunMetrics::from_records(&self.records, self.manifest.total_queue_calls(), wall)
    }
}

fn validate_report(
    r: &ExecutorReport,
    stage: &Stage,
    num_partitions: usize,
    link: u32,
    last_consumed: u64,
    split_len: Option<u64>,
) -> Result<(), String> {
    if r.v != WIRE_VERSION {
        return Err(format!("version {}", r.v));
    }
    match &stage.output {
        StageOutput::ShuffleWrite { .. } => {
            if r.messages_sent_per_partition.len() != num_partitions {
                return Err(format!(
                    "{} partition counts for {num_partitions} partitions",
                    r.messages_sent_per_partition.len()
                ));
            }
        }
        StageOutput::Result { action } => {
            let needs_value = !matches!(action, Action::SaveAsText { .. });
            if needs_value && r.materialized_result.is_none() {
                return Err("missing materialized result".into());
            }
        }
    }
    if let TaskStatus::Chained { continuation: c } = &r.status {
        let Some(len) = split_len else {
            return Err("chained report for a shuffle-read task".into());
        };
        if c.link != link + 1 {
            return Err(format!("continuation link {} after link {link}", c.link));
        }
        if c.bytes_consumed <= last_consumed || c.bytes_consumed > len {
            return Err(format!(
                "continuation at {} (previous {last_consumed}, split length {len})",
                c.bytes_consumed
            ));
        }
        if matches!(stage.output, StageOutput::ShuffleWrite { .. })
            && c.next_seq.len() != num_partitions
        {
            return Err("sequence counters do not match partitions".into());
        }
    }
    Ok(())
}

/// Per-key view of a collected result of `(key, value)` pairs.
pub fn collected_map(items: &[Datum]) -> BTreeMap<String, Datum> {
    items
        .iter()
        .map(|d| match d {
            Datum::Pair(k, v) => (k.to_string(), (**v).clone()),
            other => (other.to_string(), Datum::Int(1)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faas::{ClockMode, FaultInjection, RuntimeLimits};
    use crate::plan::{build_plan, Lineage};
    use crate::queue::QueueConfig;

    fn env_with(limits: RuntimeLimits, faults: FaultInjection) -> Environment {
        Environment::new(
            Arc::new(ObjectStore::in_memory()),
            Arc::new(QueueService::new(QueueConfig::default()).unwrap()),
            FaasRuntime::with_faults(limits, faults).unwrap(),
            Arc::new(FunctionRegistry::with_builtins()),
        )
    }

    fn fast() -> RuntimeLimits {
        RuntimeLimits {
            max_concurrency: 4,
            cold_start_ms: 0,
            warm_start_ms: 0,
            ..RuntimeLimits::default()
        }
    }

    fn put_lines(env: &Environment, key: &str, lines: &[&str]) {
        let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
        env.store
            .put_object(&ObjectRef::new("data", key).unwrap(), body.as_bytes())
            .unwrap();
    }

    fn plan(env: &Environment, lineage: &Lineage, split: u64) -> PhysicalPlan {
        let catalog = env.store.list_prefix("data", "in/").unwrap();
        build_plan(lineage, split, &catalog, &env.registry).unwrap()
    }

    #[test]
    fn count_over_three_splits() {
        let env = env_with(fast(), FaultInjection::default());
        for i in 0..3 {
            let lines: Vec<String> = (0..10).map(|j| format!("r{i}-{j}")).collect();
            put_lines(
                &env,
                &format!("in/{i}"),
                &lines.iter().map(String::as_str).collect::<Vec<_>>(),
            );
        }
        let p = plan(&env, &Lineage::source("data", "in/").count(), 1 << 20);
        assert_eq!(p.stages[0].num_tasks, 3);
        let r = execute_plan(&p, &env, &SchedulerConfig::default()).unwrap();
        assert_eq!(r.value, ResultValue::Count { count: 30 });
        assert_eq!(r.metrics.total_invocations, 3);
    }

    #[test]
    fn word_count_creates_and_deletes_queues() {
        let env = env_with(fast(), FaultInjection::default());
        put_lines(&env, "in/a", &["a b a", "c", "b a"]);
        let lineage = Lineage::source("data", "in/")
            .flat_map("split_words")
            .map("key_with_one")
            .reduce_by_key("add", 30)
            .collect();
        let p = plan(&env, &lineage, 4);
        let r = execute_plan(&p, &env, &SchedulerConfig::default()).unwrap();
        let ResultValue::Collected { items } = &r.value else {
            panic!()
        };
        let m = collected_map(items);
        assert_eq!(m["a"], Datum::Int(3));
        assert_eq!(m["b"], Datum::Int(2));
        assert_eq!(m["c"], Datum::Int(1));
        assert_eq!(r.manifest.queues_created.len(), 30);
        let mut deleted = r.manifest.queues_deleted.clone();
        deleted.sort();
        let mut created = r.manifest.queues_created.clone();
        created.sort();
        assert_eq!(deleted, created);
        assert!(env.queue.list_queues().is_empty());
        // expected counts handed downstream equal what the mappers reported
        let sent: u64 = r.manifest.stages[0]
            .links()
            .filter_map(|l| l.report.as_ref())
            .flat_map(|rep| rep.messages_sent_per_partition.iter())
            .sum();
        let expected: u64 = r.manifest.stages[1]
            .expected_batches
            .iter()
            .flatten()
            .map(|e| e.batches as u64)
            .sum();
        assert_eq!(sent, expected);
    }

    #[test]
    fn chained_counts_accumulate_across_links() {
        let limits = RuntimeLimits {
            time_limit_ms: 60,
            clock: ClockMode::Virtual { ms_per_record: 1.0 },
            ..fast()
        };
        let env = env_with(limits, FaultInjection::default());
        let lines: Vec<String> = (0..200).map(|i| format!("k{}", i % 50)).collect();
        put_lines(
            &env,
            "in/a",
            &lines.iter().map(String::as_str).collect::<Vec<_>>(),
        );
        let lineage = Lineage::source("data", "in/")
            .map("key_with_one")
            .reduce_by_key("add", 8)
            .collect();
        let p = plan(&env, &lineage, 1 << 20);
        let cfg = SchedulerConfig {
            flush_threshold_bytes: 0,
            ..SchedulerConfig::default()
        };
        let r = execute_plan(&p, &env, &cfg).unwrap();
        let links: Vec<_> = r.manifest.stages[0].tasks[0].attempts[0]
            .links
            .iter()
            .collect();
        assert!(links.len() >= 3, "{} links", links.len());
        let sent_p0: u64 = links
            .iter()
            .map(|l| l.report.as_ref().unwrap().messages_sent_per_partition[0])
            .sum();
        let exp = &r.manifest.stages[1].expected_batches[0][0];
        assert_eq!(exp.batches as u64, sent_p0);
        let ResultValue::Collected { items } = &r.value else {
            panic!()
        };
        let total: i64 = collected_map(items)
            .values()
            .map(|v| v.as_int().unwrap())
            .sum();
        assert_eq!(total, 200);
    }

    #[test]
    fn crashes_are_retried_then_fail() {
        let crashing = FaultInjection {
            crash_probability: 1.0,
            seed: 1,
        };
        let env = env_with(fast(), crashing);
        put_lines(&env, "in/a", &["x y", "z"]);
        let lineage = Lineage::source("data", "in/")
            .flat_map("split_words")
            .map("key_with_one")
            .reduce_by_key("add", 3)
            .count();
        let p = plan(&env, &lineage, 1 << 20);
        let err = execute_plan(&p, &env, &SchedulerConfig::default()).unwrap_err();
        assert!(matches!(
            err.error,
            SchedulerError::StageFailed { stage_id: 0, .. }
        ));
        assert_eq!(err.manifest.stages[0].tasks[0].attempts.len(), 3);
        assert!(env.queue.list_queues().is_empty());
    }

    #[test]
    fn occasional_crashes_do_not_change_answers() {
        let flaky = FaultInjection {
            crash_probability: 0.3,
            seed: 9,
        };
        let env = env_with(fast(), flaky);
        let lines: Vec<String> = (0..200).map(|i| format!("w{} w{}", i % 7, i % 3)).collect();
        put_lines(
            &env,
            "in/a",
            &lines.iter().map(String::as_str).collect::<Vec<_>>(),
        );
        let lineage = Lineage::source("data", "in/")
            .flat_map("split_words")
            .map("key_with_one")
            .reduce_by_key("add", 4)
            .collect();
        let p = plan(&env, &lineage, 300);
        let cfg = SchedulerConfig {
            retry_budget: 10,
            ..SchedulerConfig::default()
        };
        let r = execute_plan(&p, &env, &cfg).unwrap();
        let retried = r
            .manifest
            .stages
            .iter()
            .flat_map(|s| &s.tasks)
            .any(|t| t.attempts.len() > 1);
        assert!(retried);
        let ResultValue::Collected { items } = &r.value else {
            panic!()
        };
        let m = collected_map(items);
        let total: i64 = m.values().map(|v| v.as_int().unwrap()).sum();
        assert_eq!(total, 400);
        // w0 appears on lines i % 7 == 0 and on lines i % 3 == 0
        assert_eq!(m["w0"], Datum::Int(29 + 67));
    }

    #[test]
    fn save_as_text_writes_one_object_per_task() {
        let env = env_with(fast(), FaultInjection::default());
        put_lines(&env, "in/a", &["a", "b", "a"]);
        let lineage = Lineage::source("data", "in/")
            .map("key_with_one")
            .reduce_by_key("add", 2)
            .save_as_text("out", "wc");
        let p = plan(&env, &lineage, 1 << 20);
        let r = execute_plan(&p, &env, &SchedulerConfig::default()).unwrap();
        let ResultValue::Saved { bucket, keys } = &r.value else {
            panic!()
        };
        assert_eq!(keys, &["wc/part-00000", "wc/part-00001"]);
        let mut lines: Vec<String> = keys
            .iter()
            .flat_map(|k| {
                let body = env
                    .store
                    .get_object(&ObjectRef::new(bucket.clone(), k.clone()).unwrap())
                    .unwrap();
                String::from_utf8(body)
                    .unwrap()
                    .lines()
                    .map(String::from)
                    .collect::<Vec<_>>()
            })
            .collect();
        lines.sort();
        assert_eq!(lines, ["(a, 2)", "(b, 1)"]);
        assert!(env
            .store
            .list_prefix("flint-scratch", "")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn oversized_descriptors_go_through_the_store() {
        let limits = RuntimeLimits {
            payload_limit_bytes: 600,
            ..fast()
        };
        let env = env_with(limits, FaultInjection::default());
        put_lines(&env, "in/a", &["1", "2", "3"]);
        let weather: String = (0..100).map(|i| format!("d{i},{i}\n")).collect();
        env.store
            .put_object(
                &ObjectRef::new("data", "side.csv").unwrap(),
                weather.as_bytes(),
            )
            .unwrap();
        let lineage = Lineage::source("data", "in/")
            .side_input("w", ObjectRef::new("data", "side.csv").unwrap())
            .map("identity")
            .count();
        let p = plan(&env, &lineage, 1 << 20);
        let inline = SchedulerConfig {
            inline_side_inputs: true,
            ..SchedulerConfig::default()
        };
        let r = execute_plan(&p, &env, &inline).unwrap();
        assert_eq!(r.value, ResultValue::Count { count: 3 });
        assert!(r.manifest.links().all(|l| l.overflowed));
        let by_ref = execute_plan(&p, &env, &SchedulerConfig::default()).unwrap();
        assert!(by_ref.manifest.links().all(|l| !l.overflowed));
        // a stage without per-record functions gets no side inputs
        let bare = plan(
            &env,
            &Lineage::source("data", "in/")
                .side_input("w", ObjectRef::new("data", "side.csv").unwrap())
                .count(),
            1 << 20,
        );
        let r = execute_plan(&bare, &env, &inline).unwrap();
        assert!(r.manifest.links().all(|l| !l.overflowed));
        assert!(env
            .store
            .list_prefix("flint-scratch", "")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn reruns_are_deterministic() {
        let env = env_with(fast(), FaultInjection::default());
        let lines: Vec<String> = (0..500).map(|i| format!("{}", i % 13)).collect();
        put_lines(
            &env,
            "in/a",
            &lines.iter().map(String::as_str).collect::<Vec<_>>(),
        );
        let lineage = Lineage::source("data", "in/")
            .map("key_with_one")
            .reduce_by_key("add", 5)
            .collect();
        let p = plan(&env, &lineage, 97);
        let a = execute_plan(&p, &env, &SchedulerConfig::default()).unwrap();
        let b = execute_plan(&p, &env, &SchedulerConfig::default()).unwrap();
        assert_eq!(a.value, b.value);
    }
}
