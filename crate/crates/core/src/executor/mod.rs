//! Task executor: the body of one function invocation.
//!
//! Decodes a [`TaskDescriptor`], reads its input (an object split or one
//! shuffle partition), runs the stage's narrow pipeline, and either writes
//! shuffle output or materializes the task's share of the result. Tasks
//! over object splits stop ingesting shortly before their deadline, flush,
//! and hand back a [`Continuation`] so the scheduler can launch the next link.

pub mod descriptor;
pub mod shuffle;
pub mod split;

use std::sync::Arc;

use crate::faas::{FailureReason, Handler, InvocationContext};
use crate::functions::{
    FilterFn, FlatMapFn, FnError, FunctionRegistry, MapFn, PartitionFn, SideInputs,
};
use crate::plan::{Action, NarrowOp};
use crate::queue::{QueueError, QueueService};
use crate::record::{Datum, DecodeError};
use crate::store::{ObjectRef, ObjectStore, StoreError};

use descriptor::*;
use shuffle::{combine_in_memory, ShuffleReader, ShuffleWriter, WriterIdentity};
use split::SplitReader;

pub const EXECUTOR_FUNCTION_ID: &str = "flint-executor";

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("unknown {kind} function {id:?}")]
    UnknownFunction { kind: &'static str, id: String },
    #[error("bad descriptor: {0}")]
    BadDescriptor(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Function(#[from] FnError),
    #[error("record of {size} bytes exceeds the {limit}-byte message payload")]
    RecordTooLarge { size: usize, limit: usize },
    #[error("corrupt batch {header}: {reason}")]
    CorruptBatch { header: String, reason: String },
    #[error("queue {queue} drained with batches missing (src, seq): {missing:?}")]
    MissingBatches {
        queue: String,
        missing: Vec<(u32, u32)>,
    },
    #[error("timed out")]
    TimedOut,
    #[error("out of memory: tracked {tracked_bytes} bytes, limit {limit_bytes}")]
    OutOfMemory {
        tracked_bytes: u64,
        limit_bytes: u64,
    },
}

impl From<FailureReason> for ExecError {
    fn from(r: FailureReason) -> Self {
        match r {
            FailureReason::TimedOut => ExecError::TimedOut,
            FailureReason::OutOfMemory {
                tracked_bytes,
                limit_bytes,
            } => ExecError::OutOfMemory {
                tracked_bytes,
                limit_bytes,
            },
            other => ExecError::BadDescriptor(other.to_string()),
        }
    }
}

impl From<ExecError> for FailureReason {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::TimedOut => FailureReason::TimedOut,
            ExecError::OutOfMemory {
                tracked_bytes,
                limit_bytes,
            } => FailureReason::OutOfMemory {
                tracked_bytes,
                limit_bytes,
            },
            other => FailureReason::error(other.to_string()),
        }
    }
}

/// Service handles shared by every executor.
#[derive(Clone)]
pub struct TaskServices {
    pub store: Arc<ObjectStore>,
    pub queue: Arc<QueueService>,
    pub registry: Arc<FunctionRegistry>,
}

/// Function body to register with the runtime under [`EXECUTOR_FUNCTION_ID`].
pub fn executor_handler(services: TaskServices) -> Handler {
    Arc::new(move |ctx, payload| {
        let desc = decode_request(&services.store, payload)?;
        let report = run_task(&desc, &services, ctx)?;
        Ok(report.encode())
    })
}

/// Parses an inline descriptor or fetches the one an overflow stub names.
pub fn decode_request(store: &ObjectStore, payload: &[u8]) -> Result<TaskDescriptor, ExecError> {
    let req: TaskRequest =
        serde_json::from_slice(payload).map_err(|e| ExecError::BadDescriptor(e.to_string()))?;
    let desc = match req {
        TaskRequest::Inline(d) => *d,
        TaskRequest::Overflow(stub) => {
            let body = store.get_object(&stub.payload_overflow_ref)?;
            serde_json::from_slice(&body).map_err(|e| ExecError::BadDescriptor(e.to_string()))?
        }
    };
    if desc.v != WIRE_VERSION {
        return Err(ExecError::BadDescriptor(format!(
            "unsupported version {}",
            desc.v
        )));
    }
    Ok(desc)
}

enum Op {
    Map(MapFn),
    Filter(FilterFn),
    FlatMap(FlatMapFn),
}

fn compile(pipeline: &[NarrowOp], registry: &FunctionRegistry) -> Result<Vec<Op>, ExecError> {
    let unknown = |kind, id: &str| ExecError::UnknownFunction {
        kind,
        id: id.to_string(),
    };
    pipeline
        .iter()
        .map(|op| match op {
            NarrowOp::Map { fn_id } => registry
                .map(fn_id)
                .cloned()
                .map(Op::Map)
                .ok_or_else(|| unknown("map", fn_id)),
            NarrowOp::Filter { fn_id } => registry
                .filter(fn_id)
                .cloned()
                .map(Op::Filter)
                .ok_or_else(|| unknown("filter", fn_id)),
            NarrowOp::FlatMap { fn_id } => registry
                .flat_map(fn_id)
                .cloned()
                .map(Op::FlatMap)
                .ok_or_else(|| unknown("flat_map", fn_id)),
        })
        .collect()
}

fn apply(
    ops: &[Op],
    d: Datum,
    side: &SideInputs,
    out: &mut dyn FnMut(Datum) -> Result<(), ExecError>,
) -> Result<(), ExecError> {
    let Some((op, rest)) = ops.split_first() else {
        return out(d);
    };
    match op {
        Op::Map(f) => apply(rest, f(d, side)?, side, out),
        Op::Filter(f) => {
            if f(&d, side)? {
                apply(rest, d, side, out)
            } else {
                Ok(())
            }
        }
        Op::FlatMap(f) => {
            for item in f(d, side)? {
                apply(rest, item, side, out)?;
            }
            Ok(())
        }
    }
}

enum Sink<'a> {
    Shuffle {
        writer: ShuffleWriter<'a>,
        partitioner: PartitionFn,
    },
    Count(i64),
    Collect {
        items: Vec<Datum>,
        tracked: u64,
    },
    Save {
        text: String,
    },
}

impl Sink<'_> {
    fn push(&mut self, d: Datum) -> Result<(), ExecError> {
        match self {
            Sink::Shuffle {
                writer,
                partitioner,
            } => {
                let (k, v) = d.into_pair().ok_or_else(|| {
                    ExecError::Function(FnError::new("shuffle input must be (key, value) pairs"))
                })?;
                let kb = k.encode();
                let n = writer.num_partitions();
                let p = partitioner(&kb, n);
                if p >= n {
                    return Err(ExecError::Function(FnError(format!(
                        "partitioner returned {p} for {n} partitions"
                    ))));
                }
                writer.push(p, kb, v.encode())
            }
            Sink::Count(n) => {
                *n += 1;
                Ok(())
            }
            Sink::Collect { items, tracked } => {
                *tracked += d.encode().len() as u64 + 32;
                items.push(d);
                Ok(())
            }
            Sink::Save { text } => {
                use std::fmt::Write;
                let _ = writeln!(text, "{d}");
                Ok(())
            }
        }
    }

    fn tracked_bytes(&self) -> u64 {
        match self {
            Sink::Shuffle { writer, .. } => writer.tracked_bytes(),
            Sink::Count(_) => 0,
            Sink::Collect { tracked, .. } => *tracked,
            Sink::Save { text } => text.len() as u64,
        }
    }
}

fn load_side_inputs(specs: &[SideInputSpec], store: &ObjectStore) -> Result<SideInputs, ExecError> {
    let mut side = SideInputs::default();
    for spec in specs {
        match &spec.source {
            SideInputSource::Object { object } => {
                let body = store.get_object(object)?;
                side.insert_csv(spec.name.clone(), &String::from_utf8_lossy(&body));
            }
            SideInputSource::Inline { csv } => side.insert_csv(spec.name.clone(), csv),
        }
    }
    Ok(side)
}

/// Key of a finished task's text output under `prefix`.
pub fn save_key(prefix: &str, task_id: u32) -> String {
    if prefix.is_empty() || prefix.ends_with('/') {
        format!("{prefix}part-{task_id:05}")
    } else {
        format!("{prefix}/part-{task_id:05}")
    }
}

fn staging_prefix(desc: &TaskDescriptor) -> String {
    format!(
        "{}/save/s{}/part-{}/a{}/",
        desc.plan_id, desc.stage_id, desc.task_id, desc.attempt
    )
}

/// Runs one task (or one link of a chained task).
pub fn run_task(
    desc: &TaskDescriptor,
    svc: &TaskServices,
    ctx: &InvocationContext,
) -> Result<ExecutorReport, ExecError> {
    let ops = compile(&desc.pipeline, &svc.registry)?;
    let side = load_side_inputs(&desc.side_inputs, &svc.store)?;
    let side_bytes = side.tracked_bytes();
    ctx.track_bytes(side_bytes)?;
    if desc.continuation.is_some() && !matches!(desc.input, InputSpec::ObjectSplit { .. }) {
        return Err(ExecError::BadDescriptor(
            "continuation is only valid for object split input".into(),
        ));
    }

    let mut sink = match &desc.output {
        OutputSpec::ShuffleWrite {
            queues,
            partitioner_id,
            num_partitions,
        } => {
            if queues.len() != *num_partitions as usize {
                return Err(ExecError::BadDescriptor(format!(
                    "{} queues for {num_partitions} partitions",
                    queues.len()
                )));
            }
            let partitioner = svc
                .registry
                .partitioner(partitioner_id)
                .cloned()
                .ok_or_else(|| ExecError::UnknownFunction {
                    kind: "partitioner",
                    id: partitioner_id.clone(),
                })?;
            let writer = ShuffleWriter::new(
                &svc.queue,
                queues.clone(),
                WriterIdentity {
                    plan_id: desc.plan_id.clone(),
                    stage_id: desc.stage_id,
                    src_task_id: desc.task_id,
                    attempt: desc.attempt,
                },
                desc.settings.flush_threshold_bytes,
                desc.continuation.as_ref().map(|c| c.next_seq.clone()),
            )?;
            Sink::Shuffle {
                writer,
                partitioner,
            }
        }
        OutputSpec::Result { action } => match action {
            Action::Count => Sink::Count(0),
            Action::Collect => Sink::Collect {
                items: Vec::new(),
                tracked: 0,
            },
            Action::SaveAsText { .. } => Sink::Save {
                text: String::new(),
            },
        },
    };

    let deadline = ctx.deadline();
    let mut records_in = 0u64;
    let mut records_out = 0u64;
    let mut input_queue_calls = 0u64;
    let mut traced = desc.settings.trace_records.then(Vec::new);
    let mut chained: Option<u64> = None;

    let mut emit = |d: Datum, sink: &mut Sink| -> Result<(), ExecError> {
        records_out += 1;
        sink.push(d)?;
        ctx.track_bytes(side_bytes + sink.tracked_bytes())?;
        Ok(())
    };

    match &desc.input {
        InputSpec::ObjectSplit { range } => {
            let mut reader = match &desc.continuation {
                None => SplitReader::open(&svc.store, range)?,
                Some(c) => {
                    if c.bytes_consumed > range.length {
                        return Err(ExecError::BadDescriptor(format!(
                            "continuation at {} past split length {}",
                            c.bytes_consumed, range.length
                        )));
                    }
                    SplitReader::resume(&svc.store, range, c.bytes_consumed)?
                }
            };
            let stop_at = deadline.limit_ms() - desc.settings.safety_margin_ms;
            let mut in_link = 0u64;
            loop {
                if in_link > 0 && reader.has_more() && deadline.elapsed_ms() >= stop_at {
                    chained = Some(reader.position() - range.offset);
                    break;
                }
                let Some((offset, line)) = reader.next_record()? else {
                    break;
                };
                deadline.charge_record();
                records_in += 1;
                in_link += 1;
                if let Some(t) = traced.as_mut() {
                    t.push(offset);
                }
                apply(&ops, Datum::Str(line), &side, &mut |d| emit(d, &mut sink))?;
            }
        }
        InputSpec::QueuePartition {
            queue,
            expected,
            merge_fn_id,
        } => {
            let mut reader = ShuffleReader::new(&svc.queue, queue, expected);
            let mut timed = |r: Result<(Vec<u8>, Vec<u8>), ExecError>| {
                if deadline.expired() {
                    return Err(ExecError::TimedOut);
                }
                deadline.charge_record();
                records_in += 1;
                r
            };
            match merge_fn_id {
                Some(id) => {
                    let combine =
                        svc.registry
                            .combiner(id)
                            .ok_or_else(|| ExecError::UnknownFunction {
                                kind: "combine",
                                id: id.clone(),
                            })?;
                    let merged =
                        combine_in_memory(reader.by_ref().map(&mut timed), combine, |t| {
                            ctx.track_bytes(side_bytes + t).map_err(ExecError::from)
                        })?;
                    for (k, v) in merged {
                        apply(&ops, Datum::pair(k, v), &side, &mut |d| emit(d, &mut sink))?;
                    }
                }
                None => {
                    for r in reader.by_ref().map(&mut timed) {
                        let (kb, vb) = r?;
                        let d = Datum::pair(Datum::decode(&kb)?, Datum::decode(&vb)?);
                        apply(&ops, d, &side, &mut |d| emit(d, &mut sink))?;
                    }
                }
            }
            input_queue_calls = reader.queue_calls();
        }
    }

    let mut report = ExecutorReport {
        v: WIRE_VERSION,
        status: TaskStatus::Done,
        messages_sent_per_partition: Vec::new(),
        queue_calls: input_queue_calls,
        records_in,
        records_out,
        flushes: 0,
        peak_tracked_bytes: 0,
        materialized_result: None,
        traced_offsets: traced,
    };
    let mut next_seq = Vec::new();
    match sink {
        Sink::Shuffle { mut writer, .. } => {
            writer.flush()?;
            report.messages_sent_per_partition = writer.sent_per_partition().to_vec();
            report.queue_calls += writer.queue_calls();
            report.flushes = writer.flushes();
            next_seq = writer.next_seq().to_vec();
        }
        Sink::Count(n) => report.materialized_result = Some(Datum::Int(n).encode()),
        Sink::Collect { items, .. } => {
            report.materialized_result = Some(Datum::List(items).encode())
        }
        Sink::Save { text } => {
            let OutputSpec::Result {
                action: Action::SaveAsText { bucket, prefix },
            } = &desc.output
            else {
                unreachable!("save sink only built for save_as_text");
            };
            finish_save(desc, svc, &text, bucket, prefix, chained.is_some())?;
        }
    }
    report.peak_tracked_bytes = ctx.peak_tracked_bytes();
    if let Some(bytes_consumed) = chained {
        report.status = TaskStatus::Chained {
            continuation: Continuation {
                bytes_consumed,
                next_seq,
                link: desc.link() + 1,
            },
        };
    }
    Ok(report)
}

/// Intermediate links stage their text in scratch; the final link
/// concatenates the staged pieces with its own and writes the one output
/// object, so output appears exactly once per task.
fn finish_save(
    desc: &TaskDescriptor,
    svc: &TaskServices,
    text: &str,
    bucket: &str,
    prefix: &str,
    chained: bool,
) -> Result<(), ExecError> {
    let scratch = &desc.settings.scratch_bucket;
    let staging = staging_prefix(desc);
    if chained {
        let key = format!("{staging}link-{:05}", desc.link());
        svc.store
            .put_object(&ObjectRef::new(scratch.clone(), key)?, text.as_bytes())?;
        return Ok(());
    }
    let staged = if desc.link() > 0 {
        svc.store.list_prefix(scratch, &staging)?
    } else {
        Vec::new()
    };
    let mut body = Vec::new();
    for (key, _) in &staged {
        body.extend(
            svc.store
                .get_object(&ObjectRef::new(scratch.clone(), key.clone())?)?,
        );
    }
    body.extend_from_slice(text.as_bytes());
    svc.store.put_object(
        &ObjectRef::new(bucket, save_key(prefix, desc.task_id))?,
        &body,
    )?;
    for (key, _) in staged {
        svc.store
            .delete_object(&ObjectRef::new(scratch.clone(), key)?)?;
    }
    Ok(())
}
