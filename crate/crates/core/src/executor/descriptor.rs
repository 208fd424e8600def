//! Task descriptor and executor report wire formats (version 1).
//!
//! Both travel as canonical JSON. A descriptor whose encoding exceeds the
//! runtime's payload limit is parked in the object store and replaced by an
//! [`OverflowStub`] naming the object.

use serde::{Deserialize, Serialize};

use crate::plan::{Action, NarrowOp};
use crate::store::{ObjectRange, ObjectRef};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedBatches {
    pub src_task_id: u32,
    /// Only batches from this attempt of the source task are accepted.
    pub attempt: u32,
    pub batches: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    ObjectSplit {
        range: ObjectRange,
    },
    QueuePartition {
        queue: String,
        expected: Vec<ExpectedBatches>,
        merge_fn_id: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputSpec {
    ShuffleWrite {
        queues: Vec<String>,
        partitioner_id: String,
        num_partitions: u32,
    },
    Result {
        action: Action,
    },
}

/// Resume state for the next link of a chained task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Continuation {
    /// Offset, relative to the split start, of the first unprocessed record.
    pub bytes_consumed: u64,
    /// Next batch sequence number for each destination partition.
    pub next_seq: Vec<u32>,
    /// Index of the link this continuation starts.
    pub link: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SideInputSource {
    Object { object: ObjectRef },
    Inline { csv: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideInputSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: SideInputSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorSettings {
    pub flush_threshold_bytes: u64,
    /// Stop ingesting once this close to the deadline (simulated ms).
    pub safety_margin_ms: f64,
    /// Report the byte offset of every input record processed.
    #[serde(default)]
    pub trace_records: bool,
    /// Bucket for staged partial outputs of chained tasks.
    pub scratch_bucket: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub v: u32,
    pub plan_id: String,
    pub stage_id: u32,
    pub task_id: u32,
    pub attempt: u32,
    pub pipeline: Vec<NarrowOp>,
    pub input: InputSpec,
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<Continuation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub side_inputs: Vec<SideInputSpec>,
    pub settings: ExecutorSettings,
}

impl TaskDescriptor {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("descriptor serializes")
    }

    pub fn link(&self) -> u32 {
        self.continuation.as_ref().map_or(0, |c| c.link)
    }
}

/// Stand-in request for a descriptor stored out of band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverflowStub {
    pub v: u32,
    pub payload_overflow_ref: ObjectRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRequest {
    Overflow(OverflowStub),
    Inline(Box<TaskDescriptor>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TaskStatus {
    Done,
    Chained { continuation: Continuation },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorReport {
    pub v: u32,
    pub status: TaskStatus,
    /// Batches sent to each destination partition by this link.
    pub messages_sent_per_partition: Vec<u64>,
    pub queue_calls: u64,
    pub records_in: u64,
    pub records_out: u64,
    pub flushes: u64,
    pub peak_tracked_bytes: u64,
    #[serde(default, with = "opt_base64", skip_serializing_if = "Option::is_none")]
    pub materialized_result: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traced_offsets: Option<Vec<u64>>,
}

impl ExecutorReport {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("report serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

mod opt_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => s.serialize_str(&STANDARD.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| STANDARD.decode(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}
