//! Simulated message-queue service used as the shuffle transport.
//!
//! Delivery is at-least-once: each sent batch is enqueued once, plus one extra
//! copy with probability `duplicate_probability` drawn from a seeded RNG. The
//! extra copy lands at a random position, so receive order carries no
//! guarantee. A receive hides the returned batches rather than deleting
//! them: they stay in flight until the queue is deleted, or until
//! [`QueueService::release_in_flight`] makes them visible again (the
//! counterpart of a visibility timeout expiring after a consumer died).
//!
//! Batch payloads use a fixed little-endian layout:
//!
//! ```text
//! u32 count
//! repeat count times: u32 key_len, key bytes, u32 value_len, value bytes
//! ```

use std::collections::{HashMap, HashSet, VecDeque};

use bytes::Bytes;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QueueError {
    #[error("queue {0} already exists")]
    QueueExists(String),
    #[error("no such queue: {0}")]
    NoSuchQueue(String),
    #[error("message {header} has {size} payload bytes, limit is {limit}")]
    MessageTooLarge {
        header: BatchHeader,
        size: usize,
        limit: usize,
    },
    #[error("invalid queue config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PayloadError {
    #[error("payload truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last record")]
    Trailing(usize),
}

/// Identity of one logical shuffle batch within a plan run.
///
/// `seq` counts from 0 per `(src_task_id, attempt, dest_partition)`. The
/// attempt number separates retried task executions so that batches from a
/// failed attempt can be told apart from the accepted one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BatchHeader {
    pub plan_id: String,
    pub stage_id: u32,
    pub src_task_id: u32,
    pub attempt: u32,
    pub dest_partition: u32,
    pub seq: u32,
}

impl std::fmt::Display for BatchHeader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/s{}/t{}.a{}->p{}#{}",
            self.plan_id,
            self.stage_id,
            self.src_task_id,
            self.attempt,
            self.dest_partition,
            self.seq
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageBatch {
    pub header: BatchHeader,
    pub payload: Bytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    pub max_message_bytes: usize,
    pub max_batch_entries: usize,
    pub duplicate_probability: f64,
    pub rng_seed: u64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            max_message_bytes: 262_144,
            max_batch_entries: 10,
            duplicate_probability: 0.0,
            rng_seed: 0,
        }
    }
}

impl QueueConfig {
    pub fn validate(&self) -> Result<(), QueueError> {
        if !(0.0..=1.0).contains(&self.duplicate_probability) {
            return Err(QueueError::InvalidConfig(format!(
                "duplicate_probability {} outside [0, 1]",
                self.duplicate_probability
            )));
        }
        if self.max_message_bytes == 0 || self.max_batch_entries == 0 {
            return Err(QueueError::InvalidConfig("caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Counters over the life of the service.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub send_calls: u64,
    pub receive_calls: u64,
    pub batches_sent: u64,
    pub duplicates_injected: u64,
    pub batches_received: u64,
}

#[derive(Default)]
struct Queue {
    visible: VecDeque<MessageBatch>,
    in_flight: Vec<MessageBatch>,
}

struct Inner {
    queues: HashMap<String, Queue>,
    rng: ChaCha8Rng,
    stats: QueueStats,
    sent_headers: HashSet<BatchHeader>,
    received_headers: HashSet<BatchHeader>,
}

/// Thread-safe queue service handle.
pub struct QueueService {
    config: QueueConfig,
    inner: Mutex<Inner>,
}

impl QueueService {
    pub fn new(config: QueueConfig) -> Result<Self, QueueError> {
        config.validate()?;
        Ok(QueueService {
            inner: Mutex::new(Inner {
                queues: HashMap::new(),
                rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
                stats: QueueStats::default(),
                sent_headers: HashSet::new(),
                received_headers: HashSet::new(),
            }),
            config,
        })
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    pub fn create_queue(&self, name: &str) -> Result<(), QueueError> {
        let mut inner = self.inner.lock();
        if inner.queues.contains_key(name) {
            return Err(QueueError::QueueExists(name.to_string()));
        }
        inner.queues.insert(name.to_string(), Queue::default());
        Ok(())
    }

    /// Removes the queue and discards anything still in it.
    pub fn delete_queue(&self, name: &str) -> Result<(), QueueError> {
        self.inner
            .lock()
            .queues
            .remove(name)
            .map(|_| ())
            .ok_or_else(|| QueueError::NoSuchQueue(name.to_string()))
    }

    pub fn list_queues(&self) -> Vec<String> {
        let mut names: Vec<_> = self.inner.lock().queues.keys().cloned().collect();
        names.sort();
        names
    }

    /// Messages currently visible in `name`.
    pub fn depth(&self, name: &str) -> Result<usize, QueueError> {
        self.inner
            .lock()
            .queues
            .get(name)
            .map(|q| q.visible.len())
            .ok_or_else(|| QueueError::NoSuchQueue(name.to_string()))
    }

    /// Makes every received-but-not-deleted batch of `name` visible again.
    /// Returns how many were released.
    pub fn release_in_flight(&self, name: &str) -> Result<usize, QueueError> {
        let mut inner = self.inner.lock();
        let q = inner
            .queues
            .get_mut(name)
            .ok_or_else(|| QueueError::NoSuchQueue(name.to_string()))?;
        let n = q.in_flight.len();
        let released = std::mem::take(&mut q.in_flight);
        q.visible.extend(released);
        Ok(n)
    }

    /// Enqueues `batches`, returning the number of service calls this costs,
    /// `ceil(len / max_batch_entries)`.
    pub fn send_batch(&self, name: &str, batches: Vec<MessageBatch>) -> Result<u64, QueueError> {
        if let Some(big) = batches
            .iter()
            .find(|b| b.payload.len() > self.config.max_message_bytes)
        {
            return Err(QueueError::MessageTooLarge {
                header: big.header.clone(),
                size: big.payload.len(),
                limit: self.config.max_message_bytes,
            });
        }
        let calls = batches.len().div_ceil(self.config.max_batch_entries) as u64;
        let mut guard = self.inner.lock();
        let inner = &mut *guard;
        let queue = inner
            .queues
            .get_mut(name)
            .ok_or_else(|| QueueError::NoSuchQueue(name.to_string()))?;
        let p = self.config.duplicate_probability;
        for batch in batches {
            inner.sent_headers.insert(batch.header.clone());
            inner.stats.batches_sent += 1;
            let duplicate = p > 0.0 && inner.rng.gen::<f64>() < p;
            if duplicate {
                let at = inner.rng.gen_range(0..=queue.visible.len());
                queue.visible.insert(at, batch.clone());
                inner.stats.duplicates_injected += 1;
            }
            queue.visible.push_back(batch);
        }
        inner.stats.send_calls += calls;
        Ok(calls)
    }

    /// Returns up to `max_batches` visible messages and hides them; empty
    /// when nothing is visible.
    pub fn receive(&self, name: &str, max_batches: usize) -> Result<Vec<MessageBatch>, QueueError> {
        let mut guard = self.inner.lock();
        let inner = &mut *guard;
        let queue = inner
            .queues
            .get_mut(name)
            .ok_or_else(|| QueueError::NoSuchQueue(name.to_string()))?;
        let n = max_batches.min(queue.visible.len());
        let out: Vec<MessageBatch> = queue.visible.drain(..n).collect();
        queue.in_flight.extend(out.iter().cloned());
        inner.stats.receive_calls += 1;
        inner.stats.batches_received += out.len() as u64;
        for b in &out {
            inner.received_headers.insert(b.header.clone());
        }
        Ok(out)
    }

    pub fn stats(&self) -> QueueStats {
        self.inner.lock().stats.clone()
    }

    /// Distinct headers ever sent and ever received, for delivery audits.
    pub fn header_audit(&self) -> (HashSet<BatchHeader>, HashSet<BatchHeader>) {
        let inner = self.inner.lock();
        (inner.sent_headers.clone(), inner.received_headers.clone())
    }
}

pub fn encode_payload<K: AsRef<[u8]>, V: AsRef<[u8]>>(records: &[(K, V)]) -> Vec<u8> {
    let body: usize = records
        .iter()
        .map(|(k, v)| 8 + k.as_ref().len() + v.as_ref().len())
        .sum();
    let mut out = Vec::with_capacity(4 + body);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (k, v) in records {
        let (k, v) = (k.as_ref(), v.as_ref());
        out.extend_from_slice(&(k.len() as u32).to_le_bytes());
        out.extend_from_slice(k);
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        out.extend_from_slice(v);
    }
    out
}

/// Encoded size of one record inside a payload.
pub fn encoded_record_len(key_len: usize, value_len: usize) -> usize {
    8 + key_len + value_len
}

pub const PAYLOAD_HEADER_LEN: usize = 4;

/// One encoded shuffle record: key bytes and value bytes.
pub type KvBytes = (Vec<u8>, Vec<u8>);

pub fn decode_payload(bytes: &[u8]) -> Result<Vec<KvBytes>, PayloadError> {
    let mut pos = 0usize;
    let take = |n: usize, pos: &mut usize| -> Result<&[u8], PayloadError> {
        let s = bytes
            .get(*pos..pos.saturating_add(n))
            .ok_or(PayloadError::Truncated(*pos))?;
        *pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4, &mut pos)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(bytes.len() / 8));
    for _ in 0..count {
        let klen = u32::from_le_bytes(take(4, &mut pos)?.try_into().unwrap()) as usize;
        let k = take(klen, &mut pos)?.to_vec();
        let vlen = u32::from_le_bytes(take(4, &mut pos)?.try_into().unwrap()) as usize;
        let v = take(vlen, &mut pos)?.to_vec();
        out.push((k, v));
    }
    if pos != bytes.len() {
        return Err(PayloadError::Trailing(bytes.len() - pos));
    }
    Ok(out)
}
