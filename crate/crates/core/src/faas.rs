//! Simulated function-as-a-service runtime.
//!
//! Invocations run on their own threads, gated by a pool of `max_concurrency`
//! slots. A slot remembers which functions it has already run: the first run
//! of a function on a slot pays `cold_start_ms`, later runs pay
//! `warm_start_ms`. Slots never expire.
//!
//! All reported times are *simulated* milliseconds. Under [`ClockMode::Wall`]
//! a simulated millisecond lasts `time_scale` real milliseconds, so a scale of
//! `2.0 / 300.0` squeezes the 300 s cap into 2 s of wall time. Under
//! [`ClockMode::Virtual`] time only advances when the task charges work to
//! its [`Deadline`], which makes chaining and billing fully deterministic.
//!
//! Limits are enforced cooperatively: a task is handed a deadline and a
//! memory budget and is expected to act on them. As a backstop, a completed
//! invocation whose duration exceeds 1.1x the time limit, or whose reported
//! peak tracked bytes exceed the memory limit, is recorded as failed.

use std::cell::Cell;
use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::cost;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockMode {
    Wall,
    /// Each charged record costs `ms_per_record` simulated milliseconds.
    Virtual {
        ms_per_record: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeLimits {
    pub memory_limit_mb: u32,
    pub time_limit_ms: u64,
    pub payload_limit_bytes: usize,
    pub max_concurrency: usize,
    /// Placeholder latency, not a measured value.
    pub cold_start_ms: u64,
    /// Placeholder latency, not a measured value.
    pub warm_start_ms: u64,
    pub time_scale: f64,
    pub clock: ClockMode,
    pub billing_increment_ms: u64,
}

impl Default for RuntimeLimits {
    fn default() -> Self {
        RuntimeLimits {
            memory_limit_mb: 3008,
            time_limit_ms: 300_000,
            payload_limit_bytes: 6_291_456,
            max_concurrency: 80,
            cold_start_ms: 400,
            warm_start_ms: 10,
            time_scale: 1.0,
            clock: ClockMode::Wall,
            billing_increment_ms: 100,
        }
    }
}

impl RuntimeLimits {
    pub fn validate(&self) -> Result<(), FaasError> {
        let bad = |m: &str| Err(FaasError::InvalidLimits(m.to_string()));
        if self.memory_limit_mb == 0
            || self.time_limit_ms == 0
            || self.payload_limit_bytes == 0
            || self.max_concurrency == 0
            || self.billing_increment_ms == 0
        {
            return bad("limits must be positive");
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return bad("time_scale must be positive and finite");
        }
        if self.warm_start_ms > self.cold_start_ms {
            return bad("warm_start_ms must not exceed cold_start_ms");
        }
        if let ClockMode::Virtual { ms_per_record } = self.clock {
            if !(ms_per_record >= 0.0 && ms_per_record.is_finite()) {
                return bad("ms_per_record must be non-negative");
            }
        }
        Ok(())
    }

    pub fn memory_limit_bytes(&self) -> u64 {
        self.memory_limit_mb as u64 * 1024 * 1024
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FaasError {
    #[error("request payload of {size} bytes exceeds the {limit}-byte limit")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("no function registered as {0}")]
    UnknownFunction(String),
    #[error("invalid runtime limits: {0}")]
    InvalidLimits(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureReason {
    #[error("timed out")]
    TimedOut,
    #[error("out of memory: tracked {tracked_bytes} bytes, limit {limit_bytes}")]
    OutOfMemory {
        tracked_bytes: u64,
        limit_bytes: u64,
    },
    #[error("injected crash")]
    InjectedCrash,
    #[error("{message}")]
    Error { message: String },
}

impl FailureReason {
    pub fn error(message: impl Into<String>) -> Self {
        FailureReason::Error {
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed {
        #[serde(skip)]
        response: Vec<u8>,
        response_bytes: usize,
    },
    Failed {
        reason: FailureReason,
    },
}

/// One line of the invocation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub invocation_id: u64,
    pub function_id: String,
    pub start_ms: f64,
    pub end_ms: f64,
    pub duration_ms: f64,
    pub billed_duration_ms: u64,
    pub memory_mb: u32,
    pub was_cold: bool,
    pub peak_tracked_bytes: u64,
    /// Global event sequence numbers; totally ordered across invocations.
    pub start_seq: u64,
    pub end_seq: u64,
    pub outcome: Outcome,
}

impl InvocationRecord {
    pub fn response(&self) -> Option<&[u8]> {
        match &self.outcome {
            Outcome::Completed { response, .. } => Some(response),
            Outcome::Failed { .. } => None,
        }
    }
}

enum DeadlineClock {
    Wall {
        start: Instant,
        time_scale: f64,
    },
    Virtual {
        elapsed_ms: Cell<f64>,
        ms_per_record: f64,
    },
}

/// Time budget handed to a running task.
pub struct Deadline {
    clock: DeadlineClock,
    limit_ms: f64,
}

impl Deadline {
    pub fn wall(limit_ms: f64, time_scale: f64) -> Self {
        Deadline {
            clock: DeadlineClock::Wall {
                start: Instant::now(),
                time_scale,
            },
            limit_ms,
        }
    }

    pub fn virtual_clock(limit_ms: f64, ms_per_record: f64) -> Self {
        Deadline {
            clock: DeadlineClock::Virtual {
                elapsed_ms: Cell::new(0.0),
                ms_per_record,
            },
            limit_ms,
        }
    }

    pub fn unbounded() -> Self {
        Deadline::wall(f64::INFINITY, 1.0)
    }

    /// Simulated milliseconds since the task started.
    pub fn elapsed_ms(&self) -> f64 {
        match &self.clock {
            DeadlineClock::Wall { start, time_scale } => {
                start.elapsed().as_secs_f64() * 1e3 / time_scale
            }
            DeadlineClock::Virtual { elapsed_ms, .. } => elapsed_ms.get(),
        }
    }

    pub fn limit_ms(&self) -> f64 {
        self.limit_ms
    }

    pub fn remaining_ms(&self) -> f64 {
        self.limit_ms - self.elapsed_ms()
    }

    pub fn expired(&self) -> bool {
        self.elapsed_ms() >= self.limit_ms
    }

    /// Accounts one unit of work; advances time only under a virtual clock.
    pub fn charge_record(&self) {
        if let DeadlineClock::Virtual {
            elapsed_ms,
            ms_per_record,
        } = &self.clock
        {
            elapsed_ms.set(elapsed_ms.get() + ms_per_record);
        }
    }
}

/// Per-invocation view handed to the function body.
pub struct InvocationContext {
    pub invocation_id: u64,
    pub was_cold: bool,
    deadline: Deadline,
    memory_limit_bytes: u64,
    peak_tracked: Cell<u64>,
}

impl InvocationContext {
    pub fn new(invocation_id: u64, deadline: Deadline, memory_limit_bytes: u64) -> Self {
        InvocationContext {
            invocation_id,
            was_cold: false,
            deadline,
            memory_limit_bytes,
            peak_tracked: Cell::new(0),
        }
    }

    /// Unlimited context for running a task body outside the runtime.
    pub fn unbounded() -> Self {
        InvocationContext::new(0, Deadline::unbounded(), u64::MAX)
    }

    pub fn deadline(&self) -> &Deadline {
        &self.deadline
    }

    pub fn memory_limit_bytes(&self) -> u64 {
        self.memory_limit_bytes
    }

    pub fn peak_tracked_bytes(&self) -> u64 {
        self.peak_tracked.get()
    }

    /// Reports the task's current buffer accounting.
    pub fn track_bytes(&self, tracked: u64) -> Result<(), FailureReason> {
        if tracked > self.peak_tracked.get() {
            self.peak_tracked.set(tracked);
        }
        if tracked > self.memory_limit_bytes {
            return Err(FailureReason::OutOfMemory {
                tracked_bytes: tracked,
                limit_bytes: self.memory_limit_bytes,
            });
        }
        Ok(())
    }
}

pub type Handler =
    Arc<dyn Fn(&InvocationContext, &[u8]) -> Result<Vec<u8>, FailureReason> + Send + Sync>;

/// Deterministic crash injection: an invocation whose id hashes below
/// `crash_probability` completes its body and then reports a crash, so its
/// side effects happen but its response is lost.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultInjection {
    pub crash_probability: f64,
    pub seed: u64,
}

impl FaultInjection {
    fn crashes(&self, invocation_id: u64) -> bool {
        if self.crash_probability <= 0.0 {
            return false;
        }
        let h = splitmix64(self.seed ^ invocation_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        ((h >> 11) as f64 / (1u64 << 53) as f64) < self.crash_probability
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub invocations: u64,
    pub cold_starts: u64,
    pub running: usize,
    pub peak_concurrency: usize,
}

struct Slot {
    busy: bool,
    warm: HashSet<String>,
}

#[derive(Default)]
struct SlotPool {
    slots: Vec<Slot>,
    waiting: VecDeque<u64>,
    running: usize,
    peak: usize,
}

pub struct InvocationHandle {
    pub invocation_id: u64,
    rx: mpsc::Receiver<InvocationRecord>,
}

impl InvocationHandle {
    /// Blocks until the invocation finishes.
    pub fn wait(self) -> InvocationRecord {
        self.rx.recv().expect("runtime thread always reports")
    }
}

/// Thread-safe runtime service.
pub struct FaasRuntime {
    limits: RuntimeLimits,
    faults: FaultInjection,
    functions: RwLock<HashMap<String, Handler>>,
    pool: Mutex<SlotPool>,
    pool_cv: Condvar,
    next_id: AtomicU64,
    next_seq: AtomicU64,
    epoch: Instant,
    log: Mutex<Vec<InvocationRecord>>,
    cold_starts: AtomicU64,
}

impl FaasRuntime {
    pub fn new(limits: RuntimeLimits) -> Result<Arc<Self>, FaasError> {
        Self::with_faults(limits, FaultInjection::default())
    }

    pub fn with_faults(
        limits: RuntimeLimits,
        faults: FaultInjection,
    ) -> Result<Arc<Self>, FaasError> {
        limits.validate()?;
        Ok(Arc::new(FaasRuntime {
            limits,
            faults,
            functions: RwLock::new(HashMap::new()),
            pool: Mutex::new(SlotPool::default()),
            pool_cv: Condvar::new(),
            next_id: AtomicU64::new(1),
            next_seq: AtomicU64::new(0),
            epoch: Instant::now(),
            log: Mutex::new(Vec::new()),
            cold_starts: AtomicU64::new(0),
        }))
    }

    pub fn limits(&self) -> &RuntimeLimits {
        &self.limits
    }

    pub fn register(&self, function_id: impl Into<String>, handler: Handler) {
        self.functions.write().insert(function_id.into(), handler);
    }

    pub fn invoke_async(
        self: &Arc<Self>,
        function_id: &str,
        payload: Vec<u8>,
    ) -> Result<InvocationHandle, FaasError> {
        let (tx, rx) = mpsc::channel();
        let invocation_id = self.invoke_with_callback(function_id, payload, move |rec| {
            let _ = tx.send(rec);
        })?;
        Ok(InvocationHandle { invocation_id, rx })
    }

    /// Starts an invocation and calls `on_done` from the invocation thread
    /// once its record is logged. Returns the invocation id.
    pub fn invoke_with_callback(
        self: &Arc<Self>,
        function_id: &str,
        payload: Vec<u8>,
        on_done: impl FnOnce(InvocationRecord) + Send + 'static,
    ) -> Result<u64, FaasError> {
        if payload.len() > self.limits.payload_limit_bytes {
            return Err(FaasError::PayloadTooLarge {
                size: payload.len(),
                limit: self.limits.payload_limit_bytes,
            });
        }
        let handler = self
            .functions
            .read()
            .get(function_id)
            .cloned()
            .ok_or_else(|| FaasError::UnknownFunction(function_id.to_string()))?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let this = Arc::clone(self);
        let function_id = function_id.to_string();
        {
            // enqueue before spawning so slots are granted in submission order
            self.pool.lock().waiting.push_back(id);
        }
        std::thread::Builder::new()
            .name(format!("faas-{id}"))
            .spawn(move || {
                let record = this.run_invocation(id, &function_id, &handler, &payload);
                this.log.lock().push(record.clone());
                on_done(record);
            })
            .expect("spawn invocation thread");
        Ok(id)
    }

    fn acquire_slot(&self, id: u64, function_id: &str) -> (usize, bool) {
        let mut pool = self.pool.lock();
        loop {
            if pool.waiting.front() == Some(&id) {
                let free = pool
                    .slots
                    .iter()
                    .position(|s| !s.busy && s.warm.contains(function_id))
                    .or_else(|| pool.slots.iter().position(|s| !s.busy));
                let slot = match free {
                    Some(i) => Some(i),
                    None if pool.slots.len() < self.limits.max_concurrency => {
                        pool.slots.push(Slot {
                            busy: false,
                            warm: HashSet::new(),
                        });
                        Some(pool.slots.len() - 1)
                    }
                    None => None,
                };
                if let Some(i) = slot {
                    pool.waiting.pop_front();
                    let s = &mut pool.slots[i];
                    s.busy = true;
                    let cold = s.warm.insert(function_id.to_string());
                    pool.running += 1;
                    pool.peak = pool.peak.max(pool.running);
                    self.pool_cv.notify_all();
                    return (i, cold);
                }
            }
            self.pool_cv.wait(&mut pool);
        }
    }

    fn release_slot(&self, slot: usize) {
        let mut pool = self.pool.lock();
        pool.slots[slot].busy = false;
        pool.running -= 1;
        self.pool_cv.notify_all();
    }

    fn sim_now_ms(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1e3 / self.limits.time_scale
    }

    fn run_invocation(
        &self,
        id: u64,
        function_id: &str,
        handler: &Handler,
        payload: &[u8],
    ) -> InvocationRecord {
        let (slot, was_cold) = self.acquire_slot(id, function_id);
        if was_cold {
            self.cold_starts.fetch_add(1, Ordering::Relaxed);
        }
        let start_seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        let start_ms = self.sim_now_ms();
        let startup_ms = if was_cold {
            self.limits.cold_start_ms
        } else {
            self.limits.warm_start_ms
        } as f64;
        let limit = self.limits.time_limit_ms as f64;

        let deadline = match self.limits.clock {
            ClockMode::Wall => {
                if startup_ms > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(
                        startup_ms * self.limits.time_scale / 1e3,
                    ));
                }
                Deadline::wall(limit, self.limits.time_scale)
            }
            ClockMode::Virtual { ms_per_record } => Deadline::virtual_clock(limit, ms_per_record),
        };
        let mut ctx = InvocationContext::new(id, deadline, self.limits.memory_limit_bytes());
        ctx.was_cold = was_cold;

        let result = catch_unwind(AssertUnwindSafe(|| handler(&ctx, payload)))
            .unwrap_or_else(|_| Err(FailureReason::error("function panicked")));

        let duration_ms = startup_ms + ctx.deadline.elapsed_ms();
        let end_ms = match self.limits.clock {
            ClockMode::Wall => self.sim_now_ms(),
            ClockMode::Virtual { .. } => start_ms + duration_ms,
        };
        let peak = ctx.peak_tracked_bytes();
        let outcome = match result {
            _ if duration_ms > limit * 1.1 => Outcome::Failed {
                reason: FailureReason::TimedOut,
            },
            Ok(_) if peak > ctx.memory_limit_bytes() => Outcome::Failed {
                reason: FailureReason::OutOfMemory {
                    tracked_bytes: peak,
                    limit_bytes: ctx.memory_limit_bytes(),
                },
            },
            Ok(_) if self.faults.crashes(id) => Outcome::Failed {
                reason: FailureReason::InjectedCrash,
            },
            Ok(response) => Outcome::Completed {
                response_bytes: response.len(),
                response,
            },
            Err(reason) => Outcome::Failed { reason },
        };
        let end_seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        self.release_slot(slot);
        InvocationRecord {
            invocation_id: id,
            function_id: function_id.to_string(),
            start_ms,
            end_ms,
            duration_ms,
            billed_duration_ms: cost::billed_duration_ms(
                duration_ms,
                self.limits.billing_increment_ms,
            ),
            memory_mb: self.limits.memory_limit_mb,
            was_cold,
            peak_tracked_bytes: peak,
            start_seq,
            end_seq,
            outcome,
        }
    }

    pub fn stats(&self) -> RuntimeStats {
        let pool = self.pool.lock();
        RuntimeStats {
            invocations: self.next_id.load(Ordering::Relaxed) - 1,
            cold_starts: self.cold_starts.load(Ordering::Relaxed),
            running: pool.running,
            peak_concurrency: pool.peak,
        }
    }

    pub fn invocation_log(&self) -> Vec<InvocationRecord> {
        self.log.lock().clone()
    }

    /// Writes the invocation log as JSON lines.
    pub fn write_log_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for rec in self.log.lock().iter() {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits() -> RuntimeLimits {
        RuntimeLimits {
            cold_start_ms: 0,
            warm_start_ms: 0,
            ..RuntimeLimits::default()
        }
    }

    fn echo() -> Handler {
        Arc::new(|_, p| Ok(p.to_vec()))
    }

    #[test]
    fn oversized_payload_rejected_before_execution() {
        let rt = FaasRuntime::new(limits()).unwrap();
        rt.register("f", echo());
        let err = rt.invoke_async("f", vec![0; 6_291_457]).err().unwrap();
        assert_eq!(
            err,
            FaasError::PayloadTooLarge {
                size: 6_291_457,
                limit: 6_291_456
            }
        );
        assert_eq!(rt.stats().invocations, 0);
        assert!(rt
            .invoke_async("f", vec![0; 6_291_456])
            .unwrap()
            .wait()
            .response()
            .is_some());
    }

    #[test]
    fn cold_then_warm() {
        let rt = FaasRuntime::new(limits()).unwrap();
        rt.register("f", echo());
        let a = rt.invoke_async("f", b"1".to_vec()).unwrap().wait();
        let b = rt.invoke_async("f", b"2".to_vec()).unwrap().wait();
        assert!(a.was_cold);
        assert!(!b.was_cold);
        assert_eq!(b.response(), Some(&b"2"[..]));
        // a different function on the same slot is cold again
        rt.register("g", echo());
        assert!(rt.invoke_async("g", vec![]).unwrap().wait().was_cold);
    }

    #[test]
    fn slot_gating() {
        let rt = FaasRuntime::new(RuntimeLimits {
            max_concurrency: 2,
            ..limits()
        })
        .unwrap();
        rt.register(
            "sleep",
            Arc::new(|_, _| {
                std::thread::sleep(Duration::from_millis(60));
                Ok(vec![])
            }),
        );
        let hs: Vec<_> = (0..3)
            .map(|_| rt.invoke_async("sleep", vec![]).unwrap())
            .collect();
        let recs: Vec<_> = hs.into_iter().map(InvocationHandle::wait).collect();
        let first_end = recs[0].end_seq.min(recs[1].end_seq);
        assert!(recs[2].start_seq > first_end);
        assert!(recs[2].start_ms >= recs[0].end_ms.min(recs[1].end_ms));
        assert_eq!(rt.stats().peak_concurrency, 2);
    }

    #[test]
    fn deadline_overrun_fails() {
        let rt = FaasRuntime::new(RuntimeLimits {
            clock: ClockMode::Virtual {
                ms_per_record: 10.0,
            },
            time_limit_ms: 100,
            ..limits()
        })
        .unwrap();
        rt.register(
            "spin",
            Arc::new(|ctx, _| {
                for _ in 0..20 {
                    ctx.deadline().charge_record();
                }
                Ok(vec![])
            }),
        );
        let rec = rt.invoke_async("spin", vec![]).unwrap().wait();
        assert_eq!(
            rec.outcome,
            Outcome::Failed {
                reason: FailureReason::TimedOut
            }
        );
        assert_eq!(rec.duration_ms, 200.0);
        assert_eq!(rec.billed_duration_ms, 200);
    }

    #[test]
    fn memory_overrun_fails() {
        let rt = FaasRuntime::new(RuntimeLimits {
            memory_limit_mb: 1,
            ..limits()
        })
        .unwrap();
        rt.register(
            "hog",
            Arc::new(|ctx, _| {
                // ignore the error: enforcement must still catch it
                let _ = ctx.track_bytes(2 << 20);
                Ok(vec![])
            }),
        );
        let rec = rt.invoke_async("hog", vec![]).unwrap().wait();
        assert!(matches!(
            rec.outcome,
            Outcome::Failed { reason: FailureReason::OutOfMemory { tracked_bytes, limit_bytes: 1048576 } } if tracked_bytes == 2 << 20
        ));
    }

    #[test]
    fn panics_become_failures() {
        let rt = FaasRuntime::new(limits()).unwrap();
        rt.register("boom", Arc::new(|_, _| panic!("boom")));
        let rec = rt.invoke_async("boom", vec![]).unwrap().wait();
        assert!(matches!(rec.outcome, Outcome::Failed { .. }));
        assert!(rt.invoke_async("nope", vec![]).is_err());
    }

    #[test]
    fn cold_start_is_billed_in_virtual_mode() {
        let rt = FaasRuntime::new(RuntimeLimits {
            clock: ClockMode::Virtual { ms_per_record: 1.0 },
            cold_start_ms: 250,
            warm_start_ms: 5,
            ..RuntimeLimits::default()
        })
        .unwrap();
        rt.register("f", echo());
        let a = rt.invoke_async("f", vec![]).unwrap().wait();
        let b = rt.invoke_async("f", vec![]).unwrap().wait();
        assert_eq!((a.duration_ms, a.billed_duration_ms), (250.0, 300));
        assert_eq!((b.duration_ms, b.billed_duration_ms), (5.0, 100));
        assert!(a.billed_duration_ms as f64 >= a.end_ms - a.start_ms);
    }

    #[test]
    fn peak_concurrency_bounded_under_stress() {
        let rt = FaasRuntime::new(RuntimeLimits {
            max_concurrency: 8,
            ..limits()
        })
        .unwrap();
        rt.register(
            "work",
            Arc::new(|_, _| {
                std::thread::sleep(Duration::from_millis(2));
                Ok(vec![])
            }),
        );
        let hs: Vec<_> = (0..64)
            .map(|_| rt.invoke_async("work", vec![]).unwrap())
            .collect();
        for h in hs {
            h.wait();
        }
        let stats = rt.stats();
        assert!(stats.peak_concurrency <= 8);
        assert_eq!(stats.invocations, 64);
        assert_eq!(stats.running, 0);
        assert!(stats.cold_starts <= 8);
    }

    #[test]
    fn injected_crashes_are_deterministic() {
        let f = FaultInjection {
            crash_probability: 0.3,
            seed: 9,
        };
        let hits: Vec<bool> = (0..200).map(|i| f.crashes(i)).collect();
        assert_eq!(hits, (0..200).map(|i| f.crashes(i)).collect::<Vec<_>>());
        let n = hits.iter().filter(|h| **h).count();
        assert!((30..90).contains(&n), "{n}");
        assert!(!FaultInjection::default().crashes(1));
    }

    #[test]
    fn log_is_jsonl() {
        let rt = FaasRuntime::new(limits()).unwrap();
        rt.register("f", echo());
        rt.invoke_async("f", b"abc".to_vec()).unwrap().wait();
        let mut buf = Vec::new();
        rt.write_log_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(line["outcome"]["status"], "completed");
        assert_eq!(line["outcome"]["response_bytes"], 3);
        assert_eq!(line["memory_mb"], 3008);
    }

    #[test]
    fn rejects_bad_limits() {
        for l in [
            RuntimeLimits {
                max_concurrency: 0,
                ..limits()
            },
            RuntimeLimits {
                time_scale: 0.0,
                ..limits()
            },
            RuntimeLimits {
                warm_start_ms: 5,
                cold_start_ms: 1,
                ..limits()
            },
        ] {
            assert!(FaasRuntime::new(l).is_err());
        }
    }
}
