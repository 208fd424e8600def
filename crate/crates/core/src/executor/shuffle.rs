//! Shuffle write (partition, buffer, flush as message batches) and shuffle
//! read (receive, deduplicate, merge).

use std::collections::{HashMap, HashSet, VecDeque};

use bytes::Bytes;

use super::descriptor::ExpectedBatches;
use super::ExecError;
use crate::functions::CombineFn;
use crate::queue::{
    decode_payload, encode_payload, encoded_record_len, BatchHeader, KvBytes, MessageBatch,
    QueueService, PAYLOAD_HEADER_LEN,
};
use crate::record::Datum;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Partition for `key`: 64-bit FNV-1a over the key bytes, passed through the
/// MurmurHash3 `fmix64` finalizer, modulo `num_partitions`.
///
/// Stable across processes, platforms and releases.
pub fn hash_partition(key: &[u8], num_partitions: u32) -> u32 {
    assert!(num_partitions >= 1, "num_partitions must be >= 1");
    let mut h = FNV_OFFSET;
    for b in key {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h % num_partitions as u64) as u32
}

/// Records grouped by destination partition, with a running size estimate.
#[derive(Debug)]
pub struct ShuffleBuffer {
    parts: Vec<Vec<(Vec<u8>, Vec<u8>)>>,
    tracked_bytes: u64,
    flush_threshold_bytes: u64,
}

impl ShuffleBuffer {
    pub fn new(num_partitions: u32, flush_threshold_bytes: u64) -> Self {
        ShuffleBuffer {
            parts: vec![Vec::new(); num_partitions as usize],
            tracked_bytes: 0,
            flush_threshold_bytes,
        }
    }

    pub fn push(&mut self, partition: u32, key: Vec<u8>, value: Vec<u8>) {
        self.tracked_bytes += encoded_record_len(key.len(), value.len()) as u64;
        self.parts[partition as usize].push((key, value));
    }

    pub fn tracked_bytes(&self) -> u64 {
        self.tracked_bytes
    }

    pub fn needs_flush(&self) -> bool {
        self.tracked_bytes > self.flush_threshold_bytes
    }

    pub fn is_empty(&self) -> bool {
        self.tracked_bytes == 0
    }

    /// Takes every buffered record, leaving the buffer empty.
    pub fn drain(&mut self) -> Vec<Vec<(Vec<u8>, Vec<u8>)>> {
        self.tracked_bytes = 0;
        let n = self.parts.len();
        std::mem::replace(&mut self.parts, vec![Vec::new(); n])
    }
}

/// Packs records, in order, into payloads of at most `max_payload` bytes.
pub fn pack_payloads(
    records: &[(Vec<u8>, Vec<u8>)],
    max_payload: usize,
) -> Result<Vec<Vec<u8>>, ExecError> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut size = PAYLOAD_HEADER_LEN;
    for (i, (k, v)) in records.iter().enumerate() {
        let rec = encoded_record_len(k.len(), v.len());
        if PAYLOAD_HEADER_LEN + rec > max_payload {
            return Err(ExecError::RecordTooLarge {
                size: rec,
                limit: max_payload - PAYLOAD_HEADER_LEN.min(max_payload),
            });
        }
        if size + rec > max_payload {
            out.push(encode_payload(&records[start..i]));
            start = i;
            size = PAYLOAD_HEADER_LEN;
        }
        size += rec;
    }
    if start < records.len() {
        out.push(encode_payload(&records[start..]));
    }
    Ok(out)
}

/// Identity stamped on every batch one task attempt sends.
#[derive(Debug, Clone)]
pub struct WriterIdentity {
    pub plan_id: String,
    pub stage_id: u32,
    pub src_task_id: u32,
    pub attempt: u32,
}

/// Shuffle output side of a task.
pub struct ShuffleWriter<'a> {
    queue: &'a QueueService,
    queues: Vec<String>,
    identity: WriterIdentity,
    buffer: ShuffleBuffer,
    next_seq: Vec<u32>,
    sent_per_partition: Vec<u64>,
    queue_calls: u64,
    flushes: u64,
}

impl<'a> ShuffleWriter<'a> {
    pub fn new(
        queue: &'a QueueService,
        queues: Vec<String>,
        identity: WriterIdentity,
        flush_threshold_bytes: u64,
        next_seq: Option<Vec<u32>>,
    ) -> Result<Self, ExecError> {
        let n = queues.len();
        let next_seq = next_seq.unwrap_or_else(|| vec![0; n]);
        if next_seq.len() != n || n == 0 {
            return Err(ExecError::BadDescriptor(format!(
                "{n} shuffle queues but {} sequence counters",
                next_seq.len()
            )));
        }
        Ok(ShuffleWriter {
            queue,
            buffer: ShuffleBuffer::new(n as u32, flush_threshold_bytes),
            queues,
            identity,
            next_seq,
            sent_per_partition: vec![0; n],
            queue_calls: 0,
            flushes: 0,
        })
    }

    pub fn num_partitions(&self) -> u32 {
        self.queues.len() as u32
    }

    /// Buffers one record; flushes when the buffer passes the threshold.
    pub fn push(&mut self, partition: u32, key: Vec<u8>, value: Vec<u8>) -> Result<(), ExecError> {
        self.buffer.push(partition, key, value);
        if self.buffer.needs_flush() {
            self.flush()?;
        }
        Ok(())
    }

    pub fn tracked_bytes(&self) -> u64 {
        self.buffer.tracked_bytes()
    }

    /// Sends everything buffered as message batches.
    pub fn flush(&mut self) -> Result<(), ExecError> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        self.flushes += 1;
        let max_payload = self.queue.config().max_message_bytes;
        for (p, records) in self.buffer.drain().into_iter().enumerate() {
            if records.is_empty() {
                continue;
            }
            let batches: Vec<MessageBatch> = pack_payloads(&records, max_payload)?
                .into_iter()
                .map(|payload| {
                    let seq = self.next_seq[p];
                    self.next_seq[p] += 1;
                    MessageBatch {
                        header: BatchHeader {
                            plan_id: self.identity.plan_id.clone(),
                            stage_id: self.identity.stage_id,
                            src_task_id: self.identity.src_task_id,
                            attempt: self.identity.attempt,
                            dest_partition: p as u32,
                            seq,
                        },
                        payload: Bytes::from(payload),
                    }
                })
                .collect();
            self.sent_per_partition[p] += batches.len() as u64;
            self.queue_calls += self.queue.send_batch(&self.queues[p], batches)?;
        }
        Ok(())
    }

    pub fn next_seq(&self) -> &[u32] {
        &self.next_seq
    }

    pub fn sent_per_partition(&self) -> &[u64] {
        &self.sent_per_partition
    }

    pub fn queue_calls(&self) -> u64 {
        self.queue_calls
    }

    pub fn flushes(&self) -> u64 {
        self.flushes
    }
}

/// Reads one shuffle partition, yielding each logical batch's records once.
///
/// Finishes when, for every expected source task, sequence numbers
/// `0..batches` have all been seen for the accepted attempt. Copies of a seen
/// batch and batches from other attempts are discarded.
pub struct ShuffleReader<'a> {
    queue: &'a QueueService,
    name: String,
    expected: HashMap<u32, (u32, u32)>,
    seen: HashMap<u32, HashSet<u32>>,
    remaining: u64,
    pending: VecDeque<(Vec<u8>, Vec<u8>)>,
    receive_max: usize,
    queue_calls: u64,
    discarded: u64,
    failed: bool,
}

impl<'a> ShuffleReader<'a> {
    pub fn new(queue: &'a QueueService, name: &str, expected: &[ExpectedBatches]) -> Self {
        ShuffleReader {
            queue,
            name: name.to_string(),
            expected: expected
                .iter()
                .map(|e| (e.src_task_id, (e.attempt, e.batches)))
                .collect(),
            seen: HashMap::new(),
            remaining: expected.iter().map(|e| e.batches as u64).sum(),
            pending: VecDeque::new(),
            receive_max: queue.config().max_batch_entries,
            queue_calls: 0,
            discarded: 0,
            failed: false,
        }
    }

    pub fn queue_calls(&self) -> u64 {
        self.queue_calls
    }

    /// Duplicate or stale batches dropped so far.
    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    fn missing(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for (src, (_, count)) in &self.expected {
            let seen = self.seen.get(src);
            for seq in 0..*count {
                if !seen.is_some_and(|s| s.contains(&seq)) {
                    out.push((*src, seq));
                }
            }
        }
        out.sort();
        out
    }

    fn accept(&mut self, batch: MessageBatch) -> Result<(), ExecError> {
        let h = &batch.header;
        let fresh = match self.expected.get(&h.src_task_id) {
            Some((attempt, count)) if *attempt == h.attempt && h.seq < *count => {
                self.seen.entry(h.src_task_id).or_default().insert(h.seq)
            }
            _ => false,
        };
        if !fresh {
            self.discarded += 1;
            return Ok(());
        }
        self.remaining -= 1;
        let records = decode_payload(&batch.payload).map_err(|e| ExecError::CorruptBatch {
            header: batch.header.to_string(),
            reason: e.to_string(),
        })?;
        self.pending.extend(records);
        Ok(())
    }

    fn step(&mut self) -> Result<Option<KvBytes>, ExecError> {
        loop {
            if let Some(r) = self.pending.pop_front() {
                return Ok(Some(r));
            }
            if self.remaining == 0 {
                return Ok(None);
            }
            let batches = self.queue.receive(&self.name, self.receive_max)?;
            self.queue_calls += 1;
            if batches.is_empty() {
                return Err(ExecError::MissingBatches {
                    queue: self.name.clone(),
                    missing: self.missing(),
                });
            }
            for b in batches {
                self.accept(b)?;
            }
        }
    }
}

impl Iterator for ShuffleReader<'_> {
    type Item = Result<(Vec<u8>, Vec<u8>), ExecError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let r = self.step().transpose();
        if matches!(r, Some(Err(_))) {
            self.failed = true;
        }
        r
    }
}

/// Folds values per key with `combine`; output is sorted by encoded key.
///
/// `track` receives the running size of the aggregation table after each
/// insert and may abort the fold (memory limit).
pub fn combine_in_memory<I>(
    records: I,
    combine: &CombineFn,
    mut track: impl FnMut(u64) -> Result<(), ExecError>,
) -> Result<Vec<(Datum, Datum)>, ExecError>
where
    I: IntoIterator<Item = Result<(Vec<u8>, Vec<u8>), ExecError>>,
{
    let mut table: HashMap<Vec<u8>, (Datum, Datum)> = HashMap::new();
    let mut tracked = 0u64;
    for r in records {
        let (kb, vb) = r?;
        let value = Datum::decode(&vb)?;
        match table.get_mut(&kb) {
            Some((_, acc)) => {
                let prev = std::mem::replace(acc, Datum::Int(0));
                *acc = combine(prev, value)?;
            }
            None => {
                let key = Datum::decode(&kb)?;
                tracked += (2 * kb.len() + vb.len() + 64) as u64;
                table.insert(kb, (key, value));
                track(tracked)?;
            }
        }
    }
    let mut entries: Vec<_> = table.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(entries.into_iter().map(|(_, kv)| kv).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::FunctionRegistry;
    use crate::queue::QueueConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kv(k: &str, v: i64) -> (Vec<u8>, Vec<u8>) {
        (Datum::str(k).encode(), Datum::Int(v).encode())
    }

    fn add() -> CombineFn {
        FunctionRegistry::with_builtins()
            .combiner("add")
            .unwrap()
            .clone()
    }

    fn identity(src: u32) -> WriterIdentity {
        WriterIdentity {
            plan_id: "p".into(),
            stage_id: 0,
            src_task_id: src,
            attempt: 0,
        }
    }

    #[test]
    fn hash_partition_basics() {
        for k in [&b""[..], b"a", b"hello world"] {
            assert_eq!(hash_partition(k, 1), 0);
            assert_eq!(hash_partition(k, 30), hash_partition(k, 30));
        }
        // values from an independent implementation of the documented hash
        assert_eq!(hash_partition(b"", 1000), HASH_EMPTY_MOD_1000);
        assert_eq!(hash_partition(b"a", 1000), HASH_A_MOD_1000);
    }
    const HASH_EMPTY_MOD_1000: u32 = 342;
    const HASH_A_MOD_1000: u32 = 315;

    #[test]
    fn hash_partition_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut buckets = [0u32; 30];
        for _ in 0..100_000 {
            let len = rng.gen_range(1..24);
            let key: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            buckets[hash_partition(&key, 30) as usize] += 1;
        }
        let max = *buckets.iter().max().unwrap() as f64;
        let min = *buckets.iter().min().unwrap() as f64;
        assert!(max / min < 1.3, "{buckets:?}");
    }

    #[test]
    fn combine_examples() {
        let got = combine_in_memory(
            vec![Ok(kv("a", 1)), Ok(kv("a", 2)), Ok(kv("b", 5))],
            &add(),
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(
            got,
            vec![
                (Datum::str("a"), Datum::Int(3)),
                (Datum::str("b"), Datum::Int(5))
            ]
        );
        assert!(combine_in_memory(Vec::new(), &add(), |_| Ok(()))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn combine_matches_reference_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pairs: Vec<(String, i64)> = (0..10_000)
            .map(|_| {
                (
                    format!("k{}", rng.gen_range(0..300)),
                    rng.gen_range(-50..50),
                )
            })
            .collect();
        let mut reference = std::collections::BTreeMap::new();
        for (k, v) in &pairs {
            *reference.entry(k.clone()).or_insert(0i64) += v;
        }
        let got = combine_in_memory(pairs.iter().map(|(k, v)| Ok(kv(k, *v))), &add(), |_| Ok(()))
            .unwrap();
        let got: std::collections::BTreeMap<String, i64> = got
            .into_iter()
            .map(|(k, v)| (k.as_str().unwrap().to_string(), v.as_int().unwrap()))
            .collect();
        assert_eq!(got, reference);
    }

    #[test]
    fn combine_respects_memory_callback() {
        let r = combine_in_memory((0..100).map(|i| Ok(kv(&format!("k{i}"), 1))), &add(), |t| {
            if t > 500 {
                Err(ExecError::BadDescriptor("full".into()))
            } else {
                Ok(())
            }
        });
        assert!(r.is_err());
    }

    #[test]
    fn packing_respects_cap() {
        let recs: Vec<_> = (0..50).map(|i| kv(&format!("key{i}"), i)).collect();
        let rec_len = encoded_record_len(recs[0].0.len(), recs[0].1.len());
        let payloads = pack_payloads(&recs, PAYLOAD_HEADER_LEN + 3 * rec_len).unwrap();
        assert!(payloads.len() >= 17);
        let mut all = Vec::new();
        for p in &payloads {
            assert!(p.len() <= PAYLOAD_HEADER_LEN + 3 * rec_len + 1);
            all.extend(decode_payload(p).unwrap());
        }
        assert_eq!(all, recs);
        assert!(matches!(
            pack_payloads(&recs, 8),
            Err(ExecError::RecordTooLarge { .. })
        ));
    }

    fn setup(p: f64, n: u32) -> (QueueService, Vec<String>) {
        let q = QueueService::new(QueueConfig {
            duplicate_probability: p,
            rng_seed: 5,
            max_message_bytes: 64,
            ..QueueConfig::default()
        })
        .unwrap();
        let names: Vec<_> = (0..n).map(|i| format!("q{i}")).collect();
        for name in &names {
            q.create_queue(name).unwrap();
        }
        (q, names)
    }

    #[test]
    fn single_partition_writes_seq_zero() {
        let (q, names) = setup(0.0, 1);
        let mut w = ShuffleWriter::new(&q, names.clone(), identity(0), 1 << 20, None).unwrap();
        let (a, b) = (kv("a", 1), kv("b", 1));
        w.push(0, a.0, a.1).unwrap();
        w.push(0, b.0, b.1).unwrap();
        w.flush().unwrap();
        assert_eq!(w.sent_per_partition(), [1]);
        assert_eq!(w.next_seq(), [1]);
        let got = q.receive("q0", 10).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].header.seq, 0);
        assert_eq!(decode_payload(&got[0].payload).unwrap().len(), 2);
    }

    #[test]
    fn reader_dedups_and_detects_loss() {
        let (q, names) = setup(1.0, 1);
        let mut w = ShuffleWriter::new(&q, names, identity(0), 0, None).unwrap();
        for i in 0..2 {
            let (k, v) = kv("x", i);
            w.push(0, k, v).unwrap();
        }
        assert_eq!(w.sent_per_partition(), [2]);
        assert_eq!(q.depth("q0").unwrap(), 4);
        let exp = [ExpectedBatches {
            src_task_id: 0,
            attempt: 0,
            batches: 2,
        }];
        let mut reader = ShuffleReader::new(&q, "q0", &exp);
        let got: Vec<_> = reader.by_ref().collect::<Result<_, _>>().unwrap();
        assert_eq!(got.len(), 2);

        // expectations beyond what was sent: the reader reports what is missing
        let (q, names) = setup(0.0, 1);
        let mut w = ShuffleWriter::new(&q, names, identity(0), 0, None).unwrap();
        let (k, v) = kv("x", 1);
        w.push(0, k, v).unwrap();
        let exp = [ExpectedBatches {
            src_task_id: 0,
            attempt: 0,
            batches: 2,
        }];
        let r: Result<Vec<_>, _> = ShuffleReader::new(&q, "q0", &exp).collect();
        match r {
            Err(ExecError::MissingBatches { missing, .. }) => assert_eq!(missing, vec![(0, 1)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reader_ignores_other_attempts() {
        let (q, names) = setup(0.0, 1);
        for attempt in 0..2 {
            let id = WriterIdentity {
                attempt,
                ..identity(0)
            };
            let mut w = ShuffleWriter::new(&q, names.clone(), id, 0, None).unwrap();
            let (k, v) = kv("x", 10 + attempt as i64);
            w.push(0, k, v).unwrap();
        }
        let exp = [ExpectedBatches {
            src_task_id: 0,
            attempt: 1,
            batches: 1,
        }];
        let mut reader = ShuffleReader::new(&q, "q0", &exp);
        let got: Vec<_> = reader.by_ref().collect::<Result<_, _>>().unwrap();
        assert_eq!(got, vec![kv("x", 11)]);
    }

    #[test]
    fn nothing_expected_makes_no_calls() {
        let (q, _) = setup(0.0, 1);
        let mut reader = ShuffleReader::new(
            &q,
            "q0",
            &[ExpectedBatches {
                src_task_id: 0,
                attempt: 0,
                batches: 0,
            }],
        );
        assert!(reader.next().is_none());
        assert_eq!(reader.queue_calls(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        /// Shuffle conservation: the multiset read back equals the multiset written,
        /// whatever the duplication rate and flush threshold.
        #[test]
        fn shuffle_conserves_records(
            p in 0.0f64..=1.0,
            threshold in 0u64..400,
            records in proptest::collection::vec(("[a-e]{1,3}", 0i64..100), 0..120),
        ) {
            let (q, names) = setup(p, 3);
            let mut sent = Vec::new();
            let mut expected = vec![Vec::new(); 3];
            for src in 0..2u32 {
                let mut w = ShuffleWriter::new(&q, names.clone(), identity(src), threshold, None).unwrap();
                for (i, (k, v)) in records.iter().enumerate() {
                    // tag each record with a unique id so the comparison is a true multiset check
                    let rec = (Datum::str(k.clone()).encode(), Datum::List(vec![Datum::Int(*v), Datum::Int(src as i64), Datum::Int(i as i64)]).encode());
                    let part = hash_partition(&rec.0, 3);
                    sent.push(rec.clone());
                    w.push(part, rec.0, rec.1).unwrap();
                }
                w.flush().unwrap();
                for (part, n) in w.sent_per_partition().iter().enumerate() {
                    expected[part].push(ExpectedBatches { src_task_id: src, attempt: 0, batches: *n as u32 });
                }
            }
            let mut got = Vec::new();
            for (part, name) in names.iter().enumerate() {
                let r: Vec<_> = ShuffleReader::new(&q, name, &expected[part]).collect::<Result<_, _>>().unwrap();
                got.extend(r);
            }
            sent.sort();
            got.sort();
            prop_assert_eq!(got, sent);
        }
    }
}
