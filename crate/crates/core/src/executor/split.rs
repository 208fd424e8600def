//! Line records from a byte range of an object.
//!
//! A split owns exactly the lines whose first byte falls inside it. Reading
//! starts one byte early and skips through the first newline (the line in
//! progress belongs to the previous split), and the last owned line is read
//! past the range end until its newline or end of object.

use crate::store::{ObjectRange, ObjectStore, StoreError};

const READ_AHEAD: u64 = 64 * 1024;

pub struct SplitReader<'a> {
    store: &'a ObjectStore,
    range: ObjectRange,
    object_size: u64,
    buf: Vec<u8>,
    /// Absolute object offset of `buf[0]`.
    buf_start: u64,
    /// Absolute offset of the next record start.
    pos: u64,
}

impl<'a> SplitReader<'a> {
    /// Opens `range` at its first owned record.
    pub fn open(store: &'a ObjectStore, range: &ObjectRange) -> Result<Self, StoreError> {
        let mut reader = Self::at(store, range, range.offset)?;
        if range.offset > 0 {
            reader.pos = range.offset - 1;
            match reader.find_newline()? {
                Some(nl) => reader.pos = nl + 1,
                None => reader.pos = reader.object_size,
            }
        }
        Ok(reader)
    }

    /// Resumes at `range.offset + bytes_consumed`, which must be a record start.
    pub fn resume(
        store: &'a ObjectStore,
        range: &ObjectRange,
        bytes_consumed: u64,
    ) -> Result<Self, StoreError> {
        Self::at(store, range, range.offset + bytes_consumed)
    }

    fn at(store: &'a ObjectStore, range: &ObjectRange, pos: u64) -> Result<Self, StoreError> {
        let object_size = store.object_size(&range.object)?;
        if range.end() > object_size {
            return Err(StoreError::RangeOutOfBounds {
                bucket: range.object.bucket.clone(),
                key: range.object.key.clone(),
                offset: range.offset,
                length: range.length,
                size: object_size,
            });
        }
        let buf_start = pos.saturating_sub(1).min(object_size);
        let fetch_end = range.end().max(buf_start).min(object_size);
        let buf = store.get_range(&ObjectRange::new(
            range.object.clone(),
            buf_start,
            fetch_end - buf_start,
        ))?;
        Ok(SplitReader {
            store,
            range: range.clone(),
            object_size,
            buf,
            buf_start,
            pos,
        })
    }

    /// Absolute offset of the next unread record.
    pub fn position(&self) -> u64 {
        self.pos
    }

    /// Whether another owned record remains.
    pub fn has_more(&self) -> bool {
        self.pos < self.range.end() && self.pos < self.object_size
    }

    fn buf_end(&self) -> u64 {
        self.buf_start + self.buf.len() as u64
    }

    fn extend(&mut self) -> Result<bool, StoreError> {
        let from = self.buf_end();
        if from >= self.object_size {
            return Ok(false);
        }
        let len = READ_AHEAD.min(self.object_size - from);
        let more = self
            .store
            .get_range(&ObjectRange::new(self.range.object.clone(), from, len))?;
        self.buf.extend_from_slice(&more);
        Ok(true)
    }

    /// Absolute offset of the first newline at or after `pos`.
    fn find_newline(&mut self) -> Result<Option<u64>, StoreError> {
        let mut scan = self.pos;
        loop {
            let local = (scan - self.buf_start) as usize;
            if let Some(i) = self.buf[local..].iter().position(|b| *b == b'\n') {
                return Ok(Some(scan + i as u64));
            }
            scan = self.buf_end();
            if !self.extend()? {
                return Ok(None);
            }
        }
    }

    /// Next owned record as `(absolute offset, line)`, without the line
    /// terminator (`\n` or `\r\n`).
    pub fn next_record(&mut self) -> Result<Option<(u64, String)>, StoreError> {
        if !self.has_more() {
            return Ok(None);
        }
        let start = self.pos;
        let end = self.find_newline()?;
        let line_end = end.unwrap_or(self.object_size);
        let mut bytes =
            &self.buf[(start - self.buf_start) as usize..(line_end - self.buf_start) as usize];
        if let [head @ .., b'\r'] = bytes {
            bytes = head;
        }
        let line = String::from_utf8_lossy(bytes).into_owned();
        self.pos = end.map_or(self.object_size, |nl| nl + 1);
        Ok(Some((start, line)))
    }
}

impl Iterator for SplitReader<'_> {
    type Item = Result<(u64, String), StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// All records of one split.
pub fn read_object_split(
    store: &ObjectStore,
    range: &ObjectRange,
) -> Result<Vec<String>, StoreError> {
    SplitReader::open(store, range)?
        .map(|r| r.map(|(_, line)| line))
        .collect()
}
