//! Append-only transaction log.
//!
//! Record layout (all integers big-endian):
//!
//! ```text
//! u32 len | u64 sequence | u64 timestamp_ms | u8 op | u32 key_len | key
//!         | (op = SET) u32 value_len | value | u16 crc16
//! ```
//!
//! `len` counts every byte after itself, including the trailing CRC, which
//! covers the bytes between `len` and the CRC.

use alloc::vec::Vec;
use bytes::Bytes;

use super::shard::Table;
use crate::slot::crc16;

const OP_SET: u8 = 1;
const OP_DEL: u8 = 2;
const MAX_RECORD_LEN: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Set { key: Bytes, value: Bytes },
    Del { key: Bytes },
}

impl Command {
    pub fn key(&self) -> &Bytes {
        match self {
            Command::Set { key, .. } | Command::Del { key } => key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub sequence: u64,
    pub command: Command,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LogError {
    #[error("corrupt log: bad sequence {sequence} (expected {expected})")]
    Sequence { sequence: u64, expected: u64 },
    #[error("corrupt log: checksum mismatch in record at byte {offset}")]
    Checksum { offset: usize },
    #[error("corrupt log: malformed record at byte {offset}")]
    Malformed { offset: usize },
}

pub fn encode_record(record: &LogRecord, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&record.sequence.to_be_bytes());
    out.extend_from_slice(&record.timestamp_ms.to_be_bytes());
    match &record.command {
        Command::Set { key, value } => {
            out.push(OP_SET);
            put_bytes(out, key);
            put_bytes(out, value);
        }
        Command::Del { key } => {
            out.push(OP_DEL);
            put_bytes(out, key);
        }
    }
    let crc = crc16(&out[start + 4..]);
    out.extend_from_slice(&crc.to_be_bytes());
    let len = (out.len() - start - 4) as u32;
    out[start..start + 4].copy_from_slice(&len.to_be_bytes());
}

fn put_bytes(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(data);
}

/// Decodes one record from the front of `buf`; `Ok(None)` if incomplete.
/// Error offsets are relative to `buf`.
pub fn decode_record(buf: &[u8]) -> Result<Option<(LogRecord, usize)>, LogError> {
    let Some(len_bytes) = buf.get(..4) else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
    if !(8 + 8 + 1 + 4 + 2..=MAX_RECORD_LEN).contains(&len) {
        return Err(LogError::Malformed { offset: 0 });
    }
    let Some(body) = buf.get(4..4 + len) else {
        return Ok(None);
    };
    let (content, crc_bytes) = body.split_at(len - 2);
    if crc16(content) != u16::from_be_bytes([crc_bytes[0], crc_bytes[1]]) {
        return Err(LogError::Checksum { offset: 0 });
    }
    let malformed = LogError::Malformed { offset: 0 };
    let sequence = u64::from_be_bytes(content[0..8].try_into().unwrap());
    let timestamp_ms = u64::from_be_bytes(content[8..16].try_into().unwrap());
    let op = content[16];
    let mut rest = &content[17..];
    let key = take_bytes(&mut rest).ok_or(malformed.clone())?;
    let command = match op {
        OP_SET => {
            let value = take_bytes(&mut rest).ok_or(malformed.clone())?;
            Command::Set { key, value }
        }
        OP_DEL => Command::Del { key },
        _ => return Err(malformed),
    };
    if !rest.is_empty() {
        return Err(LogError::Malformed { offset: 0 });
    }
    Ok(Some((LogRecord { sequence, command, timestamp_ms }, 4 + len)))
}

fn take_bytes(buf: &mut &[u8]) -> Option<Bytes> {
    let len = u32::from_be_bytes(buf.get(..4)?.try_into().ok()?) as usize;
    let data = buf.get(4..4 + len)?;
    let out = Bytes::copy_from_slice(data);
    *buf = &buf[4 + len..];
    Some(out)
}

/// Result of scanning a log file image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    pub records: Vec<LogRecord>,
    /// Length of the valid prefix; the file should be truncated to it.
    pub valid_len: usize,
    /// Whether a torn final record was found past `valid_len`.
    pub torn_tail: bool,
}

/// Parses a whole log image. An incomplete or checksum-failing record that
/// runs to the end of the image is a torn write and is dropped; damage
/// anywhere earlier is reported as corruption.
pub fn recover_log(image: &[u8]) -> Result<Recovered, LogError> {
    let mut records = Vec::new();
    let mut pos = 0;
    while pos < image.len() {
        match decode_record(&image[pos..]) {
            Ok(Some((record, used))) => {
                records.push(record);
                pos += used;
            }
            Ok(None) => {
                return Ok(Recovered { records, valid_len: pos, torn_tail: true });
            }
            Err(LogError::Checksum { .. }) | Err(LogError::Malformed { .. }) => {
                let declared = image
                    .get(pos..pos + 4)
                    .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize);
                let reaches_end = declared.is_some_and(|len| pos + 4 + len >= image.len());
                if reaches_end {
                    return Ok(Recovered { records, valid_len: pos, torn_tail: true });
                }
                return Err(LogError::Checksum { offset: pos });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Recovered { records, valid_len: pos, torn_tail: false })
}

/// Applies log records to a table, tracking the last applied sequence.
///
/// Records at or below the checkpoint are skipped, so replaying a log over a
/// table that already reflects a prefix of it is a no-op for that prefix.
#[derive(Debug, Clone, Default)]
pub struct Replayer {
    table: Table,
    applied: u64,
}

impl Replayer {
    pub fn new() -> Self {
        Replayer::default()
    }

    /// Resumes from a table that reflects every record up to `applied`.
    pub fn resume(table: Table, applied: u64) -> Self {
        Replayer { table, applied }
    }

    pub fn apply(&mut self, record: &LogRecord) -> Result<bool, LogError> {
        if record.sequence <= self.applied {
            return Ok(false);
        }
        if self.applied != 0 && record.sequence != self.applied + 1 {
            return Err(LogError::Sequence {
                sequence: record.sequence,
                expected: self.applied + 1,
            });
        }
        self.table.apply(&record.command);
        self.applied = record.sequence;
        Ok(true)
    }

    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    pub fn into_parts(self) -> (Table, u64) {
        (self.table, self.applied)
    }
}

/// Rebuilds a table from a complete log. Sequence numbers must increase by
/// exactly one from record to record.
pub fn replay_log(log: &[LogRecord]) -> Result<Table, LogError> {
    let mut previous: Option<u64> = None;
    let mut table = Table::default();
    for record in log {
        if let Some(prev) = previous {
            if record.sequence != prev + 1 {
                return Err(LogError::Sequence { sequence: record.sequence, expected: prev + 1 });
            }
        }
        table.apply(&record.command);
        previous = Some(record.sequence);
    }
    Ok(table)
}
