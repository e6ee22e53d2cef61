//! Structured broker event log: one JSON object per line.

use std::fs::OpenOptions;
use std::io::{self, LineWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

pub struct EventLog {
    instance: u32,
    out: Mutex<Box<dyn Write + Send>>,
}

impl EventLog {
    /// `-` writes to stdout, anything else appends to that file.
    pub fn open(target: &Path, instance: u32) -> io::Result<EventLog> {
        let out: Box<dyn Write + Send> = if target == Path::new("-") {
            Box::new(LineWriter::new(io::stdout()))
        } else {
            Box::new(LineWriter::new(OpenOptions::new().create(true).append(true).open(target)?))
        };
        Ok(EventLog { instance, out: Mutex::new(out) })
    }

    pub fn to_writer(out: Box<dyn Write + Send>, instance: u32) -> EventLog {
        EventLog { instance, out: Mutex::new(out) }
    }

    pub fn emit(&self, event: &str, fields: Value) {
        let ts_us = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64);
        let mut line = json!({"ts_us": ts_us, "instance": self.instance, "event": event});
        if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
            obj.extend(extra);
        }
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        let _ = writeln!(out, "{line}");
    }
}
