//! On-disk transaction log.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use iotcloud_core::store::{encode_record, recover_log, LogRecord, Recovered};

pub struct LogFile {
    file: File,
    path: PathBuf,
    scratch: Vec<u8>,
}

impl LogFile {
    /// Opens (creating if needed) and recovers a log, truncating a torn tail.
    pub fn open(path: &Path) -> anyhow::Result<(LogFile, Recovered)> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .with_context(|| format!("opening log {}", path.display()))?;
        let mut image = Vec::new();
        file.read_to_end(&mut image)?;
        let recovered = recover_log(&image).with_context(|| format!("recovering {}", path.display()))?;
        if recovered.torn_tail {
            tracing::warn!(
                path = %path.display(),
                dropped = image.len() - recovered.valid_len,
                "truncating torn log tail"
            );
            file.set_len(recovered.valid_len as u64)?;
        }
        Ok((LogFile { file, path: path.to_path_buf(), scratch: Vec::new() }, recovered))
    }

    /// Appends one record. The write reaches the OS before this returns, so
    /// it survives a process crash.
    pub fn append(&mut self, record: &LogRecord) -> io::Result<()> {
        self.scratch.clear();
        encode_record(record, &mut self.scratch);
        self.file.write_all(&self.scratch)
    }

    pub fn sync(&mut self) -> io::Result<()> {
        self.file.sync_data()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads another node's log without modifying it. A missing file reads as
/// empty; a torn tail is ignored.
pub fn read_log(path: &Path) -> anyhow::Result<Vec<LogRecord>> {
    let image = match std::fs::read(path) {
        Ok(image) => image,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    Ok(recover_log(&image)?.records)
}
