//! Durable store-and-forward queue between the gateway and the cloud.
//!
//! Layout in the buffer directory:
//! - `buffer.jsonl`: every envelope ever queued since the last compaction,
//!   one per line, append-only;
//! - `acked`: how many leading lines the cloud has acknowledged (or that were
//!   evicted), replaced atomically;
//! - `dead-letter.jsonl`: batches the cloud rejected as invalid.
//!
//! A torn last line (crash mid-append) is cut off on open.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use hems_core::envelope::{self, Envelope};

/// Compact once this many acknowledged lines precede the pending ones.
const COMPACT_AFTER: u64 = 50_000;

/// Idempotency key of an uplink record: `device/epoch/seq` for measurements,
/// `event:{id}` for events, `command:{id}` for commands.
pub fn record_key(e: &Envelope) -> String {
    match e {
        Envelope::Measurement(m) => m.dedup_key().to_string(),
        Envelope::Event(ev) => format!("event:{}", ev.event_id),
        Envelope::Command(c) => format!("command:{}", c.command_id),
    }
}

/// Writes `contents` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(contents)?;
    }
    fs::rename(&tmp, path)
}

pub struct ForwardBuffer {
    dir: PathBuf,
    file: File,
    capacity: usize,
    /// Lines of `buffer.jsonl` already acknowledged or evicted.
    acked: u64,
    pending: VecDeque<Envelope>,
}

impl ForwardBuffer {
    pub fn open(dir: impl AsRef<Path>, capacity: usize) -> io::Result<ForwardBuffer> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let path = dir.join("buffer.jsonl");
        let acked: u64 = match fs::read_to_string(dir.join("acked")) {
            Ok(s) => s.trim().parse().map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("acked offset: {e}")))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        let mut records = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path)?);
            let mut line = Vec::new();
            loop {
                line.clear();
                let n = reader.read_until(b'\n', &mut line)?;
                if n == 0 || line.last() != Some(&b'\n') {
                    break;
                }
                match envelope::decode(&line[..n - 1]) {
                    Ok(env) => records.push(env),
                    Err(_) => break,
                }
                valid_len += n as u64;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() != valid_len {
            log::warn!("truncating torn tail of {}", path.display());
            file.set_len(valid_len)?;
        }
        let skip = (acked as usize).min(records.len());
        let pending: VecDeque<Envelope> = records.into_iter().skip(skip).collect();
        Ok(ForwardBuffer {
            dir,
            file,
            capacity: capacity.max(1),
            acked: skip as u64,
            pending,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends one envelope. Returns the envelopes evicted to stay within
    /// capacity, oldest first.
    pub fn push(&mut self, env: Envelope) -> io::Result<Vec<Envelope>> {
        let mut line = envelope::encode(&env).into_bytes();
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.pending.push_back(env);
        let mut evicted = Vec::new();
        while self.pending.len() > self.capacity {
            if let Some(old) = self.pending.pop_front() {
                evicted.push(old);
            }
        }
        if !evicted.is_empty() {
            self.acked += evicted.len() as u64;
            self.store_acked()?;
        }
        Ok(evicted)
    }

    /// Up to `max` oldest pending envelopes, not removed.
    pub fn peek(&self, max: usize) -> Vec<Envelope> {
        self.pending.iter().take(max).cloned().collect()
    }

    /// Removes the `n` oldest pending envelopes after the cloud acknowledged them.
    pub fn ack(&mut self, n: usize) -> io::Result<()> {
        let n = n.min(self.pending.len());
        if n == 0 {
            return Ok(());
        }
        self.pending.drain(..n);
        self.acked += n as u64;
        self.store_acked()?;
        if self.pending.is_empty() || self.acked >= COMPACT_AFTER {
            self.compact()?;
        }
        Ok(())
    }

    /// Moves the `n` oldest pending envelopes to the dead-letter file.
    pub fn dead_letter(&mut self, n: usize, reason: &str) -> io::Result<()> {
        let n = n.min(self.pending.len());
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join("dead-letter.jsonl"))?;
        for env in self.pending.iter().take(n) {
            let mut v = envelope::to_value(env);
            if let Some(obj) = v.as_object_mut() {
                obj.insert("dead_letter_reason".into(), reason.into());
            }
            writeln!(f, "{v}")?;
        }
        f.flush()?;
        self.ack(n)
    }

    fn store_acked(&self) -> io::Result<()> {
        write_atomic(&self.dir.join("acked"), self.acked.to_string().as_bytes())
    }

    /// Rewrites the log with only pending lines. The offset is zeroed first,
    /// so a crash in between re-sends (never loses) records.
    fn compact(&mut self) -> io::Result<()> {
        let mut body = Vec::new();
        for env in &self.pending {
            body.extend_from_slice(envelope::encode(env).as_bytes());
            body.push(b'\n');
        }
        self.acked = 0;
        self.store_acked()?;
        let path = self.dir.join("buffer.jsonl");
        write_atomic(&path, &body)?;
        self.file = OpenOptions::new().append(true).open(&path)?;
        Ok(())
    }
}
