//! Child-process scorer speaking newline-delimited JSON over stdio.
//!
//! Request:  `{"seq": "AC#E"}`
//! Response: `{"logits": [[f64; 20]; L]}` (natural-log values, alphabet column
//! order) or `{"error": "message"}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;

use super::{ConditionalSequenceModel, LogitsMatrix, ScorerError};
use crate::seqcore::AntibodySequence;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Deserialize)]
struct Response {
    logits: Option<Vec<Vec<Option<f64>>>>,
    error: Option<String>,
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Process {
    fn spawn(command: &str) -> Result<Self, ScorerError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ScorerError::Spawn(format!("{command}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }

    fn exit_status(&mut self) -> String {
        match self.child.try_wait() {
            Ok(Some(status)) => status.to_string(),
            _ => "stdout closed".into(),
        }
    }

    fn request(&mut self, seq: &str, timeout: Duration) -> Result<String, ScorerError> {
        let msg = serde_json::json!({ "seq": seq }).to_string();
        if writeln!(self.stdin, "{msg}")
            .and_then(|_| self.stdin.flush())
            .is_err()
        {
            return Err(ScorerError::Exited(self.exit_status()));
        }
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ScorerError::Protocol(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(ScorerError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                // give the child a moment to be reaped so the status is informative
                let _ = self.child.wait();
                Err(ScorerError::Exited(self.exit_status()))
            }
        }
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Parses one response line and validates it against sequence length `len`.
pub(crate) fn parse_response(line: &str, len: usize) -> Result<LogitsMatrix, ScorerError> {
    // JSON has no NaN/Infinity, but common emitters write them anyway; map
    // them to null so they surface as finiteness errors instead of parse errors.
    let sanitized = line
        .replace("-Infinity", "null")
        .replace("Infinity", "null")
        .replace("NaN", "null");
    let resp: Response = serde_json::from_str(&sanitized)
        .map_err(|e| ScorerError::Protocol(format!("{e}: {}", truncate(line))))?;
    if let Some(err) = resp.error {
        return Err(ScorerError::Remote(err));
    }
    let nested = resp
        .logits
        .ok_or_else(|| ScorerError::Protocol("response has no 'logits' field".into()))?;
    let mut values = Vec::with_capacity(nested.len());
    for (row, cells) in nested.into_iter().enumerate() {
        let mut out = Vec::with_capacity(cells.len());
        for (col, v) in cells.into_iter().enumerate() {
            out.push(v.ok_or(ScorerError::NonFinite { row, col })?);
        }
        values.push(out);
    }
    LogitsMatrix::from_nested(&values, len)
}

fn truncate(s: &str) -> String {
    s.chars().take(80).collect()
}

/// One or more child processes running the same scorer command. Requests go
/// to an idle process when one exists, so a pool of `n` serves `n` callers at
/// once. A process that fails is dropped and respawned on its next use.
pub struct ExternalScorer {
    command: String,
    timeout: Duration,
    slots: Vec<Mutex<Option<Process>>>,
    cursor: AtomicUsize,
}

impl ExternalScorer {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, ScorerError> {
        Self::spawn_pool(command, timeout, 1)
    }

    pub fn spawn_pool(command: &str, timeout: Duration, workers: usize) -> Result<Self, ScorerError> {
        let slots = (0..workers.max(1))
            .map(|_| Process::spawn(command).map(|p| Mutex::new(Some(p))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            command: command.to_string(),
            timeout,
            slots,
            cursor: AtomicUsize::new(0),
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    fn run(&self, slot: &mut Option<Process>, seq: &AntibodySequence) -> Result<LogitsMatrix, ScorerError> {
        if slot.is_none() {
            *slot = Some(Process::spawn(&self.command)?);
        }
        let process = slot.as_mut().expect("spawned");
        let result = process
            .request(&seq.to_text(), self.timeout)
            .and_then(|line| parse_response(&line, seq.len()));
        if matches!(
            result,
            Err(ScorerError::Timeout(_) | ScorerError::Exited(_) | ScorerError::Protocol(_))
        ) {
            // the stream may be out of sync; start over on next use
            *slot = None;
        }
        result
    }
}

impl ConditionalSequenceModel for ExternalScorer {
    fn score(&self, seq: &AntibodySequence) -> Result<LogitsMatrix, ScorerError> {
        let n = self.slots.len();
        let start = self.cursor.fetch_add(1, Ordering::Relaxed) % n;
        for k in 0..n {
            if let Ok(mut guard) = self.slots[(start + k) % n].try_lock() {
                return self.run(&mut guard, seq);
            }
        }
        let mut guard = self.slots[start]
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner());
        self.run(&mut guard, seq)
    }
}
