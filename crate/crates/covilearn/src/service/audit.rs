//! Append-only JSON-lines audit log with a single writer thread.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};

use crate::error::{Error, Result};
use crate::service::ScreeningResult;

/// Appends one result to the log file: one JSON object per line, flushed,
/// never touching prior lines.
pub fn record_result(result: &ScreeningResult, path: &Path) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    let line = serde_json::to_string(result)?;
    file.write_all(line.as_bytes()).map_err(|e| Error::file(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::file(path, e))?;
    file.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Handle to the audit writer: results are queued and written in arrival
/// order by one thread, so concurrent screenings never interleave lines.
pub struct AuditLog {
    tx: mpsc::Sender<String>,
}

impl AuditLog {
    /// Spawns the writer thread. Write failures flip `degraded` and are
    /// logged; the service keeps serving.
    pub fn spawn(path: PathBuf, degraded: Arc<AtomicBool>) -> AuditLog {
        let (tx, rx) = mpsc::channel::<String>();
        std::thread::spawn(move || {
            for line in rx {
                let write = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .and_then(|mut file| {
                        file.write_all(line.as_bytes())?;
                        file.write_all(b"\n")?;
                        file.flush()
                    });
                if let Err(err) = write {
                    degraded.store(true, Ordering::Relaxed);
                    eprintln!("audit log {} unwritable: {err}", path.display());
                }
            }
        });
        AuditLog { tx }
    }

    /// Queues one result for the writer.
    pub fn append(&self, result: &ScreeningResult) {
        if let Ok(line) = serde_json::to_string(result) {
            let _ = self.tx.send(line);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn result(id: &str) -> ScreeningResult {
        ScreeningResult {
            request_id: id.into(),
            label: Label::Normal,
            probabilities: [0.25, 0.75],
            model_id: "micro@test".into(),
            processing_ms: 1.0,
            timestamp: "2024-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn record_result_appends_parseable_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        record_result(&result("a"), &path).unwrap();
        record_result(&result("b"), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: ScreeningResult = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.request_id, "a");
        // Appending never rewrites earlier lines.
        record_result(&result("c"), &path).unwrap();
        let again = std::fs::read_to_string(&path).unwrap();
        assert!(again.starts_with(&text));
    }

    #[test]
    fn writer_thread_serializes_concurrent_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let degraded = Arc::new(AtomicBool::new(false));
        let log = Arc::new(AuditLog::spawn(path.clone(), Arc::clone(&degraded)));
        std::thread::scope(|scope| {
            for t in 0..10 {
                let log = Arc::clone(&log);
                scope.spawn(move || {
                    for i in 0..10 {
                        log.append(&result(&format!("{t}-{i}")));
                    }
                });
            }
        });
        // Writer drains asynchronously.
        for _ in 0..100 {
            let lines = std::fs::read_to_string(&path).map(|t| t.lines().count()).unwrap_or(0);
            if lines == 100 {
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 100);
        for line in text.lines() {
            let _: ScreeningResult = serde_json::from_str(line).expect("intact line");
        }
        assert!(!degraded.load(Ordering::Relaxed));
    }

    #[test]
    fn unwritable_path_flags_degraded() {
        let dir = tempfile::tempdir().unwrap();
        // A directory cannot be opened as a file.
        let degraded = Arc::new(AtomicBool::new(false));
        let log = AuditLog::spawn(dir.path().to_path_buf(), Arc::clone(&degraded));
        log.append(&result("x"));
        for _ in 0..100 {
            if degraded.load(Ordering::Relaxed) {
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        assert!(degraded.load(Ordering::Relaxed));
    }
}
