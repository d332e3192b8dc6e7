//! Project files: atomic writes, the writer lock and crash injection.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;

use crate::gateway::{Transcript, TranscriptSink};

const TMP_SUFFIX: &str = ".tmp";
pub const LOCK_FILE: &str = ".lock";

/// Counts down writes and fails every write once the count is spent, as
/// if the process had died.
#[derive(Debug, Default)]
struct Crash {
    remaining: AtomicI64,
    armed: AtomicBool,
    dead: AtomicBool,
    writes: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    crash: Arc<Crash>,
}

pub fn injected_crash() -> io::Error {
    io::Error::other("injected crash")
}

pub fn is_injected_crash(e: &io::Error) -> bool {
    e.kind() == io::ErrorKind::Other && e.to_string() == "injected crash"
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Store {
        Store {
            root: root.into(),
            crash: Arc::new(Crash::default()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// After `writes` more successful writes, every write fails. The
    /// failing write leaves a partial temporary file behind.
    pub fn crash_after(&self, writes: u64) {
        self.crash.remaining.store(writes as i64, Ordering::SeqCst);
        self.crash.armed.store(true, Ordering::SeqCst);
    }

    /// Successful writes so far.
    pub fn write_count(&self) -> u64 {
        self.crash.writes.load(Ordering::SeqCst)
    }

    pub fn crashed(&self) -> bool {
        self.crash.dead.load(Ordering::SeqCst)
    }

    /// `None` when the write may proceed, else whether this is the write
    /// that dies.
    fn tick(&self) -> Option<bool> {
        if self.crash.dead.load(Ordering::SeqCst) {
            return Some(false);
        }
        if self.crash.armed.load(Ordering::SeqCst) && self.crash.remaining.fetch_sub(1, Ordering::SeqCst) <= 0 {
            self.crash.dead.store(true, Ordering::SeqCst);
            return Some(true);
        }
        None
    }

    /// Writes `bytes` to a sibling temporary file, then renames it over
    /// `rel`, so readers see the old or the new content and nothing else.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> io::Result<()> {
        let target = self.path(rel);
        if let Some(dir) = target.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = tmp_path(&target);
        if let Some(dying) = self.tick() {
            if dying {
                let _ = fs::write(&tmp, &bytes[..bytes.len() / 2]);
            }
            return Err(injected_crash());
        }
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, &target)?;
        self.crash.writes.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    pub fn write_json<T: serde::Serialize>(&self, rel: &str, value: &T) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn read(&self, rel: &str) -> io::Result<String> {
        fs::read_to_string(self.path(rel))
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> io::Result<T> {
        let text = self.read(rel)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{rel}: {e}")))
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Removes temporary files left by interrupted writes.
    pub fn sweep_temporaries(&self) -> io::Result<usize> {
        fn walk(dir: &Path, removed: &mut usize) -> io::Result<()> {
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    walk(&path, removed)?;
                } else if path.to_string_lossy().ends_with(TMP_SUFFIX) {
                    fs::remove_file(&path)?;
                    *removed += 1;
                }
            }
            Ok(())
        }
        let mut removed = 0;
        walk(&self.root, &mut removed)?;
        Ok(removed)
    }
}

fn tmp_path(target: &Path) -> PathBuf {
    let mut name = target.file_name().expect("file path").to_os_string();
    name.push(TMP_SUFFIX);
    target.with_file_name(name)
}

/// Writes transcripts through the store under `transcripts/`.
#[derive(Debug, Clone)]
pub struct StoreSink(pub Store);

pub fn transcript_path(session_id: &str) -> String {
    format!("transcripts/{session_id}.jsonl")
}

impl TranscriptSink for StoreSink {
    fn write(&self, transcript: &Transcript) -> io::Result<()> {
        self.0.write(&transcript_path(&transcript.session_id), transcript.to_jsonl().as_bytes())
    }
}

/// Exclusive writer access to a project, released on drop.
#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum LockError {
    #[error("project is locked by running process {0}")]
    Held(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn process_alive(pid: u32) -> bool {
    if pid == std::process::id() {
        return true;
    }
    // SAFETY: signal 0 only checks that the process exists.
    let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
    rc == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

impl ProjectLock {
    /// Takes the lock, taking over a lock whose holder has exited.
    pub fn acquire(root: &Path) -> Result<ProjectLock, LockError> {
        let path = root.join(LOCK_FILE);
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id())?;
                    return Ok(ProjectLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if process_alive(pid) => return Err(LockError::Held(pid)),
                        _ => fs::remove_file(&path)?,
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(LockError::Io(io::Error::other("could not take over a stale lock")))
    }
}

impl Drop for ProjectLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
