//! Time sources for transcript timing and repair episodes.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Milliseconds on this clock's time line.
    fn now_ms(&self) -> u64;
}

/// Milliseconds since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A counter that advances by one on every reading, so that repeated runs
/// of the same work produce identical timestamps.
#[derive(Debug, Default)]
pub struct LogicalClock {
    next: AtomicU64,
}

impl LogicalClock {
    pub fn starting_at(ms: u64) -> LogicalClock {
        LogicalClock { next: AtomicU64::new(ms) }
    }

    /// The value the next reading will return.
    pub fn peek(&self) -> u64 {
        self.next.load(Ordering::SeqCst)
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(1, Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_clock_ticks_once_per_reading() {
        let c = LogicalClock::starting_at(10);
        assert_eq!(c.now_ms(), 10);
        assert_eq!(c.now_ms(), 11);
        assert_eq!(c.peek(), 12);
    }
}
