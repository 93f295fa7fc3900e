//! Peak resident-set sampling from `/proc/self/status`.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

pub const INTERVAL: Duration = Duration::from_millis(50);

/// Current resident set size in bytes, if the platform exposes it.
pub fn current_rss() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Background thread recording the largest RSS seen until [`RssSampler::stop`].
pub struct RssSampler {
    stop: Arc<AtomicBool>,
    peak: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl RssSampler {
    pub fn start() -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let peak = Arc::new(AtomicU64::new(current_rss().unwrap_or(0)));
        let handle = {
            let (stop, peak) = (stop.clone(), peak.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    if let Some(v) = current_rss() {
                        peak.fetch_max(v, Ordering::Relaxed);
                    }
                    std::thread::park_timeout(INTERVAL);
                }
            })
        };
        RssSampler {
            stop,
            peak,
            handle: Some(handle),
        }
    }

    /// Peak in bytes, or `None` where RSS is unavailable.
    pub fn stop(mut self) -> Option<u64> {
        self.halt();
        if let Some(v) = current_rss() {
            self.peak.fetch_max(v, Ordering::Relaxed);
        }
        let p = self.peak.load(Ordering::Relaxed);
        (p > 0).then_some(p)
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

impl Drop for RssSampler {
    fn drop(&mut self) {
        self.halt();
    }
}
