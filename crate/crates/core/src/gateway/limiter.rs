use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit { sem: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.freed.notify_one();
    }
}

/// Per-provider requests-per-minute ceiling over a sliding 60 s window.
#[derive(Debug, Default)]
pub struct RateLimiter {
    limits: BTreeMap<String, u32>,
    windows: Mutex<BTreeMap<String, VecDeque<Instant>>>,
}

const WINDOW: Duration = Duration::from_secs(60);

impl RateLimiter {
    pub fn new(limits: BTreeMap<String, u32>) -> Self {
        RateLimiter { limits, windows: Mutex::new(BTreeMap::new()) }
    }

    /// Blocks until `provider` has a free slot, then takes it.
    pub fn wait(&self, provider: &str) {
        let Some(&limit) = self.limits.get(provider) else { return };
        if limit == 0 {
            return;
        }
        loop {
            let sleep_for = {
                let mut windows = self.windows.lock().unwrap();
                let window = windows.entry(provider.to_owned()).or_default();
                let now = Instant::now();
                while window.front().is_some_and(|t| now.duration_since(*t) >= WINDOW) {
                    window.pop_front();
                }
                if window.len() < limit as usize {
                    window.push_back(now);
                    return;
                }
                WINDOW - now.duration_since(*window.front().unwrap())
            };
            thread::sleep(sleep_for);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Arc::new(Semaphore::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (sem, live, peak) = (sem.clone(), live.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = sem.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn unlimited_provider_never_blocks() {
        let rl = RateLimiter::new(BTreeMap::from([("slow".to_string(), 1)]));
        let start = Instant::now();
        for _ in 0..100 {
            rl.wait("fast");
        }
        rl.wait("slow");
        assert!(start.elapsed() < Duration::from_secs(1));
    }
}
