//! Scoped-thread runtime with a wall clock.

use std::time::Instant;

use satt_core::train::Runtime;

#[derive(Debug, Clone)]
pub struct Threaded {
    threads: usize,
    origin: Instant,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Self {
            threads: threads.max(1),
            origin: Instant::now(),
        }
    }

    /// Honours `SATT_THREADS`, otherwise uses the available parallelism.
    pub fn from_env() -> Self {
        let available = std::thread::available_parallelism().map_or(1, |n| n.get());
        let threads = std::env::var("SATT_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .map_or(available, |cap| cap.min(available));
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.threads
    }
}

impl Runtime for Threaded {
    fn map<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        let workers = self.threads.min(n);
        if workers <= 1 {
            return (0..n).map(f).collect();
        }
        let chunk = n.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(n);
                    s.spawn(move || (lo..hi).map(f).collect::<Vec<T>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker thread panicked"))
                .collect()
        })
    }

    fn now_ms(&self) -> Option<f64> {
        Some(self.origin.elapsed().as_secs_f64() * 1000.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_index_order() {
        for threads in [1, 2, 3, 8] {
            let rt = Threaded::new(threads);
            assert_eq!(rt.map(10, &|i| i * i), (0..10).map(|i| i * i).collect::<Vec<_>>());
            assert!(rt.map(0, &|i| i).is_empty());
        }
    }

    #[test]
    fn clock_is_monotonic() {
        let rt = Threaded::new(1);
        let a = rt.now_ms().unwrap();
        let b = rt.now_ms().unwrap();
        assert!(b >= a);
    }
}
