use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fedssd_core::federation::{ClientExecutor, LocalUpdate};

/// Environment variable holding the worker count for client fan-out.
pub const THREADS_ENV: &str = "FEDSSD_THREADS";

/// Runs the clients of a round on up to `threads` scoped worker threads.
///
/// Each client owns its rng stream, so results do not depend on `threads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threaded {
    threads: NonZeroUsize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Threaded { threads: NonZeroUsize::new(threads).unwrap_or(NonZeroUsize::MIN) }
    }

    /// Reads [`THREADS_ENV`]; unset, empty or `0` means one worker per core.
    pub fn from_env() -> Self {
        let requested = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
        if requested > 0 {
            return Threaded::new(requested);
        }
        Threaded { threads: std::thread::available_parallelism().unwrap_or(NonZeroUsize::MIN) }
    }

    pub fn threads(&self) -> usize {
        self.threads.get()
    }
}

impl ClientExecutor for Threaded {
    fn execute<F>(&self, count: usize, task: F) -> Vec<fedssd_core::Result<LocalUpdate>>
    where
        F: Fn(usize) -> fedssd_core::Result<LocalUpdate> + Sync,
    {
        let workers = self.threads().min(count);
        if workers <= 1 {
            return (0..count).map(task).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<fedssd_core::Result<LocalUpdate>>>> = Mutex::new((0..count).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= count {
                        break;
                    }
                    let out = task(i);
                    slots.lock().expect("worker panicked")[i] = Some(out);
                });
            }
        });
        slots
            .into_inner()
            .expect("worker panicked")
            .into_iter()
            .map(|r| r.expect("every client index is claimed once"))
            .collect()
    }
}
