//! Time sources for profiling and budgeted runs.

use std::cell::Cell;
use std::time::Instant;

pub trait Clock {
    /// Seconds since an arbitrary fixed origin.
    fn now(&self) -> f64;
}

/// Monotonic wall clock.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// A clock that only moves when told to; for deterministic timing tests.
#[derive(Debug, Default)]
pub struct ManualClock {
    t: Cell<f64>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, seconds: f64) {
        self.t.set(self.t.get() + seconds);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        self.t.get()
    }
}

/// Elapsed run time of an underlying clock, excluding paused intervals.
#[derive(Debug)]
pub struct RunClock<C: Clock> {
    inner: C,
    start: f64,
    paused_total: f64,
    paused_at: Option<f64>,
}

impl<C: Clock> RunClock<C> {
    pub fn start(inner: C) -> Self {
        let start = inner.now();
        Self {
            inner,
            start,
            paused_total: 0.0,
            paused_at: None,
        }
    }

    pub fn elapsed(&self) -> f64 {
        let now = self.paused_at.unwrap_or_else(|| self.inner.now());
        now - self.start - self.paused_total
    }

    pub fn pause(&mut self) {
        if self.paused_at.is_none() {
            self.paused_at = Some(self.inner.now());
        }
    }

    pub fn resume(&mut self) {
        if let Some(t) = self.paused_at.take() {
            self.paused_total += self.inner.now() - t;
        }
    }

    /// Runs `f` with the clock paused.
    pub fn paused<T>(&mut self, f: impl FnOnce() -> T) -> T {
        self.pause();
        let out = f();
        self.resume();
        out
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

/// Spins for `seconds` of wall time.
pub fn busy_wait(seconds: f64) {
    let start = Instant::now();
    while start.elapsed().as_secs_f64() < seconds {
        std::hint::spin_loop();
    }
}
