//! Exact piecewise-constant time integration for queue-length style signals,
//! restricted to a measurement window, plus latency accumulation.
//!
//! Signals in the simulator (queue lengths, busy indicators, backlog) change
//! only at events, so time averages and least-squares trends over the window
//! are computed exactly from the jump sequence in O(1) memory — no sampling
//! grid is involved.

/// Integrates a piecewise-constant signal over `[window_start, window_end]`,
/// tracking `∫ q dt`, `∫ t·q dt`, the value at window start, and the final
/// value. `set` must be called with non-decreasing times.
#[derive(Debug, Clone)]
pub struct TimeIntegrator {
    window_start: f64,
    window_end: f64,
    last_time: f64,
    value: f64,
    area: f64,
    t_area: f64,
    value_at_window_start: f64,
}

impl TimeIntegrator {
    pub fn new(window_start: f64, window_end: f64) -> Self {
        TimeIntegrator {
            window_start,
            window_end,
            last_time: 0.0,
            value: 0.0,
            area: 0.0,
            t_area: 0.0,
            value_at_window_start: 0.0,
        }
    }

    fn accumulate(&mut self, until: f64) {
        let lo = self.last_time.max(self.window_start);
        let hi = until.min(self.window_end);
        if hi > lo {
            self.area += self.value * (hi - lo);
            // ∫_lo^hi t·q dt = q·(hi² − lo²)/2
            self.t_area += self.value * (hi * hi - lo * lo) / 2.0;
        }
    }

    /// Advance the clock to `now` and set a new current value.
    pub fn set(&mut self, now: f64, value: f64) {
        debug_assert!(now >= self.last_time, "time went backwards");
        if self.last_time < self.window_start && now >= self.window_start {
            self.value_at_window_start = self.value;
        }
        self.accumulate(now);
        self.last_time = now;
        self.value = value;
    }

    pub fn add(&mut self, now: f64, delta: f64) {
        let v = self.value + delta;
        self.set(now, v);
    }

    /// Close the window (integrate the held value through `window_end`).
    pub fn finish(&mut self, now: f64) {
        self.set(now.max(self.window_end), self.value);
    }

    /// Truncate the window at `now` (for guard-aborted runs) and close it.
    pub fn finish_truncated(&mut self, now: f64) {
        if now < self.window_end {
            self.window_end = now.max(self.window_start);
        }
        self.finish(now);
    }

    pub fn window(&self) -> (f64, f64) {
        (self.window_start, self.window_end)
    }

    pub fn window_len(&self) -> f64 {
        (self.window_end - self.window_start).max(0.0)
    }

    /// Time average of the signal over the window; 0 for an empty window.
    pub fn time_average(&self) -> f64 {
        let w = self.window_len();
        if w > 0.0 {
            self.area / w
        } else {
            0.0
        }
    }

    /// Continuous-time least-squares slope of the signal over the window:
    /// the minimizer b of ∫ (q(t) − a − b·t)² dt, which is
    /// (∫ t·q dt − t̄·∫ q dt) / (W³/12) with t̄ the window midpoint.
    pub fn ls_slope(&self) -> f64 {
        let w = self.window_len();
        if w <= 0.0 {
            return 0.0;
        }
        let mid = (self.window_start + self.window_end) / 2.0;
        (self.t_area - mid * self.area) / (w * w * w / 12.0)
    }

    /// Signal value when the window opened.
    pub fn value_at_window_start(&self) -> f64 {
        self.value_at_window_start
    }

    /// Current (final, after `finish`) signal value.
    pub fn value(&self) -> f64 {
        self.value
    }
}

/// Collects per-job end-to-end latencies and reports mean and percentiles.
#[derive(Debug, Clone, Default)]
pub struct LatencyAccum {
    samples: Vec<f64>,
}

impl LatencyAccum {
    pub fn record(&mut self, latency: f64) {
        self.samples.push(latency);
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.samples.is_empty() {
            None
        } else {
            Some(self.samples.iter().sum::<f64>() / self.samples.len() as f64)
        }
    }

    /// Nearest-rank percentile: the ⌈p·N⌉-th smallest sample, p ∈ (0, 1].
    pub fn percentile(&self, p: f64) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        let mut sorted = self.samples.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Some(sorted[rank - 1])
    }
}
