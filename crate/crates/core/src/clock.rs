//! Monotonic timing helpers shared by the emulation and profiling code.

use std::time::{Duration, Instant};

// Kernel sleeps overshoot by up to a few hundred microseconds once timer
// slack and scheduling are counted; the last millisecond is spun instead.
const SPIN_TAIL: Duration = Duration::from_micros(1000);

/// Sleeps until `deadline`, sleeping coarsely and then yielding in a loop for
/// the last millisecond.
pub fn sleep_until(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN_TAIL {
            std::thread::sleep(left - SPIN_TAIL);
        } else {
            std::thread::yield_now();
        }
    }
}

pub fn sleep_for(d: Duration) {
    if !d.is_zero() {
        sleep_until(Instant::now() + d);
    }
}

/// Converts non-negative seconds to a `Duration`, mapping anything else to zero.
pub fn secs(s: f64) -> Duration {
    if s.is_finite() && s > 0.0 {
        Duration::from_secs_f64(s)
    } else {
        Duration::ZERO
    }
}
