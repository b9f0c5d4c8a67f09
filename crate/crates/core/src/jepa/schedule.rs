//! Learning-rate and EMA-momentum schedules.

use std::f64::consts::PI;

/// Linear warm-up from 0 to `peak` over `warmup` steps, then cosine decay to
/// `floor` at `total`.
pub fn lr_at(step: u64, total: u64, warmup: u64, peak: f64, floor: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    floor + 0.5 * (peak - floor) * (1.0 + (PI * t).cos())
}

/// Linear interpolation from `start` to `end` over `total` steps.
pub fn momentum_at(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let t = (step as f64 / total as f64).min(1.0);
    start + (end - start) * t
}
