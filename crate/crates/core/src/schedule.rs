//! Learning-rate schedule: linear warmup, then cosine decay to a floor of
//! one tenth of the peak.

pub const FLOOR_FRACTION: f64 = 0.1;

/// Linear interpolation that returns `a` exactly at `f = 0` and `b` exactly
/// at `f = 1`.
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    if f < 0.5 {
        a + (b - a) * f
    } else {
        b - (b - a) * (1.0 - f)
    }
}

/// Learning rate at `iter`.
///
/// Warmup rises linearly from `lr_max / warmup_iters` at iteration 0 to
/// `lr_max` at `warmup_iters`. After that a half cosine takes it down to
/// `0.1 * lr_max` at `max_iters`. Iterations past `max_iters` stay at the
/// floor.
pub fn lr_schedule(iter: usize, warmup_iters: usize, max_iters: usize, lr_max: f64) -> f64 {
    lr_schedule_with(iter, warmup_iters, max_iters, lr_max, false)
}

/// Like [`lr_schedule`]; with `warmup_from_floor` the warmup starts at
/// `0.1 * lr_max` instead of `lr_max / warmup_iters`.
pub fn lr_schedule_with(iter: usize, warmup_iters: usize, max_iters: usize, lr_max: f64, warmup_from_floor: bool) -> f64 {
    let floor = FLOOR_FRACTION * lr_max;
    if iter < warmup_iters {
        let start = if warmup_from_floor { floor } else { lr_max / warmup_iters as f64 };
        return lerp(start, lr_max, iter as f64 / warmup_iters as f64);
    }
    if iter >= max_iters {
        return if max_iters > warmup_iters { floor } else { lr_max };
    }
    let ratio = (iter - warmup_iters) as f64 / (max_iters - warmup_iters) as f64;
    let coeff = 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos());
    lerp(floor, lr_max, coeff)
}
