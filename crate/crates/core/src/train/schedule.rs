/// Start of the warm-up as a fraction of the peak.
pub const WARMUP_START_DIVISOR: f64 = 25.0;
/// End of the decay as a fraction of the peak.
pub const FINAL_DIVISOR: f64 = 1e4;

/// Number of warm-up steps: `round(warmup_frac * total_steps)`, at least 1.
pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    ((warmup_frac * total_steps as f64).round() as usize).max(1)
}

/// One-cycle learning rate at `step` of `total_steps`.
///
/// With `w = warmup_steps(total_steps, warmup_frac)`:
/// - `step <= w`: `peak/25 + (peak - peak/25) * step / w`
/// - otherwise: `peak/1e4 + (peak - peak/1e4) * (1 + cos(pi * (step - w) / (total - w))) / 2`
pub fn one_cycle_lr(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> f64 {
    let w = warmup_steps(total_steps, warmup_frac);
    let start = peak / WARMUP_START_DIVISOR;
    let end = peak / FINAL_DIVISOR;
    if step == w {
        return peak;
    }
    if step < w {
        return start + (peak - start) * step as f64 / w as f64;
    }
    let span = total_steps.saturating_sub(w).max(1) as f64;
    let progress = ((step - w) as f64 / span).min(1.0);
    end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
