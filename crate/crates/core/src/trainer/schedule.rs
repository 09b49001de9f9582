/// Learning rate at `step` of `total_steps`: linear warmup from 0 to `peak`
/// over `warmup_steps`, then cosine decay from `peak` to `end`.
pub fn warmup_cosine(peak: f64, end: f64, warmup_steps: u64, step: u64, total_steps: u64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if step == warmup_steps {
        return peak;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
