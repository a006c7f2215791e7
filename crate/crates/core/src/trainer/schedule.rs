/// Linear warmup to `lr_max`, then cosine annealing to `lr_min` at
/// `total_steps`. Steps past the end stay at `lr_min`.
///
/// Written as `lr_max·(1+c)/2 + lr_min·(1−c)/2` so both endpoints are exact.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return lr_min;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let c = (std::f64::consts::PI * progress).cos();
    lr_max * (1.0 + c) / 2.0 + lr_min * (1.0 - c) / 2.0
}
