//! Linear warmup followed by cosine annealing.

use crate::config::RunConfig;

/// Learning rate at a (possibly fractional) epoch. Warmup interpolates
/// `lr_init -> lr_peak` over `epochs_warmup`; cosine annealing then decays
/// to `lr_final` over `epochs_main`. Epochs outside
/// `[0, epochs_warmup + epochs_main]` give `lr_final` with a warning.
pub fn lr_schedule(epoch: f64, cfg: &RunConfig) -> f64 {
    let w = cfg.epochs_warmup as f64;
    let m = cfg.epochs_main as f64;
    if !(0.0..=w + m).contains(&epoch) {
        log::warn!("lr_schedule: epoch {epoch} outside [0, {}], using lr_final", w + m);
        return cfg.lr_final;
    }
    if epoch <= w && w > 0.0 {
        let t = epoch / w;
        return cfg.lr_init * (1.0 - t) + cfg.lr_peak * t;
    }
    if m == 0.0 {
        return cfg.lr_peak;
    }
    let phase = std::f64::consts::PI * (epoch - w) / m;
    cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * (1.0 + phase.cos()) / 2.0
}
