/// Annealing of the low-pass dilation `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowpassSchedule {
    pub s0: f64,
    pub floor: f64,
    /// `s` is divided by this factor once per period.
    pub divisor: f64,
    pub period: usize,
    /// When false, `s` stays at `floor` from step 0.
    pub enabled: bool,
}

impl Default for LowpassSchedule {
    fn default() -> Self {
        LowpassSchedule {
            s0: 10.0,
            floor: 0.3,
            divisor: 3.0,
            period: 1000,
            enabled: true,
        }
    }
}

impl LowpassSchedule {
    /// First step at which `s` sits at the floor.
    pub fn horizon(&self) -> usize {
        if !self.enabled || self.s0 <= self.floor {
            return 0;
        }
        let mut k = 0;
        while lowpass_schedule(k * self.period, self) > self.floor {
            k += 1;
        }
        k * self.period
    }
}

/// `max(floor, s0 / divisor^floor(step / period))`.
pub fn lowpass_schedule(step: usize, cfg: &LowpassSchedule) -> f64 {
    if !cfg.enabled {
        return cfg.floor;
    }
    let k = (step / cfg.period.max(1)).min(i32::MAX as usize) as i32;
    (cfg.s0 / cfg.divisor.powi(k)).max(cfg.floor)
}

/// Cosine annealing from `lr_max` at step 0 to `min_ratio * lr_max` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, min_ratio: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let p = step.min(total) as f64 / total as f64;
    lr_max * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}
