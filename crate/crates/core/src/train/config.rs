use super::schedule::LowpassSchedule;
use super::TrainError;

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("bad value `{value}` for `{key}`")))
}

fn unknown(section: &str, key: &str) -> TrainError {
    TrainError::Config(format!("unknown key `{key}` in [{section}]"))
}

/// Gaussian-decoder training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_mse: f64,
    /// Kept for the loss definition; no perceptual network backs it.
    pub lambda_lpips: f64,
    pub lr_decoder: f64,
    pub lr_encoder: f64,
    pub lr_min_ratio: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Scene samples per optimizer step.
    pub batch: usize,
    /// Target views rendered per sample.
    pub targets: usize,
    /// Input views per sample; the first is always the canonical camera.
    pub input_views: usize,
    pub lowpass: LowpassSchedule,
    pub seed: u64,
    /// Run on a single worker thread.
    pub deterministic: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_mse: 1.0,
            lambda_lpips: 0.05,
            lr_decoder: 1e-4,
            lr_encoder: 1e-6,
            lr_min_ratio: 0.1,
            weight_decay: 0.01,
            steps: 20_000,
            batch: 1,
            targets: 1,
            input_views: 8,
            lowpass: LowpassSchedule::default(),
            seed: 0,
            deterministic: true,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr_decoder > 0.0 && self.lr_encoder > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_min_ratio > 0.0 && self.lr_min_ratio <= 1.0) {
            return bad("lr_min_ratio must lie in (0, 1]");
        }
        if self.lambda_mse < 0.0 || self.weight_decay < 0.0 {
            return bad("loss weights and weight decay must be non-negative");
        }
        if self.batch == 0 || self.targets == 0 || self.input_views == 0 {
            return bad("batch, targets and input_views must be positive");
        }
        let s = &self.lowpass;
        if !(s.floor > 0.0 && s.s0 >= s.floor && s.divisor >= 1.0 && s.period > 0) {
            return bad("low-pass schedule needs 0 < floor <= s0, divisor >= 1, period > 0");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "lambda_mse" => self.lambda_mse = parse(key, value)?,
            "lambda_lpips" => self.lambda_lpips = parse(key, value)?,
            "lr_decoder" => self.lr_decoder = parse(key, value)?,
            "lr_encoder" => self.lr_encoder = parse(key, value)?,
            "lr_min_ratio" => self.lr_min_ratio = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "targets" => self.targets = parse(key, value)?,
            "input_views" => self.input_views = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "s0" => self.lowpass.s0 = parse(key, value)?,
            "s_floor" => self.lowpass.floor = parse(key, value)?,
            "s_divisor" => self.lowpass.divisor = parse(key, value)?,
            "s_period" => self.lowpass.period = parse(key, value)?,
            "lowpass" => self.lowpass.enabled = parse(key, value)?,
            _ => return Err(unknown("train", key)),
        }
        Ok(())
    }
}

/// Feature-decoder training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrainConfig {
    /// Width `d'` of the lifted features.
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_min_ratio: f64,
    pub weight_decay: f64,
    pub noise_std: f64,
    /// Patch size of the target-view feature maps; 1 gives per-pixel labels.
    pub target_patch: usize,
    pub targets: usize,
    pub input_views: usize,
    /// Low-pass dilation used when rendering features.
    pub s: f64,
    /// Composite the source's background feature behind the Gaussians
    /// before the loss, as the color render composites its background.
    pub composite_background: bool,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for FeatureTrainConfig {
    fn default() -> Self {
        FeatureTrainConfig {
            dim: 64,
            steps: 1000,
            lr: 1e-4,
            lr_min_ratio: 0.1,
            weight_decay: 0.01,
            noise_std: 0.3,
            target_patch: 1,
            targets: 1,
            input_views: 8,
            s: 0.3,
            composite_background: true,
            seed: 0,
            deterministic: true,
        }
    }
}

impl FeatureTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.dim == 0 || self.target_patch == 0 || !(self.lr > 0.0) || self.targets == 0 || self.input_views == 0 || self.noise_std < 0.0 {
            return Err(TrainError::Config("invalid feature training settings".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "dim" => self.dim = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_min_ratio" => self.lr_min_ratio = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "target_patch" => self.target_patch = parse(key, value)?,
            "targets" => self.targets = parse(key, value)?,
            "input_views" => self.input_views = parse(key, value)?,
            "s" => self.s = parse(key, value)?,
            "composite_background" => self.composite_background = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            _ => return Err(unknown("features", key)),
        }
        Ok(())
    }
}

impl super::TtoConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "densify_interval" => self.densify_interval = parse(key, value)?,
            "lr_means" => self.lr_means = parse(key, value)?,
            "lr_scales" => self.lr_scales = parse(key, value)?,
            "lr_rotations" => self.lr_rotations = parse(key, value)?,
            "lr_colors" => self.lr_colors = parse(key, value)?,
            "lr_opacity" => self.lr_opacity = parse(key, value)?,
            "w_mse" => self.w_mse = parse(key, value)?,
            "w_ssim" => self.w_ssim = parse(key, value)?,
            "densify_threshold" => self.densify_threshold = parse(key, value)?,
            "split_fraction" => self.split_fraction = parse(key, value)?,
            "extent" => self.extent = parse(key, value)?,
            "max_gaussians" => self.max_gaussians = parse(key, value)?,
            "s" => self.s = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(unknown("tto", key)),
        }
        Ok(())
    }
}
