use super::TrainError;

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// `p ← p − lr·g`.
    Sgd,
    /// `v ← ρv + (1−ρ)g²`, `p ← p − lr·g/(√v + ε)`.
    RmsProp { decay: f64, eps: f64 },
}

impl Optimizer {
    pub fn rmsprop() -> Self {
        Optimizer::RmsProp { decay: 0.95, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_density: f64,
    pub lr_sh: f64,
    pub lr_bg_color: f64,
    pub lr_bg_density: f64,
    pub lambda_tv_density: f64,
    pub lambda_tv_sh: f64,
    pub lambda_tv_bg_color: f64,
    pub lambda_tv_bg_density: f64,
    pub lambda_beta: f64,
    pub lambda_sparsity: f64,
    /// Background-only steps at the start when a background model exists.
    pub fg_skip_steps: usize,
    pub total_steps: usize,
    pub upsample_at: Option<usize>,
    pub prune_at: Option<usize>,
    pub prune_threshold: f64,
    pub rays_per_batch: usize,
    /// Fraction of voxels (and background texels) drawn each step for the
    /// TV and sparsity terms.
    pub reg_fraction: f64,
    pub optimizer: Optimizer,
    /// Learning rates decay log-linearly to this fraction of their initial
    /// value by the last step; 1 keeps them constant.
    pub lr_final_ratio: f64,
    pub rng_seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_density: 30.0,
            lr_sh: 1e-2,
            lr_bg_color: 1e-1,
            lr_bg_density: 3.0,
            lambda_tv_density: 5e-5,
            lambda_tv_sh: 5e-3,
            lambda_tv_bg_color: 1e-3,
            lambda_tv_bg_density: 1e-3,
            lambda_beta: 1e-5,
            lambda_sparsity: 1e-10,
            fg_skip_steps: 1000,
            total_steps: 76_800,
            upsample_at: Some(25_600),
            prune_at: Some(25_600),
            prune_threshold: 1.28,
            rays_per_batch: 5000,
            reg_fraction: 0.01,
            optimizer: Optimizer::Sgd,
            lr_final_ratio: 1.0,
            rng_seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        for (name, v) in [
            ("lambda_tv_density", self.lambda_tv_density),
            ("lambda_tv_sh", self.lambda_tv_sh),
            ("lambda_tv_bg_color", self.lambda_tv_bg_color),
            ("lambda_tv_bg_density", self.lambda_tv_bg_density),
            ("lambda_beta", self.lambda_beta),
            ("lambda_sparsity", self.lambda_sparsity),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [
            ("lr_density", self.lr_density),
            ("lr_sh", self.lr_sh),
            ("lr_bg_color", self.lr_bg_color),
            ("lr_bg_density", self.lr_bg_density),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(p) = self.prune_at {
            if p > self.total_steps {
                return bad(format!("prune_at {p} exceeds total_steps {}", self.total_steps));
            }
        }
        if let Some(u) = self.upsample_at {
            if u > self.total_steps {
                return bad(format!("upsample_at {u} exceeds total_steps {}", self.total_steps));
            }
        }
        if !self.prune_threshold.is_finite() {
            return bad("prune_threshold must be finite".into());
        }
        if self.rays_per_batch == 0 {
            return bad("rays_per_batch must be positive".into());
        }
        if !(self.reg_fraction > 0.0 && self.reg_fraction <= 1.0) {
            return bad(format!("reg_fraction must lie in (0, 1], got {}", self.reg_fraction));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad(format!("lr_final_ratio must lie in (0, 1], got {}", self.lr_final_ratio));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if let Optimizer::RmsProp { decay, eps } = self.optimizer {
            if !(0.0..1.0).contains(&decay) || !(eps > 0.0) {
                return bad("rmsprop decay must lie in [0, 1) and eps be positive".into());
            }
        }
        Ok(())
    }

    /// Learning-rate multiplier at `step`.
    pub fn lr_factor(&self, step: usize) -> f64 {
        if self.lr_final_ratio == 1.0 || self.total_steps <= 1 {
            return 1.0;
        }
        let t = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.lr_final_ratio.powf(t)
    }

    /// Object-centric recipe: dense 128³ start, upsample (with pruning) at
    /// 25,600 steps, 76,800 steps total, background model on.
    pub fn object_profile() -> Self {
        TrainConfig::default()
    }

    /// Indoor recipe: depth-seeded 256³ start, 51,200 steps with pruning at
    /// 25,600, no upsampling and no background.
    pub fn indoor_profile() -> Self {
        TrainConfig { total_steps: 51_200, upsample_at: None, prune_at: Some(25_600), fg_skip_steps: 0, ..Default::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_recipe_constants() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_density, 30.0);
        assert_eq!(c.lr_sh, 1e-2);
        assert_eq!(c.lambda_tv_density, 5e-5);
        assert_eq!(c.lambda_tv_sh, 5e-3);
        assert_eq!(c.lambda_tv_bg_color, 1e-3);
        assert_eq!(c.lambda_tv_bg_density, 1e-3);
        assert_eq!(c.lambda_beta, 1e-5);
        assert_eq!(c.lambda_sparsity, 1e-10);
        assert_eq!(c.prune_threshold, 1.28);
        assert_eq!(c.fg_skip_steps, 1000);
        assert!(c.validate().is_ok());
        let indoor = TrainConfig::indoor_profile();
        assert_eq!((indoor.total_steps, indoor.prune_at, indoor.upsample_at), (51_200, Some(25_600), None));
    }

    #[test]
    fn invalid_overrides_rejected() {
        assert!(TrainConfig { lambda_beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_sh: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { total_steps: 10, prune_at: Some(11), upsample_at: None, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { rays_per_batch: 0, ..Default::default() }.validate().is_err());
    }
}
