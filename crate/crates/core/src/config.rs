//! Run configuration: every tunable of the pipeline in one flat
//! `key=value` file with `#` comments.
//!
//! Unknown keys are rejected and every value is range-checked on load, so
//! a stale or typo'd config fails loudly instead of silently running with
//! defaults.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// All pipeline tunables. `Default` holds the standard settings; smaller
/// budgets for quick runs belong in a config file, not in code edits.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Patch size n used for indicator training and inference.
    pub patch_size: usize,
    /// Neighborhood size k (< patch_size) for the attention weighting.
    pub k_neighbors: usize,
    /// Per-point feature width of the indicator networks.
    pub ldi_feature_dim: usize,
    /// Queries sampled around each patch point when building indicator
    /// training data.
    pub ldi_queries_per_point: usize,
    /// Std of the Gaussian query offsets for indicator training, in
    /// normalized local units.
    pub ldi_sigma: f64,
    /// Indicator training steps.
    pub ldi_steps: usize,
    /// Indicator training batch size.
    pub ldi_batch: usize,
    /// Indicator learning rate.
    pub ldi_lr: f64,
    /// Random rotation augmentation of training patches.
    pub augment_rotate: bool,
    /// Random in-ball shrink augmentation of training patches.
    pub augment_scale: bool,
    /// Near-surface field-training queries sampled around each input point.
    pub queries_per_point: usize,
    /// Gaussian std as a fraction of the distance to the `nn_rank`-th
    /// neighbor.
    pub sigma_fraction: f64,
    /// Neighbor rank defining the per-point noise scale.
    pub nn_rank: usize,
    /// Whole-space uniform queries as a fraction of the near-surface count.
    pub global_query_fraction: f64,
    /// Weight of the nearest-point loss term.
    pub alpha: f64,
    /// Surface loss weight at step 0; decays linearly to `beta_end`.
    pub beta_start: f64,
    pub beta_end: f64,
    /// Weight of the shortest-path loss term.
    pub gamma: f64,
    /// Field fitting step budget.
    pub field_steps: usize,
    /// Hidden width of the 8-layer field network.
    pub field_hidden: usize,
    /// Queries per fitting step.
    pub field_query_batch: usize,
    /// Input points per step for the surface loss.
    pub field_surf_batch: usize,
    /// Field learning rate.
    pub field_lr: f64,
    /// Early stop: window length in steps (0 disables early stopping).
    pub early_stop_window: usize,
    /// Early stop: minimum relative improvement of the windowed mean loss.
    pub early_stop_rel_improvement: f64,
    /// Gradient norm below which a pull is considered degenerate.
    pub eps_grad: f64,
    /// Query points generated per output point at inference.
    pub oversample_ratio: f64,
    /// Pull iterations per inference query (1 = single projection).
    pub pull_iterations: usize,
    /// Master RNG seed; every run with the same seed is bit-reproducible.
    pub seed: u64,
    /// First point selected by farthest point sampling.
    pub fps_seed_index: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            patch_size: 256,
            k_neighbors: 16,
            ldi_feature_dim: 64,
            ldi_queries_per_point: 8,
            ldi_sigma: 0.05,
            ldi_steps: 4000,
            ldi_batch: 32,
            ldi_lr: 1e-3,
            augment_rotate: false,
            augment_scale: false,
            queries_per_point: 240,
            sigma_fraction: 0.2,
            nn_rank: 50,
            global_query_fraction: 0.1,
            alpha: 1.0,
            beta_start: 0.5,
            beta_end: 0.0,
            gamma: 0.1,
            field_steps: 10_000,
            field_hidden: 256,
            field_query_batch: 128,
            field_surf_batch: 512,
            field_lr: 1e-3,
            early_stop_window: 500,
            early_stop_rel_improvement: 1e-3,
            eps_grad: 1e-8,
            oversample_ratio: 3.0,
            pull_iterations: 1,
            seed: 0,
            fps_seed_index: 0,
        }
    }
}

macro_rules! config_fields {
    ($($name:ident : $kind:ident),* $(,)?) => {
        impl RunConfig {
            fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($name) => {
                        self.$name = parse_value!(value, $kind)
                            .map_err(|e| format!("{key}: {e}"))?;
                        Ok(())
                    })*
                    _ => Err(format!("unknown key `{key}`")),
                }
            }

            /// Serializes the effective configuration; `parse` of the output
            /// reproduces this config exactly.
            pub fn dump(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{}={}", stringify!($name), self.$name).unwrap();)*
                out
            }
        }
    };
}

macro_rules! parse_value {
    ($value:expr, usize) => {
        $value.parse::<usize>().map_err(|e| e.to_string())
    };
    ($value:expr, u64) => {
        $value.parse::<u64>().map_err(|e| e.to_string())
    };
    ($value:expr, f64) => {
        $value.parse::<f64>().map_err(|e| e.to_string())
    };
    ($value:expr, bool) => {
        $value.parse::<bool>().map_err(|e| e.to_string())
    };
}

config_fields! {
    patch_size: usize,
    k_neighbors: usize,
    ldi_feature_dim: usize,
    ldi_queries_per_point: usize,
    ldi_sigma: f64,
    ldi_steps: usize,
    ldi_batch: usize,
    ldi_lr: f64,
    augment_rotate: bool,
    augment_scale: bool,
    queries_per_point: usize,
    sigma_fraction: f64,
    nn_rank: usize,
    global_query_fraction: f64,
    alpha: f64,
    beta_start: f64,
    beta_end: f64,
    gamma: f64,
    field_steps: usize,
    field_hidden: usize,
    field_query_batch: usize,
    field_surf_batch: usize,
    field_lr: f64,
    early_stop_window: usize,
    early_stop_rel_improvement: f64,
    eps_grad: f64,
    oversample_ratio: f64,
    pull_iterations: usize,
    seed: u64,
    fps_seed_index: usize,
}

impl RunConfig {
    /// Parses `key=value` text; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "<config>".to_string(),
                line: lineno + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            config
                .set_key(key.trim(), value.trim())
                .map_err(|msg| Error::Parse {
                    path: "<config>".to_string(),
                    line: lineno + 1,
                    msg,
                })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                msg,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.patch_size >= 1, "patch_size must be at least 1")?;
        check(
            self.k_neighbors >= 1 && self.k_neighbors < self.patch_size,
            "k_neighbors must satisfy 1 <= k_neighbors < patch_size",
        )?;
        check(self.ldi_feature_dim >= 1, "ldi_feature_dim must be positive")?;
        check(
            self.ldi_queries_per_point >= 1,
            "ldi_queries_per_point must be positive",
        )?;
        check(
            self.ldi_sigma.is_finite() && self.ldi_sigma >= 0.0,
            "ldi_sigma must be finite and non-negative",
        )?;
        check(self.ldi_batch >= 1, "ldi_batch must be positive")?;
        check(
            self.ldi_lr.is_finite() && self.ldi_lr > 0.0,
            "ldi_lr must be positive",
        )?;
        check(self.queries_per_point >= 1, "queries_per_point must be positive")?;
        check(
            self.sigma_fraction.is_finite() && self.sigma_fraction >= 0.0,
            "sigma_fraction must be finite and non-negative",
        )?;
        check(self.nn_rank >= 1, "nn_rank must be positive")?;
        check(
            self.global_query_fraction.is_finite() && self.global_query_fraction >= 0.0,
            "global_query_fraction must be finite and non-negative",
        )?;
        for (v, name) in [
            (self.alpha, "alpha"),
            (self.beta_start, "beta_start"),
            (self.beta_end, "beta_end"),
            (self.gamma, "gamma"),
        ] {
            check(v.is_finite() && v >= 0.0, &format!("{name} must be finite and non-negative"))?;
        }
        check(self.field_hidden >= 1, "field_hidden must be positive")?;
        check(self.field_query_batch >= 1, "field_query_batch must be positive")?;
        check(self.field_surf_batch >= 1, "field_surf_batch must be positive")?;
        check(
            self.field_lr.is_finite() && self.field_lr > 0.0,
            "field_lr must be positive",
        )?;
        check(
            self.early_stop_rel_improvement.is_finite() && self.early_stop_rel_improvement >= 0.0,
            "early_stop_rel_improvement must be finite and non-negative",
        )?;
        check(
            self.eps_grad.is_finite() && self.eps_grad > 0.0,
            "eps_grad must be positive",
        )?;
        check(
            self.oversample_ratio.is_finite() && self.oversample_ratio >= 1.0,
            "oversample_ratio must be at least 1",
        )?;
        check(self.pull_iterations >= 1, "pull_iterations must be positive")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn dump_parse_round_trip() {
        let mut config = RunConfig::default();
        config.patch_size = 64;
        config.k_neighbors = 8;
        config.ldi_sigma = 0.075;
        config.seed = 1234;
        config.augment_rotate = true;
        let round = RunConfig::parse(&config.dump()).unwrap();
        assert_eq!(config, round);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "\n# a comment\npatch_size=32  # trailing comment\n\nk_neighbors=4\n";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.patch_size, 32);
        assert_eq!(config.k_neighbors, 4);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("patch_sizes=32\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(RunConfig::parse("k_neighbors=300\n").is_err()); // >= patch_size
        assert!(RunConfig::parse("oversample_ratio=0.5\n").is_err());
        assert!(RunConfig::parse("sigma_fraction=-0.1\n").is_err());
        assert!(RunConfig::parse("patch_size=abc\n").is_err());
    }
}
