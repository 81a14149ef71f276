//! Declarative run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vae::{ReconLoss, TrainConfig, VaeArch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stochastic component derives its own seed from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub image_vae: VaeConfig,
    pub curve_vae: VaeConfig,
    pub bridge: BridgeConfig,
    pub passes: PassCounts,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_warmup_fraction: f64,
    pub kl_weight: f64,
}

impl VaeConfig {
    pub fn image() -> Self {
        let arch = VaeArch::image();
        Self {
            hidden: arch.hidden,
            latent_dim: arch.latent_dim,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            kl_warmup_fraction: 0.2,
            kl_weight: 1.0,
        }
    }

    pub fn curve() -> Self {
        let arch = VaeArch::curve();
        Self {
            hidden: arch.hidden,
            latent_dim: arch.latent_dim,
            epochs: 400,
            batch_size: 64,
            learning_rate: 1e-3,
            kl_warmup_fraction: 0.2,
            kl_weight: 1.0,
        }
    }

    pub fn arch(&self, input_dim: usize, recon_loss: ReconLoss) -> VaeArch {
        VaeArch {
            input_dim,
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
            recon_loss,
        }
    }

    pub fn train_config(&self, rng_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            kl_warmup_fraction: self.kl_warmup_fraction,
            kl_weight: self.kl_weight,
            rng_seed,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub lambda: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { lambda: 1e-3 }
    }
}

/// How many times inputs are passed through a VAE around the bridges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PassCounts {
    /// Curve-VAE passes on the target before the inverse bridge.
    pub curve_pre: usize,
    /// Image-VAE passes on the decoded image after the inverse bridge.
    pub image_post: usize,
    /// Image-VAE passes on the input image before the forward bridge.
    pub image_pre: usize,
}

impl Default for PassCounts {
    fn default() -> Self {
        Self {
            curve_pre: 2,
            image_post: 3,
            image_pre: 1,
        }
    }
}

impl std::str::FromStr for PassCounts {
    type Err = Error;

    /// Parses `a,b,c` as `curve_pre,image_post,image_pre`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("pass count `{v}` is not a non-negative integer")))
        };
        match parts.as_slice() {
            [a, b, c] => Ok(Self {
                curve_pre: parse(a)?,
                image_post: parse(b)?,
                image_pre: parse(c)?,
            }),
            _ => Err(Error::Config(format!(
                "expected three comma-separated pass counts, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Standard deviation of the curve noise, in decades.
    pub noise_sigma: f64,
    pub inverse_targets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.08,
            inverse_targets: 20,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            dataset: DatasetConfig::default(),
            image_vae: VaeConfig::image(),
            curve_vae: VaeConfig::curve(),
            bridge: BridgeConfig::default(),
            passes: PassCounts::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Streams that consume randomness, each with its own derived seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Dataset,
    ImageVae,
    CurveVae,
    HandDrawn,
    CurveNoise,
}

impl RunConfig {
    /// Parses a possibly partial file; missing keys at any depth keep their
    /// defaults and unknown keys are an error.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged: toml::Table = Self::default()
            .to_toml()
            .parse()
            .expect("default config parses");
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        match stream {
            SeedStream::Dataset => self.seed,
            other => {
                let tag = other as u64;
                self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return Err(Error::Config("dataset counts must be at least 1".into()));
        }
        for (name, v) in [("image_vae", &self.image_vae), ("curve_vae", &self.curve_vae)] {
            if v.latent_dim == 0 || v.hidden.contains(&0) {
                return Err(Error::Config(format!("{name} widths must be positive")));
            }
            if v.batch_size == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be at least 1")));
            }
            if !(0.0..=1.0).contains(&v.kl_warmup_fraction) {
                return Err(Error::Config(format!("{name}.kl_warmup_fraction must lie in [0, 1]")));
            }
            if !(v.kl_weight >= 0.0 && v.kl_weight.is_finite()) {
                return Err(Error::Config(format!("{name}.kl_weight must be non-negative")));
            }
            if !(v.learning_rate > 0.0 && v.learning_rate.is_finite()) {
                return Err(Error::Config(format!("{name}.learning_rate must be positive")));
            }
        }
        if !(self.bridge.lambda >= 0.0 && self.bridge.lambda.is_finite()) {
            return Err(Error::Config("bridge.lambda must be non-negative".into()));
        }
        if !(self.eval.noise_sigma >= 0.0 && self.eval.noise_sigma.is_finite()) {
            return Err(Error::Config("eval.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn defaults_match_design() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.image_vae.hidden, vec![1024, 256]);
        assert_eq!(cfg.image_vae.latent_dim, 30);
        assert_eq!(cfg.image_vae.epochs, 200);
        assert_eq!(cfg.curve_vae.hidden, vec![64, 32]);
        assert_eq!(cfg.curve_vae.latent_dim, 10);
        assert_eq!(cfg.curve_vae.epochs, 400);
        assert_eq!(cfg.passes, PassCounts::default());
        assert_eq!((cfg.dataset.n_train, cfg.dataset.n_test), (2000, 200));
        assert_eq!(cfg.bridge.lambda, 1e-3);
        for v in [&cfg.image_vae, &cfg.curve_vae] {
            assert_eq!((v.batch_size, v.learning_rate, v.kl_weight), (64, 1e-3, 1.0));
            assert_eq!(v.kl_warmup_fraction, 0.2);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[bridge]\nlamda = 0.1").is_err());
        assert!(RunConfig::from_toml("[image_vae]\nepoch = 3").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[dataset]\nn_train = 50\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.n_train, 50);
        assert_eq!(cfg.dataset.n_test, 200);
        assert_eq!(cfg.image_vae, VaeConfig::image());
        let cfg = RunConfig::from_toml("[curve_vae]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.curve_vae.epochs, 3);
        assert_eq!(cfg.curve_vae.kl_weight, 1.0);
    }

    #[test]
    fn pass_counts_parse() {
        let p: PassCounts = "2, 3,1".parse().unwrap();
        assert_eq!(p, PassCounts::default());
        assert!("1,2".parse::<PassCounts>().is_err());
        assert!("a,b,c".parse::<PassCounts>().is_err());
    }

    #[test]
    fn streams_get_distinct_seeds() {
        let cfg = RunConfig::default();
        let seeds = [
            SeedStream::Dataset,
            SeedStream::ImageVae,
            SeedStream::CurveVae,
            SeedStream::HandDrawn,
            SeedStream::CurveNoise,
        ]
        .map(|s| cfg.seed_for(s));
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[bridge]\nlambda = -1.0").is_err());
        assert!(RunConfig::from_toml("[dataset]\nn_test = 0").is_err());
    }
}
