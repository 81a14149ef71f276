//! Variational autoencoders on top of [`crate::nn`].
//!
//! The encoder emits `2·latent_dim` values per sample, means first and
//! log-variances second. Inference paths (`encode`, `decode`, `autoencode`)
//! only ever use the means, so they are deterministic.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, AdamConfig, AdamState, NetParams};

const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    /// Binary cross-entropy against a sigmoid output.
    Bce,
    /// Squared error against a linear output.
    Mse,
}

impl ReconLoss {
    fn output_activation(self) -> Activation {
        match self {
            ReconLoss::Bce => Activation::Sigmoid,
            ReconLoss::Mse => Activation::Linear,
        }
    }
}

/// Layer widths for an encoder/decoder pair. The decoder mirrors `hidden`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub recon_loss: ReconLoss,
}

impl VaeArch {
    /// 6400 → 1024 → 256 → 30, sigmoid output, BCE.
    pub fn image() -> Self {
        Self {
            input_dim: crate::render::IMAGE_PIXELS,
            hidden: vec![1024, 256],
            latent_dim: 30,
            recon_loss: ReconLoss::Bce,
        }
    }

    /// 51 → 64 → 32 → 10, linear output, MSE.
    pub fn curve() -> Self {
        Self {
            input_dim: crate::device::CURVE_POINTS,
            hidden: vec![64, 32],
            latent_dim: 10,
            recon_loss: ReconLoss::Mse,
        }
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(2 * self.latent_dim);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(self.hidden.iter().rev());
        w.push(self.input_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: NetParams,
    pub decoder: NetParams,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub recon_loss: ReconLoss,
}

impl VaeModel {
    /// Fresh model; the decoder is seeded from `seed + 1`.
    pub fn new(arch: &VaeArch, seed: u64) -> Result<Self> {
        if arch.latent_dim == 0 || arch.input_dim == 0 {
            return Err(Error::shape("VAE needs non-zero input and latent widths"));
        }
        let encoder = nn::init_params(&nn::chain(&arch.encoder_widths(), Activation::Linear), seed)?;
        let decoder = nn::init_params(
            &nn::chain(&arch.decoder_widths(), arch.recon_loss.output_activation()),
            seed.wrapping_add(1),
        )?;
        Ok(Self {
            encoder,
            decoder,
            latent_dim: arch.latent_dim,
            input_dim: arch.input_dim,
            recon_loss: arch.recon_loss,
        })
    }

    /// Reassembles a model from stored networks, checking that they fit.
    pub fn from_parts(encoder: NetParams, decoder: NetParams, recon_loss: ReconLoss) -> Result<Self> {
        let latent_dim = decoder.input_dim();
        let input_dim = encoder.input_dim();
        if encoder.output_dim() != 2 * latent_dim || decoder.output_dim() != input_dim {
            return Err(Error::shape(format!(
                "encoder {}→{} does not pair with decoder {}→{}",
                input_dim,
                encoder.output_dim(),
                latent_dim,
                decoder.output_dim()
            )));
        }
        let out_act = decoder.layers.last().expect("validated non-empty").activation;
        if out_act != recon_loss.output_activation() {
            return Err(Error::shape(format!(
                "{recon_loss:?} reconstruction needs a {:?} output, decoder has {out_act:?}",
                recon_loss.output_activation()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            input_dim,
            recon_loss,
        })
    }

    /// Batched `(μ, logvar)`.
    pub fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let h = self.encoder.predict(x)?;
        let l = self.latent_dim;
        Ok((h.slice(s![.., ..l]).to_owned(), h.slice(s![.., l..]).to_owned()))
    }

    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mu, logvar) = self.encode_batch(row(x)?)?;
        Ok((mu.into_raw_vec_and_offset().0, logvar.into_raw_vec_and_offset().0))
    }

    pub fn decode_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.decoder.predict(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.predict_one(z)
    }

    /// `k` rounds of `decode(μ(·))`; `k = 0` returns the input.
    pub fn autoencode_batch(&self, x: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "input has {} features, VAE expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        let mut cur = x.to_owned();
        for _ in 0..k {
            let (mu, _) = self.encode_batch(cur.view())?;
            cur = self.decode_batch(mu.view())?;
        }
        Ok(cur)
    }

    pub fn autoencode(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        Ok(self.autoencode_batch(row(x)?, k)?.into_raw_vec_and_offset().0)
    }
}

fn row(x: &[f64]) -> Result<ArrayView2<'_, f64>> {
    ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))
}

/// `z = μ + exp(logvar/2)·ε` with `ε` drawn from a generator seeded by `rng_seed`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], rng_seed: u64) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() {
        return Err(Error::shape("mu and logvar lengths differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            m + (0.5 * lv).exp() * eps
        })
        .collect())
}

/// KL divergence of `N(μ, diag(exp logvar))` from the standard normal.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

pub fn recon_loss(kind: ReconLoss, x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(format!(
            "target has {} values, reconstruction {}",
            x.len(),
            x_hat.len()
        )));
    }
    match kind {
        ReconLoss::Mse => Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum()),
        ReconLoss::Bce => {
            let outside = |v: &f64| !(0.0..=1.0).contains(v);
            if x.iter().chain(x_hat).any(outside) {
                return Err(Error::DomainError(
                    "binary cross-entropy needs values in [0, 1]".into(),
                ));
            }
            Ok(x
                .iter()
                .zip(x_hat)
                .map(|(&t, &p)| bce_term(t, p))
                .sum())
        }
    }
}

fn bce_term(t: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of all optimizer steps over which β ramps up from 0.
    pub kl_warmup_fraction: f64,
    /// β after warmup.
    pub kl_weight: f64,
    pub rng_seed: u64,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            kl_warmup_fraction: 0.2,
            kl_weight: 1.0,
            rng_seed: 0,
            learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return Err(Error::Config("kl_warmup_fraction must lie in [0, 1]".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config("kl_weight must be finite and non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn beta(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.kl_warmup_fraction * total_steps as f64;
        if warmup <= 0.0 {
            self.kl_weight
        } else {
            self.kl_weight * (step as f64 / warmup).min(1.0)
        }
    }
}

/// Per-sample means over one epoch; `beta` is the KL weight at its first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub beta: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Loss pieces and gradients for one batch.
pub struct BatchGrads {
    pub recon: f64,
    pub kl: f64,
    pub encoder: nn::Gradients,
    pub decoder: nn::Gradients,
}

impl BatchGrads {
    pub fn zeros_like(model: &VaeModel) -> Self {
        Self {
            recon: 0.0,
            kl: 0.0,
            encoder: nn::Gradients::zeros_like(&model.encoder),
            decoder: nn::Gradients::zeros_like(&model.decoder),
        }
    }
}

/// Mean loss `recon + β·KL` over the rows of `x`, with the reparameterization
/// noise `eps` supplied by the caller, and its exact gradients.
pub fn batch_gradients(
    model: &VaeModel,
    x: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
    beta: f64,
) -> Result<BatchGrads> {
    let mut out = BatchGrads::zeros_like(model);
    batch_gradients_into(model, x, eps, beta, &mut out)?;
    Ok(out)
}

/// [`batch_gradients`] writing into reusable buffers.
pub fn batch_gradients_into(
    model: &VaeModel,
    x: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
    beta: f64,
    out: &mut BatchGrads,
) -> Result<()> {
    let b = x.nrows();
    let l = model.latent_dim;
    if eps.dim() != (b, l) {
        return Err(Error::shape("noise matrix does not match batch and latent sizes"));
    }
    if model.recon_loss == ReconLoss::Bce && x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::DomainError(
            "binary cross-entropy needs inputs in [0, 1]".into(),
        ));
    }
    let enc_cache = model.encoder.forward(x)?;
    let h = enc_cache.output();
    let mu = h.slice(s![.., ..l]);
    let logvar = h.slice(s![.., l..]);
    let sigma = logvar.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&sigma * &eps);

    let dec_cache = model.decoder.forward(z.view())?;
    let x_hat = dec_cache.output();
    let scale = 1.0 / b as f64;

    let (recon, d_out) = match model.recon_loss {
        ReconLoss::Mse => {
            let diff = x_hat - &x;
            (diff.iter().map(|d| d * d).sum::<f64>(), diff * (2.0 * scale))
        }
        ReconLoss::Bce => {
            let mut total = 0.0;
            Zip::from(&x).and(x_hat).for_each(|&t, &p| total += bce_term(t, p));
            // Gradient at the logits of a sigmoid/BCE pair.
            (total, (x_hat - &x) * scale)
        }
    };
    let through_output = model.recon_loss == ReconLoss::Mse;
    let dz = model
        .decoder
        .backward_into(&dec_cache, d_out.view(), through_output, true, &mut out.decoder)?
        .expect("input gradient requested");

    let mut kl = 0.0;
    let mut d_h = Array2::zeros((b, 2 * l));
    for i in 0..b {
        for j in 0..l {
            let m = mu[[i, j]];
            let lv = logvar[[i, j]];
            let var = lv.exp();
            kl += -0.5 * (1.0 + lv - m * m - var);
            d_h[[i, j]] = dz[[i, j]] + beta * scale * m;
            d_h[[i, l + j]] =
                dz[[i, j]] * eps[[i, j]] * 0.5 * sigma[[i, j]] + beta * scale * 0.5 * (var - 1.0);
        }
    }
    model
        .encoder
        .backward_into(&enc_cache, d_h.view(), true, false, &mut out.encoder)?;
    out.recon = recon * scale;
    out.kl = kl * scale;
    Ok(())
}

/// Adam moments for both halves of a VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeOptimizer {
    pub encoder: AdamState,
    pub decoder: AdamState,
}

#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub model: VaeModel,
    /// One entry per epoch.
    pub trace: Vec<EpochStats>,
    pub optimizer: VaeOptimizer,
}

/// Minibatch Adam on `recon + β·KL`. Shuffling and reparameterization noise
/// come from `cfg.rng_seed`.
pub fn train(model: &VaeModel, data: ArrayView2<'_, f64>, cfg: &TrainConfig) -> Result<TrainedVae> {
    train_with_progress(model, data, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(
    model: &VaeModel,
    data: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedVae> {
    cfg.validate()?;
    let n = data.nrows();
    if n == 0 {
        return Err(Error::DegenerateData("no training samples".into()));
    }
    if data.ncols() != model.input_dim {
        return Err(Error::shape(format!(
            "training data has {} features, VAE expects {}",
            data.ncols(),
            model.input_dim
        )));
    }
    let mut model = model.clone();
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut enc_state = AdamState::new(&model.encoder, adam);
    let mut dec_state = AdamState::new(&model.decoder, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let batches = n.div_ceil(cfg.batch_size);
    let total_steps = batches * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut g = BatchGrads::zeros_like(&model);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut recon_sum, mut kl_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let epoch_beta = cfg.beta(step, total_steps);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let beta = cfg.beta(step, total_steps);
            let batch = data.select(Axis(0), idx);
            let eps = Array2::from_shape_simple_fn((idx.len(), model.latent_dim), || {
                StandardNormal.sample(&mut rng)
            });
            batch_gradients_into(&model, batch.view(), eps.view(), beta, &mut g)?;
            let total = g.recon + beta * g.kl;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("recon {} kl {} beta {beta}", g.recon, g.kl),
                });
            }
            nn::adam_step(&mut model.encoder, &g.encoder, &mut enc_state)?;
            nn::adam_step(&mut model.decoder, &g.decoder, &mut dec_state)?;
            let w = idx.len() as f64;
            recon_sum += g.recon * w;
            kl_sum += g.kl * w;
            total_sum += total * w;
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            beta: epoch_beta,
            recon: recon_sum / n as f64,
            kl: kl_sum / n as f64,
            total: total_sum / n as f64,
        };
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok(TrainedVae {
        model,
        trace,
        optimizer: VaeOptimizer {
            encoder: enc_state,
            decoder: dec_state,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(recon: ReconLoss, input: usize, latent: usize, seed: u64) -> VaeModel {
        VaeModel::new(
            &VaeArch {
                input_dim: input,
                hidden: vec![6],
                latent_dim: latent,
                recon_loss: recon,
            },
            seed,
        )
        .unwrap()
    }

    fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&[0.0], &[0.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        let ln4 = 4f64.ln();
        assert!((kl_divergence(&[0.0], &[ln4]) - (-0.5 * (1.0 + ln4 - 4.0))).abs() < 1e-12);
        assert!((kl_divergence(&[0.0], &[ln4]) - 0.807).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(pairs in prop::collection::vec((-5.0f64..5.0, -8.0f64..4.0), 1..12)) {
            let (mu, lv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(kl_divergence(&mu, &lv) >= 0.0);
        }

        #[test]
        fn kl_vanishes_only_at_prior(m in -3.0f64..3.0, lv in -3.0f64..3.0) {
            prop_assume!(m.abs() > 1e-3 || lv.abs() > 1e-3);
            prop_assert!(kl_divergence(&[m], &[lv]) > 0.0);
        }
    }

    #[test]
    fn bce_and_mse_closed_forms() {
        let v = recon_loss(ReconLoss::Bce, &[1.0], &[0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert_eq!(recon_loss(ReconLoss::Mse, &[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert!(matches!(
            recon_loss(ReconLoss::Bce, &[1.2], &[0.5]),
            Err(Error::DomainError(_))
        ));
        assert!(recon_loss(ReconLoss::Bce, &[1.0], &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn bce_is_minimized_at_target() {
        let t = 0.37;
        let best = (1..1000)
            .map(|i| i as f64 / 1000.0)
            .min_by(|a, b| {
                let la = recon_loss(ReconLoss::Bce, &[t], &[*a]).unwrap();
                let lb = recon_loss(ReconLoss::Bce, &[t], &[*b]).unwrap();
                la.total_cmp(&lb)
            })
            .unwrap();
        assert!((best - t).abs() < 1e-9);
    }

    #[test]
    fn reparameterize_limits_and_moments() {
        let z = reparameterize(&[0.7, -2.0], &[-50.0, -50.0], 3).unwrap();
        assert!((z[0] - 0.7).abs() < 1e-10 && (z[1] + 2.0).abs() < 1e-10);
        assert_eq!(
            reparameterize(&[0.1], &[0.2], 9).unwrap(),
            reparameterize(&[0.1], &[0.2], 9).unwrap()
        );
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|s| reparameterize(&[0.0], &[0.0], s).unwrap()[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn zero_encoder_gives_zero_heads() {
        let mut m = tiny(ReconLoss::Mse, 5, 2, 0);
        for layer in &mut m.encoder.layers {
            layer.weights.fill(0.0);
        }
        let (mu, lv) = m.encode(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(mu, vec![0.0; 2]);
        assert_eq!(lv, vec![0.0; 2]);
    }

    #[test]
    fn autoencode_identity_and_composition() {
        let m = tiny(ReconLoss::Mse, 5, 2, 1);
        let x = [0.1, -0.4, 0.3, 0.0, 1.0];
        assert_eq!(m.autoencode(&x, 0).unwrap(), x.to_vec());
        let four = m.autoencode(&x, 4).unwrap();
        let three_then_one = m.autoencode(&m.autoencode(&x, 3).unwrap(), 1).unwrap();
        assert_eq!(four, three_then_one);
        assert_eq!(m.autoencode(&x, 2).unwrap(), m.autoencode(&x, 2).unwrap());
        assert!(m.autoencode(&x[..4], 1).is_err());
    }

    fn total_loss(m: &VaeModel, x: &Array2<f64>, eps: &Array2<f64>, beta: f64) -> f64 {
        let (mu, lv) = {
            let h = m.encoder.predict(x.view()).unwrap();
            let l = m.latent_dim;
            (h.slice(s![.., ..l]).to_owned(), h.slice(s![.., l..]).to_owned())
        };
        let z = &mu + &(lv.mapv(|v| (0.5 * v).exp()) * eps);
        let x_hat = m.decoder.predict(z.view()).unwrap();
        let b = x.nrows() as f64;
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let xi = x.row(i).to_vec();
            let xh = x_hat.row(i).to_vec();
            total += recon_loss(m.recon_loss, &xi, &xh).unwrap();
            total += beta * kl_divergence(&mu.row(i).to_vec(), &lv.row(i).to_vec());
        }
        total / b
    }

    /// Central differences through encoder, reparameterization (frozen ε)
    /// and decoder, for every parameter of a VAE with input 8, latent 2.
    fn vae_gradient_check(recon: ReconLoss, seed: u64) {
        let m = tiny(recon, 8, 2, seed);
        let x = uniform(3, 8, 0.05, 0.95, seed + 10);
        let eps = uniform(3, 2, -1.5, 1.5, seed + 20);
        let beta = 0.7;
        let g = batch_gradients(&m, x.view(), eps.view(), beta).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64, what: String| {
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / scale < 1e-4,
                "{recon:?} {what}: analytic {analytic} numeric {numeric}"
            );
        };
        for (net, grads, name) in [(0, &g.encoder, "enc"), (1, &g.decoder, "dec")] {
            let layers = if net == 0 { &m.encoder.layers } else { &m.decoder.layers };
            for k in 0..layers.len() {
                let (rows, cols) = layers[k].weights.dim();
                for i in 0..rows {
                    for j in 0..=cols {
                        let bump = |delta: f64| {
                            let mut p = m.clone();
                            let net_p = if net == 0 { &mut p.encoder } else { &mut p.decoder };
                            if j == cols {
                                net_p.layers[k].bias[i] += delta;
                            } else {
                                net_p.layers[k].weights[[i, j]] += delta;
                            }
                            total_loss(&p, &x, &eps, beta)
                        };
                        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                        let analytic = if j == cols {
                            grads.biases[k][i]
                        } else {
                            grads.weights[k][[i, j]]
                        };
                        check(analytic, numeric, format!("{name}{k}[{i},{j}]"));
                    }
                }
            }
        }
    }

    #[test]
    fn vae_gradients_match_finite_differences() {
        vae_gradient_check(ReconLoss::Mse, 3);
        vae_gradient_check(ReconLoss::Bce, 4);
    }

    #[test]
    fn batch_loss_matches_reference() {
        let m = tiny(ReconLoss::Bce, 8, 2, 5);
        let x = uniform(4, 8, 0.0, 1.0, 6);
        let eps = uniform(4, 2, -1.0, 1.0, 7);
        let g = batch_gradients(&m, x.view(), eps.view(), 0.3).unwrap();
        let reference = total_loss(&m, &x, &eps, 0.3);
        assert!((g.recon + 0.3 * g.kl - reference).abs() < 1e-12);
    }

    fn toy_images(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 16));
        for mut r in x.rows_mut() {
            let on: usize = rng.random_range(2..14);
            for (j, v) in r.iter_mut().enumerate() {
                *v = if j < on { 0.9 } else { 0.1 };
            }
        }
        x
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let data = toy_images(200, 1);
        let m = tiny(ReconLoss::Bce, 16, 2, 2);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 32,
            rng_seed: 3,
            ..TrainConfig::default()
        };
        let first = train(&m, data.view(), &cfg).unwrap();
        let trace = &first.trace;
        assert_eq!(trace.len(), 50);
        assert!(trace[49].total < trace[0].total);
        let again = train(&m, data.view(), &cfg).unwrap();
        assert_eq!(&again.trace, trace);
        assert_eq!(again.model, first.model);
        assert_eq!(again.optimizer, first.optimizer);
        assert_eq!(first.optimizer.encoder.step, 50 * 7);
        assert!(trace.iter().all(|t| t.beta <= 1.0));
        assert_eq!(trace[0].beta, 0.0);
        assert_eq!(trace[49].beta, 1.0);
    }

    #[test]
    fn capacity_without_kl() {
        let data = uniform(20, 3, -1.0, 1.0, 8);
        let m = VaeModel::new(
            &VaeArch {
                input_dim: 3,
                hidden: vec![32],
                latent_dim: 4,
                recon_loss: ReconLoss::Mse,
            },
            4,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3000,
            batch_size: 20,
            kl_weight: 0.0,
            rng_seed: 5,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let trained = train(&m, data.view(), &cfg).unwrap().model;
        let recon = trained.autoencode_batch(data.view(), 1).unwrap();
        let mse = (&recon - &data).mapv(|v| v * v).sum() / data.len() as f64;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn training_rejects_bad_input() {
        let m = tiny(ReconLoss::Bce, 4, 2, 0);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&m, Array2::zeros((3, 5)).view(), &cfg),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            train(&m, Array2::from_elem((3, 4), 2.0).view(), &cfg),
            Err(Error::DomainError(_))
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..cfg.clone()
        };
        assert!(train(&m, Array2::zeros((3, 4)).view(), &bad).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = tiny(ReconLoss::Mse, 4, 2, 0);
        m.encoder.layers[0].weights[[0, 0]] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&m, Array2::ones((3, 4)).view(), &cfg),
            Err(Error::NonFiniteLoss { epoch: 0, batch: 0, .. })
        ));
    }

    #[test]
    fn from_parts_checks_pairing() {
        let m = tiny(ReconLoss::Mse, 5, 2, 0);
        let back = VaeModel::from_parts(m.encoder.clone(), m.decoder.clone(), ReconLoss::Mse).unwrap();
        assert_eq!(back, m);
        assert!(VaeModel::from_parts(m.encoder.clone(), m.decoder.clone(), ReconLoss::Bce).is_err());
        let other = tiny(ReconLoss::Mse, 6, 2, 0);
        assert!(VaeModel::from_parts(m.encoder, other.decoder, ReconLoss::Mse).is_err());
    }
}
