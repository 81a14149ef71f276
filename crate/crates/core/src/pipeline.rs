//! Inverse design (curve → structure) and forward prediction
//! (structure → curve) through the trained VAE pair and bridges.

use ndarray::{Array2, ArrayView2};

use crate::bridge::{self, PolyBridge};
use crate::config::{PassCounts, RunConfig, SeedStream};
use crate::device::{denormalize_curve, normalize_curve, IvCurve, CURVE_POINTS};
use crate::error::{Error, Result};
use crate::render::{extract_params, quantize_decoded, DeviceImage, IMAGE_PIXELS};
use crate::vae::{self, EpochStats, ReconLoss, VaeModel, VaeOptimizer};
use crate::DeviceParams;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedStack {
    pub image_vae: VaeModel,
    pub curve_vae: VaeModel,
    /// Image latent → curve latent.
    pub fwd_bridge: PolyBridge,
    /// Curve latent → image latent.
    pub inv_bridge: PolyBridge,
    pub passes: PassCounts,
    /// Optimizer moments from training, kept so checkpoints can resume.
    pub image_optimizer: Option<VaeOptimizer>,
    pub curve_optimizer: Option<VaeOptimizer>,
}

/// Inverse-design output. The image is the result; the parameters read
/// back from it are a convenience and absent when extraction fails.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub image: DeviceImage,
    pub params: Option<DeviceParams>,
}

impl TrainedStack {
    pub fn validate(&self) -> Result<()> {
        let (img, crv) = (&self.image_vae, &self.curve_vae);
        if img.input_dim != IMAGE_PIXELS || img.recon_loss != ReconLoss::Bce {
            return Err(Error::shape("image VAE must take 6400 pixels with a BCE decoder"));
        }
        if crv.input_dim != CURVE_POINTS || crv.recon_loss != ReconLoss::Mse {
            return Err(Error::shape("curve VAE must take 51 points with an MSE decoder"));
        }
        let dims = |b: &PolyBridge| (b.in_dim, b.out_dim);
        if dims(&self.fwd_bridge) != (img.latent_dim, crv.latent_dim)
            || dims(&self.inv_bridge) != (crv.latent_dim, img.latent_dim)
        {
            return Err(Error::shape("bridge dimensions do not match the VAE latents"));
        }
        self.fwd_bridge.validate()?;
        self.inv_bridge.validate()
    }

    /// Normalized curve rows → image rows in [0, 1], before quantization.
    pub fn inverse_raw(&self, curves: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let cleaned = self.curve_vae.autoencode_batch(curves, self.passes.curve_pre)?;
        let (curve_mu, _) = self.curve_vae.encode_batch(cleaned.view())?;
        let image_mu = self.inv_bridge.predict_batch(curve_mu.view())?;
        let decoded = self.image_vae.decode_batch(image_mu.view())?;
        self.image_vae.autoencode_batch(decoded.view(), self.passes.image_post)
    }

    pub fn inverse_design(&self, target: &IvCurve) -> Result<DeviceImage> {
        let x = normalize_curve(target);
        let raw = self.inverse_raw(row(&x))?;
        quantize_decoded(raw.as_slice().expect("standard layout"))
    }

    pub fn inverse_design_with_params(&self, target: &IvCurve) -> Result<Design> {
        let image = self.inverse_design(target)?;
        let params = extract_params(&image).ok();
        Ok(Design { image, params })
    }

    /// Image rows in [0, 1] → normalized curve rows.
    pub fn forward_raw(&self, images: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let cleaned = self.image_vae.autoencode_batch(images, self.passes.image_pre)?;
        let (image_mu, _) = self.image_vae.encode_batch(cleaned.view())?;
        let curve_mu = self.fwd_bridge.predict_batch(image_mu.view())?;
        self.curve_vae.decode_batch(curve_mu.view())
    }

    pub fn forward_predict(&self, img: &DeviceImage) -> Result<IvCurve> {
        let x = img.to_unit();
        let raw = self.forward_raw(row(&x))?;
        denormalize_curve(raw.as_slice().expect("standard layout"))
    }

    pub fn forward_predict_batch(&self, imgs: &[DeviceImage]) -> Result<Vec<IvCurve>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let raw = self.forward_raw(image_matrix(imgs).view())?;
        raw.rows()
            .into_iter()
            .map(|r| denormalize_curve(&r.to_vec()))
            .collect()
    }
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("one row")
}

/// Stacks images as rows scaled to [0, 1].
pub fn image_matrix(imgs: &[DeviceImage]) -> Array2<f64> {
    let mut m = Array2::zeros((imgs.len(), IMAGE_PIXELS));
    for (mut r, img) in m.rows_mut().into_iter().zip(imgs) {
        for (d, &p) in r.iter_mut().zip(img.pixels()) {
            *d = f64::from(p) / 255.0;
        }
    }
    m
}

/// Stacks curves as normalized rows.
pub fn curve_matrix(curves: &[IvCurve]) -> Array2<f64> {
    let mut m = Array2::zeros((curves.len(), CURVE_POINTS));
    for (mut r, c) in m.rows_mut().into_iter().zip(curves) {
        for (d, v) in r.iter_mut().zip(normalize_curve(c)) {
            *d = v;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    ImageVae,
    CurveVae,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingTraces {
    pub image: Vec<EpochStats>,
    pub curve: Vec<EpochStats>,
}

/// Trains both VAEs on paired rows, then fits both bridges on latent means.
pub fn train_stack(
    cfg: &RunConfig,
    images: ArrayView2<'_, f64>,
    curves: ArrayView2<'_, f64>,
    mut on_epoch: impl FnMut(Component, &EpochStats),
) -> Result<(TrainedStack, TrainingTraces)> {
    if images.nrows() != curves.nrows() {
        return Err(Error::shape(format!(
            "{} images but {} curves",
            images.nrows(),
            curves.nrows()
        )));
    }
    let curve_seed = cfg.seed_for(SeedStream::CurveVae);
    let curve_init = VaeModel::new(&cfg.curve_vae.arch(CURVE_POINTS, ReconLoss::Mse), curve_seed)?;
    let curve = vae::train_with_progress(
        &curve_init,
        curves,
        &cfg.curve_vae.train_config(curve_seed),
        |s| on_epoch(Component::CurveVae, s),
    )?;

    let image_seed = cfg.seed_for(SeedStream::ImageVae);
    let image_init = VaeModel::new(&cfg.image_vae.arch(IMAGE_PIXELS, ReconLoss::Bce), image_seed)?;
    let image = vae::train_with_progress(
        &image_init,
        images,
        &cfg.image_vae.train_config(image_seed),
        |s| on_epoch(Component::ImageVae, s),
    )?;

    let (image_mu, _) = image.model.encode_batch(images)?;
    let (curve_mu, _) = curve.model.encode_batch(curves)?;
    let fwd_bridge = bridge::fit(image_mu.view(), curve_mu.view(), cfg.bridge.lambda)?;
    let inv_bridge = bridge::fit(curve_mu.view(), image_mu.view(), cfg.bridge.lambda)?;

    let stack = TrainedStack {
        image_vae: image.model,
        curve_vae: curve.model,
        fwd_bridge,
        inv_bridge,
        passes: cfg.passes,
        image_optimizer: Some(image.optimizer),
        curve_optimizer: Some(curve.optimizer),
    };
    Ok((
        stack,
        TrainingTraces {
            image: image.trace,
            curve: curve.trace,
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::device::simulate_iv;
    use crate::store::Dataset;

    /// A stack small enough to train in well under a second.
    pub(crate) fn tiny() -> (RunConfig, Dataset, TrainedStack) {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 11
            [dataset]
            n_train = 16
            n_test = 6
            [image_vae]
            hidden = [12]
            latent_dim = 3
            epochs = 2
            batch_size = 8
            [curve_vae]
            hidden = [8]
            latent_dim = 2
            epochs = 3
            batch_size = 8
            "#,
        )
        .unwrap();
        let data = Dataset::from_config(&cfg);
        let train = data.train_range();
        let images = data.image_matrix();
        let curves = data.curve_matrix();
        let rows = ndarray::s![train.start..train.end, ..];
        let (stack, _) = train_stack(&cfg, images.slice(rows), curves.slice(rows), |_, _| {}).unwrap();
        (cfg, data, stack)
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (cfg, data, a) = tiny();
        let (_, _, b) = tiny();
        assert_eq!(a, b);
        let target = &data.curves[data.test_range().start];
        assert_eq!(
            a.inverse_design(target).unwrap().pixels(),
            b.inverse_design(target).unwrap().pixels()
        );
        let img = &data.images[0];
        assert_eq!(a.forward_predict(img).unwrap(), b.forward_predict(img).unwrap());
        assert!(a.validate().is_ok());
        assert_eq!(a.passes, cfg.passes);
    }

    #[test]
    fn trace_callbacks_cover_both_models() {
        let (cfg, data, _) = tiny();
        let mut seen = Vec::new();
        let (_, traces) = train_stack(
            &cfg,
            data.image_matrix().view(),
            data.curve_matrix().view(),
            |c, s| seen.push((c, s.epoch)),
        )
        .unwrap();
        assert_eq!(traces.curve.len(), cfg.curve_vae.epochs);
        assert_eq!(traces.image.len(), cfg.image_vae.epochs);
        // Curve VAE trains first.
        assert_eq!(seen[0], (Component::CurveVae, 0));
        assert_eq!(seen.last(), Some(&(Component::ImageVae, cfg.image_vae.epochs - 1)));
    }

    #[test]
    fn batch_prediction_matches_single() {
        let (_, data, stack) = tiny();
        let batch = stack.forward_predict_batch(&data.images[..5]).unwrap();
        for (img, b) in data.images[..5].iter().zip(&batch) {
            let one = stack.forward_predict(img).unwrap();
            for (x, y) in one.log10().iter().zip(b.log10()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(stack.forward_predict_batch(&[]).unwrap().is_empty());
    }

    #[test]
    fn zero_passes_is_plain_composition() {
        let (_, data, mut stack) = tiny();
        stack.passes = PassCounts {
            curve_pre: 0,
            image_post: 0,
            image_pre: 0,
        };
        let x = curve_matrix(&data.curves[..3]);
        let (mu, _) = stack.curve_vae.encode_batch(x.view()).unwrap();
        let z = stack.inv_bridge.predict_batch(mu.view()).unwrap();
        let direct = stack.image_vae.decode_batch(z.view()).unwrap();
        assert_eq!(stack.inverse_raw(x.view()).unwrap(), direct);
    }

    #[test]
    fn design_is_the_rounded_raw_image() {
        let (_, _, stack) = tiny();
        let target = simulate_iv(&DeviceParams::new(100.0, 50.0, 50.0, 100.0, 150.0));
        let raw = stack.inverse_raw(row(&normalize_curve(&target))).unwrap();
        let design = stack.inverse_design_with_params(&target).unwrap();
        for (&p, &v) in design.image.pixels().iter().zip(raw.iter()) {
            assert_eq!(p, (v * 255.0).round() as u8);
        }
        assert_eq!(design.params.is_some(), extract_params(&design.image).is_ok());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (cfg, data, mut stack) = tiny();
        let images = data.image_matrix();
        let curves = data.curve_matrix();
        let short = curves.slice(ndarray::s![..3, ..]);
        assert!(matches!(
            train_stack(&cfg, images.view(), short, |_, _| {}),
            Err(Error::ShapeMismatch(_))
        ));
        std::mem::swap(&mut stack.fwd_bridge, &mut stack.inv_bridge);
        assert!(matches!(stack.validate(), Err(Error::ShapeMismatch(_))));
    }
}
