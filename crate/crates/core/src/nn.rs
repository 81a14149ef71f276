//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Everything is batched: a batch is an `Array2` with one sample per row.
//! Layer `k` computes `a_k = act(a_{k-1} · W_kᵀ + b_k)` with `W_k` stored as
//! `fan_out × fan_in`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Linear => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v }),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Linear => {}
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// layer output `a`.
    fn backprop(self, grad: &mut Array2<f64>, a: &Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(a).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Sigmoid => Zip::from(grad).and(a).for_each(|g, &a| *g *= a * (1.0 - a)),
            Activation::Linear => {}
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            fan_in,
            fan_out,
            activation,
        }
    }
}

/// Builds a chain `widths[0] → widths[1] → …` with ReLU everywhere except
/// the last layer.
pub fn chain(widths: &[usize], output: Activation) -> Vec<LayerSpec> {
    let n = widths.len().saturating_sub(1);
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 1 == n { output } else { Activation::Relu };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub activation: Activation,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.weights.ncols(), self.weights.nrows(), self.activation)
    }
}

/// Weights and biases for a chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and outputs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch, `activations[k]` the output of
    /// layer `k - 1`.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input at least")
    }
}

/// Gradients congruent with [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &NetParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// He-uniform for ReLU layers, Glorot-uniform otherwise; zero biases.
pub fn init_params(specs: &[LayerSpec], rng_seed: u64) -> Result<NetParams> {
    validate_chain(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let layers = specs
        .iter()
        .map(|spec| {
            let bound = match spec.activation {
                Activation::Relu => (6.0 / spec.fan_in as f64).sqrt(),
                _ => (6.0 / (spec.fan_in + spec.fan_out) as f64).sqrt(),
            };
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
            let weights =
                Array2::from_shape_simple_fn((spec.fan_out, spec.fan_in), || dist.sample(&mut rng));
            Layer {
                activation: spec.activation,
                weights,
                bias: Array1::zeros(spec.fan_out),
            }
        })
        .collect();
    Ok(NetParams { layers })
}

fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::shape("empty layer chain"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.fan_in == 0 || s.fan_out == 0 {
            return Err(Error::shape(format!("layer {i} has a zero-width side")));
        }
    }
    for (i, w) in specs.windows(2).enumerate() {
        if w[0].fan_out != w[1].fan_in {
            return Err(Error::shape(format!(
                "layer {i} emits {} values but layer {} expects {}",
                w[0].fan_out,
                i + 1,
                w[1].fan_in
            )));
        }
    }
    Ok(())
}

impl NetParams {
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Batched forward pass keeping what [`NetParams::backward`] needs.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.layers {
            let prev = activations.last().expect("non-empty");
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            layer.activation.apply(&mut z);
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Output only, for inference.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut a = x.to_owned();
        for layer in &self.layers {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            layer.activation.apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    /// Single-vector convenience wrapper around [`NetParams::predict`].
    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Reverse pass. `d_out` is the loss gradient with respect to the
    /// network output, one row per sample; gradients are summed over rows.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let d_in = self.backward_into(cache, d_out, true, true, &mut grads)?;
        Ok((grads, d_in.expect("input gradient requested")))
    }

    /// Reverse pass seeded with the gradient at the last layer's
    /// pre-activation, bypassing the output nonlinearity.
    pub fn backward_logits(
        &self,
        cache: &ForwardCache,
        d_logits: ArrayView2<'_, f64>,
        want_input: bool,
    ) -> Result<(Gradients, Option<Array2<f64>>)> {
        let mut grads = Gradients::zeros_like(self);
        let d_in = self.backward_into(cache, d_logits, false, want_input, &mut grads)?;
        Ok((grads, d_in))
    }

    /// Like [`NetParams::backward`] but skips the input gradient.
    pub fn backward_params(
        &self,
        cache: &ForwardCache,
        d_out: ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, d_out, true, false, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass writing parameter gradients into `grads`, whose previous
    /// contents are overwritten. With `through_output` false, `d_out` is taken
    /// at the last pre-activation.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        d_out: ArrayView2<'_, f64>,
        through_output: bool,
        want_input: bool,
        grads: &mut Gradients,
    ) -> Result<Option<Array2<f64>>> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::shape("forward cache does not match this network"));
        }
        let out = cache.output();
        if d_out.dim() != out.dim() {
            return Err(Error::shape(format!(
                "output gradient is {:?}, network output is {:?}",
                d_out.dim(),
                out.dim()
            )));
        }
        let matches = grads.weights.len() == self.layers.len()
            && grads.biases.len() == self.layers.len()
            && self.layers.iter().enumerate().all(|(k, l)| {
                grads.weights[k].dim() == l.weights.dim() && grads.biases[k].len() == l.bias.len()
            });
        if !matches {
            return Err(Error::shape("gradient buffers do not match the network"));
        }
        let n = self.layers.len();
        let mut grad = d_out.to_owned();
        let mut d_input = None;
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            if through_output || k + 1 < n {
                layer.activation.backprop(&mut grad, &cache.activations[k + 1]);
            }
            let a_prev = &cache.activations[k];
            general_mat_mul(1.0, &grad.t(), a_prev, 0.0, &mut grads.weights[k]);
            grads.biases[k].assign(&grad.sum_axis(Axis(0)));
            if k > 0 {
                grad = grad.dot(&layer.weights);
            } else if want_input {
                d_input = Some(grad.dot(&layer.weights));
            }
        }
        Ok(d_input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl AdamState {
    pub fn new(params: &NetParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut NetParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.weights.len() != params.layers.len() || state.m.weights.len() != params.layers.len() {
        return Err(Error::shape("gradients or optimizer state do not match the network"));
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    };
    for (k, layer) in params.layers.iter_mut().enumerate() {
        if layer.weights.dim() != grads.weights[k].dim() || layer.bias.dim() != grads.biases[k].dim() {
            return Err(Error::shape(format!("gradient shape mismatch at layer {k}")));
        }
        Zip::from(&mut layer.weights)
            .and(&grads.weights[k])
            .and(&mut state.m.weights[k])
            .and(&mut state.v.weights[k])
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(&grads.biases[k])
            .and(&mut state.m.biases[k])
            .and(&mut state.v.biases[k])
            .for_each(update);
    }
    Ok(())
}

/// Network checkpoint: layer specs, parameters, optional optimizer state,
/// and the seed the network was initialized from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub params: NetParams,
    pub optimizer: Option<AdamState>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"IMGIVNET";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn write_f64s<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        out.write_f64::<LittleEndian>(*v).expect("vec write");
    }
}

fn write_grads(out: &mut Vec<u8>, g: &Gradients) {
    for (w, b) in g.weights.iter().zip(&g.biases) {
        write_f64s(out, w.iter());
        write_f64s(out, b.iter());
    }
}

impl Checkpoint {
    /// Serializes to `magic | version | body | sha256(magic..body)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(self.seed).expect("vec write");
        let specs = self.params.specs();
        out.write_u32::<LittleEndian>(specs.len() as u32).expect("vec write");
        for s in &specs {
            out.write_u32::<LittleEndian>(s.fan_in as u32).expect("vec write");
            out.write_u32::<LittleEndian>(s.fan_out as u32).expect("vec write");
            out.write_u8(s.activation.code()).expect("vec write");
        }
        for layer in &self.params.layers {
            write_f64s(&mut out, layer.weights.iter());
            write_f64s(&mut out, layer.bias.iter());
        }
        match &self.optimizer {
            None => out.write_u8(0).expect("vec write"),
            Some(state) => {
                out.write_u8(1).expect("vec write");
                let c = state.config;
                for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
                    out.write_f64::<LittleEndian>(v).expect("vec write");
                }
                out.write_u64::<LittleEndian>(state.step).expect("vec write");
                write_grads(&mut out, &state.m);
                write_grads(&mut out, &state.v);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(corrupt("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let mut r = &body[12..];
        let io = |e: std::io::Error| corrupt(&e.to_string());
        let seed = r.read_u64::<LittleEndian>().map_err(io)?;
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut specs = Vec::with_capacity(n);
        for _ in 0..n {
            let fan_in = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let fan_out = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let act = Activation::from_code(r.read_u8().map_err(io)?)
                .ok_or_else(|| corrupt("unknown activation code"))?;
            specs.push(LayerSpec::new(fan_in, fan_out, act));
        }
        validate_chain(&specs).map_err(|e| corrupt(&e.to_string()))?;

        fn read_matrix(r: &mut &[u8], rows: usize, cols: usize) -> std::io::Result<Array2<f64>> {
            let mut data = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            Ok(Array2::from_shape_vec((rows, cols), data).expect("sized above"))
        }
        fn read_vector(r: &mut &[u8], len: usize) -> std::io::Result<Array1<f64>> {
            let mut data = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            Ok(Array1::from(data))
        }
        fn read_grads(r: &mut &[u8], specs: &[LayerSpec]) -> std::io::Result<Gradients> {
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for s in specs {
                weights.push(read_matrix(r, s.fan_out, s.fan_in)?);
                biases.push(read_vector(r, s.fan_out)?);
            }
            Ok(Gradients { weights, biases })
        }

        let mut layers = Vec::with_capacity(n);
        for s in &specs {
            let weights = read_matrix(&mut r, s.fan_out, s.fan_in).map_err(io)?;
            let bias = read_vector(&mut r, s.fan_out).map_err(io)?;
            layers.push(Layer {
                activation: s.activation,
                weights,
                bias,
            });
        }
        let params = NetParams { layers };
        let optimizer = match r.read_u8().map_err(io)? {
            0 => None,
            1 => {
                let mut hyper = [0.0; 4];
                r.read_f64_into::<LittleEndian>(&mut hyper).map_err(io)?;
                let step = r.read_u64::<LittleEndian>().map_err(io)?;
                let m = read_grads(&mut r, &specs).map_err(io)?;
                let v = read_grads(&mut r, &specs).map_err(io)?;
                Some(AdamState {
                    config: AdamConfig {
                        learning_rate: hyper[0],
                        beta1: hyper[1],
                        beta2: hyper[2],
                        epsilon: hyper[3],
                    },
                    step,
                    m,
                    v,
                })
            }
            _ => return Err(corrupt("bad optimizer flag")),
        };
        if !r.is_empty() {
            return Err(corrupt("trailing bytes after checkpoint body"));
        }
        Ok(Checkpoint {
            seed,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
