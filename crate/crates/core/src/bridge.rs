//! Polynomial ridge regressors between latent spaces.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;

/// Monomial exponent tuples of total degree ≤ `degree` in graded-lex order,
/// each written as a non-decreasing list of variable indices.
pub fn monomials(in_dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            let start = m.last().copied().unwrap_or(0);
            for v in start..in_dim {
                let mut grown = m.clone();
                grown.push(v);
                next.push(grown);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// `C(in_dim + degree, degree)`.
pub fn feature_count(in_dim: usize, degree: usize) -> usize {
    (1..=degree).fold(1usize, |acc, k| acc * (in_dim + k) / k)
}

/// All monomials of total degree ≤ 3, constant first.
pub fn poly_features(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(feature_count(x.len(), DEGREE));
    expand_into(x, &mut out);
    out
}

fn expand_into(x: &[f64], out: &mut Vec<f64>) {
    let n = x.len();
    out.push(1.0);
    out.extend_from_slice(x);
    let quad_start = out.len();
    for i in 0..n {
        for j in i..n {
            out.push(x[i] * x[j]);
        }
    }
    // Cubic terms reuse the quadratic block: x_i · (x_j x_k) for i ≤ j ≤ k.
    let mut offset = quad_start;
    for i in 0..n {
        let row_len = n - i;
        let mut q = offset;
        for j in i..n {
            for k in j..n {
                out.push(x[i] * out[q + (k - j)]);
            }
            q += n - j;
        }
        offset += row_len;
    }
}

fn feature_matrix(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let f = feature_count(x.ncols(), DEGREE);
    let mut data = Vec::with_capacity(x.nrows() * f);
    for row in x.rows() {
        let row = row.to_vec();
        expand_into(&row, &mut data);
    }
    Array2::from_shape_vec((x.nrows(), f), data).expect("row-major expansion")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyBridge {
    pub in_dim: usize,
    pub out_dim: usize,
    pub degree: usize,
    pub lambda: f64,
    /// Per-feature training mean; zero for the constant term.
    pub feature_mean: Vec<f64>,
    /// Per-feature training standard deviation; one for the constant term.
    pub feature_scale: Vec<f64>,
    /// Row-major `out_dim × feature_count`, acting on standardized features.
    pub coefficients: Vec<f64>,
}

impl PolyBridge {
    pub fn feature_count(&self) -> usize {
        feature_count(self.in_dim, self.degree)
    }

    pub fn coefficient_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_dim, self.feature_count()), &self.coefficients)
            .expect("validated on construction")
    }

    /// Coefficients re-expressed on raw (unstandardized) monomials.
    pub fn raw_coefficients(&self) -> Array2<f64> {
        let c = self.coefficient_matrix();
        let mut raw = Array2::zeros(c.raw_dim());
        for (o, row) in c.rows().into_iter().enumerate() {
            let mut constant = row[0];
            for j in 1..row.len() {
                let w = row[j] / self.feature_scale[j];
                raw[[o, j]] = w;
                constant -= w * self.feature_mean[j];
            }
            raw[[o, 0]] = constant;
        }
        raw
    }

    fn standardize(&self, phi: &mut Array2<f64>) {
        let mean = Array1::from(self.feature_mean.clone());
        let scale = Array1::from(self.feature_scale.clone());
        *phi -= &mean;
        *phi /= &scale;
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim {
            return Err(Error::shape(format!(
                "bridge expects {} inputs, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        let mut phi = feature_matrix(x);
        self.standardize(&mut phi);
        Ok(phi.dot(&self.coefficient_matrix().t()))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.predict_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Sum of squared training residuals.
    pub fn residual(&self, xs: ArrayView2<'_, f64>, ys: ArrayView2<'_, f64>) -> Result<f64> {
        let pred = self.predict_batch(xs)?;
        Ok((&pred - &ys).mapv(|v| v * v).sum())
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feature_count();
        if self.degree != DEGREE {
            return Err(Error::shape(format!("bridge degree {} is not {DEGREE}", self.degree)));
        }
        if self.feature_mean.len() != f
            || self.feature_scale.len() != f
            || self.coefficients.len() != self.out_dim * f
        {
            return Err(Error::shape("bridge arrays do not match its dimensions"));
        }
        if !self
            .coefficients
            .iter()
            .chain(&self.feature_mean)
            .chain(&self.feature_scale)
            .all(|v| v.is_finite())
            || self.feature_scale.iter().any(|&s| s <= 0.0)
        {
            return Err(Error::shape("bridge holds non-finite or non-positive values"));
        }
        Ok(())
    }
}

/// Minimizes `Σ‖y − C·φ(x)‖² + λ‖C‖²` over standardized cubic features.
///
/// With fewer samples than features the equivalent dual system
/// `(ΦΦᵀ + λI)·A = Y`, `C = AᵀΦ` is solved instead.
pub fn fit(xs: ArrayView2<'_, f64>, ys: ArrayView2<'_, f64>, lambda: f64) -> Result<PolyBridge> {
    let n = xs.nrows();
    if n == 0 || n != ys.nrows() {
        return Err(Error::shape(format!(
            "bridge needs matching non-empty samples, got {} inputs and {} targets",
            n,
            ys.nrows()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge weight {lambda} must be finite and ≥ 0")));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::DomainError("bridge training data must be finite".into()));
    }
    let in_dim = xs.ncols();
    let out_dim = ys.ncols();
    let f = feature_count(in_dim, DEGREE);
    let mut phi = feature_matrix(xs);

    let mean = phi.mean_axis(Axis(0)).expect("n ≥ 1");
    let mut feature_mean = mean.to_vec();
    let mut feature_scale: Vec<f64> = phi
        .axis_iter(Axis(1))
        .zip(&feature_mean)
        .map(|(col, &m)| {
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    feature_mean[0] = 0.0;
    feature_scale[0] = 1.0;

    let mut bridge = PolyBridge {
        in_dim,
        out_dim,
        degree: DEGREE,
        lambda,
        feature_mean,
        feature_scale,
        coefficients: Vec::new(),
    };
    bridge.standardize(&mut phi);

    let coefficients = if n >= f {
        let gram = phi.t().dot(&phi);
        let rhs = phi.t().dot(&ys);
        solve_spd(gram, lambda, &rhs)?.reversed_axes()
    } else {
        let gram = phi.dot(&phi.t());
        let dual = solve_spd(gram, lambda, &ys.to_owned())?;
        dual.t().dot(&phi)
    };
    bridge.coefficients = coefficients.as_standard_layout().iter().copied().collect();
    Ok(bridge)
}

/// Solves `(A + λI)·X = B` by Cholesky, retrying with growing diagonal
/// jitter when the factorization breaks down.
fn solve_spd(a: Array2<f64>, lambda: f64, b: &Array2<f64>) -> Result<Array2<f64>> {
    let dim = a.nrows();
    let mean_diag = a.diag().sum() / dim as f64;
    let base = Mat::from_fn(dim, dim, |i, j| a[[i, j]]);
    let rhs = Mat::from_fn(dim, b.ncols(), |i, j| b[[i, j]]);
    let mut jitter = 0.0;
    let mut attempts = 0;
    loop {
        let mut m = base.clone();
        for i in 0..dim {
            m[(i, i)] += lambda + jitter;
        }
        if let Ok(chol) = m.llt(Side::Lower) {
            let x = chol.solve(&rhs);
            if (0..x.nrows()).all(|i| (0..x.ncols()).all(|j| x[(i, j)].is_finite())) {
                return Ok(Array2::from_shape_fn((dim, b.ncols()), |(i, j)| x[(i, j)]));
            }
        }
        attempts += 1;
        if attempts > 8 || !(mean_diag > 0.0) {
            return Err(Error::SingularSystem { dim, jitter });
        }
        jitter = if jitter == 0.0 {
            1e-12 * mean_diag
        } else {
            jitter * 10.0
        };
    }
}
