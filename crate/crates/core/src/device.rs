//! Analytic planar-MOSFET surrogate.
//!
//! Stands in for a device simulator: it samples the five geometric
//! parameters, evaluates a smooth EKV-style saturation `I_D(V_G)` curve at
//! `V_D = 1.4 V`, and injects the smoothed log-normal curve noise used for
//! inverse-design targets. Gate-poly and substrate thickness are carried
//! through but never enter the current equations.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of samples on the gate-voltage grid.
pub const CURVE_POINTS: usize = 51;
/// Gate-voltage step between samples, in volts.
pub const VG_STEP: f64 = 0.028;
/// Fixed drain bias, in volts.
pub const VD: f64 = 1.4;
/// Thermal voltage at 300 K.
pub const THERMAL_VOLTAGE: f64 = 0.0259;
/// Pixel pitch shared with the renderer; sampled lengths are multiples of it.
pub const PITCH_NM: f64 = 5.0;
/// Lateral budget for gate plus both spacers so the device fits the raster.
pub const MAX_LATERAL_NM: f64 = 340.0;

/// Normalization window for network inputs, in log10 amperes.
pub const LOG_CURRENT_FLOOR: f64 = -14.0;
pub const LOG_CURRENT_SPAN: f64 = 12.0;
const CLAMP_MIN_CURRENT: f64 = 1e-16;
const CLAMP_MAX_CURRENT: f64 = 1e-1;

/// Indices that noise never touches: V_G = 0, 0.028, 1.372 and 1.4 V.
pub const TERMINAL_INDICES: [usize; 4] = [0, 1, CURVE_POINTS - 2, CURVE_POINTS - 1];

pub const L_G_RANGE: (f64, f64) = (25.0, 290.0);
pub const X_J_RANGE: (f64, f64) = (10.0, 90.0);
pub const L_SP_RANGE: (f64, f64) = (10.0, 110.0);
pub const T_POLY_RANGE: (f64, f64) = (50.0, 150.0);
pub const T_SUB_RANGE: (f64, f64) = (100.0, 200.0);

/// Geometric device parameters, all in nanometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    pub l_g: f64,
    pub x_j: f64,
    pub l_sp: f64,
    pub t_poly: f64,
    pub t_sub: f64,
}

impl DeviceParams {
    pub fn new(l_g: f64, x_j: f64, l_sp: f64, t_poly: f64, t_sub: f64) -> Self {
        Self {
            l_g,
            x_j,
            l_sp,
            t_poly,
            t_sub,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.l_g, self.x_j, self.l_sp, self.t_poly, self.t_sub]
    }

    /// Checks range membership, the lateral-fit constraint and pitch alignment.
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("l_g", self.l_g, L_G_RANGE),
            ("x_j", self.x_j, X_J_RANGE),
            ("l_sp", self.l_sp, L_SP_RANGE),
            ("t_poly", self.t_poly, T_POLY_RANGE),
            ("t_sub", self.t_sub, T_SUB_RANGE),
        ];
        for (name, v, (lo, hi)) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::DomainError(format!(
                    "{name} = {v} nm outside [{lo}, {hi}]"
                )));
            }
            if (v / PITCH_NM).fract() != 0.0 {
                return Err(Error::DomainError(format!(
                    "{name} = {v} nm is not a multiple of {PITCH_NM} nm"
                )));
            }
        }
        if self.l_g + 2.0 * self.l_sp > MAX_LATERAL_NM {
            return Err(Error::DomainError(format!(
                "l_g + 2 l_sp = {} nm exceeds {MAX_LATERAL_NM} nm",
                self.l_g + 2.0 * self.l_sp
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DeviceParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L_G={} X_j={} L_SP={} T_POLY={} T_SUB={}",
            self.l_g, self.x_j, self.l_sp, self.t_poly, self.t_sub
        )
    }
}

fn sample_pitched(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let lo_steps = (lo / PITCH_NM) as u32;
    let hi_steps = (hi / PITCH_NM) as u32;
    f64::from(rng.random_range(lo_steps..=hi_steps)) * PITCH_NM
}

/// Draws `n` devices uniformly over the parameter box on the 5 nm grid,
/// rejecting draws that violate the lateral-fit constraint.
pub fn sample_params(rng_seed: u64, n: usize) -> Vec<DeviceParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = DeviceParams {
            l_g: sample_pitched(&mut rng, L_G_RANGE),
            x_j: sample_pitched(&mut rng, X_J_RANGE),
            l_sp: sample_pitched(&mut rng, L_SP_RANGE),
            t_poly: sample_pitched(&mut rng, T_POLY_RANGE),
            t_sub: sample_pitched(&mut rng, T_SUB_RANGE),
        };
        if p.l_g + 2.0 * p.l_sp <= MAX_LATERAL_NM {
            out.push(p);
        }
    }
    out
}

/// Gate voltage of sample `i`.
pub fn gate_voltage(i: usize) -> f64 {
    VG_STEP * i as f64
}

/// A saturation transfer curve: drain current in amperes at 1 µm width.
#[derive(Debug, Clone, PartialEq)]
pub struct IvCurve {
    currents: [f64; CURVE_POINTS],
}

impl IvCurve {
    /// Builds a curve, rejecting wrong lengths and non-positive or
    /// non-finite currents.
    pub fn new(currents: &[f64]) -> Result<Self> {
        if currents.len() != CURVE_POINTS {
            return Err(Error::shape(format!(
                "curve has {} points, expected {CURVE_POINTS}",
                currents.len()
            )));
        }
        if let Some((i, v)) = currents
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::DomainError(format!(
                "current at index {i} is {v}, must be finite and positive"
            )));
        }
        let mut arr = [0.0; CURVE_POINTS];
        arr.copy_from_slice(currents);
        Ok(Self { currents: arr })
    }

    pub fn currents(&self) -> &[f64; CURVE_POINTS] {
        &self.currents
    }

    pub fn log10(&self) -> Vec<f64> {
        self.currents.iter().map(|c| c.log10()).collect()
    }

    /// Writes the `vg,id` CSV form with full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("vg,id\n");
        for (i, c) in self.currents.iter().enumerate() {
            s.push_str(&format!("{:.16e},{:.16e}\n", gate_voltage(i), c));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some("vg,id") => {}
            other => {
                return Err(Error::DomainError(format!(
                    "curve csv header must be `vg,id`, found {other:?}"
                )))
            }
        }
        let mut currents = Vec::with_capacity(CURVE_POINTS);
        for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let mut fields = line.split(',');
            let (Some(vg), Some(id), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::DomainError(format!(
                    "curve csv row {row} must have two fields"
                )));
            };
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::DomainError(format!("curve csv row {row}: cannot parse {s:?}: {e}"))
                })
            };
            let vg = parse(vg)?;
            if (vg - gate_voltage(row)).abs() > 1e-9 {
                return Err(Error::DomainError(format!(
                    "curve csv row {row}: vg = {vg} is off the {VG_STEP} V grid"
                )));
            }
            currents.push(parse(id)?);
        }
        Self::new(&currents)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiguresOfMerit {
    pub i_off: f64,
    pub i_on: f64,
}

impl FiguresOfMerit {
    pub fn log_ion(&self) -> f64 {
        self.i_on.log10()
    }

    pub fn log_ioff(&self) -> f64 {
        self.i_off.log10()
    }
}

/// OFF current at V_G = 0 and ON current at V_G = 1.4 V.
pub fn extract_fom(curve: &IvCurve) -> FiguresOfMerit {
    FiguresOfMerit {
        i_off: curve.currents[0],
        i_on: curve.currents[CURVE_POINTS - 1],
    }
}

/// Evaluates the surrogate current equations for one device.
///
/// `L_eff` shrinks with junction depth, short-channel severity lowers the
/// threshold and degrades the slope factor, the spacer adds series damping,
/// and a punch-through term grows with `x_j / l_g`.
pub fn simulate_iv(p: &DeviceParams) -> IvCurve {
    let l_eff = (p.l_g - 0.6 * p.x_j).max(2.0);
    let severity = (-l_eff / (1.5 * p.x_j)).exp();
    let v_th = 0.45 - 0.35 * severity;
    let slope = 1.2 + 0.8 * severity;
    let i_spec = 5e-6 * (100.0 / l_eff);
    let damping = 1.0 + 0.3 * (p.l_sp / l_eff);

    let ratio = p.x_j / p.l_g;
    let leak = 1e-13
        * (8.0 * (ratio - 0.35).max(0.0)).min(12.0).exp()
        * (1.0 + ratio * (110.0 - p.l_sp) / 110.0);

    let mut currents = [0.0; CURVE_POINTS];
    for (i, c) in currents.iter_mut().enumerate() {
        let arg = (gate_voltage(i) - v_th) / (2.0 * slope * THERMAL_VOLTAGE);
        let soft = arg.exp().ln_1p();
        *c = i_spec * soft * soft / damping + leak;
    }
    IvCurve { currents }
}

/// Adds smoothed log-normal noise to the interior of a curve.
///
/// Indices 2..=48 receive a multiplicative `10^e` perturbation where `e` is a
/// 3-point moving average of independent `N(0, sigma_dec)` draws (window
/// clamped to the noisy range). The four terminal points are left untouched
/// so I_OFF and I_ON are preserved exactly.
pub fn add_curve_noise(curve: &IvCurve, sigma_dec: f64, rng_seed: u64) -> Result<IvCurve> {
    if !(sigma_dec >= 0.0 && sigma_dec.is_finite()) {
        return Err(Error::DomainError(format!(
            "noise sigma must be finite and non-negative, got {sigma_dec}"
        )));
    }
    let (first, last) = (2, CURVE_POINTS - 3);
    let mut out = curve.clone();
    if sigma_dec == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, sigma_dec).expect("sigma validated above");
    let raw: Vec<f64> = (first..=last).map(|_| normal.sample(&mut rng)).collect();
    let n = raw.len();
    for k in 0..n {
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(n - 1);
        let window = [raw[lo], raw[k], raw[hi]];
        let eps = window.iter().sum::<f64>() / 3.0;
        out.currents[first + k] *= 10f64.powf(eps);
    }
    Ok(out)
}

/// Maps currents onto [0, 1] via `(log10 I + 14) / 12`.
pub fn normalize_curve(curve: &IvCurve) -> Vec<f64> {
    curve
        .currents
        .iter()
        .map(|&c| {
            let c = c.clamp(CLAMP_MIN_CURRENT, CLAMP_MAX_CURRENT);
            ((c.log10() - LOG_CURRENT_FLOOR) / LOG_CURRENT_SPAN).clamp(0.0, 1.0)
        })
        .collect()
}

/// Inverse of [`normalize_curve`] on the open window.
pub fn denormalize_curve(values: &[f64]) -> Result<IvCurve> {
    if values.len() != CURVE_POINTS {
        return Err(Error::shape(format!(
            "normalized curve has {} values, expected {CURVE_POINTS}",
            values.len()
        )));
    }
    let currents: Vec<f64> = values
        .iter()
        .map(|&y| 10f64.powf(y * LOG_CURRENT_SPAN + LOG_CURRENT_FLOOR))
        .collect();
    IvCurve::new(&currents)
}
