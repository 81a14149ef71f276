//! Scoring the stack against the surrogate oracle, plus report files.
//!
//! All figures of merit are compared on log10 currents.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::{add_curve_noise, extract_fom, gate_voltage, normalize_curve, simulate_iv};
use crate::device::{IvCurve, T_POLY_RANGE, T_SUB_RANGE};
use crate::error::{Error, Result};
use crate::pipeline::{curve_matrix, TrainedStack};
use crate::render::{extract_params, perturb_hand_drawn, render};
use crate::vae::VaeModel;
use crate::DeviceParams;

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(format!(
            "{} true values but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(Error::DegenerateData("R² needs at least two points".into()));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateData("true values have zero variance".into()));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Forward,
    ForwardHandDrawn,
    Inverse,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Forward => "forward",
            EvalMode::ForwardHandDrawn => "forward-hand-drawn",
            EvalMode::Inverse => "inverse",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(EvalMode::Forward),
            "forward-hand-drawn" => Ok(EvalMode::ForwardHandDrawn),
            "inverse" => Ok(EvalMode::Inverse),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected forward, forward-hand-drawn or inverse)"
            ))),
        }
    }
}

/// Curves kept for overlay plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordCurves {
    pub clean: Vec<f64>,
    pub noisy: Option<Vec<f64>>,
    pub predicted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: usize,
    pub params: DeviceParams,
    pub log_ion_true: f64,
    pub log_ion_pred: f64,
    pub log_ioff_true: f64,
    pub log_ioff_pred: f64,
    /// Structure read back from an inverse design.
    pub designed: Option<DeviceParams>,
    pub curves: RecordCurves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub device_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub r2_ion: f64,
    pub r2_ioff: f64,
    pub records: Vec<DeviceRecord>,
    pub excluded: Vec<Excluded>,
    pub meta: ReportMeta,
}

impl EvalReport {
    /// R² is NaN when every device was excluded.
    fn assemble(mode: EvalMode, records: Vec<DeviceRecord>, excluded: Vec<Excluded>, meta: ReportMeta) -> Result<Self> {
        let col = |f: fn(&DeviceRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let (r2_ion, r2_ioff) = if records.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                r_squared(&col(|r| r.log_ion_true), &col(|r| r.log_ion_pred))?,
                r_squared(&col(|r| r.log_ioff_true), &col(|r| r.log_ioff_pred))?,
            )
        };
        Ok(Self {
            mode,
            r2_ion,
            r2_ioff,
            records,
            excluded,
            meta,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// A held-out device to evaluate, identified by its dataset id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestDevice {
    pub id: usize,
    pub params: DeviceParams,
}

/// Renders each device (optionally with hand-drawn perturbation seeded by
/// `hand_drawn_seed + id`) and compares forward predictions with the oracle.
pub fn eval_forward(
    stack: &TrainedStack,
    test: &[TestDevice],
    hand_drawn_seed: Option<u64>,
    meta: ReportMeta,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::DegenerateData("no test devices".into()));
    }
    let mut images = Vec::with_capacity(test.len());
    for d in test {
        let img = render(&d.params);
        images.push(match hand_drawn_seed {
            Some(seed) => perturb_hand_drawn(&img, seed.wrapping_add(d.id as u64))?,
            None => img,
        });
    }
    let predicted = stack.forward_predict_batch(&images)?;
    let records = test
        .iter()
        .zip(predicted)
        .map(|(d, pred)| {
            let truth = simulate_iv(&d.params);
            let (t, p) = (extract_fom(&truth), extract_fom(&pred));
            DeviceRecord {
                device_id: d.id,
                params: d.params,
                log_ion_true: t.log_ion(),
                log_ion_pred: p.log_ion(),
                log_ioff_true: t.log_ioff(),
                log_ioff_pred: p.log_ioff(),
                designed: None,
                curves: RecordCurves {
                    clean: truth.log10(),
                    noisy: None,
                    predicted: pred.log10(),
                },
            }
        })
        .collect();
    let mode = if hand_drawn_seed.is_some() {
        EvalMode::ForwardHandDrawn
    } else {
        EvalMode::Forward
    };
    EvalReport::assemble(mode, records, Vec::new(), meta)
}

/// A noisy target with its clean source.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseTarget {
    pub device: TestDevice,
    pub clean: IvCurve,
    pub noisy: IvCurve,
}

/// Oracle curves for `devices` with noise seeded by `noise_seed + id`.
pub fn inverse_targets(devices: &[TestDevice], sigma_dec: f64, noise_seed: u64) -> Result<Vec<InverseTarget>> {
    devices
        .iter()
        .map(|d| {
            let clean = simulate_iv(&d.params);
            let noisy = add_curve_noise(&clean, sigma_dec, noise_seed.wrapping_add(d.id as u64))?;
            Ok(InverseTarget {
                device: *d,
                clean,
                noisy,
            })
        })
        .collect()
}

/// Designs a structure for each noisy target, reads its parameters back,
/// re-simulates it and compares against the clean target. Designs whose
/// parameters cannot be read back are excluded and listed.
pub fn eval_inverse(stack: &TrainedStack, targets: &[InverseTarget], meta: ReportMeta) -> Result<EvalReport> {
    if targets.is_empty() {
        return Err(Error::DegenerateData("no inverse-design targets".into()));
    }
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for t in targets {
        let image = stack.inverse_design(&t.noisy)?;
        let designed = match extract_params(&image) {
            Ok(p) => p,
            Err(e) => {
                excluded.push(Excluded {
                    device_id: t.device.id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let achieved = simulate_iv(&designed);
        let (tf, af) = (extract_fom(&t.clean), extract_fom(&achieved));
        records.push(DeviceRecord {
            device_id: t.device.id,
            params: t.device.params,
            log_ion_true: tf.log_ion(),
            log_ion_pred: af.log_ion(),
            log_ioff_true: tf.log_ioff(),
            log_ioff_pred: af.log_ioff(),
            designed: Some(designed),
            curves: RecordCurves {
                clean: t.clean.log10(),
                noisy: Some(t.noisy.log10()),
                predicted: achieved.log10(),
            },
        });
    }
    EvalReport::assemble(EvalMode::Inverse, records, excluded, meta)
}

/// Five evenly spaced values across a parameter range.
pub fn sweep_points(range: (f64, f64)) -> [f64; 5] {
    let step = (range.1 - range.0) / 4.0;
    std::array::from_fn(|i| range.0 + step * i as f64)
}

/// For each base device, the larger of the forward-predicted log10 i_on
/// spans over a five-point t_poly sweep and a five-point t_sub sweep.
pub fn weak_variable_spans(stack: &TrainedStack, bases: &[DeviceParams]) -> Result<Vec<f64>> {
    let mut spans = Vec::with_capacity(bases.len());
    for base in bases {
        let mut worst: f64 = 0.0;
        for vary_poly in [true, false] {
            let range = if vary_poly { T_POLY_RANGE } else { T_SUB_RANGE };
            let images: Vec<_> = sweep_points(range)
                .iter()
                .map(|&v| {
                    let mut p = *base;
                    if vary_poly {
                        p.t_poly = v;
                    } else {
                        p.t_sub = v;
                    }
                    render(&p)
                })
                .collect();
            let ions: Vec<f64> = stack
                .forward_predict_batch(&images)?
                .iter()
                .map(|c| extract_fom(c).log_ion())
                .collect();
            let hi = ions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = ions.iter().copied().fold(f64::INFINITY, f64::min);
            worst = worst.max(hi - lo);
        }
        spans.push(worst);
    }
    Ok(spans)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Outcome of the denoising check on one clean/noisy pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseCase {
    pub noisy_distance: f64,
    pub cleaned_distance: f64,
}

impl DenoiseCase {
    pub fn improved(&self) -> bool {
        self.cleaned_distance < self.noisy_distance
    }
}

/// L2 distances to the clean curve in normalized space, before and after
/// `passes` rounds through the curve VAE.
pub fn denoise_cases(curve_vae: &VaeModel, targets: &[InverseTarget], passes: usize) -> Result<Vec<DenoiseCase>> {
    let noisy: Vec<IvCurve> = targets.iter().map(|t| t.noisy.clone()).collect();
    let cleaned = curve_vae.autoencode_batch(curve_matrix(&noisy).view(), passes)?;
    Ok(targets
        .iter()
        .zip(cleaned.rows())
        .map(|(t, out)| {
            let clean = normalize_curve(&t.clean);
            let dist = |v: &[f64]| clean.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            DenoiseCase {
                noisy_distance: dist(&normalize_curve(&t.noisy)),
                cleaned_distance: dist(&out.to_vec()),
            }
        })
        .collect())
}

pub const CSV_HEADER: &str =
    "device_id,l_g,x_j,l_sp,t_poly,t_sub,log_ion_true,log_ion_pred,log_ioff_true,log_ioff_pred";

/// Curve overlays are drawn for at most this many records.
pub const MAX_OVERLAYS: usize = 20;

pub fn report_csv(r: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for rec in &r.records {
        let p = rec.params;
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            rec.device_id,
            p.l_g,
            p.x_j,
            p.l_sp,
            p.t_poly,
            p.t_sub,
            rec.log_ion_true,
            rec.log_ion_pred,
            rec.log_ioff_true,
            rec.log_ioff_pred
        )
        .expect("string write");
    }
    out
}

/// Writes `records.csv`, `report.json`, and when there are records
/// `scatter.svg` plus `overlay_NNNNN.svg` for the first few devices.
pub fn emit_report(r: &EvalReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, text: String| {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("records.csv", report_csv(r))?;
    write("report.json", r.to_json())?;
    if r.records.is_empty() {
        return Ok(());
    }
    write("scatter.svg", scatter_svg(r))?;
    for rec in r.records.iter().take(MAX_OVERLAYS) {
        write(&format!("overlay_{:05}.svg", rec.device_id), overlay_svg(rec))?;
    }
    Ok(())
}

const PANEL: f64 = 300.0;
const MARGIN: f64 = 50.0;

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn covering(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        let lo = lo.floor();
        let hi = hi.ceil().max(lo + 1.0);
        Self { lo, hi }
    }

    fn map(&self, v: f64, length: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo) * length
    }
}

fn svg_open(out: &mut String, width: f64, height: f64) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .expect("string write");
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
}

/// Frame, integer-decade ticks, and axis titles for one panel whose origin
/// is `(x0, y0)` (top-left of the plotting area).
fn frame(out: &mut String, x0: f64, y0: f64, ax: &Axis, ay: &Axis, title: &str, xlabel: &str, ylabel: &str) {
    writeln!(
        out,
        r#"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL:.1}" height="{PANEL:.1}" fill="none" stroke="black"/>"#
    )
    .expect("string write");
    let mut t = ax.lo;
    while t <= ax.hi + 1e-9 {
        let x = x0 + ax.map(t, PANEL);
        writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{t:.0}</text>"#,
            y0 + PANEL,
            y0 + PANEL + 4.0,
            y0 + PANEL + 16.0
        )
        .expect("string write");
        t += 1.0;
    }
    let mut t = ay.lo;
    while t <= ay.hi + 1e-9 {
        let y = y0 + PANEL - ay.map(t, PANEL);
        writeln!(
            out,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{t:.0}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        )
        .expect("string write");
        t += 1.0;
    }
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{title}</text>"#,
        x0 + PANEL / 2.0,
        y0 - 10.0
    )
    .expect("string write");
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xlabel}</text>"#,
        x0 + PANEL / 2.0,
        y0 + PANEL + 32.0
    )
    .expect("string write");
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{ylabel}</text>"#,
        x0 - 34.0,
        y0 + PANEL / 2.0,
        x0 - 34.0,
        y0 + PANEL / 2.0
    )
    .expect("string write");
}

/// Predicted against oracle figures of merit on log-log axes, one panel each
/// for i_on and i_off, with a y = x guide.
pub fn scatter_svg(r: &EvalReport) -> String {
    let mut out = String::new();
    let width = 2.0 * (PANEL + 2.0 * MARGIN);
    let height = PANEL + 2.0 * MARGIN;
    svg_open(&mut out, width, height);
    type Pick = fn(&DeviceRecord) -> (f64, f64);
    let panels: [(&str, f64, Pick); 2] = [
        ("I_ON", r.r2_ion, |d| (d.log_ion_true, d.log_ion_pred)),
        ("I_OFF", r.r2_ioff, |d| (d.log_ioff_true, d.log_ioff_pred)),
    ];
    for (i, (name, r2, pick)) in panels.into_iter().enumerate() {
        let x0 = MARGIN + i as f64 * (PANEL + 2.0 * MARGIN);
        let y0 = MARGIN;
        let axis = Axis::covering(r.records.iter().flat_map(|d| {
            let (a, b) = pick(d);
            [a, b]
        }));
        let title = format!("{name} (R² = {r2:.3})");
        frame(&mut out, x0, y0, &axis, &axis, &title, "log10 oracle [A]", "log10 predicted [A]");
        writeln!(
            out,
            r##"<line x1="{x0:.1}" y1="{:.1}" x2="{:.1}" y2="{y0:.1}" stroke="#888" stroke-dasharray="4 3"/>"##,
            y0 + PANEL,
            x0 + PANEL
        )
        .expect("string write");
        writeln!(out, r#"<g class="markers" fill="steelblue" fill-opacity="0.7">"#).expect("string write");
        for d in &r.records {
            let (t, p) = pick(d);
            writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#,
                x0 + axis.map(t, PANEL),
                y0 + PANEL - axis.map(p, PANEL)
            )
            .expect("string write");
        }
        writeln!(out, "</g>").expect("string write");
    }
    out.push_str("</svg>\n");
    out
}

/// log10 I_D against V_G for one record: clean, optional noisy, predicted.
pub fn overlay_svg(rec: &DeviceRecord) -> String {
    let c = &rec.curves;
    let mut series: Vec<(&str, &[f64])> = vec![("clean", &c.clean)];
    if let Some(n) = &c.noisy {
        series.push(("noisy", n));
    }
    series.push(("predicted", &c.predicted));
    curves_svg(&format!("device {}", rec.device_id), &series)
}

const SERIES_COLOURS: [&str; 4] = ["black", "darkorange", "steelblue", "seagreen"];

/// Named log10 I_D series against V_G on one set of axes.
pub fn curves_svg(title: &str, series: &[(&str, &[f64])]) -> String {
    let mut out = String::new();
    let width = PANEL + 2.0 * MARGIN + 110.0;
    let height = PANEL + 2.0 * MARGIN;
    svg_open(&mut out, width, height);
    let points = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(2);
    let ax = Axis {
        lo: 0.0,
        hi: gate_voltage(points - 1).ceil(),
    };
    let ay = Axis::covering(series.iter().flat_map(|s| s.1.iter().copied()));
    frame(&mut out, MARGIN, MARGIN, &ax, &ay, title, "V_G [V]", "log10 I_D [A]");
    for (k, (name, ys)) in series.iter().enumerate() {
        let colour = SERIES_COLOURS[k % SERIES_COLOURS.len()];
        let mut points = String::new();
        for (i, &y) in ys.iter().enumerate() {
            if i > 0 {
                points.push(' ');
            }
            write!(
                points,
                "{:.2},{:.2}",
                MARGIN + ax.map(gate_voltage(i), PANEL),
                MARGIN + PANEL - ay.map(y, PANEL)
            )
            .expect("string write");
        }
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{points}"/>"#
        )
        .expect("string write");
        let ly = MARGIN + 14.0 + 16.0 * k as f64;
        let lx = MARGIN + PANEL + 12.0;
        writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="1.5"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0
        )
        .expect("string write");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::tiny;

    fn meta() -> ReportMeta {
        ReportMeta {
            n_train: 16,
            n_test: 6,
            seed: 11,
            config_digest: "abc".into(),
        }
    }

    #[test]
    fn r_squared_hand_cases() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((r_squared(&y, &[1.0, 2.0, 4.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(r_squared(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::DegenerateData(_))));
        assert!(matches!(r_squared(&[1.0], &[1.0]), Err(Error::DegenerateData(_))));
        assert!(matches!(r_squared(&y, &[1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn modes_parse_by_name() {
        for m in [EvalMode::Forward, EvalMode::ForwardHandDrawn, EvalMode::Inverse] {
            assert_eq!(m.name().parse::<EvalMode>().unwrap(), m);
        }
        assert!("backward".parse::<EvalMode>().is_err());
    }

    #[test]
    fn sweeps_and_medians() {
        assert_eq!(sweep_points(T_POLY_RANGE), [50.0, 75.0, 100.0, 125.0, 150.0]);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    fn report_with(n: usize) -> EvalReport {
        let records = (0..n)
            .map(|i| {
                let p = DeviceParams::new(30.0 + 10.0 * i as f64, 40.0, 50.0, 100.0, 150.0);
                let c = simulate_iv(&p);
                let f = extract_fom(&c);
                DeviceRecord {
                    device_id: i,
                    params: p,
                    log_ion_true: f.log_ion(),
                    log_ion_pred: f.log_ion() + 0.01 * i as f64,
                    log_ioff_true: f.log_ioff(),
                    log_ioff_pred: f.log_ioff() - 0.02,
                    designed: None,
                    curves: RecordCurves {
                        clean: c.log10(),
                        noisy: None,
                        predicted: c.log10(),
                    },
                }
            })
            .collect();
        EvalReport::assemble(EvalMode::Forward, records, Vec::new(), meta()).unwrap()
    }

    fn files(dir: &Path) -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        names
    }

    #[test]
    fn empty_report_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let r = report_with(0);
        assert!(r.r2_ion.is_nan());
        emit_report(&r, dir.path()).unwrap();
        assert_eq!(files(dir.path()), ["records.csv", "report.json"]);
        assert_eq!(fs::read_to_string(dir.path().join("records.csv")).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn scatter_has_one_marker_per_record_per_panel() {
        let svg = scatter_svg(&report_with(20));
        let groups: Vec<&str> = svg.split(r#"<g class="markers""#).skip(1).collect();
        assert_eq!(groups.len(), 2);
        for g in groups {
            let body = &g[..g.find("</g>").unwrap()];
            assert_eq!(body.matches("<circle").count(), 20);
        }
    }

    #[test]
    fn reports_are_byte_deterministic() {
        let r = report_with(25);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_report(&r, a.path()).unwrap();
        emit_report(&r, b.path()).unwrap();
        let names = files(a.path());
        assert_eq!(names, files(b.path()));
        assert_eq!(names.len(), 3 + MAX_OVERLAYS);
        for n in &names {
            assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap());
        }
        let csv = fs::read_to_string(a.path().join("records.csv")).unwrap();
        assert_eq!(csv.lines().count(), 26);
    }

    #[test]
    fn evaluations_run_on_a_tiny_stack() {
        let (_, data, stack) = tiny();
        let test: Vec<TestDevice> = data
            .test_range()
            .map(|id| TestDevice {
                id,
                params: data.manifest.items[id].params,
            })
            .collect();
        let fwd = eval_forward(&stack, &test, None, meta()).unwrap();
        assert_eq!(fwd.mode, EvalMode::Forward);
        assert_eq!(fwd.records.len(), test.len());
        assert_eq!(fwd, eval_forward(&stack, &test, None, meta()).unwrap());
        let hand = eval_forward(&stack, &test, Some(3), meta()).unwrap();
        assert_eq!(hand.mode, EvalMode::ForwardHandDrawn);
        assert!(matches!(eval_forward(&stack, &[], None, meta()), Err(Error::DegenerateData(_))));

        let targets = inverse_targets(&test, 0.08, 7).unwrap();
        let inv = eval_inverse(&stack, &targets, meta()).unwrap();
        assert_eq!(inv.records.len() + inv.excluded.len(), targets.len());
        assert!(inv.records.iter().all(|r| r.designed.is_some()));
        assert_eq!(weak_variable_spans(&stack, &[test[0].params]).unwrap().len(), 1);
    }

    #[test]
    fn noiseless_targets_start_at_zero_distance() {
        let (_, data, stack) = tiny();
        let test = [TestDevice {
            id: 0,
            params: data.manifest.items[0].params,
        }];
        let targets = inverse_targets(&test, 0.0, 1).unwrap();
        assert_eq!(targets[0].clean, targets[0].noisy);
        let cases = denoise_cases(&stack.curve_vae, &targets, 2).unwrap();
        assert_eq!(cases[0].noisy_distance, 0.0);
        assert!(!cases[0].improved());
    }
}
