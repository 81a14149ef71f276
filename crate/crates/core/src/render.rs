//! Cross-section rasterization and parameter recovery.
//!
//! Layout at 5 nm per pixel, row 0 at the top: the substrate surface is row
//! 34, the gate oxide is the single row 33 under the gate, poly sits on top
//! of it and the two spacers flank poly and oxide. Deep source/drain wells
//! run from each image edge to the outer spacer edge; shallow LDD extensions
//! sit under the spacers and stop at the gate edge.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::device::{
    DeviceParams, L_G_RANGE, L_SP_RANGE, PITCH_NM, T_POLY_RANGE, T_SUB_RANGE, X_J_RANGE,
};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 80;
pub const IMAGE_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const SURFACE_ROW: usize = 34;
pub const OXIDE_ROW: usize = SURFACE_ROW - 1;
pub const CENTER_COL: usize = IMAGE_SIZE / 2;
/// Columns at which junction depth is read; the deep S/D always covers
/// columns 0..=5.
const JUNCTION_PROBE_COLS: std::ops::RangeInclusive<usize> = 1..=5;

pub mod level {
    pub const BACKGROUND: u8 = 0;
    pub const SPACER: u8 = 60;
    pub const SUBSTRATE: u8 = 90;
    pub const LDD: u8 = 170;
    pub const SD_TOP: u8 = 200;
    pub const SD_BOTTOM: u8 = 150;
    pub const SD_FLAT: u8 = 180;
    pub const POLY: u8 = 230;
    pub const OXIDE: u8 = 255;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Background,
    Substrate,
    SourceDrain,
    Ldd,
    Oxide,
    Poly,
    Spacer,
}

impl Region {
    pub const ALL: [Region; 7] = [
        Region::Background,
        Region::Substrate,
        Region::SourceDrain,
        Region::Ldd,
        Region::Oxide,
        Region::Poly,
        Region::Spacer,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Pixel-space geometry derived from a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    gate_left: usize,
    gate_width: usize,
    spacer: usize,
    poly_rows: usize,
    sub_rows: usize,
    junction_rows: usize,
    ldd_rows: usize,
}

impl Layout {
    fn from_params(p: &DeviceParams) -> Self {
        let px = |nm: f64| (nm / PITCH_NM).round() as usize;
        let gate_width = px(p.l_g);
        let junction_rows = px(p.x_j);
        Layout {
            gate_left: CENTER_COL - gate_width / 2,
            gate_width,
            spacer: px(p.l_sp),
            poly_rows: px(p.t_poly),
            sub_rows: px(p.t_sub),
            junction_rows,
            ldd_rows: ((0.4 * junction_rows as f64).round() as usize).max(1),
        }
    }

    fn gate_right(&self) -> usize {
        self.gate_left + self.gate_width
    }

    fn sd_left_end(&self) -> usize {
        self.gate_left - self.spacer
    }

    fn sd_right_start(&self) -> usize {
        self.gate_right() + self.spacer
    }

    fn region(&self, row: usize, col: usize) -> Region {
        let in_gate = (self.gate_left..self.gate_right()).contains(&col);
        let in_spacer = (self.sd_left_end()..self.gate_left).contains(&col)
            || (self.gate_right()..self.sd_right_start()).contains(&col);
        if row < SURFACE_ROW {
            let top = OXIDE_ROW - self.poly_rows;
            if row < top {
                Region::Background
            } else if in_gate {
                if row == OXIDE_ROW {
                    Region::Oxide
                } else {
                    Region::Poly
                }
            } else if in_spacer {
                Region::Spacer
            } else {
                Region::Background
            }
        } else {
            let depth = row - SURFACE_ROW;
            if depth >= self.sub_rows {
                Region::Background
            } else if !in_gate && !in_spacer && depth < self.junction_rows {
                Region::SourceDrain
            } else if in_spacer && depth < self.ldd_rows {
                Region::Ldd
            } else {
                Region::Substrate
            }
        }
    }

    fn sd_level(&self, row: usize) -> u8 {
        let k = (row - SURFACE_ROW) as f64;
        let span = (self.junction_rows.max(2) - 1) as f64;
        let top = f64::from(level::SD_TOP);
        let drop = f64::from(level::SD_TOP - level::SD_BOTTOM);
        (top - drop * k / span).round() as u8
    }
}

/// Per-pixel region labels for one device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    labels: Vec<Region>,
}

impl RegionMap {
    pub fn from_params(p: &DeviceParams) -> Self {
        let layout = Layout::from_params(p);
        let labels = (0..IMAGE_PIXELS)
            .map(|i| layout.region(i / IMAGE_SIZE, i % IMAGE_SIZE))
            .collect();
        RegionMap { labels }
    }

    pub fn get(&self, row: usize, col: usize) -> Region {
        self.labels[row * IMAGE_SIZE + col]
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&r| r == region).count()
    }
}

/// 80×80 8-bit grayscale raster, row-major with row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeviceImage {
    pixels: Vec<u8>,
}

impl DeviceImage {
    pub fn from_pixels(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::shape(format!(
                "image has {} pixels, expected {IMAGE_PIXELS}",
                pixels.len()
            )));
        }
        Ok(DeviceImage { pixels })
    }

    pub fn blank() -> Self {
        DeviceImage {
            pixels: vec![0; IMAGE_PIXELS],
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * IMAGE_SIZE + col]
    }

    /// Pixel values scaled to [0, 1] for the image network.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, IMAGE_SIZE as u32, IMAGE_SIZE as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::io("<png>", std::io::Error::other(e)))?;
            w.write_image_data(&self.pixels)
                .map_err(|e| Error::io("<png>", std::io::Error::other(e)))?;
        }
        Ok(buf)
    }

    /// Decodes an 80×80 PNG. Gray is taken as is; colour inputs are reduced
    /// to Rec. 601 luma so hand-edited images can be fed back in.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        decode_png(Cursor::new(bytes)).map_err(|reason| Error::MalformedImage(reason))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        decode_png(BufReader::new(file))
            .map_err(|reason| Error::MalformedImage(format!("{}: {reason}", path.display())))
    }
}

fn decode_png<R: Read + std::io::BufRead + std::io::Seek>(
    reader: R,
) -> std::result::Result<DeviceImage, String> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "png too large".to_string())?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.width as usize != IMAGE_SIZE || info.height as usize != IMAGE_SIZE {
        return Err(format!(
            "expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}",
            info.width, info.height
        ));
    }
    let data = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let luma = |px: &[u8]| -> u8 {
        match px.len() {
            1 | 2 => px[0],
            _ => (0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]))
                .round() as u8,
        }
    };
    let pixels = data.chunks_exact(channels).map(luma).collect();
    Ok(DeviceImage { pixels })
}

/// Rasterizes a device. Gate width in pixels is exactly `l_g / 5`.
pub fn render(p: &DeviceParams) -> DeviceImage {
    let layout = Layout::from_params(p);
    let map = RegionMap::from_params(p);
    let pixels = (0..IMAGE_PIXELS)
        .map(|i| {
            let row = i / IMAGE_SIZE;
            match map.labels[i] {
                Region::Background => level::BACKGROUND,
                Region::Substrate => level::SUBSTRATE,
                Region::SourceDrain => layout.sd_level(row),
                Region::Ldd => level::LDD,
                Region::Oxide => level::OXIDE,
                Region::Poly => level::POLY,
                Region::Spacer => level::SPACER,
            }
        })
        .collect();
    DeviceImage { pixels }
}

/// Moves every region boundary by -1, 0 or +1 pixel independently at each
/// row (vertical boundaries) and column (horizontal boundaries).
fn jitter_labels(map: &RegionMap, rng: &mut ChaCha8Rng) -> Vec<Region> {
    let mut jittered = map.labels.clone();
    let idx = |r: usize, c: usize| r * IMAGE_SIZE + c;
    for r in 0..IMAGE_SIZE {
        for c in 1..IMAGE_SIZE {
            let (a, b) = (map.get(r, c - 1), map.get(r, c));
            if a != b {
                match rng.random_range(-1i32..=1) {
                    1 => jittered[idx(r, c)] = a,
                    -1 => jittered[idx(r, c - 1)] = b,
                    _ => {}
                }
            }
        }
    }
    for c in 0..IMAGE_SIZE {
        for r in 1..IMAGE_SIZE {
            let (a, b) = (map.get(r - 1, c), map.get(r, c));
            if a != b {
                match rng.random_range(-1i32..=1) {
                    1 => jittered[idx(r, c)] = a,
                    -1 => jittered[idx(r - 1, c)] = b,
                    _ => {}
                }
            }
        }
    }
    jittered
}

/// Imitates a hand-drawn version of a clean render: flat S/D fill,
/// a random ±20 gray shift per region, and every region boundary nudged by
/// at most one pixel at each row/column position.
pub fn perturb_hand_drawn(img: &DeviceImage, rng_seed: u64) -> Result<DeviceImage> {
    let params = extract_params(img)?;
    let map = RegionMap::from_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let jittered = jitter_labels(&map, &mut rng);

    let mut levels = [0u8; 7];
    for region in Region::ALL {
        let base = match region {
            Region::Background => level::BACKGROUND,
            Region::Substrate => level::SUBSTRATE,
            Region::SourceDrain => level::SD_FLAT,
            Region::Ldd => level::LDD,
            Region::Oxide => level::OXIDE,
            Region::Poly => level::POLY,
            Region::Spacer => level::SPACER,
        };
        let shift = rng.random_range(-20i32..=20);
        levels[region.index()] = (i32::from(base) + shift).clamp(0, 255) as u8;
    }
    let pixels = jittered.iter().map(|r| levels[r.index()]).collect();
    Ok(DeviceImage { pixels })
}

/// Coarse material classes used for measurement. Ordered by typical
/// brightness; the oxide is folded into the gate and LDD into S/D.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Background,
    Spacer,
    Substrate,
    Doped,
    Gate,
}

const ABOVE_PALETTE: [(u8, u8, Class); 4] = [
    (level::BACKGROUND, level::BACKGROUND, Class::Background),
    (level::SPACER, level::SPACER, Class::Spacer),
    (level::POLY, level::POLY, Class::Gate),
    (level::OXIDE, level::OXIDE, Class::Gate),
];

const BELOW_PALETTE: [(u8, u8, Class); 4] = [
    (level::BACKGROUND, level::BACKGROUND, Class::Background),
    (level::SUBSTRATE, level::SUBSTRATE, Class::Substrate),
    (level::SD_BOTTOM, level::SD_TOP, Class::Doped),
    (level::LDD, level::LDD, Class::Doped),
];

fn nearest_class(value: u8, palette: &[(u8, u8, Class)]) -> Class {
    let dist = |&(lo, hi, _): &(u8, u8, Class)| {
        if value < lo {
            lo - value
        } else {
            value.saturating_sub(hi)
        }
    };
    palette
        .iter()
        .min_by_key(|entry| dist(entry))
        .map(|e| e.2)
        .unwrap_or(Class::Background)
}

fn classify(img: &DeviceImage) -> Vec<Class> {
    (0..IMAGE_PIXELS)
        .map(|i| {
            let palette: &[_] = if i / IMAGE_SIZE < SURFACE_ROW {
                &ABOVE_PALETTE
            } else {
                &BELOW_PALETTE
            };
            nearest_class(img.pixels[i], palette)
        })
        .collect()
}

/// 3×3 despeckle with replicated borders: a pixel sharing its class with
/// at most one of its eight neighbours takes the most common neighbour
/// class. Ragged but connected edges are left alone so their per-row
/// offsets stay independent.
fn despeckle(labels: &[Class]) -> Vec<Class> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, IMAGE_SIZE as isize - 1) as usize;
        let c = c.clamp(0, IMAGE_SIZE as isize - 1) as usize;
        labels[r * IMAGE_SIZE + c]
    };
    let mut out = labels.to_vec();
    for r in 0..IMAGE_SIZE as isize {
        for c in 0..IMAGE_SIZE as isize {
            let centre = at(r, c);
            let mut counts = [0u8; 5];
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if dr != 0 || dc != 0 {
                        counts[at(r + dr, c + dc) as usize] += 1;
                    }
                }
            }
            if counts[centre as usize] <= 1 {
                let best = (0..CLASSES.len())
                    .max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))
                    .expect("five classes");
                out[r as usize * IMAGE_SIZE + c as usize] = CLASSES[best];
            }
        }
    }
    out
}

const CLASSES: [Class; 5] = [
    Class::Background,
    Class::Spacer,
    Class::Substrate,
    Class::Doped,
    Class::Gate,
];

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Start and length of the longest run of columns matching `hit`.
fn longest_run(hit: impl Fn(usize) -> bool) -> (usize, usize) {
    longest_run_in(0..IMAGE_SIZE, hit)
}

fn longest_run_in(range: std::ops::Range<usize>, hit: impl Fn(usize) -> bool) -> (usize, usize) {
    let mut best = (range.start, 0);
    let mut start = range.start;
    for i in range.start..=range.end {
        if i < range.end && hit(i) {
            continue;
        }
        if i - start > best.1 {
            best = (start, i - start);
        }
        start = i + 1;
    }
    best
}

/// Depth of the bottom edge of the block matching `hit` that starts at the
/// substrate surface. The block may begin up to two rows low so a ragged
/// surface does not hide it.
fn depth_below_surface(hit: impl Fn(usize) -> bool) -> f64 {
    let Some(start) = (SURFACE_ROW..SURFACE_ROW + 3).find(|&r| hit(r)) else {
        return 0.0;
    };
    let end = (start..IMAGE_SIZE).find(|&r| !hit(r)).unwrap_or(IMAGE_SIZE);
    (end - SURFACE_ROW) as f64
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn to_nm(pixels: f64, (lo, hi): (f64, f64)) -> f64 {
    (pixels.round() * PITCH_NM).clamp(lo, hi)
}

/// Recovers the five parameters from a clean, hand-drawn or decoded image.
///
/// Pixels are snapped to the nearest material level (separate palettes above
/// and below the substrate surface), cleaned with a 3×3 despeckle, and
/// each dimension is taken as the median run length over the rows or
/// columns that cross it.
pub fn extract_params(img: &DeviceImage) -> Result<DeviceParams> {
    let labels = despeckle(&classify(img));
    let at = |r: usize, c: usize| labels[r * IMAGE_SIZE + c];

    let gate_rows: Vec<usize> = (0..SURFACE_ROW)
        .filter(|&r| (0..IMAGE_SIZE).any(|c| at(r, c) == Class::Gate))
        .collect();
    if gate_rows.is_empty() {
        return Err(Error::MalformedImage("no gate region detected".into()));
    }
    let semi = |cls: Class| matches!(cls, Class::Substrate | Class::Doped);
    if !(SURFACE_ROW..IMAGE_SIZE).any(|r| (0..IMAGE_SIZE).any(|c| semi(at(r, c)))) {
        return Err(Error::MalformedImage("no substrate region detected".into()));
    }

    let row_runs: Vec<(usize, (usize, usize))> = gate_rows
        .iter()
        .map(|&r| (r, longest_run(|c| at(r, c) == Class::Gate)))
        .collect();
    let widest = row_runs.iter().map(|(_, run)| run.1).max().unwrap_or(0);
    let mut body: Vec<_> = row_runs
        .iter()
        .filter(|(_, run)| 2 * run.1 >= widest)
        .collect();
    // The top row and the oxide row carry the ragged horizontal edges.
    if body.len() > 2 {
        body = body[1..body.len() - 1].to_vec();
    }
    let mut widths = Vec::new();
    let mut spacers = Vec::new();
    for &&(r, (left, len)) in &body {
        let right = left + len - 1;
        widths.push(len as f64);
        let run_left = (0..left).rev().take_while(|&c| at(r, c) == Class::Spacer).count();
        let run_right = (right + 1..IMAGE_SIZE)
            .take_while(|&c| at(r, c) == Class::Spacer)
            .count();
        spacers.push(0.5 * (run_left + run_right) as f64);
    }

    // Poly thickness from the top edge of each gate column; the bottom is
    // pinned to the oxide row by the layout.
    let column_runs: Vec<(usize, usize)> = (0..IMAGE_SIZE)
        .map(|c| longest_run_in(0..SURFACE_ROW, |r| at(r, c) == Class::Gate))
        .collect();
    let tallest = column_runs.iter().map(|r| r.1).max().unwrap_or(0);
    let mut heights: Vec<f64> = column_runs
        .into_iter()
        .filter(|&(_, len)| len > 0 && 2 * len >= tallest)
        .map(|(top, _)| (OXIDE_ROW - top.min(OXIDE_ROW)) as f64)
        .collect();

    let mut junctions: Vec<f64> = JUNCTION_PROBE_COLS
        .map(|c| depth_below_surface(|r| at(r, c) == Class::Doped))
        .collect();

    let mut subs: Vec<f64> = (0..IMAGE_SIZE)
        .map(|c| depth_below_surface(|r| semi(at(r, c))))
        .collect();

    // Medians exist: every vector above has at least one entry.
    // Lateral edges are averaged rather than voted: ragged edges move
    // each row independently and a per-row vote is biased by runs.
    let gate_px = mean(&widths);
    let spacer_px = mean(&spacers);
    let poly_px = median(&mut heights).unwrap_or(0.0);
    let junction_px = median(&mut junctions).unwrap_or(0.0);
    let sub_px = median(&mut subs).unwrap_or(0.0);

    Ok(DeviceParams {
        l_g: to_nm(gate_px, L_G_RANGE),
        x_j: to_nm(junction_px, X_J_RANGE),
        l_sp: to_nm(spacer_px, L_SP_RANGE),
        t_poly: to_nm(poly_px, T_POLY_RANGE),
        t_sub: to_nm(sub_px, T_SUB_RANGE),
    })
}

/// Converts continuous decoder outputs in [0, 1] to gray levels,
/// rounding half up.
pub fn quantize_decoded(raw: &[f64]) -> Result<DeviceImage> {
    if raw.len() != IMAGE_PIXELS {
        return Err(Error::shape(format!(
            "decoded image has {} values, expected {IMAGE_PIXELS}",
            raw.len()
        )));
    }
    let pixels = raw
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    Ok(DeviceImage { pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::sample_params;

    fn dev(l_g: f64, x_j: f64, l_sp: f64, t_poly: f64, t_sub: f64) -> DeviceParams {
        DeviceParams::new(l_g, x_j, l_sp, t_poly, t_sub)
    }

    fn columns_with(img: &DeviceImage, row: usize, value: u8) -> usize {
        (0..IMAGE_SIZE).filter(|&c| img.get(row, c) == value).count()
    }

    #[test]
    fn minimum_gate_is_five_columns() {
        let img = render(&dev(25.0, 50.0, 50.0, 100.0, 150.0));
        assert_eq!(columns_with(&img, OXIDE_ROW - 1, level::POLY), 5);
        assert_eq!(columns_with(&img, OXIDE_ROW, level::OXIDE), 5);
    }

    #[test]
    fn gate_pixel_count_tracks_length() {
        for p in sample_params(2, 300) {
            let img = render(&p);
            assert_eq!(
                columns_with(&img, OXIDE_ROW, level::OXIDE) as f64,
                p.l_g / PITCH_NM,
                "{p}"
            );
        }
    }

    #[test]
    fn render_is_deterministic() {
        let p = dev(100.0, 50.0, 50.0, 100.0, 150.0);
        assert_eq!(render(&p), render(&p));
    }

    #[test]
    fn thickest_substrate_is_forty_rows() {
        let map = RegionMap::from_params(&dev(100.0, 50.0, 50.0, 100.0, 200.0));
        let rows = (SURFACE_ROW..IMAGE_SIZE)
            .filter(|&r| map.get(r, CENTER_COL) == Region::Substrate)
            .count();
        assert_eq!(rows, 40);
    }

    #[test]
    fn clean_levels_are_canonical() {
        for p in sample_params(8, 100) {
            for &v in render(&p).pixels() {
                let ok = matches!(v, 0 | 60 | 90 | 170 | 230 | 255) || (150..=200).contains(&v);
                assert!(ok, "level {v} in {p}");
            }
        }
    }

    #[test]
    fn poly_thickness_only_changes_rows_above_oxide() {
        let a = render(&dev(120.0, 40.0, 30.0, 50.0, 150.0));
        let b = render(&dev(120.0, 40.0, 30.0, 150.0, 150.0));
        for r in OXIDE_ROW..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                assert_eq!(a.get(r, c), b.get(r, c));
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn region_map_partitions_grid() {
        let map = RegionMap::from_params(&dev(100.0, 50.0, 50.0, 100.0, 150.0));
        let total: usize = Region::ALL.iter().map(|&r| map.count(r)).sum();
        assert_eq!(total, IMAGE_PIXELS);
        assert_eq!(map.count(Region::Oxide), 20);
    }

    #[test]
    fn extraction_inverts_clean_render() {
        for p in sample_params(13, 500) {
            let got = extract_params(&render(&p)).unwrap();
            assert_eq!(got, p);
            assert_eq!(render(&got), render(&p));
        }
    }

    #[test]
    fn extraction_rejects_empty_image() {
        assert!(matches!(
            extract_params(&DeviceImage::blank()),
            Err(Error::MalformedImage(_))
        ));
    }

    #[test]
    fn hand_drawn_flattens_source_drain() {
        let p = dev(100.0, 60.0, 40.0, 100.0, 150.0);
        let hd = perturb_hand_drawn(&render(&p), 5).unwrap();
        // deep S/D interior, away from any jittered boundary
        let first = hd.get(SURFACE_ROW + 2, 1);
        for r in SURFACE_ROW + 1..SURFACE_ROW + 10 {
            for c in 0..5 {
                assert_eq!(hd.get(r, c), first);
            }
        }
    }

    #[test]
    fn hand_drawn_is_seeded() {
        let img = render(&dev(100.0, 60.0, 40.0, 100.0, 150.0));
        assert_eq!(
            perturb_hand_drawn(&img, 1).unwrap(),
            perturb_hand_drawn(&img, 1).unwrap()
        );
        assert_ne!(
            perturb_hand_drawn(&img, 1).unwrap(),
            perturb_hand_drawn(&img, 2).unwrap()
        );
    }

    #[test]
    fn hand_drawn_keeps_parameters_within_one_pixel() {
        for (i, p) in sample_params(17, 100).iter().enumerate() {
            let hd = perturb_hand_drawn(&render(p), i as u64).unwrap();
            let got = extract_params(&hd).unwrap();
            for (a, b) in got.as_array().iter().zip(p.as_array()) {
                assert!((a - b).abs() <= PITCH_NM, "{p} -> {got}");
            }
        }
    }

    #[test]
    fn jitter_moves_boundaries_at_most_one_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in sample_params(19, 50) {
            let map = RegionMap::from_params(&p);
            let jittered = jitter_labels(&map, &mut rng);
            let mut moved = 0;
            for r in 0..IMAGE_SIZE {
                for c in 0..IMAGE_SIZE {
                    let got = jittered[r * IMAGE_SIZE + c];
                    if got == map.get(r, c) {
                        continue;
                    }
                    moved += 1;
                    let neighbours = [
                        (r.wrapping_sub(1), c),
                        (r + 1, c),
                        (r, c.wrapping_sub(1)),
                        (r, c + 1),
                    ];
                    assert!(
                        neighbours
                            .iter()
                            .filter(|(rr, cc)| *rr < IMAGE_SIZE && *cc < IMAGE_SIZE)
                            .any(|&(rr, cc)| map.get(rr, cc) == got),
                        "pixel ({r},{c}) took a label from more than one pixel away"
                    );
                }
            }
            assert!(moved > 0);
        }
    }

    #[test]
    fn quantize_anchor_values() {
        let mut raw = vec![0.0; IMAGE_PIXELS];
        raw[1] = 1.0;
        raw[2] = 0.5;
        let img = quantize_decoded(&raw).unwrap();
        assert_eq!(&img.pixels()[..3], &[0, 255, 128]);
        let again = quantize_decoded(&img.to_unit()).unwrap();
        assert_eq!(again, img);
        assert!(quantize_decoded(&[0.0; 10]).is_err());
    }

    #[test]
    fn png_round_trip_is_bit_exact() {
        let img = perturb_hand_drawn(&render(&dev(55.0, 35.0, 95.0, 140.0, 185.0)), 9).unwrap();
        let bytes = img.to_png().unwrap();
        assert_eq!(DeviceImage::from_png(&bytes).unwrap(), img);
    }
}
