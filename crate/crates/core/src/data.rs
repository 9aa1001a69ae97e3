//! Sketch rasters: loading and normalization, a gradient-based edge
//! extractor, the synthetic three-camera contour dataset, identity splits and
//! the on-disk manifest.
//!
//! Sketches use background 0 and strokes near 1. Raw rasters on disk use the
//! photographic convention (white 255 background) and are inverted on load.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Square single-channel raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchImage {
    pixels: Tensor,
}

impl SketchImage {
    pub fn new(pixels: Tensor) -> Result<Self> {
        ensure!(
            pixels.ndim() == 2 && pixels.shape()[0] == pixels.shape()[1],
            Input,
            "sketch must be square, got {:?}",
            pixels.shape()
        );
        ensure!(
            pixels.data().iter().all(|v| (0.0..=1.0).contains(v)),
            Input,
            "sketch values must lie in [0,1]"
        );
        Ok(SketchImage { pixels })
    }

    /// From 8-bit stroke levels (0 = background).
    pub fn from_levels(side: usize, levels: &[u8]) -> Result<Self> {
        let data = levels.iter().map(|&q| q as f64 / 255.0).collect();
        SketchImage::new(Tensor::from_vec(&[side, side], data)?)
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    /// Raw 8-bit rendering with a white background.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        self.pixels
            .data()
            .iter()
            .map(|v| 255 - (v * 255.0).round() as u8)
            .collect()
    }

    pub fn resized(&self, side: usize) -> Result<SketchImage> {
        let n = self.side();
        SketchImage::new(Tensor::from_vec(
            &[side, side],
            resize_bilinear(self.pixels.data(), n, n, side)?,
        )?)
    }
}

/// Row-major raster with `channels` interleaved samples in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Raster::new(height, width, 1, data)
    }

    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(height > 0 && width > 0, Input, "raster is empty ({height}x{width})");
        ensure!(
            channels == 1 || channels == 3,
            Input,
            "raster must have 1 or 3 channels, got {channels}"
        );
        ensure!(
            data.len() == height * width * channels,
            Input,
            "raster data has {} samples for {height}x{width}x{channels}",
            data.len()
        );
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B` for color rasters.
    pub fn to_gray(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

/// Align-corners bilinear resampling of an `h x w` plane to `side x side`.
fn resize_bilinear(src: &[f64], h: usize, w: usize, side: usize) -> Result<Vec<f64>> {
    ensure!(side >= 1, Config, "target side must be >= 1");
    let map = |i: usize, n: usize| {
        if side == 1 {
            (n - 1) as f64 / 2.0
        } else {
            i as f64 * (n - 1) as f64 / (side - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        let y = map(r, h);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..side {
            let x = map(c, w);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Centers an `h x w` plane on a square canvas filled with `fill`. Portrait
/// rasters gain columns on both sides; landscape rasters gain rows.
fn pad_square(src: &[f64], h: usize, w: usize, fill: f64) -> (Vec<f64>, usize) {
    let n = h.max(w);
    let (top, left) = ((n - h) / 2, (n - w) / 2);
    let mut out = vec![fill; n * n];
    for r in 0..h {
        out[(top + r) * n + left..(top + r) * n + left + w].copy_from_slice(&src[r * w..(r + 1) * w]);
    }
    (out, n)
}

/// Pads to a square with white, resizes to `side` and inverts so the
/// background becomes 0.
pub fn load_and_normalize(raw: &Raster, side: usize) -> Result<SketchImage> {
    let gray = raw.to_gray();
    ensure!(
        gray.iter().all(|v| (0.0..=255.0).contains(v)),
        Input,
        "raw raster values must lie in [0,255]"
    );
    let (square, n) = pad_square(&gray, raw.height, raw.width, 255.0);
    let resized = resize_bilinear(&square, n, n, side)?;
    let data = resized.iter().map(|v| ((255.0 - v) / 255.0).clamp(0.0, 1.0)).collect();
    SketchImage::new(Tensor::from_vec(&[side, side], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    pub threshold: f64,
    pub ramp: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            threshold: 0.2,
            ramp: 0.1,
        }
    }
}

/// Sobel gradient magnitude per unit intensity step, soft-thresholded to
/// `[0, 1]`, on a black square canvas.
///
/// Intensities are scaled to `[0, 1]` and the Sobel responses divided by 8,
/// so a linear ramp of slope `s` per pixel has magnitude `s`. Borders
/// replicate the edge pixels.
pub fn extract_sketch(raw: &Raster, edges: &EdgeConfig) -> Result<SketchImage> {
    ensure!(edges.ramp > 0.0, Config, "edge ramp width must be > 0");
    let gray: Vec<f64> = raw.to_gray().iter().map(|v| v / 255.0).collect();
    let (h, w) = (raw.height, raw.width);
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        gray[r * w + c]
    };
    let mut mag = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            let m = (gx * gx + gy * gy).sqrt() / 8.0;
            mag.push(((m - edges.threshold) / edges.ramp).clamp(0.0, 1.0));
        }
    }
    let (square, n) = pad_square(&mag, h, w, 0.0);
    SketchImage::new(Tensor::from_vec(&[n, n], square)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Camera {
    A,
    B,
    C,
}

impl Camera {
    pub const ALL: [Camera; 3] = [Camera::A, Camera::B, Camera::C];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Camera::A => "A",
            Camera::B => "B",
            Camera::C => "C",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(rename = "path")]
    pub source: String,
    pub identity: usize,
    pub camera: Camera,
    pub variant: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<SketchImage>,
    pub meta: Vec<SampleMeta>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<usize> {
        self.meta
            .iter()
            .map(|m| m.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Samples whose identity is in `ids`, in original order.
    pub fn restrict(&self, ids: &[usize]) -> Dataset {
        let keep: BTreeSet<usize> = ids.iter().copied().collect();
        let (images, meta) = self
            .images
            .iter()
            .zip(&self.meta)
            .filter(|(_, m)| keep.contains(&m.identity))
            .map(|(i, m)| (i.clone(), m.clone()))
            .unzip();
        Dataset { images, meta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    /// Clothing sets per identity; cameras A and B wear set 0.
    pub variants: usize,
    pub images_per_camera: usize,
    pub side: usize,
    /// Highest harmonic either band may use.
    pub harmonics: usize,
    pub body_band: Vec<usize>,
    pub clothing_band: Vec<usize>,
    /// Mean contour radius as a fraction of the half side.
    pub base_radius: f64,
    pub body_amplitude: f64,
    /// Bound `epsilon` on every clothing coefficient.
    pub clothing_amplitude: f64,
    /// Radians.
    pub rotation_jitter: f64,
    /// Relative.
    pub scale_jitter: f64,
    /// Normalized units (half side = 1).
    pub translation_jitter: f64,
    /// Relative multiplicative noise on stroke pixels.
    pub pixel_noise: f64,
    /// Pixels.
    pub stroke_width: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 30,
            variants: 2,
            images_per_camera: 20,
            side: 56,
            harmonics: 8,
            body_band: vec![2, 3, 4],
            clothing_band: vec![5, 6, 7],
            base_radius: 0.5,
            body_amplitude: 0.1,
            clothing_amplitude: 0.04,
            rotation_jitter: 0.1,
            scale_jitter: 0.05,
            translation_jitter: 0.03,
            pixel_noise: 0.1,
            stroke_width: 1.5,
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.identities >= 1 && self.images_per_camera >= 1 && self.harmonics >= 1,
            Config,
            "identity, image and harmonic counts must be >= 1"
        );
        ensure!(
            self.variants >= 2,
            Config,
            "need at least 2 clothing variants so camera C differs from camera A, got {}",
            self.variants
        );
        ensure!(self.side >= 2, Config, "raster side must be >= 2, got {}", self.side);
        ensure!(!self.body_band.is_empty(), Config, "body band is empty");
        for &h in self.body_band.iter().chain(&self.clothing_band) {
            ensure!(
                (1..=self.harmonics).contains(&h),
                Config,
                "harmonic {h} outside 1..={}",
                self.harmonics
            );
        }
        if let Some(h) = self.body_band.iter().find(|h| self.clothing_band.contains(h)) {
            return Err(Error::Config(format!(
                "harmonic {h} is in both the body and the clothing band"
            )));
        }
        let worst = self.body_amplitude * self.body_band.len() as f64
            + self.clothing_amplitude * self.clothing_band.len() as f64;
        ensure!(
            self.body_amplitude >= 0.0 && self.clothing_amplitude >= 0.0,
            Config,
            "amplitudes must be >= 0"
        );
        ensure!(
            self.base_radius > worst,
            Config,
            "base radius {} does not exceed the largest harmonic excursion {worst}",
            self.base_radius
        );
        ensure!(
            self.rotation_jitter >= 0.0
                && (0.0..1.0).contains(&self.scale_jitter)
                && self.translation_jitter >= 0.0
                && self.pixel_noise >= 0.0,
            Config,
            "jitter magnitudes must be >= 0 (scale jitter < 1)"
        );
        ensure!(self.stroke_width > 0.0, Config, "stroke width must be > 0");
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.identities * 3 * self.images_per_camera
    }

    pub fn variant_for(&self, camera: Camera, index: usize) -> usize {
        match camera {
            Camera::A | Camera::B => 0,
            Camera::C => 1 + index % (self.variants - 1),
        }
    }
}

/// Fourier terms `(harmonic, amplitude, phase)` of a radius profile.
#[derive(Debug, Clone)]
struct Profile {
    base: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl Profile {
    fn eval(&self, phi: f64) -> (f64, f64) {
        let mut rho = self.base;
        let mut slope = 0.0;
        for &(h, c, psi) in &self.terms {
            let (s, co) = (h * phi + psi).sin_cos();
            rho += c * co;
            slope -= c * h * s;
        }
        (rho, slope)
    }
}

fn draw_terms<R: Rng>(band: &[usize], amplitude: f64, rng: &mut R) -> Vec<(f64, f64, f64)> {
    band.iter()
        .map(|&h| {
            let c = if amplitude > 0.0 {
                rng.gen_range(-amplitude..=amplitude)
            } else {
                0.0
            };
            (h as f64, c, rng.gen_range(0.0..2.0 * PI))
        })
        .collect()
}

fn jitter<R: Rng>(bound: f64, rng: &mut R) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..=bound)
    } else {
        0.0
    }
}

fn render(cfg: &SynthConfig, profile: &Profile, identity: usize, camera: Camera, index: usize) -> Vec<u8> {
    let mut rng = rng_for(cfg.seed, &[12, identity as u64, camera.index() as u64, index as u64]);
    let rot = jitter(cfg.rotation_jitter, &mut rng);
    let scale = 1.0 + jitter(cfg.scale_jitter, &mut rng);
    let tx = jitter(cfg.translation_jitter, &mut rng);
    let ty = jitter(cfg.translation_jitter, &mut rng);
    let (sr, cr) = rot.sin_cos();
    let n = cfg.side;
    let px_per_unit = scale * (n - 1) as f64 / 2.0;
    let half = cfg.stroke_width / 2.0;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let x = 2.0 * col as f64 / (n - 1) as f64 - 1.0 - tx;
            let y = 1.0 - 2.0 * row as f64 / (n - 1) as f64 - ty;
            let qx = (cr * x + sr * y) / scale;
            let qy = (-sr * x + cr * y) / scale;
            let r = qx.hypot(qy);
            let (rho, slope) = profile.eval(qy.atan2(qx));
            let dist = (r - rho).abs() / (1.0 + (slope / rho).powi(2)).sqrt() * px_per_unit;
            let mut v = (half + 0.5 - dist).clamp(0.0, 1.0);
            if v > 0.0 && cfg.pixel_noise > 0.0 {
                v = (v * (1.0 + rng.gen_range(-cfg.pixel_noise..=cfg.pixel_noise))).clamp(0.0, 1.0);
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

pub fn synth_path(identity: usize, camera: Camera, variant: usize, index: usize) -> String {
    format!("{camera}/id{identity:04}_v{variant}_{index:03}.pgm")
}

/// Deterministic three-camera dataset. Identities differ in the body band of
/// a closed contour's radius profile; clothing variants perturb only the
/// clothing band; every image adds its own pose jitter and stroke noise.
///
/// Samples are ordered by identity, camera, then index.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut jobs = Vec::with_capacity(cfg.image_count());
    for id in 0..cfg.identities {
        let mut rng = rng_for(cfg.seed, &[10, id as u64]);
        let body = draw_terms(&cfg.body_band, cfg.body_amplitude, &mut rng);
        let wardrobe: Vec<Profile> = (0..cfg.variants)
            .map(|v| {
                let mut rng = rng_for(cfg.seed, &[11, id as u64, v as u64]);
                let mut terms = body.clone();
                terms.extend(draw_terms(&cfg.clothing_band, cfg.clothing_amplitude, &mut rng));
                Profile {
                    base: cfg.base_radius,
                    terms,
                }
            })
            .collect();
        for camera in Camera::ALL {
            for k in 0..cfg.images_per_camera {
                let variant = cfg.variant_for(camera, k);
                jobs.push((id, camera, k, variant, wardrobe[variant].clone()));
            }
        }
    }
    let rendered: Vec<(Vec<u8>, SampleMeta)> = jobs
        .into_par_iter()
        .map(|(identity, camera, k, variant, profile)| {
            let levels = render(cfg, &profile, identity, camera, k);
            let meta = SampleMeta {
                source: synth_path(identity, camera, variant, k),
                identity,
                camera,
                variant,
            };
            (levels, meta)
        })
        .collect();
    let mut images = Vec::with_capacity(rendered.len());
    let mut meta = Vec::with_capacity(rendered.len());
    for (levels, m) in rendered {
        images.push(SketchImage::from_levels(cfg.side, &levels)?);
        meta.push(m);
    }
    Ok(Dataset { images, meta })
}

/// Identity-disjoint split; both lists come back sorted.
pub fn dataset_split(identities: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(
        train_fraction > 0.0 && train_fraction < 1.0,
        Config,
        "train fraction must lie in (0,1), got {train_fraction}"
    );
    let mut ids: Vec<usize> = identities.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    ensure!(ids.len() >= 2, Config, "need at least 2 identities to split, got {}", ids.len());
    let n_train = ((ids.len() as f64 * train_fraction).round() as usize).clamp(1, ids.len() - 1);
    ids.shuffle(&mut rng_for(seed, &[20]));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn read_pgm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |reason: &str| Error::format(path, reason);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary graymaps (P5) are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must lie in 1..=65535"));
    }
    let pixels = &bytes[(pos + 1).min(bytes.len())..];
    let depth = if maxval < 256 { 1 } else { 2 };
    if pixels.len() < width * height * depth {
        return Err(bad("pixel data is truncated"));
    }
    let scale = 255.0 / maxval as f64;
    let data = if depth == 1 {
        pixels[..width * height].iter().map(|&v| v as f64 * scale).collect()
    } else {
        pixels[..2 * width * height]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 * scale)
            .collect()
    };
    Raster::gray(height, width, data)
}

fn read_png(path: &Path) -> Result<Raster> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.buffer_size()];
    // Alpha is dropped.
    let (channels, samples) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (1, 2),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 4),
        other => return Err(Error::format(path, format!("unsupported PNG color type {other:?}"))),
    };
    let stride = info.line_size;
    let mut data = Vec::with_capacity(h * w * channels);
    for r in 0..h {
        for px in bytes[r * stride..r * stride + w * samples].chunks_exact(samples) {
            data.extend(px[..channels].iter().map(|&v| v as f64));
        }
    }
    Raster::new(h, w, channels, data)
}

/// Reads a binary graymap (`.pgm`, `.pnm`) or a PNG.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => read_png(path),
        "pgm" | "pnm" => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            read_pgm(&bytes, path)
        }
        _ => Err(Error::format(path, "expected a .pgm, .pnm or .png file")),
    }
}

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    ensure!(
        pixels.len() == height * width,
        Contract,
        "{} pixels for a {height}x{width} graymap",
        pixels.len()
    );
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, meta: &[SampleMeta]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for m in meta {
        w.serialize(m).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleMeta>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// How manifest images become sketches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ingest {
    /// Images already are sketches with a white background.
    #[default]
    Sketch,
    /// Photographs: run the edge extractor first.
    Edges,
}

/// Writes every image under `dir` at its manifest path, plus `manifest.csv`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    for (img, m) in data.images.iter().zip(&data.meta) {
        write_pgm(&dir.join(&m.source), img.side(), img.side(), &img.to_raw_bytes())?;
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &data.meta)?;
    Ok(manifest)
}

/// Loads every manifest entry, resolving paths against the manifest's
/// directory.
pub fn load_dataset(manifest: &Path, side: usize, ingest: Ingest, edges: &EdgeConfig) -> Result<Dataset> {
    let meta = read_manifest(manifest)?;
    ensure!(!meta.is_empty(), Input, "manifest {} lists no images", manifest.display());
    let root = manifest.parent().unwrap_or(Path::new("."));
    let images = meta
        .par_iter()
        .map(|m| {
            let raw = read_raster(&root.join(&m.source))?;
            match ingest {
                Ingest::Sketch => load_and_normalize(&raw, side),
                Ingest::Edges => extract_sketch(&raw, edges)?.resized(side),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { images, meta })
}
