//! Deterministic defect-texture datasets in the MVTec-style directory layout.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CliError, CliResult};
use crate::fsio::write_atomic;
use crate::netpbm::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    /// Oriented sinusoidal grating with per-image phase jitter.
    Grating,
    /// Bilinearly interpolated coarse noise shared by all images.
    ValueNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    Blob,
    Scratch,
}

impl DefectKind {
    pub const ALL: [DefectKind; 2] = [DefectKind::Blob, DefectKind::Scratch];

    pub fn name(self) -> &'static str {
        match self {
            Self::Blob => "blob",
            Self::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub texture: Texture,
    pub size: usize,
    /// Chance that an image in a defect slot actually receives a defect.
    pub defect_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            texture: Texture::Grating,
            size: 64,
            defect_rate: 1.0,
            seed: 0,
        }
    }
}

/// Grayscale image in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub size: usize,
    pub data: Vec<f64>,
}

struct TextureModel {
    kind: Texture,
    size: usize,
    angle: f64,
    freq: f64,
    grid: Vec<f64>,
    grid_n: usize,
}

impl TextureModel {
    fn new(kind: Texture, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let grid_n = 9;
        Self {
            kind,
            size,
            angle: rng.gen_range(0.0..PI),
            freq: rng.gen_range(0.09..0.14),
            grid: (0..grid_n * grid_n).map(|_| rng.gen_range(0.25..0.75)).collect(),
            grid_n,
        }
    }

    fn render(&self, rng: &mut ChaCha8Rng) -> Plane {
        let n = self.size;
        let noise = Normal::new(0.0, 0.02).expect("valid sigma");
        let phase = rng.gen_range(-0.25..0.25);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let cell = (n as f64) / (self.grid_n - 1) as f64;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let base = match self.kind {
                    Texture::Grating => {
                        let u = j as f64 * c + i as f64 * s;
                        0.5 + 0.3 * (2.0 * PI * self.freq * u + phase).sin()
                    }
                    Texture::ValueNoise => {
                        let (y, x) = (i as f64 / cell, j as f64 / cell);
                        let (y0, x0) = ((y as usize).min(self.grid_n - 2), (x as usize).min(self.grid_n - 2));
                        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                        let g = |a: usize, b: usize| self.grid[a * self.grid_n + b];
                        (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x0 + 1))
                            + fy * ((1.0 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1))
                            + 0.04 * phase
                    }
                };
                data.push((base + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
        Plane { size: n, data }
    }
}

/// Paint a disc of `radius` at `(ci, cj)`; returns the mask.
pub fn rasterize_disc(size: usize, ci: f64, cj: f64, radius: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - ci, j as f64 - cj);
            mask[i * size + j] = di * di + dj * dj <= radius * radius;
        }
    }
    mask
}

/// Pixels within `half_width` of the segment `a`–`b`.
pub fn rasterize_segment(size: usize, a: (f64, f64), b: (f64, f64), half_width: f64) -> Vec<bool> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let mut mask = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            let (px, py) = (i as f64 - a.0, j as f64 - a.1);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ex, ey) = (px - t * dx, py - t * dy);
            mask[i * size + j] = ex * ex + ey * ey <= half_width * half_width;
        }
    }
    mask
}

fn paint_defect(img: &mut Plane, kind: DefectKind, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = img.size as f64;
    let level = if rng.gen_bool(0.5) { 0.05 } else { 0.95 };
    let mask = match kind {
        DefectKind::Blob => {
            let r = rng.gen_range(3.0..(n / 10.0).max(3.5));
            let ci = rng.gen_range(r..n - r);
            let cj = rng.gen_range(r..n - r);
            rasterize_disc(img.size, ci, cj, r)
        }
        DefectKind::Scratch => {
            let len = rng.gen_range(n * 0.2..n * 0.4);
            let theta = rng.gen_range(0.0..PI);
            let margin = len / 2.0 + 2.0;
            let (ci, cj) = (rng.gen_range(margin..n - margin), rng.gen_range(margin..n - margin));
            let (hx, hy) = (theta.cos() * len / 2.0, theta.sin() * len / 2.0);
            rasterize_segment(img.size, (ci - hx, cj - hy), (ci + hx, cj + hy), 1.0)
        }
    };
    for (v, &m) in img.data.iter_mut().zip(&mask) {
        if m {
            *v = level;
        }
    }
    mask
}

fn raster(p: &Plane) -> Raster {
    Raster {
        width: p.size,
        height: p.size,
        channels: 1,
        maxval: 255,
        samples: p.data.iter().map(|&v| (v * 255.0).round() as u16).collect(),
    }
}

/// What [`generate`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub train: usize,
    pub test_good: usize,
    pub test_defect: usize,
    pub defective_with_mask: usize,
    /// At least one test mask has an anomalous region.
    pub aupro_valid: bool,
}

/// Write `n` defect-free training images plus `n/2` good and `n/2` defect-slot
/// test images (masks in `ground_truth/`) under `out`.
pub fn generate(cfg: &SynthConfig, n: usize, out: &Path) -> CliResult<SynthSummary> {
    if n == 0 {
        return Err(CliError::Usage("synth needs --n ≥ 1".into()));
    }
    if cfg.size < 16 {
        return Err(CliError::Usage("synth needs --size ≥ 16".into()));
    }
    if !(0.0..=1.0).contains(&cfg.defect_rate) {
        return Err(CliError::Usage(format!("defect rate {} outside [0, 1]", cfg.defect_rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let texture = TextureModel::new(cfg.texture, cfg.size, &mut rng);
    let write = |rel: String, r: &Raster| r.write(&out.join(rel));
    for k in 0..n {
        write(format!("train/good/{k:03}.pgm"), &raster(&texture.render(&mut rng)))?;
    }
    let half = n / 2;
    for k in 0..half {
        write(format!("test/good/{k:03}.pgm"), &raster(&texture.render(&mut rng)))?;
    }
    let mut with_mask = 0;
    for k in 0..half {
        let kind = DefectKind::ALL[k % 2];
        let mut img = texture.render(&mut rng);
        let mask = if rng.gen_bool(cfg.defect_rate) {
            with_mask += 1;
            paint_defect(&mut img, kind, &mut rng)
        } else {
            vec![false; cfg.size * cfg.size]
        };
        write(format!("test/{}/{k:03}.pgm", kind.name()), &raster(&img))?;
        write(
            format!("ground_truth/{}/{k:03}_mask.pgm", kind.name()),
            &Raster::from_mask(&mask, cfg.size, cfg.size),
        )?;
    }
    let summary = SynthSummary {
        train: n,
        test_good: half,
        test_defect: half,
        defective_with_mask: with_mask,
        aupro_valid: with_mask > 0,
    };
    let manifest = format!(
        "seed = {}\nsize = {}\nn = {n}\ndefect_rate = {}\ntexture = {}\ntrain = {}\ntest_good = {}\ntest_defect = {}\ndefective_with_mask = {}\naupro_valid = {}\n",
        cfg.seed,
        cfg.size,
        cfg.defect_rate,
        match cfg.texture {
            Texture::Grating => "grating",
            Texture::ValueNoise => "value-noise",
        },
        summary.train,
        summary.test_good,
        summary.test_defect,
        summary.defective_with_mask,
        summary.aupro_valid
    );
    write_atomic(&out.join("manifest.txt"), manifest.as_bytes())?;
    Ok(summary)
}
