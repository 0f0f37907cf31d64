//! Binary Netpbm: PGM (P5, 8- or 16-bit) and PPM (P6, 8-bit).

use std::path::Path;

use pyramidflow::tensor::{Shape4, Tensor4};
use pyramidflow::Scalar;

use crate::error::{CliError, CliResult};
use crate::fsio::write_atomic;

/// Decoded samples, interleaved for RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn format_err(msg: impl Into<String>) -> CliError {
    CliError::Format(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> CliResult<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(format!("bad {what} in header")))
    }
}

impl Raster {
    pub fn decode(bytes: &[u8]) -> CliResult<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(format_err("not a binary PGM/PPM (expected P5 or P6)")),
        };
        let mut h = Header { bytes, pos: 2 };
        let width = h.number("width")?;
        let height = h.number("height")?;
        let maxval = h.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(format_err("zero image dimension"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(format_err(format!("maxval {maxval} outside 1..=65535")));
        }
        if channels == 3 && maxval > 255 {
            return Err(format_err("16-bit PPM is not supported"));
        }
        // exactly one whitespace byte separates the header from the payload
        match bytes.get(h.pos) {
            Some(c) if c.is_ascii_whitespace() => h.pos += 1,
            _ => return Err(format_err("header not terminated by whitespace")),
        }
        let count = width * height * channels;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let payload = &bytes[h.pos..];
        if payload.len() < need {
            return Err(format_err(format!("truncated payload: {} of {need} bytes", payload.len())));
        }
        let samples: Vec<u16> = if wide {
            payload[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            payload[..need].iter().map(|&b| b as u16).collect()
        };
        if let Some(&bad) = samples.iter().find(|&&s| s > maxval as u16) {
            return Err(format_err(format!("sample {bad} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.encode())
    }

    /// `1 × channels × height × width`, scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let scale = 1.0 / self.maxval as f64;
        let (w, c) = (self.width, self.channels);
        Tensor4::from_fn(Shape4::new(1, c, self.height, w), |_, k, i, j| {
            T::c(self.samples[(i * w + j) * c + k] as f64 * scale)
        })
    }

    /// Quantize a `1 × {1,3} × h × w` tensor in `[0, 1]` (clamped).
    pub fn from_tensor<T: Scalar>(t: &Tensor4<T>, maxval: u16) -> CliResult<Self> {
        let s = t.shape();
        if s.n != 1 || (s.c != 1 && s.c != 3) {
            return Err(format_err(format!("cannot store a {s} tensor as an image")));
        }
        let mut samples = Vec::with_capacity(s.numel());
        for i in 0..s.h {
            for j in 0..s.w {
                for k in 0..s.c {
                    let v = t.get(0, k, i, j).to_f64_lossy().clamp(0.0, 1.0);
                    samples.push((v * maxval as f64).round() as u16);
                }
            }
        }
        Ok(Self {
            width: s.w,
            height: s.h,
            channels: s.c,
            maxval,
            samples,
        })
    }

    /// Foreground where any sample is nonzero.
    pub fn to_mask(&self) -> Vec<bool> {
        self.samples.chunks(self.channels).map(|px| px.iter().any(|&v| v > 0)).collect()
    }

    pub fn from_mask(mask: &[bool], width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            channels: 1,
            maxval: 255,
            samples: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        }
    }
}

/// 16-bit PGM of a non-negative score map scaled by its maximum, plus the
/// maximum used for scaling.
pub fn quantize_scores(scores: &[f64], width: usize, height: usize) -> (Raster, f64) {
    let max = scores.iter().copied().fold(0.0f64, f64::max);
    let samples = scores
        .iter()
        .map(|&s| if max > 0.0 { (65535.0 * s.max(0.0) / max).round() as u16 } else { 0 })
        .collect();
    (
        Raster {
            width,
            height,
            channels: 1,
            maxval: 65535,
            samples,
        },
        max,
    )
}

/// Write `<path>` as a 16-bit score map and `<path>.txt` holding `score_max = <value>`.
pub fn write_score_map(path: &Path, scores: &[f64], width: usize, height: usize) -> CliResult<f64> {
    let (raster, max) = quantize_scores(scores, width, height);
    raster.write(path)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".txt");
    write_atomic(Path::new(&sidecar), format!("score_max = {max:e}\n").as_bytes())?;
    Ok(max)
}
