//! MVTec-style dataset ingestion: `train/good`, `test/<kind>`, `ground_truth/<kind>/<stem>_mask.*`.

use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::netpbm::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `<kind>/<stem>`.
    pub id: String,
    pub image: Raster,
    /// Per-pixel anomaly labels; all false for good images. `None` in the train split.
    pub mask: Option<Vec<bool>>,
}

impl Sample {
    pub fn is_defective(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.iter().any(|&v| v))
    }
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm"))
}

fn sorted_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
        .collect::<CliResult<_>>()?;
    out.sort();
    Ok(out)
}

fn find_mask(root: &Path, kind: &str, stem: &str) -> Option<PathBuf> {
    ["pgm", "pnm", "ppm"]
        .iter()
        .map(|ext| root.join("ground_truth").join(kind).join(format!("{stem}_mask.{ext}")))
        .find(|p| p.is_file())
}

/// Every image of `split`, sorted by kind then file name.
pub fn load(root: &Path, split: Split) -> CliResult<Vec<Sample>> {
    let mut out = Vec::new();
    match split {
        Split::Train => {
            let dir = root.join("train").join("good");
            for p in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
                let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                out.push(Sample {
                    id: format!("good/{stem}"),
                    image: Raster::read(&p)?,
                    mask: None,
                });
            }
        }
        Split::Test => {
            let dir = root.join("test");
            for kind_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
                let kind = kind_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
                for p in sorted_entries(&kind_dir)?.into_iter().filter(|p| is_image(p)) {
                    let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    let image = Raster::read(&p)?;
                    let mask = match (kind.as_str(), find_mask(root, &kind, &stem)) {
                        ("good", _) | (_, None) => vec![false; image.width * image.height],
                        (_, Some(mp)) => {
                            let m = Raster::read(&mp)?;
                            if (m.width, m.height) != (image.width, image.height) {
                                return Err(CliError::Data(format!(
                                    "{}: mask is {}x{}, image is {}x{}",
                                    mp.display(),
                                    m.width,
                                    m.height,
                                    image.width,
                                    image.height
                                )));
                            }
                            m.to_mask()
                        }
                    };
                    out.push(Sample {
                        id: format!("{kind}/{stem}"),
                        image,
                        mask: Some(mask),
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("no images in the {split:?} split of {}", root.display())));
    }
    let (w, h, c) = (out[0].image.width, out[0].image.height, out[0].image.channels);
    if let Some(bad) = out.iter().find(|s| (s.image.width, s.image.height, s.image.channels) != (w, h, c)) {
        return Err(CliError::Data(format!("{} differs in size or channels from {}", bad.id, out[0].id)));
    }
    Ok(out)
}
