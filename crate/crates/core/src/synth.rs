//! Synthetic re-identification data.
//!
//! An identity is a sum of Gaussian blobs on a grey background. Every camera
//! view applies one fixed smooth warp plus a brightness/contrast change to all
//! identities. Each image then moves its identity a random amount along a
//! curved path (translation `t` horizontally, `t^2` vertically, scaled by
//! `curvature`) and adds pixel noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::ImageLabel;
use crate::io::{read_image, write_pgm};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub views: usize,
    pub images_per_view: usize,
    pub size: usize,
    /// Pixels of pose travel along the per-image curve.
    pub curvature: f64,
    pub noise: f64,
    pub blobs: usize,
    /// Peak displacement of the per-view warp, in pixels.
    pub warp: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            identities: 40,
            views: 2,
            images_per_view: 4,
            size: 48,
            curvature: 4.0,
            noise: 0.07,
            blobs: 6,
            warp: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.views < 2 {
            return Err(Error::param("synthetic data needs at least 2 identities and 2 views"));
        }
        if self.images_per_view == 0 || self.size < 8 || self.blobs == 0 {
            return Err(Error::param("images per view, blob count must be positive and size >= 8"));
        }
        for (name, v) in [("curvature", self.curvature), ("noise", self.noise), ("warp", self.warp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<ImageLabel>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.labels.iter().map(|l| l.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Indices of images whose identity is in `ids`.
    pub fn indices_of(&self, ids: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| ids.contains(&self.labels[i].identity)).collect()
    }

    /// The first `round(fraction * identities)` identities train, the rest test.
    pub fn identity_split(&self, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        let ids = self.identities();
        let n_train = (fraction * ids.len() as f64).round() as usize;
        if n_train < 2 || n_train >= ids.len() {
            return Err(Error::config(format!(
                "train fraction {fraction} leaves {n_train} of {} identities for training",
                ids.len()
            )));
        }
        Ok((ids[..n_train].to_vec(), ids[n_train..].to_vec()))
    }
}

struct Blob {
    y: f64,
    x: f64,
    sigma: f64,
    amp: f64,
}

struct ViewWarp {
    amp_x: f64,
    amp_y: f64,
    phase_x: f64,
    phase_y: f64,
    freq: f64,
    gain: f64,
    offset: f64,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.size as f64;
    let mut rng = SeededRng::new(spec.seed, 0);
    let templates: Vec<Vec<Blob>> = (0..spec.identities)
        .map(|_| {
            (0..spec.blobs)
                .map(|_| Blob {
                    y: s * (0.1 + 0.8 * rng.uniform()),
                    x: s * (0.2 + 0.6 * rng.uniform()),
                    sigma: s * (0.06 + 0.1 * rng.uniform()),
                    amp: if rng.uniform() < 0.5 { -1.0 } else { 1.0 } * (0.15 + 0.25 * rng.uniform()),
                })
                .collect()
        })
        .collect();
    let warps: Vec<ViewWarp> = (0..spec.views)
        .map(|_| ViewWarp {
            amp_x: spec.warp * (2.0 * rng.uniform() - 1.0),
            amp_y: spec.warp * (2.0 * rng.uniform() - 1.0),
            phase_x: 2.0 * PI * rng.uniform(),
            phase_y: 2.0 * PI * rng.uniform(),
            freq: 1.0 + rng.uniform(),
            gain: 0.7 + 0.6 * rng.uniform(),
            offset: 0.3 * (rng.uniform() - 0.5),
        })
        .collect();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut pose_rng = rng.fork(1);
    let mut noise_rng = rng.fork(2);
    for (identity, blobs) in templates.iter().enumerate() {
        for (view, w) in warps.iter().enumerate() {
            for _ in 0..spec.images_per_view {
                let t = 2.0 * pose_rng.uniform() - 1.0;
                let (dx, dy) = (spec.curvature * t, spec.curvature * (t * t - 0.5));
                let mut img = Tensor::from_fn(&[spec.size, spec.size], |p| {
                    let (i, j) = ((p / spec.size) as f64, (p % spec.size) as f64);
                    let yy = i + w.amp_y * (2.0 * PI * w.freq * j / s + w.phase_y).sin() - dy;
                    let xx = j + w.amp_x * (2.0 * PI * w.freq * i / s + w.phase_x).sin() - dx;
                    let v: f64 = blobs
                        .iter()
                        .map(|b| b.amp * (-((yy - b.y).powi(2) + (xx - b.x).powi(2)) / (2.0 * b.sigma * b.sigma)).exp())
                        .sum();
                    0.5 + w.gain * v + w.offset
                });
                img.data_mut().iter_mut().for_each(|v| *v += spec.noise * noise_rng.normal());
                images.push(img);
                labels.push(ImageLabel { identity, view });
            }
        }
    }
    Ok(Dataset { images, labels })
}

/// Write `root/<identity>/<view>/<n>.pgm`, mapping `[0, 1]` to 8 bits.
pub fn write_dataset(root: &Path, data: &Dataset) -> Result<()> {
    let mut counters = std::collections::HashMap::new();
    for (img, l) in data.images.iter().zip(&data.labels) {
        let dir = root.join(format!("{:04}", l.identity)).join(format!("{:02}", l.view));
        std::fs::create_dir_all(&dir)?;
        let n = counters.entry(*l).or_insert(0usize);
        write_pgm(&dir.join(format!("{:03}.pgm", *n)), &img.map(|v| v.clamp(0.0, 1.0)))?;
        *n += 1;
    }
    Ok(())
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Read `root/<identity>/<view>/<image files>`. Identities and views are
/// numbered by sorted directory name.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (identity, id_dir) in sorted_dirs(root)?.iter().enumerate() {
        for (view, view_dir) in sorted_dirs(id_dir)?.iter().enumerate() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(view_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                images.push(read_image(&f)?);
                labels.push(ImageLabel { identity, view });
            }
        }
    }
    if images.is_empty() {
        return Err(Error::data(format!("no images under {}", root.display())));
    }
    Ok(Dataset { images, labels })
}
