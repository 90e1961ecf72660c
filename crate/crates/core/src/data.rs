//! Paired low/normal-light samples: directory loading, synthetic generation and
//! synchronized augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub name: String,
    pub low: ImageTensor,
    pub normal: ImageTensor,
}

impl PairedSample {
    pub fn new(name: impl Into<String>, low: ImageTensor, normal: ImageTensor) -> Result<Self> {
        let name = name.into();
        low.expect_rgb()?;
        normal.expect_rgb()?;
        if low.height() != normal.height() || low.width() != normal.width() {
            return Err(Error::Dataset(format!(
                "pair {name}: low is {}x{} but normal is {}x{}",
                low.height(),
                low.width(),
                normal.height(),
                normal.width()
            )));
        }
        Ok(Self { name, low, normal })
    }

    pub fn min_side(&self) -> usize {
        self.low.height().min(self.low.width())
    }
}

/// Paths of one matched pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub name: String,
    pub low: PathBuf,
    pub normal: PathBuf,
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                files.insert(name.to_owned(), path.clone());
            }
        }
    }
    Ok(files)
}

/// Matches `root/low/*.png` with `root/normal/*.png` by file name, in lexicographic order.
pub fn pair_paths(root: impl AsRef<Path>) -> Result<Vec<PairPaths>> {
    let root = root.as_ref();
    let low = png_files(&root.join("low"))?;
    let mut normal = png_files(&root.join("normal"))?;
    let mut pairs = Vec::with_capacity(low.len());
    let mut orphans = Vec::new();
    for (name, low_path) in low {
        match normal.remove(&name) {
            Some(normal_path) => pairs.push(PairPaths {
                name,
                low: low_path,
                normal: normal_path,
            }),
            None => orphans.push(format!("low/{name}")),
        }
    }
    orphans.extend(normal.into_keys().map(|n| format!("normal/{n}")));
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: unmatched images: {}",
            root.display(),
            orphans.join(", ")
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("{}: no image pairs found", root.display())));
    }
    log::info!("found {} pairs under {}", pairs.len(), root.display());
    Ok(pairs)
}

pub fn load_pairs(root: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    pair_paths(root)?
        .into_iter()
        .map(|p| PairedSample::new(p.name, ImageTensor::load(&p.low)?, ImageTensor::load(&p.normal)?))
        .collect()
}

/// Smooth color fields with a few flat shapes, darkened by a random gamma and
/// corrupted with Gaussian noise to form the low-light half.
pub fn synth_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::invalid("synth_pairs needs at least one pair"));
    }
    if size == 0 {
        return Err(Error::invalid("synth_pairs needs a positive size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let normal = synth_normal(&mut rng, size);
            let gamma = rng.random_range(2.0..=4.0);
            let sigma = rng.random_range(0.02..=0.06);
            let noise = Normal::new(0.0, sigma).expect("positive sigma");
            let mut low = normal.tensor().map(|v| v.powf(gamma));
            for v in low.data_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            PairedSample::new(format!("synth_{i:04}.png"), ImageTensor::new(low)?, normal)
        })
        .collect()
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) < r * r,
        }
    }
}

fn synth_normal(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.75));
    let waves: Vec<[Wave; 2]> = (0..3)
        .map(|_| {
            std::array::from_fn(|_| Wave {
                fx: rng.random_range(0.5..3.0),
                fy: rng.random_range(0.5..3.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            })
        })
        .collect();
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(2..5))
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let (y0, x0) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(0.1..0.3),
                    x1: x0 + rng.random_range(0.1..0.3),
                }
            } else {
                Shape::Disc {
                    cy: rng.random_range(0.1..0.9),
                    cx: rng.random_range(0.1..0.9),
                    r: rng.random_range(0.05..0.2),
                }
            };
            (shape, std::array::from_fn(|_| rng.random_range(0.2..0.95)))
        })
        .collect();
    let s = size as f64;
    ImageTensor::from_fn(size, size, |c, y, x| {
        let (u, v) = ((y as f64 + 0.5) / s, (x as f64 + 0.5) / s);
        if let Some((_, color)) = shapes.iter().rev().find(|(sh, _)| sh.contains(u, v)) {
            return color[c];
        }
        let field: f64 = waves[c]
            .iter()
            .map(|w| (std::f64::consts::TAU * (w.fy * u + w.fx * v) + w.phase).sin())
            .sum();
        (base[c] + 0.1 * field).clamp(0.05, 0.95)
    })
}

/// One augmentation draw, applied identically to both halves of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropWindow {
    pub fn draw(rng: &mut impl Rng, height: usize, width: usize, size: usize, allow_flip: bool) -> Result<Self> {
        if size == 0 || size > height || size > width {
            return Err(Error::Config(format!(
                "crop {size} does not fit an image of {height}x{width}"
            )));
        }
        Ok(Self {
            top: rng.random_range(0..=height - size),
            left: rng.random_range(0..=width - size),
            size,
            flip: allow_flip && rng.random_bool(0.5),
        })
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let out = img.crop(self.top, self.left, self.size, self.size)?;
        Ok(if self.flip { out.flip_horizontal() } else { out })
    }

    pub fn apply_pair(&self, sample: &PairedSample) -> Result<(ImageTensor, ImageTensor)> {
        Ok((self.apply(&sample.low)?, self.apply(&sample.normal)?))
    }
}
