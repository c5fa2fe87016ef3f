//! Synthetic ultrasound-like dataset: one parametric shape composition per
//! class on a dark background, multiplied by unit-mean speckle.
//!
//! Every shape is symmetric about the vertical axis, so horizontal-flip
//! augmentation never turns one class into another.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::manifest::{split_manifest, DatasetManifest, Record, Source};
use super::taxonomy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Filled wide ellipse.
    Ellipse,
    /// Circular outline.
    Ring,
    /// Two discs side by side.
    DiscPair,
    /// Horizontal bar.
    HorizontalBar,
    /// Vertical bar.
    VerticalBar,
    /// Upper half of a ring.
    Arc,
    /// Plus sign.
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 7] = [
        ShapeKind::Ellipse,
        ShapeKind::Ring,
        ShapeKind::DiscPair,
        ShapeKind::HorizontalBar,
        ShapeKind::VerticalBar,
        ShapeKind::Arc,
        ShapeKind::Cross,
    ];
}

/// Shape of one class. `scale` is relative to half the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub kind: ShapeKind,
    pub scale: f64,
}

pub const SCALES: [f64; 3] = [0.35, 0.6, 0.85];

/// Default geometry of class `label`: kind cycles through the seven shapes,
/// scale steps through [`SCALES`] every seven classes.
pub fn default_geometry(label: usize) -> Geometry {
    Geometry { kind: ShapeKind::ALL[label % 7], scale: SCALES[(label / 7) % SCALES.len()] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Standard deviation of the unit-mean speckle; 0 disables it.
    pub noise: f64,
    pub seed: u64,
    /// Per-class geometry; defaults to [`default_geometry`] when empty.
    pub geometries: Vec<Geometry>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { classes: taxonomy::NUM_CLASSES, per_class: 10, image_size: 64, noise: 0.3, seed: 7, geometries: Vec::new() }
    }
}

impl SynthSpec {
    pub fn geometry(&self, label: usize) -> Geometry {
        self.geometries.get(label).copied().unwrap_or_else(|| default_geometry(label))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > taxonomy::NUM_CLASSES {
            return Err(Error::Config(format!("classes must be in 1..={}", taxonomy::NUM_CLASSES)));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be a finite non-negative number".into()));
        }
        if !self.geometries.is_empty() && self.geometries.len() != self.classes {
            return Err(Error::Config(format!(
                "{} geometries given for {} classes",
                self.geometries.len(),
                self.classes
            )));
        }
        let geos: Vec<Geometry> = (0..self.classes).map(|c| self.geometry(c)).collect();
        for (i, a) in geos.iter().enumerate() {
            if !(a.scale > 0.0 && a.scale <= 1.0) {
                return Err(Error::Config(format!("class {i}: scale must be in (0, 1]")));
            }
            if let Some(j) = geos[..i].iter().position(|b| b == a) {
                return Err(Error::Config(format!("classes {j} and {i} share the geometry {a:?}")));
            }
        }
        Ok(())
    }
}

/// Per-image variation drawn from the image's own stream.
struct Jitter {
    dx: f64,
    dy: f64,
    scale: f64,
    brightness: f64,
}

fn image_rng(seed: u64, label: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label as u64) << 32) | index as u64);
    rng
}

/// Soft coverage in `[0, 1]` of a signed distance (negative inside).
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn shape_coverage(kind: ShapeKind, x: f64, y: f64, r: f64) -> f64 {
    let thick = (0.12 * r).max(1.5);
    match kind {
        ShapeKind::Ellipse => {
            let (a, b) = (r, 0.6 * r);
            let k = ((x / a).powi(2) + (y / b).powi(2)).sqrt();
            coverage((k - 1.0) * b)
        }
        ShapeKind::Ring => coverage(((x * x + y * y).sqrt() - r).abs() - thick),
        ShapeKind::DiscPair => {
            let rr = 0.4 * r;
            let d = ((x.abs() - 0.55 * r).powi(2) + y * y).sqrt() - rr;
            coverage(d)
        }
        ShapeKind::HorizontalBar => coverage((x.abs() - r).max(y.abs() - thick)),
        ShapeKind::VerticalBar => coverage((y.abs() - r).max(x.abs() - thick)),
        ShapeKind::Arc => {
            let ring = ((x * x + y * y).sqrt() - r).abs() - thick;
            // keep the upper half (image y grows downwards)
            coverage(ring.max(y))
        }
        ShapeKind::Cross => {
            let h = (x.abs() - r).max(y.abs() - thick);
            let v = (y.abs() - r).max(x.abs() - thick);
            coverage(h.min(v))
        }
    }
}

const BACKGROUND: f64 = 0.08;
const FOREGROUND: f64 = 0.75;

/// Render image `index` of class `label` as 8-bit grayscale.
pub fn render(spec: &SynthSpec, label: usize, index: usize) -> GrayImage {
    let n = spec.image_size;
    let geo = spec.geometry(label);
    let mut rng = image_rng(spec.seed, label, index);
    let half = n as f64 / 2.0;
    let jitter = Jitter {
        dx: rng.random_range(-0.06..=0.06) * half,
        dy: rng.random_range(-0.06..=0.06) * half,
        scale: rng.random_range(0.93..=1.07),
        brightness: rng.random_range(0.85..=1.15),
    };
    let r = geo.scale * 0.9 * half * jitter.scale;
    let speckle = (spec.noise > 0.0).then(|| {
        let k = 1.0 / (spec.noise * spec.noise);
        Gamma::new(k, 1.0 / k).expect("positive gamma parameters")
    });
    let mut img = GrayImage::new(n as u32, n as u32);
    for py in 0..n {
        for px in 0..n {
            let x = px as f64 + 0.5 - half - jitter.dx;
            let y = py as f64 + 0.5 - half - jitter.dy;
            // faint radial falloff, as from a sector probe
            let falloff = 1.0 - 0.25 * ((x * x + y * y).sqrt() / (half * 2f64.sqrt())).min(1.0);
            let cov = shape_coverage(geo.kind, x, y, r);
            let mut v = (BACKGROUND + cov * (FOREGROUND * jitter.brightness - BACKGROUND)) * falloff;
            if let Some(g) = &speckle {
                v *= g.sample(&mut rng);
            }
            img.put_pixel(px as u32, py as u32, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
        }
    }
    img
}

/// File name of image `index` of a class, relative to the dataset root.
pub fn relative_path(label: usize, index: usize) -> PathBuf {
    let abbr = taxonomy::CLASSES[label].0;
    PathBuf::from(abbr).join(format!("{abbr}_{index:04}.png"))
}

/// Render the whole dataset under `root` in the `<root>/<ABBREV>/*.png`
/// layout, split it 7:2:1 with the spec seed and write `root/manifest.jsonl`.
pub fn synth_generate(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for label in 0..spec.classes {
        let dir = root.join(taxonomy::CLASSES[label].0);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..spec.per_class {
            let rel = relative_path(label, index);
            let path = root.join(&rel);
            render(spec, label, index)
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::Image { path: path.clone(), source: e })?;
            records.push(Record { path: rel, label, split: None });
        }
    }
    let manifest = DatasetManifest {
        source: Source::Synthetic,
        root: root.to_path_buf(),
        classes: taxonomy::abbreviations(spec.classes),
        unknown_directories: Vec::new(),
        records,
    };
    let manifest = split_manifest(&manifest, [7, 2, 1], spec.seed)?;
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
