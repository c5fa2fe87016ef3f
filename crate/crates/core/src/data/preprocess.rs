//! Image decoding, resizing, standardization and training-time augmentation.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Per-channel mean and standard deviation of unit-scaled training pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: [0.0; 3], std: [1.0; 3] };

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("norm stats: {e}")))
    }
}

pub fn decode(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Bilinear resize to `[h, w]`, grayscale replicated to three channels,
/// scaled to `[0, 1]`. Returns `3·h·w` values in channel-major order.
pub fn to_unit_array(img: &DynamicImage, [h, w]: [usize; 2]) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0f32; CHANNELS * plane];
    let resize = |i: &DynamicImage| {
        if i.width() as usize == w && i.height() as usize == h {
            i.clone()
        } else {
            i.resize_exact(w as u32, h as u32, FilterType::Triangle)
        }
    };
    if img.color().has_color() {
        let rgb = resize(img).to_rgb8();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
    } else {
        let gray = resize(img).to_luma8();
        for (i, px) in gray.pixels().enumerate() {
            let v = px[0] as f32 / 255.0;
            for c in 0..CHANNELS {
                out[c * plane + i] = v;
            }
        }
    }
    out
}

/// Population mean and standard deviation per channel over all pixels of
/// all images. A channel with zero spread gets std 1.
pub fn compute_norm_stats(images: &[Vec<f32>]) -> NormStats {
    let mut mean = [0f64; 3];
    let mut std = [1f64; 3];
    let Some(first) = images.first() else { return NormStats::IDENTITY };
    let plane = first.len() / CHANNELS;
    let count = (plane * images.len()) as f64;
    for c in 0..CHANNELS {
        let sum: f64 = images.iter().flat_map(|im| &im[c * plane..(c + 1) * plane]).map(|&v| v as f64).sum();
        mean[c] = sum / count;
        let ss: f64 = images
            .iter()
            .flat_map(|im| &im[c * plane..(c + 1) * plane])
            .map(|&v| (v as f64 - mean[c]).powi(2))
            .sum();
        let s = (ss / count).sqrt();
        std[c] = if s > 1e-12 { s } else { 1.0 };
    }
    NormStats { mean, std }
}

pub fn standardize<T: Scalar>(unit: &[f32], stats: &NormStats) -> Vec<T> {
    let plane = unit.len() / CHANNELS;
    unit.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            T::from_f64_lossy((v as f64 - stats.mean[c]) / stats.std[c])
        })
        .collect()
}

/// Decode, resize and standardize one file into a `[1, 3, h, w]` tensor.
pub fn preprocess_file<T: Scalar>(path: &Path, size: [usize; 2], stats: &NormStats) -> Result<Tensor<T>> {
    let img = decode(path)?;
    Tensor::from_vec([1, CHANNELS, size[0], size[1]], standardize(&to_unit_array(&img, size), stats))
}

/// Random horizontal flip and small rotation, applied to training batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    pub hflip_prob: f64,
    pub max_rotation_deg: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { hflip_prob: 0.5, max_rotation_deg: 10.0 }
    }
}

impl Augment {
    pub const NONE: Augment = Augment { hflip_prob: 0.0, max_rotation_deg: 0.0 };

    /// Transform one standardized `[c, h, w]` item in place. Pixels rotated
    /// in from outside the frame are 0, the standardized channel mean.
    pub fn apply<T: Scalar, R: Rng>(&self, item: &mut [T], [h, w]: [usize; 2], rng: &mut R) {
        let flip = self.hflip_prob > 0.0 && rng.random::<f64>() < self.hflip_prob;
        let angle = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        if !flip && angle == 0.0 {
            return;
        }
        let src = item.to_vec();
        let plane = h * w;
        let (sin, cos) = angle.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        for y in 0..h {
            for x in 0..w {
                let xo = if flip { w - 1 - x } else { x } as f64;
                // inverse rotation of the output coordinate
                let dx = xo - cx;
                let dy = y as f64 - cy;
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                for c in 0..item.len() / plane {
                    item[c * plane + y * w + x] = bilinear(&src[c * plane..(c + 1) * plane], h, w, sy, sx);
                }
            }
        }
    }
}

fn bilinear<T: Scalar>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize].to_f64_lossy()
        }
    };
    let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx;
    T::from_f64_lossy(v)
}

/// Unit-scaled images of one split held in memory.
#[derive(Clone, Debug, Default)]
pub struct LoadedSplit {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
    pub size: [usize; 2],
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Standardized `[n, 3, h, w]` batch of the given items, optionally augmented.
    pub fn batch<T: Scalar, R: Rng>(
        &self,
        indices: &[usize],
        stats: &NormStats,
        augment: Option<(&Augment, &mut R)>,
    ) -> (Tensor<T>, Vec<usize>) {
        let [h, w] = self.size;
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * h * w);
        let mut augment = augment;
        for &i in indices {
            let mut item = standardize::<T>(&self.images[i], stats);
            if let Some((aug, rng)) = augment.as_mut() {
                aug.apply(&mut item, self.size, *rng);
            }
            data.extend(item);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec([indices.len(), CHANNELS, h, w], data).expect("batch shape"), labels)
    }
}

/// Load every record of `split`; undecodable files are skipped with a warning.
pub fn load_split(manifest: &DatasetManifest, split: Split, size: [usize; 2]) -> Result<LoadedSplit> {
    let mut out = LoadedSplit { size, ..Default::default() };
    for r in manifest.records_in(split) {
        let path = manifest.resolve(r);
        match decode(&path) {
            Ok(img) => {
                out.images.push(to_unit_array(&img, size));
                out.labels.push(r.label);
                out.paths.push(path);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gray_replicated_and_resized() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(512, 512, Luma([128])));
        let a = to_unit_array(&img, [224, 224]);
        assert_eq!(a.len(), 3 * 224 * 224);
        assert!(a.iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn color_channels_kept_apart() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, Rgb([255, 0, 51])));
        let a = to_unit_array(&img, [4, 4]);
        assert_eq!(&a[..16], &[1.0; 16]);
        assert_eq!(&a[16..32], &[0.0; 16]);
        assert_eq!(a[32], 0.2);
    }

    #[test]
    fn no_op_augment_leaves_item() {
        let mut item: Vec<f64> = (0..3 * 16).map(|v| v as f64).collect();
        let before = item.clone();
        Augment::NONE.apply(&mut item, [4, 4], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(item, before);
    }

    #[test]
    fn pure_flip_mirrors_columns() {
        let aug = Augment { hflip_prob: 1.0, max_rotation_deg: 0.0 };
        let mut item: Vec<f64> = (0..6).map(|v| v as f64).collect();
        aug.apply(&mut item, [2, 3], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(item, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn stats_json_roundtrip() {
        let s = NormStats { mean: [0.1, 0.2, 0.3], std: [0.4, 0.5, 0.6] };
        assert_eq!(NormStats::from_json(&s.to_json()).unwrap(), s);
    }
}
