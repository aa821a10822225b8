//! Procedural face-like images with region-coded attribute signals.
//!
//! Each image is a noisy oval face on a plain background. Every attribute owns
//! a rectangle; its latent score `u ~ U[0,1]` shifts the intensity of that
//! rectangle by `strength·(2u − 1)`. A nonlinear attribute splits its rectangle
//! into a left and a right patch: the left patch gets `s·strength` for a random
//! sign `s`, the right one `s·strength·(2u − 1)`, so only the product of the
//! two patches carries the latent. Raters report `u` plus Gaussian noise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{save_png, write_manifest, DatasetManifest, FaceExample, ManifestRow, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Region {
        Region { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Left and right halves, used by nonlinear attributes.
    pub fn halves(&self) -> (Region, Region) {
        let mid = (self.x0 + self.x1) / 2;
        (Region { x1: mid, ..*self }, Region { x0: mid, ..*self })
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(':')
            .map(|p| p.trim().parse().map_err(|_| Error::InvalidSpec(format!("bad region `{s}`"))))
            .collect::<Result<_>>()?;
        match v[..] {
            [x0, y0, x1, y1] => Ok(Region { x0, y0, x1, y1 }),
            _ => Err(Error::InvalidSpec(format!("region `{s}` needs x0:y0:x1:y1"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthAttribute {
    pub name: String,
    pub region: Region,
    pub signal_strength: f64,
    pub nonlinear: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_images: usize,
    pub attributes: Vec<SynthAttribute>,
    pub n_raters: usize,
    pub rater_noise_sd: f64,
    pub seed: u64,
}

pub const DEFAULT_SIGNAL: f64 = 40.0;

impl SynthSpec {
    /// A linear `mouth` attribute covering 10% of the image, a nonlinear `eyes`
    /// attribute and a signal-free `null` attribute.
    pub fn default_faces(n_images: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            n_images,
            attributes: vec![
                SynthAttribute::linear("mouth", Region::new(15, 38, 45, 50), DEFAULT_SIGNAL),
                SynthAttribute { nonlinear: true, ..SynthAttribute::linear("eyes", Region::new(10, 14, 50, 24), DEFAULT_SIGNAL) },
                SynthAttribute::linear("null", Region::new(8, 27, 18, 36), 0.0),
            ],
            n_raters: 5,
            rater_noise_sd: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_images < 2 || self.n_raters == 0 || self.attributes.is_empty() {
            return Err(Error::InvalidSpec("need ≥ 2 images, ≥ 1 rater and ≥ 1 attribute".into()));
        }
        if !(self.rater_noise_sd.is_finite() && self.rater_noise_sd >= 0.0) {
            return Err(Error::InvalidSpec(format!("rater noise sd {}", self.rater_noise_sd)));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            let r = a.region;
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > IMAGE_SIZE || r.y1 > IMAGE_SIZE {
                return Err(Error::InvalidSpec(format!("region {r} of `{}` is empty or out of bounds", a.name)));
            }
            if !(a.signal_strength.is_finite() && a.signal_strength >= 0.0) {
                return Err(Error::InvalidSpec(format!("signal strength of `{}`", a.name)));
            }
            if a.nonlinear && r.x1 - r.x0 < 2 {
                return Err(Error::InvalidSpec(format!("nonlinear region of `{}` is too narrow", a.name)));
            }
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidSpec(format!("duplicate attribute `{}`", a.name)));
            }
            for b in &self.attributes[..i] {
                if (a.nonlinear || b.nonlinear) && a.region.overlaps(&b.region) {
                    return Err(Error::InvalidSpec(format!(
                        "nonlinear region of `{}` overlaps `{}`",
                        if a.nonlinear { &a.name } else { &b.name },
                        if a.nonlinear { &b.name } else { &a.name }
                    )));
                }
            }
        }
        Ok(())
    }
}

impl SynthAttribute {
    pub fn linear(name: &str, region: Region, signal_strength: f64) -> SynthAttribute {
        SynthAttribute { name: name.to_string(), region, signal_strength, nonlinear: false }
    }
}

/// One generated image with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthImage {
    pub image_id: String,
    /// `[3, 60, 60]`, integer values in 0–255.
    pub image: Tensor,
    /// Latent per attribute, in spec order.
    pub latents: Vec<f64>,
    /// `ratings[attribute][rater]`.
    pub ratings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub images: Vec<SynthImage>,
}

#[derive(Serialize)]
struct GroundTruthRow<'a> {
    image_id: &'a str,
    attribute: &'a str,
    latent: f64,
    region: String,
}

const SKIN: [f64; 3] = [205.0, 165.0, 140.0];
const EYE: [f64; 3] = [60.0, 40.0, 40.0];
const LIPS: [f64; 3] = [170.0, 90.0, 95.0];
const BACKGROUND: f64 = 70.0;
const PIXEL_NOISE_SD: f64 = 6.0;
const BRIGHTNESS_JITTER: f64 = 12.0;

fn in_ellipse(x: usize, y: usize, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x as f64 + 0.5 - cx) / rx;
    let dy = (y as f64 + 0.5 - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

fn render(spec: &SynthSpec, index: usize) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(spec.seed, &[index as u64]));
    let n = IMAGE_SIZE;
    let brightness = rng.gen_range(-BRIGHTNESS_JITTER..BRIGHTNESS_JITTER);
    let latents: Vec<f64> = spec.attributes.iter().map(|_| rng.gen::<f64>()).collect();
    let signs: Vec<f64> = spec.attributes.iter().map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();

    let mut offset = vec![0.0; n * n];
    for ((a, &u), &s) in spec.attributes.iter().zip(&latents).zip(&signs) {
        let mut shift = |r: Region, v: f64| {
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    offset[y * n + x] += v;
                }
            }
        };
        if a.nonlinear {
            let (left, right) = a.region.halves();
            shift(left, s * a.signal_strength);
            shift(right, s * a.signal_strength * (2.0 * u - 1.0));
        } else {
            shift(a.region, a.signal_strength * (2.0 * u - 1.0));
        }
    }

    let noise = Normal::new(0.0, PIXEL_NOISE_SD).expect("valid sd");
    let mut data = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let base = if in_ellipse(x, y, 22.0, 25.0, 4.5, 2.5) || in_ellipse(x, y, 38.0, 25.0, 4.5, 2.5) {
                EYE.map(|v| v + brightness)
            } else if in_ellipse(x, y, 30.0, 44.0, 8.0, 1.8) {
                LIPS.map(|v| v + brightness)
            } else if in_ellipse(x, y, 30.0, 31.0, 21.0, 26.0) {
                SKIN.map(|v| v + brightness)
            } else {
                [BACKGROUND; 3]
            };
            for (c, b) in base.iter().enumerate() {
                let v = b + offset[y * n + x] + noise.sample(&mut rng);
                data[(c * n + y) * n + x] = v.round().clamp(0.0, 255.0);
            }
        }
    }

    let rater_noise = Normal::new(0.0, spec.rater_noise_sd).expect("validated sd");
    let ratings = latents
        .iter()
        .map(|&u| (0..spec.n_raters).map(|_| u + rater_noise.sample(&mut rng)).collect())
        .collect();
    SynthImage {
        image_id: format!("img{index:05}"),
        image: Tensor::from_vec(&[3, n, n], data).expect("image shape"),
        latents,
        ratings,
    }
}

/// Renders every image of `spec`. Each image draws from its own substream, so
/// the output does not depend on evaluation order.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let images = (0..spec.n_images).into_par_iter().map(|i| render(spec, i)).collect();
    Ok(SynthDataset { spec: spec.clone(), images })
}

impl SynthDataset {
    pub fn image_path(image_id: &str) -> String {
        format!("images/{image_id}.png")
    }

    /// In-memory manifest equivalent to what [`SynthDataset::write`] puts on disk.
    pub fn to_manifest(&self) -> DatasetManifest {
        let attributes: Vec<String> = self.spec.attributes.iter().map(|a| a.name.clone()).collect();
        let examples = self
            .images
            .iter()
            .map(|img| FaceExample {
                image_id: img.image_id.clone(),
                image_path: Self::image_path(&img.image_id).into(),
                image: img.image.clone(),
                ratings: attributes.iter().cloned().zip(img.ratings.iter().cloned()).collect(),
            })
            .collect();
        let raters_per_attribute = attributes.iter().map(|a| (a.clone(), self.spec.n_raters)).collect();
        DatasetManifest { examples, attributes, raters_per_attribute }
    }

    pub fn manifest_rows(&self) -> Vec<ManifestRow> {
        let mut rows = Vec::new();
        for img in &self.images {
            for (a, scores) in self.spec.attributes.iter().zip(&img.ratings) {
                for (r, &score) in scores.iter().enumerate() {
                    rows.push(ManifestRow {
                        image_id: img.image_id.clone(),
                        image_path: Self::image_path(&img.image_id),
                        attribute: a.name.clone(),
                        rater_index: r,
                        score,
                    });
                }
            }
        }
        rows
    }

    /// Writes `images/*.png`, `manifest.csv` and `ground_truth.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        self.images
            .par_iter()
            .try_for_each(|img| save_png(&dir.join(Self::image_path(&img.image_id)), &img.image))?;
        write_manifest(&dir.join("manifest.csv"), &self.manifest_rows())?;
        let mut w = csv::Writer::from_path(dir.join("ground_truth.csv"))?;
        for img in &self.images {
            for (a, &latent) in self.spec.attributes.iter().zip(&img.latents) {
                w.serialize(GroundTruthRow {
                    image_id: &img.image_id,
                    attribute: &a.name,
                    latent,
                    region: a.region.to_string(),
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn latents(&self, attribute: usize) -> Vec<f64> {
        self.images.iter().map(|i| i.latents[attribute]).collect()
    }
}
