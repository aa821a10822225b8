//! Dataset manifests, label binarization, image preprocessing and CV folds.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of network inputs.
pub const IMAGE_SIZE: usize = 60;

#[derive(Clone, Debug)]
pub struct FaceExample {
    pub image_id: String,
    pub image_path: PathBuf,
    /// `[3, H, W]`, raw 0–255 values.
    pub image: Tensor,
    /// Per attribute, one score per rater (indexed by rater).
    pub ratings: BTreeMap<String, Vec<f64>>,
}

impl FaceExample {
    pub fn mean_rating(&self, attribute: &str) -> Option<f64> {
        let r = self.ratings.get(attribute)?;
        Some(r.iter().sum::<f64>() / r.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub examples: Vec<FaceExample>,
    pub attributes: Vec<String>,
    pub raters_per_attribute: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn mean_ratings(&self, attribute: &str) -> Result<Vec<f64>> {
        self.examples
            .iter()
            .map(|e| {
                e.mean_rating(attribute)
                    .ok_or_else(|| Error::DegenerateAttribute(format!("{} has no `{attribute}` ratings", e.image_id)))
            })
            .collect()
    }

    /// Per-rater score matrix `[rater][example]` for one attribute.
    pub fn rater_matrix(&self, attribute: &str) -> Result<Vec<Vec<f64>>> {
        let raters = *self
            .raters_per_attribute
            .get(attribute)
            .ok_or_else(|| Error::DegenerateAttribute(format!("unknown attribute `{attribute}`")))?;
        let mut m = vec![Vec::with_capacity(self.examples.len()); raters];
        for e in &self.examples {
            let r = &e.ratings[attribute];
            if r.len() != raters {
                return Err(Error::InsufficientRaters(r.len()));
            }
            for (row, &v) in m.iter_mut().zip(r) {
                row.push(v);
            }
        }
        Ok(m)
    }

    /// True when every individual score is exactly 0 or 1.
    pub fn is_binary_attribute(&self, attribute: &str) -> bool {
        self.examples
            .iter()
            .filter_map(|e| e.ratings.get(attribute))
            .flatten()
            .all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Result of a median split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Binarization {
    /// `Some(0 | 1)` per input; `None` for the dropped median of an odd-length input.
    pub labels: Vec<Option<usize>>,
    pub dropped: Option<usize>,
}

impl Binarization {
    pub fn retained(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l)))
    }
}

/// Splits ratings into equally sized low (0) and high (1) classes.
///
/// Items are ranked by rating; equal ratings are ordered by a permutation
/// drawn from `seed`, so boundary ties are resolved reproducibly. With an odd
/// count the middle item is dropped.
pub fn binarize(mean_ratings: &[f64], seed: u64) -> Result<Binarization> {
    let n = mean_ratings.len();
    if n < 2 {
        return Err(Error::DegenerateAttribute(format!("{n} ratings cannot be split")));
    }
    if let Some(i) = mean_ratings.iter().position(|v| !v.is_finite()) {
        return Err(Error::DegenerateAttribute(format!("rating {i} is not finite")));
    }
    let mut tiebreak: Vec<usize> = (0..n).collect();
    tiebreak.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mean_ratings[a].total_cmp(&mean_ratings[b]).then(tiebreak[a].cmp(&tiebreak[b])));

    let half = n / 2;
    let mut labels = vec![None; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < half {
            labels[i] = Some(0);
        } else if rank >= n - half {
            labels[i] = Some(1);
        }
    }
    let dropped = (n % 2 == 1).then(|| order[half]);
    Ok(Binarization { labels, dropped })
}

/// Down-samples the larger class uniformly at random to the size of the
/// smaller one. Returns retained indices in ascending order.
pub fn balance_binary(labels: &[usize], seed: u64) -> Result<Vec<usize>> {
    let (mut zeros, mut ones): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == 0);
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::DegenerateAttribute("labels must be 0 or 1".into()));
    }
    if zeros.is_empty() || ones.is_empty() {
        return Err(Error::DegenerateAttribute("one class is empty".into()));
    }
    let keep = zeros.len().min(ones.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let larger = if zeros.len() > ones.len() { &mut zeros } else { &mut ones };
    larger.shuffle(&mut rng);
    larger.truncate(keep);
    let mut retained: Vec<usize> = zeros.into_iter().chain(ones).collect();
    retained.sort_unstable();
    Ok(retained)
}

/// Class labels for one attribute. Attributes scored only 0 or 1 are
/// labelled `mean ≥ 0.5` and the larger class is down-sampled; all others get
/// the median split of their mean ratings.
pub fn attribute_labels(mean_ratings: &[f64], binary: bool, seed: u64) -> Result<Vec<Option<usize>>> {
    if !binary {
        return Ok(binarize(mean_ratings, seed)?.labels);
    }
    let thresholded: Vec<usize> = mean_ratings.iter().map(|&m| usize::from(m >= 0.5)).collect();
    let mut labels = vec![None; mean_ratings.len()];
    for i in balance_binary(&thresholded, seed)? {
        labels[i] = Some(thresholded[i]);
    }
    Ok(labels)
}

/// Largest centred square of `image`, bilinearly resized to `size × size`.
pub fn crop_resize(image: &Tensor, size: usize) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::InvalidImage(format!("expected [C,H,W], got {:?}", image.shape())));
    };
    if h < 2 || w < 2 {
        return Err(Error::InvalidImage(format!("{h}x{w} is smaller than 2x2")));
    }
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let scale = side as f64 / size as f64;
    // Half-pixel-centre sampling positions, clamped to the crop.
    let taps: Vec<(usize, usize, f64)> = (0..size)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(side - 1);
            (lo, hi, s - lo as f64)
        })
        .collect();
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let px = |y: usize, x: usize| plane[(y0 + y) * w + x0 + x];
        for &(ylo, yhi, fy) in &taps {
            for &(xlo, xhi, fx) in &taps {
                let top = px(ylo, xlo) + fx * (px(ylo, xhi) - px(ylo, xlo));
                let bottom = px(yhi, xlo) + fx * (px(yhi, xhi) - px(yhi, xlo));
                out.push(top + fy * (bottom - top));
            }
        }
    }
    Tensor::from_vec(&[c, size, size], out)
}

/// How the dataset mean is subtracted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenteringMode {
    /// One mean over all pixels and channels.
    Scalar,
    /// One mean per colour channel.
    #[default]
    PerChannel,
    /// A full mean image.
    PerPixel,
}

impl fmt::Display for CenteringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CenteringMode::Scalar => "scalar",
            CenteringMode::PerChannel => "per_channel",
            CenteringMode::PerPixel => "per_pixel",
        })
    }
}

impl FromStr for CenteringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(CenteringMode::Scalar),
            "per_channel" => Ok(CenteringMode::PerChannel),
            "per_pixel" => Ok(CenteringMode::PerPixel),
            _ => Err(Error::InvalidConfig(format!("unknown centering mode `{s}`"))),
        }
    }
}

/// Mean fitted on training images, stored with each checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Centering {
    pub mode: CenteringMode,
    /// `[1]`, `[C]` or `[C, H, W]` depending on `mode`.
    pub mean: Tensor,
}

impl Centering {
    pub fn fit(mode: CenteringMode, images: &[&Tensor]) -> Result<Centering> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let shape = first.shape().to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::InvalidImage(format!("expected [C,H,W], got {shape:?}")));
        };
        let mut sum = vec![0.0; c * h * w];
        for img in images {
            if img.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!("{:?} vs {shape:?}", img.shape())));
            }
            for (s, v) in sum.iter_mut().zip(img.data()) {
                *s += v;
            }
        }
        let n = images.len() as f64;
        let mean = match mode {
            CenteringMode::PerPixel => Tensor::from_vec(&shape, sum.iter().map(|s| s / n).collect())?,
            CenteringMode::PerChannel => Tensor::from_vec(
                &[c],
                sum.chunks_exact(h * w).map(|ch| ch.iter().sum::<f64>() / (n * (h * w) as f64)).collect(),
            )?,
            CenteringMode::Scalar => Tensor::from_vec(&[1], vec![sum.iter().sum::<f64>() / (n * sum.len() as f64)])?,
        };
        Ok(Centering { mode, mean })
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let [c, h, w] = *image.shape() else {
            return Err(Error::InvalidImage(format!("expected [C,H,W], got {:?}", image.shape())));
        };
        let m = self.mean.data();
        let plane = h * w;
        let data = match self.mode {
            CenteringMode::Scalar => image.data().iter().map(|v| v - m[0]).collect(),
            CenteringMode::PerChannel if m.len() == c => {
                image.data().iter().enumerate().map(|(i, v)| v - m[i / plane]).collect()
            }
            CenteringMode::PerPixel if self.mean.shape() == image.shape() => {
                image.data().iter().zip(m).map(|(v, m)| v - m).collect()
            }
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "{} mean {:?} vs image {:?}",
                    self.mode,
                    self.mean.shape(),
                    image.shape()
                )))
            }
        };
        Tensor::from_vec(image.shape(), data)
    }
}

/// Crop, resize to 60×60 and subtract the fitted mean.
pub fn preprocess(image: &Tensor, centering: &Centering) -> Result<Tensor> {
    centering.apply(&crop_resize(image, IMAGE_SIZE)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold index of each position.
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded permutation dealt round-robin into `k` folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || n < k {
        return Err(Error::InvalidSplit(format!("cannot split {n} examples into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (j, &i) in perm.iter().enumerate() {
        fold_of[i] = j % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Decodes a PNG (any colour type) to a `[3, H, W]` tensor of 0–255 values.
pub fn load_png(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a `[3, H, W]` tensor as 8-bit RGB, rounding and clamping to 0–255.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::InvalidImage(format!("expected [3,H,W], got {:?}", image.shape())));
    };
    let d = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| d[(c * h + y as usize) * w + x as usize].round().clamp(0.0, 255.0) as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// One long-form manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_id: String,
    pub image_path: String,
    pub attribute: String,
    pub rater_index: usize,
    pub score: f64,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a long-form manifest (`image_id,image_path,attribute,rater_index,score`)
/// and decodes every referenced PNG. Relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["image_id", "image_path", "attribute", "rater_index", "score"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::ParseError { line: 1, message: format!("header must be {}", expected.join(",")) });
    }

    struct Pending {
        path: String,
        first_line: usize,
        ratings: BTreeMap<String, BTreeMap<usize, f64>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    let mut attributes: Vec<String> = Vec::new();

    for (i, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = record.map_err(|e| Error::ParseError { line, message: e.to_string() })?;
        if row.image_id.is_empty() || row.attribute.is_empty() || !row.score.is_finite() {
            return Err(Error::ParseError { line, message: "empty id/attribute or non-finite score".into() });
        }
        if !attributes.contains(&row.attribute) {
            attributes.push(row.attribute.clone());
        }
        let entry = pending.entry(row.image_id.clone()).or_insert_with(|| {
            order.push(row.image_id.clone());
            Pending { path: row.image_path.clone(), first_line: line, ratings: BTreeMap::new() }
        });
        if entry.path != row.image_path {
            return Err(Error::ParseError {
                line,
                message: format!("duplicate image_id `{}` with a different image_path", row.image_id),
            });
        }
        let scores = entry.ratings.entry(row.attribute.clone()).or_default();
        if scores.insert(row.rater_index, row.score).is_some() {
            return Err(Error::ParseError {
                line,
                message: format!("duplicate rating for ({}, {}, rater {})", row.image_id, row.attribute, row.rater_index),
            });
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut raters_per_attribute = BTreeMap::new();
    let mut staged = Vec::with_capacity(order.len());
    for id in order {
        let p = pending.remove(&id).expect("recorded id");
        let mut ratings = BTreeMap::new();
        for attr in &attributes {
            let scores = p.ratings.get(attr).ok_or_else(|| Error::ParseError {
                line: p.first_line,
                message: format!("image `{id}` has no ratings for `{attr}`"),
            })?;
            if scores.keys().copied().ne(0..scores.len()) {
                return Err(Error::ParseError {
                    line: p.first_line,
                    message: format!("rater indices of `{id}`/`{attr}` are not 0..{}", scores.len()),
                });
            }
            let n = raters_per_attribute.entry(attr.clone()).or_insert(0usize);
            *n = (*n).max(scores.len());
            ratings.insert(attr.clone(), scores.values().copied().collect());
        }
        staged.push((id, base.join(&p.path), ratings));
    }

    let examples = staged
        .into_par_iter()
        .map(|(image_id, image_path, ratings)| {
            let image = load_png(&image_path)?;
            Ok(FaceExample { image_id, image_path, image, ratings })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest { examples, attributes, raters_per_attribute })
}
