//! Linear SVM baseline on flattened preprocessed pixels.
//!
//! Primal stochastic subgradient descent (Pegasos) on
//! `λ/2·‖w‖² + mean(max(0, 1 − y·(w·x + b)))` with step `1/(λ·t)`. The bias
//! is not regularized. The returned model is the average of all iterates.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SVM_MAGIC: &[u8] = b"ATTRIVIS-SVM-v1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Tensor,
    pub bias: f64,
    pub regularization: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { lambda: 1e-4, epochs: 20, seed: 0 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_inputs(images: &[Tensor], labels: &[i8]) -> Result<usize> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} images, {} labels", images.len(), labels.len())));
    }
    if let Some(img) = images.iter().find(|i| i.len() != first.len()) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", img.shape(), first.shape())));
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::InvalidConfig("svm labels must be -1 or +1".into()));
    }
    if !(labels.contains(&1) && labels.contains(&-1)) {
        return Err(Error::DegenerateLabels);
    }
    Ok(first.len())
}

/// Regularized hinge objective of `(weights, bias)`.
pub fn objective(model: &LinearModel, images: &[Tensor], labels: &[i8]) -> f64 {
    let w = model.weights.data();
    let hinge: f64 = images
        .iter()
        .zip(labels)
        .map(|(x, &y)| (1.0 - f64::from(y) * (dot(w, x.data()) + model.bias)).max(0.0))
        .sum();
    0.5 * model.regularization * dot(w, w) + hinge / images.len() as f64
}

/// Trains and also returns the objective of the averaged iterate after each epoch.
pub fn svm_train_traced(images: &[Tensor], labels: &[i8], config: &SvmConfig) -> Result<(LinearModel, Vec<f64>)> {
    let dim = check_inputs(images, labels)?;
    let lambda = config.lambda;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("svm lambda {lambda}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut w_sum = vec![0.0; dim];
    let mut b_sum = 0.0;
    let mut t = 0usize;
    let mut trace = Vec::with_capacity(config.epochs);
    let shape = images[0].shape().to_vec();
    let averaged = |w_sum: &[f64], b_sum: f64, t: usize| {
        let n = t.max(1) as f64;
        LinearModel {
            weights: Tensor::from_vec(&shape, w_sum.iter().map(|v| v / n).collect()).expect("same shape"),
            bias: b_sum / n,
            regularization: lambda,
            seed: config.seed,
        }
    };

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = images[i].data();
            let y = f64::from(labels[i]);
            let margin = y * (dot(&w, x) + b);
            let shrink = 1.0 - eta * lambda;
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj = shrink * *wj + eta * y * xj;
                }
                b += eta * y;
            } else {
                w.iter_mut().for_each(|wj| *wj *= shrink);
            }
            for (s, wj) in w_sum.iter_mut().zip(&w) {
                *s += wj;
            }
            b_sum += b;
        }
        trace.push(objective(&averaged(&w_sum, b_sum, t), images, labels));
    }
    Ok((averaged(&w_sum, b_sum, t), trace))
}

pub fn svm_train(images: &[Tensor], labels: &[i8], config: &SvmConfig) -> Result<LinearModel> {
    svm_train_traced(images, labels, config).map(|(m, _)| m)
}

/// Label 1 iff `w·x + b ≥ 0`, with the raw margin.
pub fn svm_predict(model: &LinearModel, image: &Tensor) -> Result<(usize, f64)> {
    if image.len() != model.weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs model weights {:?}",
            image.shape(),
            model.weights.shape()
        )));
    }
    let margin = dot(model.weights.data(), image.data()) + model.bias;
    Ok((usize::from(margin >= 0.0), margin))
}

impl LinearModel {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SVM_MAGIC)?;
        self.weights.write_to(w)?;
        w.write_all(&self.bias.to_le_bytes())?;
        w.write_all(&self.regularization.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<LinearModel> {
        let mut magic = vec![0u8; SVM_MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != SVM_MAGIC {
            return Err(Error::BadCheckpoint("not an ATTRIVIS-SVM-v1 file".into()));
        }
        let weights = Tensor::read_from(r)?;
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let bias = f64::from_le_bytes(b);
        r.read_exact(&mut b)?;
        let regularization = f64::from_le_bytes(b);
        r.read_exact(&mut b)?;
        let seed = u64::from_le_bytes(b);
        Ok(LinearModel { weights, bias, regularization, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LinearModel> {
        if !path.exists() {
            return Err(Error::MissingArtifact { path: path.to_path_buf(), producer: "train" });
        }
        LinearModel::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
