use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Gradients, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.005, momentum: 0.9, batch_size: 60, weight_decay: 0.001, epochs: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size >= 1
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

/// SGD with momentum and weight decay:
/// `v ← μ·v − lr·(g + λ·w)`, `w ← w + v`. Decay is applied to weights, not biases.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: TrainConfig,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(net: &Network, config: TrainConfig) -> Result<Sgd> {
        config.validate()?;
        Ok(Sgd { velocity: Gradients::zeros_like(net), config })
    }

    /// Mean loss and mean gradient over `batch` (indices into `images`).
    pub fn batch_gradient(net: &Network, images: &[Tensor], labels: &[usize], batch: &[usize]) -> Result<(f64, Gradients)> {
        let per_image: Vec<(f64, Gradients)> = batch
            .par_iter()
            .map(|&i| net.loss_and_grad(&images[i], labels[i]))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut total = Gradients::zeros_like(net);
        let mut loss = 0.0;
        // Sequential reduction in batch order keeps results independent of thread count.
        for (l, g) in &per_image {
            loss += l;
            total.accumulate(g, scale);
        }
        Ok((loss * scale, total))
    }

    /// One update on `batch`; returns the batch loss before the update.
    pub fn step(&mut self, net: &mut Network, images: &[Tensor], labels: &[usize], batch: &[usize]) -> Result<f64> {
        let (loss, grads) = Self::batch_gradient(net, images, labels, batch)?;
        let TrainConfig { learning_rate: lr, momentum: mu, weight_decay: wd, .. } = self.config;
        for ((p, v), g) in net.params_mut().iter_mut().zip(&mut self.velocity.0).zip(&grads.0) {
            let (Some(p), Some(v), Some(g)) = (p, v, g) else { continue };
            update(&mut p.weight, &mut v.weight, &g.weight, lr, mu, wd);
            update(&mut p.bias, &mut v.bias, &g.bias, lr, mu, 0.0);
        }
        Ok(loss)
    }
}

fn update(w: &mut Tensor, v: &mut Tensor, g: &Tensor, lr: f64, mu: f64, wd: f64) {
    for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *v = mu * *v - lr * (g + wd * *w);
        *w += *v;
    }
}

/// Trains `net` on labelled images for `config.epochs` epochs of shuffled
/// mini-batches. The shuffle order depends only on `config.seed`; the last
/// batch of an epoch keeps whatever size remains.
pub fn train(mut net: Network, images: &[Tensor], labels: &[usize], config: &TrainConfig) -> Result<Network> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} images, {} labels", images.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidConfig(format!("label {bad} is not binary")));
    }
    let mut sgd = Sgd::new(&net, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            total += sgd.step(&mut net, images, labels, batch)? * batch.len() as f64;
        }
        log::debug!("epoch {epoch}: mean loss {:.5}", total / images.len() as f64);
    }
    Ok(net)
}

/// Fraction of images whose thresholded positive-class probability matches the label.
pub fn accuracy_on(net: &Network, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    let correct: Vec<bool> = images
        .par_iter()
        .zip(labels)
        .map(|(img, &l)| net.predict(img).map(|p| usize::from(p >= 0.5) == l))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / images.len().max(1) as f64)
}
