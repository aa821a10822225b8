use attrivis::nn::{accuracy_on, train, Architecture, Network, Sgd, TrainConfig};
use attrivis::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARCH: &str = "conv:4:3:1:1,relu,pool:2:2,fc:8,relu,fc:2,softmax";

/// Two gaussian blobs on an 8×8 canvas: class 0 bright top-left, class 1 bright bottom-right.
fn blobs(n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (cy, cx) = if label == 0 { (2.0, 2.0) } else { (5.0, 5.0) };
        let data = (0..64)
            .map(|p| {
                let (y, x) = ((p / 8) as f64, (p % 8) as f64);
                let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                (-d2 / 4.0).exp() + rng.gen_range(-0.1..0.1)
            })
            .collect();
        images.push(Tensor::from_vec(&[1, 8, 8], data).unwrap());
        labels.push(label);
    }
    (images, labels)
}

fn net(seed: u64) -> Network {
    Network::new([1, 8, 8], &ARCH.parse::<Architecture>().unwrap(), seed).unwrap()
}

#[test]
fn separable_blobs_are_fit() {
    let (images, labels) = blobs(200, 1);
    let cfg = TrainConfig { learning_rate: 0.02, batch_size: 10, epochs: 20, seed: 3, ..Default::default() };
    let trained = train(net(5), &images, &labels, &cfg).unwrap();
    assert_eq!(accuracy_on(&trained, &images, &labels).unwrap(), 1.0);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (images, labels) = blobs(40, 2);
    let start = net(7);
    let cfg = TrainConfig { learning_rate: 0.0, batch_size: 8, epochs: 3, ..Default::default() };
    let trained = train(start.clone(), &images, &labels, &cfg).unwrap();
    assert_eq!(trained.params(), start.params());
}

#[test]
fn fixed_seed_gives_identical_weights() {
    let (images, labels) = blobs(60, 3);
    let cfg = TrainConfig { learning_rate: 0.01, batch_size: 7, epochs: 2, seed: 11, ..Default::default() };
    let a = train(net(1), &images, &labels, &cfg).unwrap();
    let b = train(net(1), &images, &labels, &cfg).unwrap();
    assert_eq!(a.params(), b.params());
    let c = train(net(1), &images, &labels, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn small_steps_do_not_increase_batch_loss() {
    let (images, labels) = blobs(30, 4);
    let mut network = net(9);
    let cfg = TrainConfig { learning_rate: 1e-4, ..Default::default() };
    let mut sgd = Sgd::new(&network, cfg).unwrap();
    let batch: Vec<usize> = (0..30).collect();
    let losses: Vec<f64> = (0..6).map(|_| sgd.step(&mut network, &images, &labels, &batch).unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = TrainConfig::default();
    assert!(matches!(train(net(0), &[], &[], &cfg), Err(Error::EmptyDataset)));
    let (images, _) = blobs(4, 5);
    assert!(matches!(train(net(0), &images, &[0, 1, 2, 0], &cfg), Err(Error::InvalidConfig(_))));
    let bad = TrainConfig { momentum: 1.0, ..cfg };
    assert!(matches!(train(net(0), &images, &[0, 1, 0, 1], &bad), Err(Error::InvalidConfig(_))));
}
