//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use attrivis::data::{crop_resize, Centering, CenteringMode};
use attrivis::deconv::{target_activation, unpool, MaskMode};
use attrivis::nn::layers::{
    conv_backward, conv_forward, cross_entropy, fc_backward, fc_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, softmax,
};
use attrivis::nn::{train, Architecture, LayerSpec, Network, TrainConfig};
use attrivis::stats::{bernoulli_accuracy_null, one_sided_test, uniform_correlation_null, ALPHA};
use attrivis::synth::{generate, Region, SynthSpec};
use attrivis::Tensor;
use attrivis_cli::{pipeline, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Compact stack used for the synthetic classification runs.
const COMPACT: &str =
    "conv:8:5:2:2,relu,pool:2:2,conv:16:3:1:1,relu,pool:2:2,conv:16:3:1:1,relu,pool:2:2,fc:32,relu,fc:2,softmax";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ------------------------------------------------------------ 1

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn numeric(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    const H: f64 = 1e-6;
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let up = f(&probe);
            probe.data_mut()[i] = orig - H;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn max_rel(analytic: &Tensor, numeric: &[f64]) -> f64 {
    analytic.data().iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks every layer of `net` in isolation. Each layer gets a random input
/// of its own shape and the scalar read-out `r · layer(x)`, so the analytic
/// gradient is the layer's backward pass applied to `r`.
fn layer_errors(net: &Network, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, layer) in net.layers().iter().enumerate() {
        let x = random(net.layer_shape(i), rng);
        let p = net.params()[i].as_ref();
        match *layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let (w, b) = (&p.unwrap().weight, &p.unwrap().bias);
                let r = random(net.layer_shape(i + 1), rng);
                let (gi, gw, gb) = conv_backward(&r, &x, w, stride, pad).unwrap();
                let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv_forward(x, w, b, stride, pad).unwrap(), &r);
                worst = worst
                    .max(max_rel(&gi, &numeric(&x, |x| f(x, w, b))))
                    .max(max_rel(&gw, &numeric(w, |w| f(&x, w, b))))
                    .max(max_rel(&gb, &numeric(b, |b| f(&x, w, b))));
            }
            LayerSpec::FullyConnected { .. } => {
                let (w, b) = (&p.unwrap().weight, &p.unwrap().bias);
                let r = random(net.layer_shape(i + 1), rng);
                let (gi, gw, gb) = fc_backward(&r, &x, w).unwrap();
                let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&fc_forward(x, w, b).unwrap(), &r);
                worst = worst
                    .max(max_rel(&gi, &numeric(&x, |x| f(x, w, b))))
                    .max(max_rel(&gw, &numeric(w, |w| f(&x, w, b))))
                    .max(max_rel(&gb, &numeric(b, |b| f(&x, w, b))));
            }
            LayerSpec::Relu => {
                let r = random(x.shape(), rng);
                let g = relu_backward(&r, &x).unwrap();
                worst = worst.max(max_rel(&g, &numeric(&x, |x| dot(&relu_forward(x), &r))));
            }
            LayerSpec::MaxPool { window, stride } => {
                let (y, sw) = maxpool_forward(&x, window, stride).unwrap();
                let r = random(y.shape(), rng);
                let g = maxpool_backward(&r, &sw).unwrap();
                let n = numeric(&x, |x| dot(&maxpool_forward(x, window, stride).unwrap().0, &r));
                worst = worst.max(max_rel(&g, &n));
            }
            LayerSpec::Softmax => {
                let label = rng.gen_range(0..x.len());
                let mut g = softmax(&x);
                g.data_mut()[label] -= 1.0;
                worst = worst.max(max_rel(&g, &numeric(&x, |x| cross_entropy(x, label))));
            }
        }
    }
    worst
}

/// Whole-network loss gradients. Components far below the loss scale sit
/// under the finite-difference roundoff floor (about eps·|loss|/h), so this
/// figure is reported alongside the per-layer result rather than judged.
fn end_to_end_error(net: &Network, img: &Tensor, label: usize) -> f64 {
    let (_, grads) = net.loss_and_grad(img, label).unwrap();
    let pass = net.forward(img).unwrap();
    let mut g = pass.probabilities.clone();
    g.data_mut()[label] -= 1.0;
    let (_, gi) = net.backward(&pass, &g, true).unwrap();
    let mut worst = max_rel(&gi.unwrap(), &numeric(img, |x| net.loss(x, label).unwrap()));
    for (li, g) in grads.0.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = net.params()[li].as_ref().unwrap();
        let nw = numeric(&p.weight, |w| {
            let mut n = net.clone();
            n.params_mut()[li].as_mut().unwrap().weight = w.clone();
            n.loss(img, label).unwrap()
        });
        let nb = numeric(&p.bias, |b| {
            let mut n = net.clone();
            n.params_mut()[li].as_mut().unwrap().bias = b.clone();
            n.loss(img, label).unwrap()
        });
        worst = worst.max(max_rel(&g.weight, &nw)).max(max_rel(&g.bias, &nb));
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let archs: [(&str, [usize; 3]); 2] = [
        ("conv:3:3:1:1,relu,pool:2:2,conv:4:2:1:0,relu,fc:5,relu,fc:2,softmax", [2, 6, 6]),
        ("conv:4:3:2:1,relu,conv:3:3:1:1,relu,pool:2:2,fc:6,relu,fc:2,softmax", [3, 8, 8]),
    ];
    let start = Instant::now();
    let (mut per_layer, mut end_to_end): (f64, f64) = (0.0, 0.0);
    let mut max_params = 0;
    for seed in 0..20u64 {
        let (text, shape) = archs[seed as usize % 2];
        let arch: Architecture = text.parse().unwrap();
        let net = Network::new(shape, &arch, seed).unwrap();
        max_params = max_params.max(net.num_params());
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        per_layer = per_layer.max(layer_errors(&net, &mut rng));
        let img = random(&shape, &mut rng);
        end_to_end = end_to_end.max(end_to_end_error(&net, &img, (seed % 2) as usize));
    }
    let elapsed = start.elapsed();
    outcome(
        per_layer < 1e-5 && max_params <= 2000 && elapsed < Duration::from_secs(60),
        format!(
            "max per-layer relative error {per_layer:.2e} over 20 seeds, ≤ {max_params} params, {:.1}s; whole-network loss check {end_to_end:.2e}",
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------ 2

fn unpool_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..200 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..12), rng.gen_range(2..12));
        let window = rng.gen_range(1..=h.min(w).min(3));
        let stride = rng.gen_range(1..=window);
        let x = random(&[c, h, w], &mut rng);
        let (pooled, sw) = maxpool_forward(&x, window, stride).unwrap();
        let u = unpool(&pooled, &sw, x.shape()).unwrap();
        let ok = (0..x.len()).all(|i| {
            if sw.indices.contains(&i) {
                u.data()[i] == x.data()[i]
            } else {
                u.data()[i] == 0.0
            }
        });
        failures += usize::from(!ok);
    }
    outcome(failures == 0, format!("{failures} of 200 random tensors differ"))
}

// ------------------------------------------------------------ 3

fn weight_partition() -> Outcome {
    let arch: Architecture = COMPACT.parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for k in 0..10u64 {
        let ds = generate(&SynthSpec::default_faces(60, 300 + k)).unwrap();
        let raw: Vec<Tensor> = ds.images.iter().map(|i| crop_resize(&i.image, 60).unwrap()).collect();
        let centering = Centering::fit(CenteringMode::PerChannel, &raw.iter().collect::<Vec<_>>()).unwrap();
        let x: Vec<Tensor> = raw.iter().map(|r| centering.apply(r).unwrap()).collect();
        let y: Vec<usize> = ds.latents(0).iter().map(|&l| usize::from(l >= 0.5)).collect();
        let init = Network::new([3, 60, 60], &arch, k).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-4, epochs: 1, seed: k, ..TrainConfig::default() };
        let net = train(init.clone(), &x, &y, &cfg).unwrap();
        assert_ne!(net.params(), init.params(), "network {k} did not train");
        let fi = net.final_dense_index();
        for _ in 0..10 {
            let img = &x[rng.gen_range(0..x.len())];
            let class = rng.gen_range(0..2);
            let pass = net.forward(img).unwrap();
            let full = target_activation(&net, &pass, class, MaskMode::Full).unwrap();
            let pos = target_activation(&net, &pass, class, MaskMode::PositiveOnly).unwrap();
            let neg = target_activation(&net, &pass, class, MaskMode::NegativeOnly).unwrap();
            let bias = net.params()[fi].as_ref().unwrap().bias.data()[class];
            worst = worst.max((full - (pos + neg + bias)).abs());
            pairs += 1;
        }
    }
    outcome(worst < 1e-10, format!("max |a_full − (a_pos + a_neg + bias)| = {worst:.2e} over {pairs} pairs"))
}

// ------------------------------------------------------------ 4, 5, 7

struct SynthRun {
    cfg: RunConfig,
    results: BTreeMap<String, pipeline::ResultRow>,
    elapsed: Duration,
}

fn synthetic_run(dir: &Path) -> SynthRun {
    let cfg = RunConfig {
        out_dir: dir.to_path_buf(),
        attributes: vec!["mouth".into(), "eyes".into(), "null".into()],
        architecture: COMPACT.parse().unwrap(),
        train: TrainConfig { learning_rate: 1e-4, epochs: 4, ..TrainConfig::default() },
        synth_images: 2000,
        ..RunConfig::default()
    };
    let start = Instant::now();
    pipeline::synth(&cfg).unwrap();
    pipeline::preprocess(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    let rows = pipeline::evaluate(&cfg).unwrap();
    let elapsed = start.elapsed();
    let results = rows.into_iter().filter(|r| r.fold == "all").map(|r| (r.attribute.clone(), r)).collect();
    SynthRun { cfg, results, elapsed }
}

fn synthetic_classification(run: &SynthRun) -> Outcome {
    let (m, e) = (&run.results["mouth"], &run.results["eyes"]);
    let pass = m.acc_cnn >= 0.90
        && m.acc_svm >= 0.80
        && e.acc_cnn >= 0.85
        && e.acc_svm <= 0.65
        && run.elapsed <= Duration::from_secs(15 * 60);
    outcome(
        pass,
        format!(
            "linear: cnn {:.3} (≥ 0.90), svm {:.3} (≥ 0.80); xor: cnn {:.3} (≥ 0.85), svm {:.3} (≤ 0.65); {:.0}s for 3 attributes × 11 folds",
            m.acc_cnn,
            m.acc_svm,
            e.acc_cnn,
            e.acc_svm,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn mouth_region(data_dir: &Path) -> Region {
    let mut r = csv::Reader::from_path(data_dir.join("ground_truth.csv")).unwrap();
    for row in r.records() {
        let row = row.unwrap();
        if &row[1] == "mouth" {
            return row[3].parse().unwrap();
        }
    }
    panic!("no mouth rows in ground_truth.csv");
}

fn deconv_localization(run: &SynthRun) -> Outcome {
    let region = mouth_region(&run.cfg.data_dir());
    let cfg = RunConfig { attributes: vec!["mouth".into()], ..run.cfg.clone() };
    let images = pipeline::read_images(&cfg).unwrap();
    let features = pipeline::visualize_attribute(&cfg, "mouth", &images, &[MaskMode::PositiveOnly]).unwrap();
    let ratio = |class: usize| {
        let fi = features.iter().find(|f| f.class_index == class).unwrap();
        let [c, h, w] = *fi.image.shape() else { unreachable!() };
        let (mut inside, mut outside, mut n_in) = (0.0, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let e: f64 = (0..c).map(|ch| fi.image.data()[(ch * h + y) * w + x].abs()).sum();
                if region.contains(x, y) {
                    inside += e;
                    n_in += 1;
                } else {
                    outside += e;
                }
            }
        }
        (inside / n_in as f64) / (outside / (h * w - n_in) as f64)
    };
    let (r1, r0) = (ratio(1), ratio(0));
    let frac = region.area() as f64 / 3600.0;
    outcome(
        r1 >= 2.0,
        format!("positive-class density ratio inside/outside {r1:.2} (≥ 2; region {region} = {:.0}% of pixels; other class {r0:.2})", frac * 100.0),
    )
}

fn no_signal_control(run: &SynthRun) -> Outcome {
    let cfg = RunConfig { attributes: vec!["null".into()], ..run.cfg.clone() };
    let (sig, _) = pipeline::stats_attribute(&cfg, "null").unwrap();
    let acc = &sig.iter().find(|r| r.metric == "acc_cnn").unwrap();
    let n = fs::read_to_string(cfg.out_dir.join("null/predictions.csv")).unwrap().lines().count() - 1;
    let half_width = 1.96 * 0.5 / (n as f64).sqrt();
    let inside = (acc.observed - 0.5).abs() <= half_width;
    // Independent check of the table flag with the analytic chance null.
    let direct = one_sided_test(acc.observed, &bernoulli_accuracy_null(n).unwrap(), ALPHA);
    outcome(
        inside && !acc.significant_vs_chance && !direct.significant,
        format!(
            "cnn accuracy {:.4} in [{:.4}, {:.4}] (n = {n}); p vs chance {:.3}, significant = {}",
            acc.observed,
            0.5 - half_width,
            0.5 + half_width,
            direct.p_value,
            acc.significant_vs_chance
        ),
    )
}

// ------------------------------------------------------------ 6

fn null_calibration() -> Outcome {
    let n = 2222;
    let bern = bernoulli_accuracy_null(n).unwrap();
    let approx = 0.5 + 1.645 * 0.5 / (n as f64).sqrt();
    let bern_err = (bern.critical_value_95 - approx).abs() / approx;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let truth: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let corr = uniform_correlation_null(&truth, 100_000, 6).unwrap();
    let asym = 1.645 / ((n - 1) as f64).sqrt();
    let corr_err = (corr.critical_value_95 - asym).abs() / asym;
    outcome(
        bern_err < 0.01 && corr_err < 0.10,
        format!(
            "bernoulli critical {:.5} vs {approx:.5} ({:.2}%); correlation 95th pct {:.5} vs {asym:.5} ({:.1}%)",
            bern.critical_value_95,
            bern_err * 100.0,
            corr.critical_value_95,
            corr_err * 100.0
        ),
    )
}

// ------------------------------------------------------------ 8

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(dir: &Path) -> Outcome {
    let config = "run_synth = true\nsynth_images = 150\nfolds = 3\nepochs = 1\nnull_samples = 5000\n\
                  attributes = mouth, eyes\narchitecture = conv:4:5:2:2,relu,pool:2:2,conv:8:3:1:1,relu,pool:2:2,fc:16,relu,fc:2,softmax\n";
    fs::write(dir.join("run.cfg"), config).unwrap();
    for out in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_attrivis"))
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .args(["--config", "run.cfg", "--out", out, "run-all"])
            .status()
            .unwrap();
        if !status.success() {
            return outcome(false, format!("run-all into {out} exited with {status}"));
        }
    }
    let (a, b) = (files(&dir.join("a")), files(&dir.join("b")));
    if a != b {
        return outcome(false, "the two runs produced different file sets".into());
    }
    let checked: Vec<&PathBuf> =
        a.iter().filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "png"))).collect();
    let differing: Vec<String> = a
        .iter()
        .filter(|p| fs::read(dir.join("a").join(p)).unwrap() != fs::read(dir.join("b").join(p)).unwrap())
        .map(|p| p.display().to_string())
        .collect();
    outcome(
        differing.is_empty() && !checked.is_empty(),
        format!("{} CSV/PNG files ({} files in total) compared, differing: {differing:?}", checked.len(), a.len()),
    )
}

fn main() -> ExitCode {
    let report = |id: usize, name: &str, o: Outcome| {
        println!("criterion {id} [{name}]: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        o.pass
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut all = true;
    all &= report(1, "gradient correctness", gradient_correctness());
    all &= report(2, "unpool identity", unpool_identity());
    all &= report(3, "weight-partition identity", weight_partition());
    let run = synthetic_run(&tmp.path().join("synthetic"));
    all &= report(4, "synthetic classification", synthetic_classification(&run));
    all &= report(5, "deconv localization", deconv_localization(&run));
    all &= report(6, "null calibration", null_calibration());
    all &= report(7, "no-signal control", no_signal_control(&run));
    let det = tmp.path().join("determinism");
    fs::create_dir_all(&det).unwrap();
    all &= report(8, "determinism", determinism(&det));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
