//! The end-to-end protocol, one function per command.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/                       synthetic dataset (synth)
//! images.bin                  cropped 60×60 images (preprocess)
//! attributes.txt              processed attributes (preprocess)
//! <attr>/labels.csv           mean rating, class label and fold per image (preprocess)
//! <attr>/ratings.csv          individual scores (preprocess)
//! <attr>/fold_<k>.net|.svm    per-fold models (train)
//! <attr>/predictions.csv      out-of-fold predictions (evaluate)
//! <attr>/results.csv          per-fold and pooled metrics (evaluate)
//! <attr>/significance.csv     tests against chance and human raters (stats)
//! <attr>/nulls.csv            every null distribution and test (stats)
//! <attr>/<attr>_<c>_<mode>.png, channel_energy.csv (visualize)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use attrivis::checkpoint::Checkpoint;
use attrivis::data::{attribute_labels, crop_resize, kfold_split, load_manifest, Centering, IMAGE_SIZE};
use attrivis::deconv::{channel_energy_report, mean_feature, render_png, FeatureImage, MaskMode};
use attrivis::eval::{human_loo_matrix, pearson, LooKind};
use attrivis::nn::{accuracy_on, train as train_net, Network, TrainConfig};
use attrivis::seeding::{derive, name_hash};
use attrivis::stats::{bernoulli_accuracy_null, bootstrap_human, one_sided_test, uniform_correlation_null, NullSummary, ALPHA};
use attrivis::svm::{svm_predict, svm_train, LinearModel, SvmConfig};
use attrivis::synth::{generate, SynthSpec};
use attrivis::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const IMAGES_MAGIC: &[u8] = b"ATTRIVIS-IMG-v1\n";

/// Seed stream tags, combined with the master seed and the attribute name.
mod stream {
    pub const SYNTH: u64 = 1;
    pub const LABELS: u64 = 2;
    pub const FOLDS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const SVM: u64 = 6;
    pub const HUMAN: u64 = 7;
    pub const CORRELATION_NULL: u64 = 8;
    pub const BOOTSTRAP: u64 = 9;
}

fn attr_seed(cfg: &RunConfig, attribute: &str, path: &[u64]) -> u64 {
    let mut full = vec![name_hash(attribute)];
    full.extend_from_slice(path);
    derive(cfg.seed, &full)
}

fn missing(path: &Path, producer: &'static str) -> Error {
    Error::MissingArtifact { path: path.to_path_buf(), producer }
}

fn require(path: &Path, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(missing(path, producer))
    }
}

fn attr_dir(cfg: &RunConfig, attribute: &str) -> PathBuf {
    cfg.out_dir.join(attribute)
}

fn fold_paths(cfg: &RunConfig, attribute: &str, fold: usize) -> (PathBuf, PathBuf) {
    let dir = attr_dir(cfg, attribute);
    (dir.join(format!("fold_{fold}.net")), dir.join(format!("fold_{fold}.svm")))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, producer: &'static str) -> Result<Vec<T>> {
    let path = require(path, producer)?;
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(Error::from)
}

// ---------------------------------------------------------------- synth

/// Generates the synthetic dataset into the data directory.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let mut spec = SynthSpec::default_faces(cfg.synth_images, derive(cfg.seed, &[stream::SYNTH]));
    spec.n_raters = cfg.synth_raters;
    spec.rater_noise_sd = cfg.synth_noise_sd;
    for a in spec.attributes.iter_mut().filter(|a| a.signal_strength > 0.0) {
        a.signal_strength = cfg.synth_signal;
    }
    let dir = cfg.data_dir();
    generate(&spec)?.write(&dir)?;
    log::info!("wrote {} synthetic images to {}", cfg.synth_images, dir.display());
    Ok(dir.join("manifest.csv"))
}

// ---------------------------------------------------------------- preprocess

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelRow {
    pub image_id: String,
    pub mean_rating: f64,
    /// Empty for images left out by binarization or balancing.
    pub label: Option<usize>,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RatingRow {
    image_id: String,
    rater: usize,
    score: f64,
}

fn write_images(path: &Path, ids: &[String], images: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(IMAGES_MAGIC)?;
    w.write_all(&(ids.len() as u32).to_le_bytes())?;
    for (id, img) in ids.iter().zip(images) {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        img.write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Preprocessed images keyed by image id.
pub fn read_images(cfg: &RunConfig) -> Result<BTreeMap<String, Tensor>> {
    let path = require(&cfg.out_dir.join("images.bin"), "preprocess")?;
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = vec![0u8; IMAGES_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadCheckpoint("images.bin has the wrong header".into()));
    }
    let n = read_u32(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        out.insert(id, Tensor::read_from(&mut r)?);
    }
    Ok(out)
}

/// Attributes selected by the config, or every attribute `preprocess` handled.
pub fn attributes(cfg: &RunConfig) -> Result<Vec<String>> {
    if !cfg.attributes.is_empty() {
        return Ok(cfg.attributes.clone());
    }
    let path = require(&cfg.out_dir.join("attributes.txt"), "preprocess")?;
    Ok(fs::read_to_string(path)?.lines().filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Crops and resizes every image, binarizes each attribute and assigns folds.
pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let manifest_path = require(&cfg.manifest_path(), "synth")?;
    let manifest = load_manifest(&manifest_path)?;
    let selected = if cfg.attributes.is_empty() { manifest.attributes.clone() } else { cfg.attributes.clone() };
    if let Some(a) = selected.iter().find(|a| !manifest.attributes.contains(a)) {
        return Err(Error::DegenerateAttribute(format!("`{a}` is not in {}", manifest_path.display())));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let ids: Vec<String> = manifest.examples.iter().map(|e| e.image_id.clone()).collect();
    let images = manifest.examples.iter().map(|e| crop_resize(&e.image, IMAGE_SIZE)).collect::<Result<Vec<_>>>()?;
    write_images(&cfg.out_dir.join("images.bin"), &ids, &images)?;
    fs::write(cfg.out_dir.join("attributes.txt"), selected.iter().map(|a| format!("{a}\n")).collect::<String>())?;

    for attribute in &selected {
        let means = manifest.mean_ratings(attribute)?;
        let binary = manifest.is_binary_attribute(attribute);
        let labels = attribute_labels(&means, binary, attr_seed(cfg, attribute, &[stream::LABELS]))?;
        let retained: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let folds = kfold_split(retained.len(), cfg.folds, attr_seed(cfg, attribute, &[stream::FOLDS]))?;
        let mut fold_of = vec![None; labels.len()];
        for (j, &i) in retained.iter().enumerate() {
            fold_of[i] = Some(folds.fold_of[j]);
        }
        let rows: Vec<LabelRow> = (0..labels.len())
            .map(|i| LabelRow { image_id: ids[i].clone(), mean_rating: means[i], label: labels[i], fold: fold_of[i] })
            .collect();
        let dir = attr_dir(cfg, attribute);
        fs::create_dir_all(&dir)?;
        write_csv(&dir.join("labels.csv"), &rows)?;
        let ratings: Vec<RatingRow> = manifest
            .examples
            .iter()
            .flat_map(|e| {
                e.ratings[attribute]
                    .iter()
                    .enumerate()
                    .map(|(rater, &score)| RatingRow { image_id: e.image_id.clone(), rater, score })
            })
            .collect();
        write_csv(&dir.join("ratings.csv"), &ratings)?;
        log::info!("{attribute}: {} labelled images in {} folds", retained.len(), cfg.folds);
    }
    Ok(())
}

// ---------------------------------------------------------------- train

/// Labelled images of one attribute with their folds, in manifest order.
pub struct FoldData {
    pub rows: Vec<LabelRow>,
    pub labels: Vec<usize>,
    pub folds: Vec<usize>,
    pub images: Vec<Tensor>,
}

impl FoldData {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Loads labels and images and checks that the folds cover every labelled
/// image exactly once with no empty fold.
pub fn load_fold_data(cfg: &RunConfig, attribute: &str, images: &BTreeMap<String, Tensor>) -> Result<FoldData> {
    let all: Vec<LabelRow> = read_csv(&attr_dir(cfg, attribute).join("labels.csv"), "preprocess")?;
    let mut data = FoldData { rows: Vec::new(), labels: Vec::new(), folds: Vec::new(), images: Vec::new() };
    let mut seen = std::collections::BTreeSet::new();
    for row in all {
        let Some(label) = row.label else { continue };
        if !seen.insert(row.image_id.clone()) {
            return Err(Error::InvalidSplit(format!("{} appears twice", row.image_id)));
        }
        let fold = match row.fold {
            Some(f) if f < cfg.folds => f,
            other => {
                return Err(Error::InvalidSplit(format!(
                    "{} has fold {other:?}; folds must cover every labelled image (0..{})",
                    row.image_id, cfg.folds
                )))
            }
        };
        let img = images
            .get(&row.image_id)
            .ok_or_else(|| Error::InvalidSplit(format!("{} has no preprocessed image", row.image_id)))?;
        data.labels.push(label);
        data.folds.push(fold);
        data.images.push(img.clone());
        data.rows.push(row);
    }
    if let Some(empty) = (0..cfg.folds).find(|&f| !data.folds.contains(&f)) {
        return Err(Error::InvalidSplit(format!("fold {empty} of `{attribute}` has no test images")));
    }
    Ok(data)
}

fn train_fold(cfg: &RunConfig, attribute: &str, data: &FoldData, fold: usize) -> Result<(Checkpoint, LinearModel)> {
    let train_idx = data.train_indices(fold);
    let raw: Vec<&Tensor> = train_idx.iter().map(|&i| &data.images[i]).collect();
    let centering = Centering::fit(cfg.centering, &raw)?;
    let x: Vec<Tensor> = raw.iter().map(|img| centering.apply(img)).collect::<Result<_>>()?;
    let y: Vec<usize> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let [c, h, w] = *x[0].shape() else {
        return Err(Error::InvalidImage(format!("expected [C,H,W], got {:?}", x[0].shape())));
    };
    let f = fold as u64;
    let net = Network::new([c, h, w], &cfg.architecture, attr_seed(cfg, attribute, &[f, stream::INIT]))?;
    let tc = TrainConfig { seed: attr_seed(cfg, attribute, &[f, stream::SHUFFLE]), ..cfg.train.clone() };
    let net = train_net(net, &x, &y, &tc)?;
    log::info!("{attribute} fold {fold}: cnn train accuracy {:.3}", accuracy_on(&net, &x, &y)?);
    let signed: Vec<i8> = y.iter().map(|&l| if l == 1 { 1 } else { -1 }).collect();
    let sc = SvmConfig { seed: attr_seed(cfg, attribute, &[f, stream::SVM]), ..cfg.svm.clone() };
    let svm = svm_train(&x, &signed, &sc)?;
    Ok((Checkpoint { network: net, centering }, svm))
}

/// Trains a CNN and an SVM for every fold of every selected attribute.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let images = read_images(cfg)?;
    for attribute in attributes(cfg)? {
        let data = load_fold_data(cfg, &attribute, &images)?;
        for fold in 0..cfg.folds {
            let (ckpt, svm) = train_fold(cfg, &attribute, &data, fold)?;
            let (net_path, svm_path) = fold_paths(cfg, &attribute, fold);
            ckpt.save(&net_path)?;
            svm.save(&svm_path)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub fold: usize,
    pub label: usize,
    pub mean_rating: f64,
    pub p_cnn: f64,
    pub svm_label: usize,
    pub svm_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub attribute: String,
    /// Fold index, or `all` for the pooled out-of-fold row.
    pub fold: String,
    pub acc_cnn: f64,
    pub acc_svm: f64,
    pub corr_cnn: f64,
    pub acc_human_mean: f64,
    pub corr_human_mean: f64,
}

fn load_ratings(cfg: &RunConfig, attribute: &str) -> Result<(BTreeMap<String, Vec<f64>>, bool)> {
    let rows: Vec<RatingRow> = read_csv(&attr_dir(cfg, attribute).join("ratings.csv"), "preprocess")?;
    let mut by_id: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let scores = by_id.entry(r.image_id).or_default();
        if scores.len() != r.rater {
            return Err(Error::ParseError { line: 0, message: "ratings.csv raters out of order".into() });
        }
        scores.push(r.score);
    }
    let binary = by_id.values().flatten().all(|&v| v == 0.0 || v == 1.0);
    Ok((by_id, binary))
}

fn rater_matrix(ratings: &BTreeMap<String, Vec<f64>>, ids: &[&str]) -> Vec<Vec<f64>> {
    let raters = ids.first().map_or(0, |id| ratings[*id].len());
    (0..raters).map(|r| ids.iter().map(|id| ratings[*id][r]).collect()).collect()
}

fn or_nan(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::UndefinedCorrelation(msg)) => {
            log::warn!("correlation undefined ({msg}), reporting NaN");
            Ok(f64::NAN)
        }
        other => other,
    }
}

fn metrics(
    cfg: &RunConfig,
    attribute: &str,
    fold: String,
    preds: &[&PredictionRow],
    ratings: &BTreeMap<String, Vec<f64>>,
    binary: bool,
) -> Result<ResultRow> {
    let n = preds.len() as f64;
    let acc_cnn = preds.iter().filter(|p| usize::from(p.p_cnn >= 0.5) == p.label).count() as f64 / n;
    let acc_svm = preds.iter().filter(|p| p.svm_label == p.label).count() as f64 / n;
    let p: Vec<f64> = preds.iter().map(|p| p.p_cnn).collect();
    let truth: Vec<f64> = preds.iter().map(|p| p.mean_rating).collect();
    let corr_cnn = or_nan(pearson(&p, &truth))?;
    let ids: Vec<&str> = preds.iter().map(|p| p.image_id.as_str()).collect();
    let m = rater_matrix(ratings, &ids);
    let seed = attr_seed(cfg, attribute, &[stream::HUMAN]);
    let acc_human_mean = human_loo_matrix(&m, binary, LooKind::Accuracy, seed)?.mean;
    let corr_human_mean = or_nan(human_loo_matrix(&m, binary, LooKind::Correlation, seed).map(|h| h.mean))?;
    Ok(ResultRow { attribute: attribute.to_string(), fold, acc_cnn, acc_svm, corr_cnn, acc_human_mean, corr_human_mean })
}

/// Out-of-fold predictions and per-fold metrics for one attribute.
pub fn evaluate_attribute(cfg: &RunConfig, attribute: &str, images: &BTreeMap<String, Tensor>) -> Result<Vec<ResultRow>> {
    let data = load_fold_data(cfg, attribute, images)?;
    let mut preds: Vec<Option<PredictionRow>> = vec![None; data.rows.len()];
    for fold in 0..cfg.folds {
        let (net_path, svm_path) = fold_paths(cfg, attribute, fold);
        let ckpt = Checkpoint::load(&net_path)?;
        let svm = LinearModel::load(&svm_path)?;
        for i in data.test_indices(fold) {
            let x = ckpt.centering.apply(&data.images[i])?;
            let (svm_label, svm_margin) = svm_predict(&svm, &x)?;
            let row = &data.rows[i];
            preds[i] = Some(PredictionRow {
                image_id: row.image_id.clone(),
                fold,
                label: data.labels[i],
                mean_rating: row.mean_rating,
                p_cnn: ckpt.network.predict(&x)?,
                svm_label,
                svm_margin,
            });
        }
    }
    let preds: Vec<PredictionRow> = preds
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::InvalidSplit(format!("{} was never tested", data.rows[i].image_id))))
        .collect::<Result<_>>()?;
    let dir = attr_dir(cfg, attribute);
    write_csv(&dir.join("predictions.csv"), &preds)?;

    let (ratings, binary) = load_ratings(cfg, attribute)?;
    let mut rows = Vec::with_capacity(cfg.folds + 1);
    for fold in 0..cfg.folds {
        let subset: Vec<&PredictionRow> = preds.iter().filter(|p| p.fold == fold).collect();
        rows.push(metrics(cfg, attribute, fold.to_string(), &subset, &ratings, binary)?);
    }
    rows.push(metrics(cfg, attribute, "all".into(), &preds.iter().collect::<Vec<_>>(), &ratings, binary)?);
    write_csv(&dir.join("results.csv"), &rows)?;
    let all = rows.last().expect("summary row");
    log::info!("{attribute}: cnn accuracy {:.3}, svm accuracy {:.3}, cnn correlation {:.3}", all.acc_cnn, all.acc_svm, all.corr_cnn);
    Ok(rows)
}

pub fn evaluate(cfg: &RunConfig) -> Result<Vec<ResultRow>> {
    let images = read_images(cfg)?;
    let mut rows = Vec::new();
    for attribute in attributes(cfg)? {
        rows.extend(evaluate_attribute(cfg, &attribute, &images)?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------- stats

/// One row of the significance table. `critical_95` and `p_value` refer to
/// the bootstrap distribution of human performance; the chance test is in
/// `significant_vs_chance` and, with its own numbers, in `nulls.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub attribute: String,
    pub metric: String,
    pub observed: f64,
    pub critical_95: f64,
    pub p_value: f64,
    pub significant_vs_chance: bool,
    pub significant_vs_human: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullRow {
    pub attribute: String,
    pub metric: String,
    pub null: String,
    pub n: usize,
    pub observed: f64,
    pub critical_95: f64,
    pub p_value: f64,
    pub at_floor: bool,
    pub significant: bool,
}

fn null_row(attribute: &str, metric: &str, name: &str, observed: f64, null: &NullSummary) -> NullRow {
    let t = one_sided_test(observed, null, ALPHA);
    NullRow {
        attribute: attribute.to_string(),
        metric: metric.to_string(),
        null: name.to_string(),
        n: null.n,
        observed,
        critical_95: null.critical_value_95,
        p_value: t.p_value,
        at_floor: t.at_floor,
        significant: t.significant,
    }
}

pub fn stats_attribute(cfg: &RunConfig, attribute: &str) -> Result<(Vec<SignificanceRow>, Vec<NullRow>)> {
    let dir = attr_dir(cfg, attribute);
    let preds: Vec<PredictionRow> = read_csv(&dir.join("predictions.csv"), "evaluate")?;
    if preds.is_empty() {
        return Err(Error::EmptySet);
    }
    let (ratings, binary) = load_ratings(cfg, attribute)?;
    let ids: Vec<&str> = preds.iter().map(|p| p.image_id.as_str()).collect();
    let m = rater_matrix(&ratings, &ids);
    let human_seed = attr_seed(cfg, attribute, &[stream::HUMAN]);
    let human_acc = human_loo_matrix(&m, binary, LooKind::Accuracy, human_seed)?;
    let human_corr = human_loo_matrix(&m, binary, LooKind::Correlation, human_seed)?;

    let n = preds.len();
    let acc_cnn = preds.iter().filter(|p| usize::from(p.p_cnn >= 0.5) == p.label).count() as f64 / n as f64;
    let acc_svm = preds.iter().filter(|p| p.svm_label == p.label).count() as f64 / n as f64;
    let p: Vec<f64> = preds.iter().map(|p| p.p_cnn).collect();
    let truth: Vec<f64> = preds.iter().map(|p| p.mean_rating).collect();
    let corr_cnn = or_nan(pearson(&p, &truth))?;

    let chance_acc = bernoulli_accuracy_null(n)?;
    let chance_corr = uniform_correlation_null(&truth, cfg.null_samples, attr_seed(cfg, attribute, &[stream::CORRELATION_NULL]))?;
    let boot_seed = attr_seed(cfg, attribute, &[stream::BOOTSTRAP]);
    let human_acc_null = bootstrap_human(&human_acc.per_rater, cfg.null_samples, derive(boot_seed, &[0]))?;
    let human_corr_null = bootstrap_human(&human_corr.per_rater, cfg.null_samples, derive(boot_seed, &[1]))?;

    let mut sig = Vec::new();
    let mut nulls = Vec::new();
    for (metric, observed, chance, human) in [
        ("acc_cnn", acc_cnn, &chance_acc, &human_acc_null),
        ("corr_cnn", corr_cnn, &chance_corr, &human_corr_null),
        ("acc_svm", acc_svm, &chance_acc, &human_acc_null),
    ] {
        let vs_chance = null_row(attribute, metric, "chance", observed, chance);
        let vs_human = null_row(attribute, metric, "human_bootstrap", observed, human);
        sig.push(SignificanceRow {
            attribute: attribute.to_string(),
            metric: metric.to_string(),
            observed,
            critical_95: vs_human.critical_95,
            p_value: vs_human.p_value,
            significant_vs_chance: vs_chance.significant,
            significant_vs_human: vs_human.significant,
        });
        nulls.push(vs_chance);
        nulls.push(vs_human);
    }
    write_csv(&dir.join("significance.csv"), &sig)?;
    write_csv(&dir.join("nulls.csv"), &nulls)?;
    Ok((sig, nulls))
}

pub fn stats(cfg: &RunConfig) -> Result<Vec<SignificanceRow>> {
    let mut rows = Vec::new();
    for attribute in attributes(cfg)? {
        rows.extend(stats_attribute(cfg, &attribute)?.0);
    }
    Ok(rows)
}

// ---------------------------------------------------------------- visualize

#[derive(Clone, Debug, Serialize)]
struct EnergyRow {
    attribute: String,
    class: usize,
    mode: String,
    n_examples: usize,
    aggregation: &'static str,
    target_activation: f64,
    energy_r: f64,
    energy_g: f64,
    energy_b: f64,
    zero_energy: bool,
}

/// Mean feature images of both classes under each mode, averaged over every
/// labelled image projected through the network of the fold that held it out.
pub fn visualize_attribute(
    cfg: &RunConfig,
    attribute: &str,
    images: &BTreeMap<String, Tensor>,
    modes: &[MaskMode],
) -> Result<Vec<FeatureImage>> {
    let data = load_fold_data(cfg, attribute, images)?;
    let ckpts: Vec<Checkpoint> =
        (0..cfg.folds).map(|f| Checkpoint::load(&fold_paths(cfg, attribute, f).0)).collect::<Result<_>>()?;
    let centred: Vec<Tensor> = (0..data.rows.len())
        .map(|i| ckpts[data.folds[i]].centering.apply(&data.images[i]))
        .collect::<Result<_>>()?;
    let examples: Vec<(&Network, &Tensor, usize)> =
        (0..data.rows.len()).map(|i| (&ckpts[data.folds[i]].network, &centred[i], data.labels[i])).collect();
    let dir = attr_dir(cfg, attribute);
    let mut features = Vec::new();
    let mut energy = Vec::new();
    for class in 0..2 {
        for &mode in modes {
            let fi = mean_feature(&examples, attribute, class, mode, cfg.backward_relu)?;
            render_png(&fi, &dir.join(format!("{attribute}_{class}_{mode}.png")))?;
            let report = channel_energy_report(&fi);
            let e = |c: usize| report.fractions.get(c).copied().unwrap_or(0.0);
            energy.push(EnergyRow {
                attribute: attribute.to_string(),
                class,
                mode: mode.to_string(),
                n_examples: fi.n_examples_averaged,
                aggregation: "out_of_fold_test_images",
                target_activation: fi.target_activation,
                energy_r: e(0),
                energy_g: e(1),
                energy_b: e(2),
                zero_energy: report.zero_energy,
            });
            features.push(fi);
        }
    }
    write_csv(&dir.join("channel_energy.csv"), &energy)?;
    Ok(features)
}

pub fn visualize(cfg: &RunConfig, modes: &[MaskMode]) -> Result<Vec<FeatureImage>> {
    let images = read_images(cfg)?;
    let mut out = Vec::new();
    for attribute in attributes(cfg)? {
        out.extend(visualize_attribute(cfg, &attribute, &images, modes)?);
    }
    Ok(out)
}

/// Every stage in order, starting with data generation when `run_synth` is set.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    if cfg.run_synth {
        synth(cfg)?;
    }
    preprocess(cfg)?;
    train(cfg)?;
    evaluate(cfg)?;
    stats(cfg)?;
    visualize(cfg, &MaskMode::ALL)?;
    Ok(())
}
