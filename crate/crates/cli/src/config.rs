//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. Relative paths are resolved against the
//! directory containing the config file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use attrivis::data::CenteringMode;
use attrivis::deconv::BackwardRelu;
use attrivis::nn::{Architecture, TrainConfig};
use attrivis::stats::DEFAULT_SAMPLES;
use attrivis::svm::SvmConfig;
use attrivis::{Error, Result};

/// Learning rate for raw 0–255 pixels after centering; larger steps drive
/// freshly initialized networks into constant predictions.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Manifest read by `preprocess`; defaults to `<data_dir>/manifest.csv`.
    pub manifest: Option<PathBuf>,
    /// Where `synth` writes the generated dataset; defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Attributes to process; empty means every attribute in the manifest.
    pub attributes: Vec<String>,
    pub architecture: Architecture,
    /// Seed fields are ignored; per-fold seeds come from `seed`.
    pub train: TrainConfig,
    pub svm: SvmConfig,
    pub folds: usize,
    pub seed: u64,
    pub null_samples: usize,
    pub backward_relu: BackwardRelu,
    pub centering: CenteringMode,
    pub synth_images: usize,
    pub synth_raters: usize,
    pub synth_noise_sd: f64,
    pub synth_signal: f64,
    /// Whether `run-all` starts by generating a synthetic dataset.
    pub run_synth: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            attributes: Vec::new(),
            architecture: Architecture::default_stack(),
            train: TrainConfig { learning_rate: DEFAULT_LEARNING_RATE, ..TrainConfig::default() },
            svm: SvmConfig::default(),
            folds: 11,
            seed: 0,
            null_samples: DEFAULT_SAMPLES,
            backward_relu: BackwardRelu::default(),
            centering: CenteringMode::default(),
            synth_images: 2000,
            synth_raters: 5,
            synth_noise_sd: 0.1,
            synth_signal: attrivis::synth::DEFAULT_SIGNAL,
            run_synth: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::ParseError { line, message: format!("`{key}`: {e}") })
}

impl RunConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data_dir().join("manifest.csv"))
    }

    pub fn parse_str(text: &str, base: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let path = |v: &str| base.join(v);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::ParseError { line, message: format!("expected key = value, got `{content}`") });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::ParseError { line, message: format!("duplicate key `{key}`") });
            }
            match key {
                "manifest" => cfg.manifest = Some(path(value)),
                "data_dir" => cfg.data_dir = Some(path(value)),
                "out_dir" => cfg.out_dir = path(value),
                "attributes" => {
                    cfg.attributes = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
                }
                "architecture" => cfg.architecture = parse(key, value, line)?,
                "learning_rate" => cfg.train.learning_rate = parse(key, value, line)?,
                "momentum" => cfg.train.momentum = parse(key, value, line)?,
                "batch_size" => cfg.train.batch_size = parse(key, value, line)?,
                "weight_decay" => cfg.train.weight_decay = parse(key, value, line)?,
                "epochs" => cfg.train.epochs = parse(key, value, line)?,
                "folds" => cfg.folds = parse(key, value, line)?,
                "seed" => cfg.seed = parse(key, value, line)?,
                "svm_lambda" => cfg.svm.lambda = parse(key, value, line)?,
                "svm_epochs" => cfg.svm.epochs = parse(key, value, line)?,
                "null_samples" => cfg.null_samples = parse(key, value, line)?,
                "backward_relu" => cfg.backward_relu = parse(key, value, line)?,
                "centering" => cfg.centering = parse(key, value, line)?,
                "synth_images" => cfg.synth_images = parse(key, value, line)?,
                "synth_raters" => cfg.synth_raters = parse(key, value, line)?,
                "synth_noise_sd" => cfg.synth_noise_sd = parse(key, value, line)?,
                "synth_signal" => cfg.synth_signal = parse(key, value, line)?,
                "run_synth" => cfg.run_synth = parse(key, value, line)?,
                _ => return Err(Error::ParseError { line, message: format!("unknown key `{key}`") }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds = {}", self.folds)));
        }
        if self.null_samples == 0 {
            return Err(Error::InvalidConfig("null_samples = 0".into()));
        }
        if !(self.svm.lambda.is_finite() && self.svm.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("svm_lambda = {}", self.svm.lambda)));
        }
        Ok(())
    }
}
