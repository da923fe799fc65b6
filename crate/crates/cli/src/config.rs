//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use ssvr::data::SynthConfig;
use ssvr::model::Arch;
use ssvr::optim::{Method, TrainConfig};

/// Every recognized key with its default, in echo order.
const KEYS: &[(&str, &str)] = &[
    ("method", "vae_r"),
    ("seed", "0"),
    ("data_dir", "data"),
    ("split_csv", "auto"),
    ("split_fractions", "0.8,0.1,0.1"),
    ("split_seed", "0"),
    ("image_side", "64"),
    ("latent_dim", "32"),
    ("latent_shape", "32x1x1"),
    ("blocks", "3"),
    ("base_channels", "16"),
    ("regressor_blocks", "2"),
    ("regressor_hidden", "16"),
    ("labeled_batch", "16"),
    ("unlabeled_batch", "16"),
    ("max_epochs", "20"),
    ("validation_every", "1"),
    ("patience", "10"),
    ("lr", "0.001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("recon_variance", "10"),
    ("kl_normalizer", "auto"),
    ("recon_normalizer", "auto"),
    ("max_rotation_deg", "5"),
    ("max_translation_px", "2"),
    ("entropy_weight", "0.1"),
    ("synth_side", "64"),
    ("synth_labeled", "100"),
    ("synth_unlabeled", "5000"),
    ("synth_validation", "200"),
    ("synth_test", "200"),
    ("synth_noise", "0.03"),
    ("synth_haze", "0.6"),
    ("synth_blob_rate", "2"),
    ("synth_blob_amplitude", "0.15"),
    ("synth_anatomy_jitter", "1"),
    ("synth_max_images_per_patient", "5"),
    ("synth_seed", "0"),
];

/// Raw settings: defaults overlaid by a file and then by overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitSource {
    /// `split.csv` in the data directory if present, else a random patient split.
    Auto,
    /// Always a random patient split.
    Random,
    File(PathBuf),
}

/// Typed view of a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub method: Method,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub split: SplitSource,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
    pub arch: Arch,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (k, _) = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| format!("unknown configuration key `{key}`"))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("{origin}:{}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), String> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("override `{kv}` is not key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    /// Every key with its value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.values[k]);
        }
        s
    }

    pub fn resolve(&self) -> Result<Resolved, String> {
        let mut arch = Arch::default();
        for key in ["image_side", "latent_dim", "latent_shape", "blocks", "base_channels", "regressor_blocks", "regressor_hidden"] {
            arch.set(key, self.get(key))?;
        }
        arch.validate().map_err(|e| e.to_string())?;

        let mut train = TrainConfig::for_arch(&arch);
        train.method = self.parse("method")?;
        train.seed = self.parse("seed")?;
        train.labeled_batch = self.parse("labeled_batch")?;
        train.unlabeled_batch = self.parse("unlabeled_batch")?;
        train.max_epochs = self.parse("max_epochs")?;
        train.validation_every = self.parse("validation_every")?;
        train.patience = self.parse("patience")?;
        train.adam.lr = self.parse("lr")?;
        train.adam.beta1 = self.parse("beta1")?;
        train.adam.beta2 = self.parse("beta2")?;
        train.adam.eps = self.parse("adam_eps")?;
        train.loss.recon_variance = self.parse("recon_variance")?;
        if self.get("kl_normalizer") != "auto" {
            train.loss.kl_normalizer = self.parse("kl_normalizer")?;
        }
        if self.get("recon_normalizer") != "auto" {
            train.loss.recon_normalizer = self.parse("recon_normalizer")?;
        }
        train.augment.max_rotation_deg = self.parse("max_rotation_deg")?;
        train.augment.max_translation_px = self.parse("max_translation_px")?;
        train.entropy_weight = self.parse("entropy_weight")?;
        train.validate(&arch).map_err(|e| e.to_string())?;

        let split = match self.get("split_csv") {
            "auto" => SplitSource::Auto,
            "random" => SplitSource::Random,
            "" => return Err("split_csv: expected auto, random or a path".into()),
            path => SplitSource::File(PathBuf::from(path)),
        };
        let fractions: Vec<f64> = self
            .get("split_fractions")
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("split_fractions: {e}"))?;
        let [a, b, c] = fractions[..] else {
            return Err("split_fractions: expected three comma-separated fractions".into());
        };

        let synth = SynthConfig {
            side: self.parse("synth_side")?,
            n_labeled: self.parse("synth_labeled")?,
            n_unlabeled: self.parse("synth_unlabeled")?,
            n_validation: self.parse("synth_validation")?,
            n_test: self.parse("synth_test")?,
            noise: self.parse("synth_noise")?,
            haze: self.parse("synth_haze")?,
            blob_rate: self.parse("synth_blob_rate")?,
            blob_amplitude: self.parse("synth_blob_amplitude")?,
            anatomy_jitter: self.parse("synth_anatomy_jitter")?,
            max_images_per_patient: self.parse("synth_max_images_per_patient")?,
            seed: self.parse("synth_seed")?,
        };
        synth.validate().map_err(|e| e.to_string())?;

        Ok(Resolved {
            method: train.method,
            seed: train.seed,
            data_dir: PathBuf::from(self.get("data_dir")),
            split,
            split_fractions: [a, b, c],
            split_seed: self.parse("split_seed")?,
            arch,
            train,
            synth,
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| format!("{key} = `{v}`: {e}"))
    }
}
