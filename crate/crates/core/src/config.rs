//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::baselines::{ModelConfig, ModelKind};
use crate::encoder::EncoderConfig;
use crate::error::{io_err, Result, TafError};
use crate::fusion::{FusionConfig, HeadConfig};
use crate::preprocess::PreprocessConfig;
use crate::synth::PhantomSpec;
use crate::trainer::{Phase, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    U64,
    Usize,
    F64,
    Bool,
    Usizes,
    F64s,
    Models,
    /// `none` or a count.
    OptUsize,
    /// `none` or a real.
    OptF64,
}

const KEYS: &[(&str, &str, Kind)] = &[
    ("seed", "42", Kind::U64),
    ("synth.grid", "32", Kind::Usize),
    ("synth.subjects", "200", Kind::Usize),
    ("synth.converter_fraction", "0.3", Kind::F64),
    ("synth.intervals", "24", Kind::Usizes),
    ("synth.noise_sigma", "0.03", Kind::F64),
    ("synth.expansion_rate", "0.01", Kind::F64),
    ("synth.shrink_rate", "0.005", Kind::F64),
    ("synth.baseline_matched", "true", Kind::Bool),
    ("synth.anatomy_jitter", "0.15", Kind::F64),
    ("synth.pretrain_volumes", "64", Kind::Usize),
    ("synth.pretrain_separation", "1", Kind::F64),
    ("preprocess.sigma", "0.5", Kind::F64),
    ("preprocess.mask_tau", "0.5", Kind::F64),
    ("preprocess.min_nonzero", "none", Kind::OptUsize),
    ("encoder.input_grid", "32", Kind::Usize),
    ("encoder.channels", "16,32,64,128,128", Kind::Usizes),
    ("encoder.dcca", "true", Kind::Bool),
    ("fusion.d_model", "128", Kind::Usize),
    ("fusion.heads", "4", Kind::Usize),
    ("head.hidden", "64", Kind::Usize),
    ("head.dropout", "0.3", Kind::F64),
    ("baselines.lstm_hidden", "64", Kind::Usize),
    ("pretrain.lr", "0.001", Kind::F64),
    ("pretrain.weight_decay", "0.01", Kind::F64),
    ("pretrain.batch_size", "8", Kind::Usize),
    ("pretrain.epochs", "3", Kind::Usize),
    ("pretrain.class_weighting", "true", Kind::Bool),
    ("pretrain.val_fraction", "0.2", Kind::F64),
    ("pretrain.patience", "none", Kind::OptUsize),
    ("pretrain.stop_at_val_auc", "none", Kind::OptF64),
    ("train.lr", "0.0001", Kind::F64),
    ("train.weight_decay", "0.01", Kind::F64),
    ("train.batch_size", "8", Kind::Usize),
    ("train.epochs", "50", Kind::Usize),
    ("train.class_weighting", "true", Kind::Bool),
    ("train.patience", "none", Kind::OptUsize),
    ("train.augment_copies", "0", Kind::Usize),
    ("train.models", "siamese_sub,cnn_lstm,initial_only,tafnet", Kind::Models),
    ("eval.folds", "5", Kind::Usize),
    ("eval.learning_curve", "false", Kind::Bool),
    ("eval.fractions", "0.2,0.6,1.0", Kind::F64s),
    ("interpret.maps", "4", Kind::Usize),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, _, kind)| *kind)
}

fn bad(key: &str, value: &str, what: &str) -> TafError {
    TafError::Config(format!("{key} = {value:?}: expected {what}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| bad(key, value, what)))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(bad(key, value, what));
    }
    Ok(items)
}

/// Checks `value` against the key's type and returns its canonical text.
fn canonical(key: &str, kind: Kind, value: &str) -> Result<String> {
    let v = value.trim();
    let is_none = v.eq_ignore_ascii_case("none");
    Ok(match kind {
        Kind::U64 => v.parse::<u64>().map_err(|_| bad(key, v, "an unsigned integer"))?.to_string(),
        Kind::Usize => v.parse::<usize>().map_err(|_| bad(key, v, "an unsigned integer"))?.to_string(),
        Kind::F64 => {
            let x = v.parse::<f64>().map_err(|_| bad(key, v, "a number"))?;
            if !x.is_finite() {
                return Err(bad(key, v, "a finite number"));
            }
            format!("{x:?}")
        }
        Kind::Bool => match v.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => "true".into(),
            "false" | "0" | "no" => "false".into(),
            _ => return Err(bad(key, v, "true or false")),
        },
        Kind::Usizes => parse_list::<usize>(key, v, "comma-separated integers")?.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        Kind::F64s => parse_list::<f64>(key, v, "comma-separated numbers")?.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
        Kind::Models => parse_list::<ModelKind>(key, v, "model names")?.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        Kind::OptUsize if is_none => "none".into(),
        Kind::OptUsize => v.parse::<usize>().map_err(|_| bad(key, v, "an integer or none"))?.to_string(),
        Kind::OptF64 if is_none => "none".into(),
        Kind::OptF64 => format!("{:?}", v.parse::<f64>().map_err(|_| bad(key, v, "a number or none"))?),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, d, kind)| (*k, canonical(k, *kind, d).expect("valid default"))).collect() }
    }
}

impl Config {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _, _)| *k)
    }

    /// Sets one key. Unknown keys and ill-typed values are `ConfigError`s
    /// naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let kind = kind_of(key).ok_or_else(|| TafError::Config(format!("unknown key {key:?}")))?;
        let stored = KEYS.iter().find(|(k, _, _)| *k == key).unwrap().0;
        self.values.insert(stored, canonical(key, kind, value)?);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| TafError::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TafError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Every key in sorted order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("missing key {key}"))
    }

    fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().unwrap()
    }

    fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().unwrap()
    }

    fn bool(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    fn opt_usize(&self, key: &str) -> Option<usize> {
        self.raw(key).parse().ok()
    }

    fn opt_f64(&self, key: &str) -> Option<f64> {
        self.raw(key).parse().ok()
    }

    fn usizes(&self, key: &str) -> Vec<usize> {
        self.raw(key).split(',').map(|s| s.parse().unwrap()).collect()
    }

    pub fn seed(&self) -> u64 {
        self.raw("seed").parse().unwrap()
    }

    pub fn subjects(&self) -> usize {
        self.usize("synth.subjects")
    }

    pub fn converter_fraction(&self) -> f64 {
        self.f64("synth.converter_fraction")
    }

    pub fn intervals(&self) -> Vec<u32> {
        self.usizes("synth.intervals").into_iter().map(|v| v as u32).collect()
    }

    pub fn pretrain_volumes(&self) -> usize {
        self.usize("synth.pretrain_volumes")
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            grid: self.usize("synth.grid"),
            noise_sigma: self.f64("synth.noise_sigma"),
            converter_expansion_rate: self.f64("synth.expansion_rate"),
            converter_shrink_rate: self.f64("synth.shrink_rate"),
            baseline_matched: self.bool("synth.baseline_matched"),
            anatomy_jitter: self.f64("synth.anatomy_jitter"),
            pretrain_separation: self.f64("synth.pretrain_separation"),
            ..PhantomSpec::default()
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_grid: self.usize("encoder.input_grid"),
            sigma: self.f64("preprocess.sigma"),
            mask_tau: self.f64("preprocess.mask_tau") as f32,
            min_nonzero: self.opt_usize("preprocess.min_nonzero"),
        }
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let ch = self.usizes("encoder.channels");
        let channels: [usize; 5] =
            ch.try_into().map_err(|_| TafError::Config("encoder.channels needs exactly 5 values".into()))?;
        let cfg = EncoderConfig { channels, input_grid: self.usize("encoder.input_grid"), dcca_enabled: self.bool("encoder.dcca") };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            fusion: FusionConfig { d_model: self.usize("fusion.d_model"), heads: self.usize("fusion.heads") },
            head: HeadConfig { hidden: self.usize("head.hidden"), dropout: self.f64("head.dropout") },
            lstm_hidden: self.usize("baselines.lstm_hidden"),
        };
        if cfg.fusion.d_model != self.usizes("encoder.channels")[4] {
            return Err(TafError::Config("fusion.d_model must equal the last encoder.channels entry".into()));
        }
        Ok(cfg)
    }

    fn train_section(&self, section: &str, phase: Phase) -> TrainConfig {
        let k = |name: &str| format!("{section}.{name}");
        TrainConfig {
            lr: self.f64(&k("lr")),
            weight_decay: self.f64(&k("weight_decay")),
            batch_size: self.usize(&k("batch_size")),
            epochs: self.usize(&k("epochs")),
            class_weighting: self.bool(&k("class_weighting")),
            seed: self.seed(),
            phase,
            patience: self.opt_usize(&k("patience")),
            val_fraction: if phase == Phase::Pretrain { self.f64("pretrain.val_fraction") } else { 0.2 },
            stop_at_val_auc: if phase == Phase::Pretrain { self.opt_f64("pretrain.stop_at_val_auc") } else { None },
        }
    }

    pub fn pretrain(&self) -> Result<TrainConfig> {
        let c = self.train_section("pretrain", Phase::Pretrain);
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = self.train_section("train", Phase::Finetune);
        c.validate()?;
        Ok(c)
    }

    pub fn augment_copies(&self) -> usize {
        self.usize("train.augment_copies")
    }

    pub fn models(&self) -> Vec<ModelKind> {
        self.raw("train.models").split(',').map(|s| s.parse().unwrap()).collect()
    }

    pub fn folds(&self) -> usize {
        self.usize("eval.folds")
    }

    pub fn learning_curve(&self) -> bool {
        self.bool("eval.learning_curve")
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.raw("eval.fractions").split(',').map(|s| s.parse().unwrap()).collect()
    }

    pub fn interpret_maps(&self) -> usize {
        self.usize("interpret.maps")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build() {
        let c = Config::default();
        assert_eq!(c.encoder().unwrap(), EncoderConfig::default());
        assert_eq!(c.model().unwrap(), ModelConfig::default());
        assert_eq!(c.train().unwrap().lr, 1e-4);
        assert_eq!(c.models().len(), 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("seed = 3\nencoder.widht = 4\n").unwrap_err();
        assert!(matches!(&err, TafError::Config(m) if m.contains("encoder.widht")));
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = Config::default();
        c.set_pair("train.epochs=7").unwrap();
        c.set("synth.intervals", " 12, 24 ").unwrap();
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), Config::default().hash());
        assert_eq!(c.intervals(), vec![12, 24]);
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = Config::default();
        assert!(c.set("train.lr", "fast").is_err());
        assert!(c.set("train.models", "tafnet,resnet").is_err());
        c.set("train.epochs", "0").unwrap();
        assert!(c.train().is_err());
    }
}
