//! Flat `key = value` run configuration with dotted keys.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored.
//! Unknown keys are rejected. [`RunConfig::to_kv`] writes every key, so a
//! resolved config reproduces its run on its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DefectKind, Layout, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Datasets read from disk (`data.train`, `data.test`, `data.validation`).
    Folder,
    /// Generated in memory from the `synth.*` keys and split by fraction.
    Synth,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "folder" => Ok(DataSource::Folder),
            "synth" => Ok(DataSource::Synth),
            other => Err(Error::Config(format!("data.source: unknown value '{other}' (folder | synth)"))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Folder => "folder",
            DataSource::Synth => "synth",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: Option<PathBuf>,
    /// One entry per fold.
    pub test: Vec<PathBuf>,
    pub validation: Option<PathBuf>,
    pub layout: Layout,
    /// Synthetic source only: share of each class held out for testing.
    pub test_fraction: f64,
    /// Synthetic source only: share of the training part held out for validation.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            train: None,
            test: Vec::new(),
            validation: None,
            layout: Layout::MaskFolders,
            test_fraction: 1.0 / 3.0,
            validation_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub deterministic: bool,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            deterministic: true,
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model.input_channels",
        "model.base_channels",
        "model.downsample_factor",
        "train.eta",
        "train.delta",
        "train.epochs",
        "train.batch_size",
        "train.w_pos",
        "train.p",
        "train.dyn_balanced_loss",
        "train.grad_flow_adjust",
        "train.freq_sampling",
        "train.dist_transform",
        "train.validation_select",
        "run.seed",
        "run.deterministic",
        "data.source",
        "data.train",
        "data.test",
        "data.validation",
        "data.layout",
        "data.test_fraction",
        "data.validation_fraction",
        "synth.n_pos",
        "synth.n_neg",
        "synth.size",
        "synth.defect",
        "synth.noise_level",
        "output.dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.input_channels" => self.model.input_channels = parse(key, v)?,
            "model.base_channels" => self.model.base_channels = parse(key, v)?,
            "model.downsample_factor" => self.model.downsample_factor = parse(key, v)?,
            "train.eta" => self.train.eta = parse(key, v)?,
            "train.delta" => self.train.delta = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.w_pos" => self.train.w_pos = parse(key, v)?,
            "train.p" => self.train.p = parse(key, v)?,
            "train.dyn_balanced_loss" => self.train.toggles.dyn_balanced_loss = parse_bool(key, v)?,
            "train.grad_flow_adjust" => self.train.toggles.grad_flow_adjust = parse_bool(key, v)?,
            "train.freq_sampling" => self.train.toggles.freq_sampling = parse_bool(key, v)?,
            "train.dist_transform" => self.train.toggles.dist_transform = parse_bool(key, v)?,
            "train.validation_select" => self.train.validation_select = parse_bool(key, v)?,
            "run.seed" => self.train.seed = parse(key, v)?,
            "run.deterministic" => self.deterministic = parse_bool(key, v)?,
            "data.source" => self.data.source = v.parse()?,
            "data.train" => self.data.train = opt_path(v),
            "data.test" => self.data.test = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            "data.validation" => self.data.validation = opt_path(v),
            "data.layout" => self.data.layout = v.parse().map_err(|e: Error| Error::Config(format!("data.layout: {e}")))?,
            "data.test_fraction" => self.data.test_fraction = parse(key, v)?,
            "data.validation_fraction" => self.data.validation_fraction = parse(key, v)?,
            "synth.n_pos" => self.synth.n_pos = parse(key, v)?,
            "synth.n_neg" => self.synth.n_neg = parse(key, v)?,
            "synth.size" => self.synth.size = parse(key, v)?,
            "synth.defect" => self.synth.defect = v.parse::<DefectKind>()?,
            "synth.noise_level" => self.synth.noise_level = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected 'key = value', got '{line}'", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// `--set key=value` style override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Model configuration with the gradient stops following the
    /// gradient-flow toggle.
    pub fn model_config(&self) -> ModelConfig {
        let g = self.train.toggles.grad_flow_adjust;
        ModelConfig { grad_stop_shortcuts: g, grad_stop_seg_features: g, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Synth {
            self.synth.validate(self.model.downsample_factor)?;
        }
        for (key, f) in [("data.test_fraction", self.data.test_fraction), ("data.validation_fraction", self.data.validation_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("{key} must lie in [0, 1) (got {f})")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = &self.train.toggles;
        let b = |v: bool| v.to_string();
        Some(match key {
            "model.input_channels" => self.model.input_channels.to_string(),
            "model.base_channels" => self.model.base_channels.to_string(),
            "model.downsample_factor" => self.model.downsample_factor.to_string(),
            "train.eta" => self.train.eta.to_string(),
            "train.delta" => self.train.delta.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.w_pos" => self.train.w_pos.to_string(),
            "train.p" => self.train.p.to_string(),
            "train.dyn_balanced_loss" => b(t.dyn_balanced_loss),
            "train.grad_flow_adjust" => b(t.grad_flow_adjust),
            "train.freq_sampling" => b(t.freq_sampling),
            "train.dist_transform" => b(t.dist_transform),
            "train.validation_select" => b(self.train.validation_select),
            "run.seed" => self.train.seed.to_string(),
            "run.deterministic" => b(self.deterministic),
            "data.source" => self.data.source.to_string(),
            "data.train" => path(&self.data.train),
            "data.test" => self.data.test.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            "data.validation" => path(&self.data.validation),
            "data.layout" => self.data.layout.to_string(),
            "data.test_fraction" => self.data.test_fraction.to_string(),
            "data.validation_fraction" => self.data.validation_fraction.to_string(),
            "synth.n_pos" => self.synth.n_pos.to_string(),
            "synth.n_neg" => self.synth.n_neg.to_string(),
            "synth.size" => self.synth.size.to_string(),
            "synth.defect" => self.synth.defect.to_string(),
            "synth.noise_level" => self.synth.noise_level.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Every key, one `key = value` line each.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("train.eta = 0.5\n# comment\ndata.test = a, b,c\nsynth.defect=scratch\n", "t").unwrap();
        cfg.apply_override("run.seed=11").unwrap();
        let mut again = RunConfig::default();
        again.apply_text(&cfg.to_kv(), "resolved").unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.data.test.len(), 3);
        assert_eq!(cfg.train.seed, 11);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("train.etaa = 1\n", "t").unwrap_err().to_string();
        assert!(err.contains("train.etaa"));
        let err = cfg.apply_override("train.epochs=ten").unwrap_err().to_string();
        assert!(err.contains("train.epochs"));
        assert!(cfg.apply_text("no equals sign\n", "t").is_err());
        assert!(cfg.apply_override("train.dist_transform=maybe").is_err());
    }

    #[test]
    fn validation_names_the_problem() {
        let mut cfg = RunConfig::default();
        cfg.synth.size = 100;
        assert!(cfg.validate().unwrap_err().to_string().contains("downsample factor 8"));
        cfg.synth.size = 128;
        cfg.data.test_fraction = 1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("data.test_fraction"));
    }

    #[test]
    fn grad_flow_toggle_drives_model_stops() {
        let mut cfg = RunConfig::default();
        cfg.set("train.grad_flow_adjust", "0").unwrap();
        let m = cfg.model_config();
        assert!(!m.grad_stop_shortcuts && !m.grad_stop_seg_features);
    }

    #[test]
    fn presets_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
        for name in ["dagm.cfg", "ksdd.cfg", "steel.cfg", "synth.cfg"] {
            let cfg = RunConfig::from_file(&dir.join(name)).unwrap();
            cfg.validate().unwrap();
        }
        let dagm = RunConfig::from_file(&dir.join("dagm.cfg")).unwrap();
        assert_eq!((dagm.train.eta, dagm.train.delta, dagm.train.w_pos, dagm.train.epochs), (0.01, 1.0, 20.0, 50));
    }
}
