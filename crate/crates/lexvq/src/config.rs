//! Flat `key=value` configuration: the one file format every command reads,
//! with CLI `--set key=value` overrides layered on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::read_text;
use crate::model::{DatasetSource, PriorsSource, TrainConfig, Variant};

/// Ordered key=value map; duplicate keys in one source are rejected.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines skip.
    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(source, lineno + 1, "expected 'key=value'")
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if values.insert(key.clone(), value).is_some() {
                return Err(Error::parse(
                    source,
                    lineno + 1,
                    format!("duplicate key '{key}'"),
                ));
            }
        }
        Ok(ConfigMap { values })
    }

    /// Applies an override (CLI wins over file contents).
    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key} must be an integer, got '{v}'"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key} must be an integer, got '{v}'"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key} must be a number, got '{v}'"))),
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Renders the map back to config text, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

/// Builds a [`TrainConfig`] from a map, filling defaults for absent keys.
pub fn train_config_from(map: &ConfigMap) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let variant = match map.get("variant").unwrap_or("vqct") {
        "baseline" => Variant::Baseline {
            k: map.get_usize("k", 64)?,
        },
        "vqct" => Variant::Vqct {
            k_adj: map.get_usize("k_adj", 32)?,
            k_noun: map.get_usize("k_noun", 32)?,
        },
        other => {
            return Err(Error::Config(format!(
                "variant must be baseline|vqct, got '{other}'"
            )))
        }
    };

    let dataset = match map.get("dataset").unwrap_or("synth:256:32") {
        spec if spec.starts_with("synth:") => {
            let parts: Vec<&str> = spec["synth:".len()..].split(':').collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "dataset synth spec must be synth:<n>:<size>, got '{spec}'"
                )));
            }
            DatasetSource::Synth {
                n: parts[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad dataset count in '{spec}'")))?,
                size: parts[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad dataset size in '{spec}'")))?,
            }
        }
        spec if spec.starts_with("dir:") => {
            DatasetSource::Dir(PathBuf::from(&spec["dir:".len()..]))
        }
        other => {
            return Err(Error::Config(format!(
                "dataset must be synth:<n>:<size> or dir:<path>, got '{other}'"
            )))
        }
    };

    let priors = match map.get("priors").unwrap_or("synth") {
        "synth" => PriorsSource::Synth {
            dim: map.get_usize("priors_dim", 16)?,
            sentences: map.get_usize("priors_sentences", 400)?,
        },
        "files" => PriorsSource::Files {
            embeddings: PathBuf::from(map.require("embeddings")?),
            lexicon: PathBuf::from(map.require("lexicon")?),
            corpus: map.get("corpus").map(PathBuf::from),
            edges: map.get("edges").map(PathBuf::from),
        },
        other => {
            return Err(Error::Config(format!(
                "priors must be synth|files, got '{other}'"
            )))
        }
    };

    let use_sgd = match map.get("optimizer").unwrap_or("adam") {
        "adam" => false,
        "sgd" => true,
        other => {
            return Err(Error::Config(format!(
                "optimizer must be adam|sgd, got '{other}'"
            )))
        }
    };

    let max_grad_norm = match map.get("max_grad_norm") {
        None | Some("") | Some("none") => None,
        Some(v) => Some(v.parse().map_err(|_| {
            Error::Config(format!("max_grad_norm must be a number, got '{v}'"))
        })?),
    };

    let cfg = TrainConfig {
        seed: map.get_u64("seed", defaults.seed)?,
        epochs: map.get_usize("epochs", defaults.epochs)?,
        batch_size: map.get_usize("batch_size", defaults.batch_size)?,
        learning_rate: map.get_f64("learning_rate", defaults.learning_rate)?,
        beta: map.get_f64("beta", defaults.beta)?,
        n_c: map.get_usize("n_c", defaults.n_c)?,
        base_width: map.get_usize("base_width", defaults.base_width)?,
        downsample: map.get_usize("downsample", defaults.downsample)?,
        variant,
        dataset,
        priors,
        d_hidden: map.get_usize("d_hidden", defaults.d_hidden)?,
        final_activation: map
            .get("final_activation")
            .unwrap_or("relu")
            .parse()?,
        use_sgd,
        max_grad_norm,
        checkpoint_every: map.get_usize("checkpoint_every", defaults.checkpoint_every)?,
        resume: map.get("resume").filter(|s| !s.is_empty()).map(PathBuf::from),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// The fully resolved key set for a train run, for the manifest.
pub fn resolved_train_kv(cfg: &TrainConfig) -> ConfigMap {
    let mut map = ConfigMap::new();
    map.set("seed", &cfg.seed.to_string());
    map.set("epochs", &cfg.epochs.to_string());
    map.set("batch_size", &cfg.batch_size.to_string());
    map.set("learning_rate", &cfg.learning_rate.to_string());
    map.set("beta", &cfg.beta.to_string());
    map.set("n_c", &cfg.n_c.to_string());
    map.set("base_width", &cfg.base_width.to_string());
    map.set("downsample", &cfg.downsample.to_string());
    match cfg.variant {
        Variant::Baseline { k } => {
            map.set("variant", "baseline");
            map.set("k", &k.to_string());
        }
        Variant::Vqct { k_adj, k_noun } => {
            map.set("variant", "vqct");
            map.set("k_adj", &k_adj.to_string());
            map.set("k_noun", &k_noun.to_string());
        }
    }
    match &cfg.dataset {
        DatasetSource::Synth { n, size } => map.set("dataset", &format!("synth:{n}:{size}")),
        DatasetSource::Dir(p) => map.set("dataset", &format!("dir:{}", p.display())),
    }
    match &cfg.priors {
        PriorsSource::Synth { dim, sentences } => {
            map.set("priors", "synth");
            map.set("priors_dim", &dim.to_string());
            map.set("priors_sentences", &sentences.to_string());
        }
        PriorsSource::Files {
            embeddings,
            lexicon,
            corpus,
            edges,
        } => {
            map.set("priors", "files");
            map.set("embeddings", &embeddings.display().to_string());
            map.set("lexicon", &lexicon.display().to_string());
            if let Some(c) = corpus {
                map.set("corpus", &c.display().to_string());
            }
            if let Some(e) = edges {
                map.set("edges", &e.display().to_string());
            }
        }
    }
    map.set("d_hidden", &cfg.d_hidden.to_string());
    map.set(
        "final_activation",
        match cfg.final_activation {
            crate::transfer::FinalActivation::Relu => "relu",
            crate::transfer::FinalActivation::None => "none",
        },
    );
    map.set("optimizer", if cfg.use_sgd { "sgd" } else { "adam" });
    if let Some(m) = cfg.max_grad_norm {
        map.set("max_grad_norm", &m.to_string());
    }
    map.set("checkpoint_every", &cfg.checkpoint_every.to_string());
    if let Some(r) = &cfg.resume {
        map.set("resume", &r.display().to_string());
    }
    map
}
