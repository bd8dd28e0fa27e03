//! Run configuration: `[model]`, `[train]` and `[data]` sections of
//! `key = value` lines, plus `--key value` overrides from the command line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ini::Ini;
use tut_core::data::ClassMapping;
use tut_core::net::ModelConfig;
use tut_core::trainer::TrainConfig;

/// Where the data lives and how it is sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub split: Option<String>,
    /// Split used for evaluation; the training split when unset.
    pub eval_split: Option<String>,
    /// Frame rate the model runs at.
    pub fps: f64,
    /// Frame rate of the stored features; resampled to `fps` when different.
    pub source_fps: Option<f64>,
    /// Class names left out of edit and F1.
    pub ignore: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            split: None,
            eval_split: None,
            fps: 15.0,
            source_fps: None,
            ignore: Vec::new(),
        }
    }
}

impl DataConfig {
    pub const KEYS: &'static [&'static str] =
        &["root", "split", "eval_split", "fps", "source_fps", "ignore"];

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let value = value.trim();
        let opt = |v: &str| (!v.is_empty()).then(|| v.to_string());
        match key {
            "root" => self.root = opt(value).map(PathBuf::from),
            "split" => self.split = opt(value),
            "eval_split" => self.eval_split = opt(value),
            "fps" => {
                self.fps = value
                    .parse()
                    .with_context(|| format!("invalid fps '{value}'"))?
            }
            "source_fps" => {
                self.source_fps = match value {
                    "" => None,
                    v => Some(
                        v.parse()
                            .with_context(|| format!("invalid source_fps '{v}'"))?,
                    ),
                }
            }
            "ignore" => {
                self.ignore = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        vec![
            ("root", path(&self.root)),
            ("split", self.split.clone().unwrap_or_default()),
            ("eval_split", self.eval_split.clone().unwrap_or_default()),
            ("fps", self.fps.to_string()),
            (
                "source_fps",
                self.source_fps.map(|f| f.to_string()).unwrap_or_default(),
            ),
            ("ignore", self.ignore.join(",")),
        ]
    }

    pub fn root(&self) -> Result<&Path> {
        self.root
            .as_deref()
            .context("no dataset root: set `root` in [data] or pass --root")
    }

    /// Ids of the ignored classes under `mapping`.
    pub fn ignored_ids(&self, mapping: &ClassMapping) -> Result<Vec<usize>> {
        self.ignore
            .iter()
            .map(|n| {
                mapping
                    .id(n)
                    .with_context(|| format!("ignored class '{n}' is not in the mapping"))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Model,
    Train,
    Data,
}

impl Section {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "model" => Some(Section::Model),
            "train" => Some(Section::Train),
            "data" => Some(Section::Data),
            _ => None,
        }
    }

    fn of_key(key: &str) -> Option<Self> {
        if key == "preset" || ModelConfig::KEYS.contains(&key) {
            Some(Section::Model)
        } else if TrainConfig::KEYS.contains(&key) {
            Some(Section::Train)
        } else if DataConfig::KEYS.contains(&key) {
            Some(Section::Data)
        } else {
            None
        }
    }
}

/// Whether `key` (with `-` read as `_`) is a configuration key.
pub fn is_key(key: &str) -> bool {
    Section::of_key(&key.replace('-', "_")).is_some()
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Keys given explicitly, in the file or as overrides.
    pub explicit: BTreeSet<String>,
}

fn preset(name: &str) -> Result<ModelConfig> {
    // Dimensions are placeholders until the dataset is known.
    Ok(match name {
        "salads50" | "50salads" => ModelConfig::salads50(1, 1),
        "gtea" => ModelConfig::gtea(1, 1),
        "breakfast" => ModelConfig::breakfast(1, 1),
        _ => bail!("unknown preset '{name}', expected salads50, gtea or breakfast"),
    })
}

impl RunConfig {
    /// Builds a configuration from file text and overrides. Overrides win;
    /// a `preset` is applied before any other model key.
    pub fn build(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs: Vec<(Section, String, String)> = Vec::new();
        if let Some(text) = text {
            let ini = Ini::load_from_str(text).context("malformed config file")?;
            for (section, props) in ini.iter() {
                let sec = match section {
                    Some(name) => Section::parse(name).with_context(|| {
                        format!("unknown config section [{name}], expected model, train or data")
                    })?,
                    None if props.is_empty() => continue,
                    None => {
                        bail!("config keys must sit under a [model], [train] or [data] section")
                    }
                };
                for (k, v) in props.iter() {
                    if Section::of_key(k) != Some(sec) {
                        bail!(
                            "unknown key '{k}' in section [{}]",
                            section.unwrap_or_default()
                        );
                    }
                    pairs.push((sec, k.to_string(), v.to_string()));
                }
            }
        }
        for (k, v) in overrides {
            let k = k.replace('-', "_");
            let sec = Section::of_key(&k).with_context(|| format!("unknown option --{k}"))?;
            pairs.push((sec, k, v.clone()));
        }

        let mut cfg = RunConfig::default();
        if let Some((_, _, name)) = pairs.iter().rev().find(|(_, k, _)| k == "preset") {
            cfg.model = preset(name.trim())?;
        }
        for (sec, k, v) in &pairs {
            let owned = match sec {
                Section::Model if k == "preset" => true,
                Section::Model => cfg.model.set(k, v)?,
                Section::Train => cfg.train.set(k, v)?,
                Section::Data => cfg.data.set(k, v)?,
            };
            debug_assert!(owned, "{k}");
            cfg.explicit.insert(k.clone());
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = path
            .map(|p| {
                std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))
            })
            .transpose()?;
        Self::build(text.as_deref(), overrides)
    }

    /// Fills input and class dimensions from the data unless set explicitly.
    pub fn bind_dims(&mut self, input_dim: usize, num_classes: usize) -> Result<()> {
        for (key, given, found) in [
            ("input_dim", &mut self.model.input_dim, input_dim),
            ("num_classes", &mut self.model.num_classes, num_classes),
        ] {
            if !self.explicit.contains(key) {
                *given = found;
            } else if *given != found {
                bail!("{key} is {given} in the config but the data has {found}");
            }
        }
        Ok(())
    }

    /// Fully resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (title, pairs) in [
            ("model", self.model.to_pairs()),
            ("train", self.train.to_pairs()),
            ("data", self.data.to_pairs()),
        ] {
            s.push_str(&format!("[{title}]\n"));
            for (k, v) in pairs {
                s.push_str(&format!("{k} = {v}\n"));
            }
            s.push('\n');
        }
        s
    }
}

/// Splits `--key value` and `--key=value` pairs for configuration keys out
/// of `args`, leaving everything else in place.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !is_key(&key) {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .with_context(|| format!("--{key} needs a value"))?,
        };
        pairs.push((key, value));
    }
    Ok((rest, pairs))
}
