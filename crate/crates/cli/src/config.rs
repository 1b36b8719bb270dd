//! Layered configuration: preset, then a TOML file, then `--set` overrides,
//! then dedicated flags. Keys are checked against the known fields before
//! anything runs.

use std::path::Path;

use pointgame_core::config::{ModelConfig, TrainConfig};
use pointgame_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Default,
    Tiny,
    Gradcheck,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Gradcheck => ModelConfig::gradcheck(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "tiny" => Ok(Preset::Tiny),
            "gradcheck" => Ok(Preset::Gradcheck),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected default, tiny or gradcheck)"))),
        }
    }
}

/// Resolved settings of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Whether any model key was given explicitly (preset, file or override).
    pub model_explicit: bool,
}

/// Inputs to [`resolve`], in increasing precedence.
#[derive(Clone, Debug, Default)]
pub struct Layers<'a> {
    pub file: Option<&'a Path>,
    pub preset: Option<Preset>,
    /// `section.key=value` strings.
    pub set: &'a [String],
}

pub fn resolve(layers: &Layers<'_>) -> Result<CliConfig> {
    let mut file = match layers.file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            text.parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None => Table::new(),
    };
    let file_preset = match file.remove("preset") {
        Some(Value::String(s)) => Some(Preset::parse(&s)?),
        Some(other) => return Err(Error::Config(format!("`preset` must be a string, got {other}"))),
        None => None,
    };
    let mut model_over = section(&mut file, "model")?;
    let mut train_over = section(&mut file, "train")?;
    if let Some(key) = file.keys().next() {
        return Err(Error::Config(format!("unknown key `{key}` (expected preset, [model] or [train])")));
    }
    for item in layers.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let (sec, name) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{key}` needs a model. or train. prefix")))?;
        let value = parse_value(raw.trim());
        match sec {
            "model" => model_over.insert(name.to_string(), value),
            "train" => train_over.insert(name.to_string(), value),
            other => return Err(Error::Config(format!("unknown section `{other}` in `{key}`"))),
        };
    }
    let preset = layers.preset.or(file_preset);
    let model_explicit = preset.is_some() || !model_over.is_empty();
    let model: ModelConfig = overlay("model", &preset.unwrap_or(Preset::Default).model(), &model_over)?;
    let train: TrainConfig = overlay("train", &TrainConfig::default(), &train_over)?;
    model.validate()?;
    train.validate()?;
    Ok(CliConfig {
        model,
        train,
        model_explicit,
    })
}

fn section(file: &mut Table, name: &str) -> Result<Table> {
    match file.remove(name) {
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(Error::Config(format!("`{name}` must be a table"))),
        None => Ok(Table::new()),
    }
}

/// Bare TOML literal if it parses as one, otherwise a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Apply `over` onto the serialized `base`, rejecting unknown keys and
/// naming the key whose value fails to deserialize.
fn overlay<T: Serialize + DeserializeOwned>(section: &str, base: &T, over: &Table) -> Result<T> {
    let base = Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = base.clone();
    for (key, value) in over {
        let Some(old) = base.get(key) else {
            let known: Vec<&str> = base.keys().map(String::as_str).collect();
            return Err(Error::Config(format!("unknown key `{section}.{key}` (known: {})", known.join(", "))));
        };
        let value = match (old, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
            _ => value.clone(),
        };
        let mut probe = base.clone();
        probe.insert(key.clone(), value.clone());
        if let Err(e) = probe.try_into::<T>() {
            return Err(Error::Config(format!("invalid value for `{section}.{key}`: {}", e.message())));
        }
        merged.insert(key.clone(), value);
    }
    merged.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{section}: {}", e.message())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_layers() {
        let c = resolve(&Layers::default()).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert!(!c.model_explicit);
    }

    #[test]
    fn overrides_take_precedence() {
        let set = vec!["model.d=48".to_string(), "train.lr-max=1".to_string(), "model.pair-feature-variant=paper-literal".into()];
        let c = resolve(&Layers {
            preset: Some(Preset::Tiny),
            set: &set,
            ..Layers::default()
        })
        .unwrap();
        assert_eq!(c.model.d, 48);
        assert_eq!(c.model.g, 16);
        assert_eq!(c.train.lr_max, 1.0);
        assert_eq!(c.model.pair_feature_variant, pointgame_core::geometry::PairFeatureVariant::PaperLiteral);
    }

    #[test]
    fn unknown_and_ill_typed_keys_are_named() {
        let set = vec!["model.depth=3".to_string()];
        let e = resolve(&Layers { set: &set, ..Layers::default() }).unwrap_err().to_string();
        assert!(e.contains("model.depth"), "{e}");
        let set = vec!["train.epochs=many".to_string()];
        let e = resolve(&Layers { set: &set, ..Layers::default() }).unwrap_err().to_string();
        assert!(e.contains("train.epochs"), "{e}");
    }
}
