//! Run configuration files: a training config plus the paths a run reads
//! and writes.
//!
//! Parsing is strict. Unknown keys are rejected with the closest known key
//! as a suggestion, and every type or range problem names its key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::FrozenInput;
use crate::trainer::TrainConfig;

/// Name of the effective config echoed into the output directory.
pub const EFFECTIVE_CONFIG: &str = "config.json";

const PATH_KEYS: [&str; 5] = ["corpus", "features", "feature_texts", "checkpoint_dir", "output_dir"];
const REQUIRED: [&str; 2] = ["objective", "corpus"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub corpus: PathBuf,
    /// Frozen layer stacks; requires `feature_texts`.
    pub features: Option<PathBuf>,
    pub feature_texts: Option<PathBuf>,
    /// Defaults to `<output_dir>/checkpoint`.
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

fn suggest(key: &str, known: &[&str]) -> String {
    let best = known
        .iter()
        .map(|k| (strsim::jaro_winkler(key, k), *k))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((score, k)) if score >= 0.8 => format!("unknown key; did you mean `{k}`?"),
        _ => format!("unknown key; expected one of {}", known.join(", ")),
    }
}

fn object<'a>(value: &'a Value, key: &str) -> Result<&'a Map<String, Value>> {
    value.as_object().ok_or_else(|| Error::config(key, "expected a JSON object"))
}

fn known_keys(defaults: &Value) -> Vec<String> {
    let mut keys: Vec<String> = object(defaults, "").expect("object").keys().cloned().collect();
    keys.extend(PATH_KEYS.iter().map(|k| k.to_string()));
    keys
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config("(document)", e.to_string()))?;
        Self::from_value(&value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::fsio::read_to_string(path)?)
    }

    /// Checks keys, fills defaults and validates ranges. Paths are not
    /// touched; see [`RunConfig::check_paths`].
    pub fn from_value(doc: &Value) -> Result<Self> {
        let doc = object(doc, "(document)")?;
        for key in REQUIRED {
            if !doc.contains_key(key) {
                return Err(Error::config(key, "required key is missing"));
            }
        }
        let objective = doc["objective"].as_str().ok_or_else(|| Error::config("objective", "expected a string"))?;
        let defaults = serde_json::to_value(TrainConfig::new(objective))?;
        let known = known_keys(&defaults);
        let known: Vec<&str> = known.iter().map(String::as_str).collect();
        let encoder_known: Vec<String> = object(&defaults["encoder"], "encoder")?.keys().cloned().collect();
        let encoder_known: Vec<&str> = encoder_known.iter().map(String::as_str).collect();

        let mut train = defaults.clone();
        for (key, value) in doc {
            if !known.contains(&key.as_str()) {
                return Err(Error::config(key, suggest(key, &known)));
            }
            if PATH_KEYS.contains(&key.as_str()) {
                continue;
            }
            if key == "encoder" {
                for (sub, v) in object(value, "encoder")? {
                    let full = format!("encoder.{sub}");
                    if !encoder_known.contains(&sub.as_str()) {
                        return Err(Error::config(full, suggest(sub, &encoder_known)));
                    }
                    train["encoder"][sub] = v.clone();
                    Self::try_train(&train).map_err(|e| Error::config(&full, e))?;
                }
            } else {
                train[key] = value.clone();
                Self::try_train(&train).map_err(|e| Error::config(key, e))?;
            }
        }
        let train: TrainConfig = serde_json::from_value(train)?;
        train.validate().map_err(|e| match e {
            Error::InvalidValue { name, reason } => Error::config(name, reason),
            Error::UnknownStrategy(s) => Error::config("strategy", format!("unknown pooling strategy `{s}`")),
            Error::UnknownObjective(s) => Error::config("objective", format!("unknown objective `{s}`")),
            other => other,
        })?;
        // vocab_size comes from the fitted tokenizer
        let encoder = crate::encoder::EncoderConfig { vocab_size: train.encoder.vocab_size.max(3), ..train.encoder.clone() };
        encoder.validate().map_err(|e| match e {
            Error::InvalidValue { name, reason } => Error::config(format!("encoder.{name}"), reason),
            other => other,
        })?;

        let path = |key: &str| -> Result<Option<PathBuf>> {
            match doc.get(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) if !s.is_empty() => Ok(Some(PathBuf::from(s))),
                Some(_) => Err(Error::config(key, "expected a non-empty path string")),
            }
        };
        let corpus = path("corpus")?.expect("required");
        let (features, feature_texts) = (path("features")?, path("feature_texts")?);
        match (&features, &feature_texts) {
            (Some(_), None) => return Err(Error::config("feature_texts", "required when `features` is set")),
            (None, Some(_)) => return Err(Error::config("features", "required when `feature_texts` is set")),
            _ => {}
        }
        let output_dir = path("output_dir")?.unwrap_or_else(|| PathBuf::from("run"));
        let checkpoint_dir = path("checkpoint_dir")?.unwrap_or_else(|| output_dir.join("checkpoint"));
        Ok(Self { train, corpus, features, feature_texts, checkpoint_dir, output_dir })
    }

    fn try_train(value: &Value) -> std::result::Result<(), String> {
        serde_json::from_value::<TrainConfig>(value.clone()).map(|_| ()).map_err(|e| e.to_string())
    }

    /// Inputs must be existing files and outputs must not be files.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = [("corpus", Some(&self.corpus)), ("features", self.features.as_ref()), ("feature_texts", self.feature_texts.as_ref())];
        for (key, p) in inputs {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::config(key, format!("{} is not a readable file", p.display())));
                }
            }
        }
        for (key, p) in [("output_dir", &self.output_dir), ("checkpoint_dir", &self.checkpoint_dir)] {
            if p.exists() && !p.is_dir() {
                return Err(Error::config(key, format!("{} exists and is not a directory", p.display())));
            }
        }
        Ok(())
    }

    pub fn frozen(&self) -> Result<Option<FrozenInput>> {
        match (&self.features, &self.feature_texts) {
            (Some(f), Some(t)) => FrozenInput::load(f, t).map(Some),
            _ => Ok(None),
        }
    }

    /// Pretty JSON with every default filled in; parses back to `self`.
    pub fn effective_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_effective(&self) -> Result<PathBuf> {
        let path = self.output_dir.join(EFFECTIVE_CONFIG);
        crate::fsio::write_atomic(&path, self.effective_json()?.as_bytes())?;
        Ok(path)
    }
}
