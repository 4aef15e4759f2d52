//! Run configuration: named presets, JSON config files, and `--key=value`
//! flag overrides with precedence flag > file > preset default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::synthesizer::SynthConfig;
use crate::toycorpus::CorpusGenConfig;
use crate::training::TrainConfig;
use crate::translator::TranslatorConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    /// master seed; copied into `train.seed` and `corpus.seed` unless those
    /// are set explicitly
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub run_dir: PathBuf,
    pub translator: TranslatorConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub corpus: CorpusGenConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            preset: "toy".into(),
            seed: 1,
            corpus_dir: PathBuf::from("corpus"),
            run_dir: PathBuf::from("run"),
            translator: TranslatorConfig::toy(),
            synth: SynthConfig::toy(),
            train: TrainConfig::default(),
            corpus: CorpusGenConfig::default(),
        }
    }

    /// Full-scale model dimensions. The data pipeline stays procedural, so
    /// the corpus settings keep their desk-scale defaults.
    pub fn paper() -> Self {
        RunConfig {
            preset: "paper".into(),
            translator: TranslatorConfig::paper(),
            synth: SynthConfig::paper(),
            ..RunConfig::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(RunConfig::toy()),
            "paper" => Ok(RunConfig::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected \"toy\" or \"paper\")"
            ))),
        }
    }

    pub fn validate_model(&self) -> Result<()> {
        self.translator.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.synth.d_in != self.translator.d_out {
            return Err(Error::Config(format!(
                "synth.d_in ({}) must equal translator.d_out ({})",
                self.synth.d_in, self.translator.d_out
            )));
        }
        Ok(())
    }

    /// Checks model dimensions against a generated corpus.
    pub fn validate_with_corpus(&self, gen: &CorpusGenConfig) -> Result<()> {
        self.validate_model()?;
        let checks = [
            ("translator.d_in", self.translator.d_in, gen.d_bnf),
            ("translator.d_out", self.translator.d_out, gen.d_bnf),
            ("synth.d_mel", self.synth.d_mel, gen.d_mel),
            (
                "synth.upsample_factor",
                self.synth.upsample_factor,
                gen.upsample_factor,
            ),
        ];
        for (name, model, corpus) in checks {
            if model != corpus {
                return Err(Error::Config(format!(
                    "{name} ({model}) does not match the corpus ({corpus})"
                )));
            }
        }
        Ok(())
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut row = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            row.push(sub.min(prev[j + 1] + 1).min(row[j] + 1));
        }
        prev = row;
    }
    prev[b.len()]
}

fn nearest_key(key: &str, candidates: &[String]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (levenshtein(key, c), c))
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, c)| c.clone())
}

fn unknown_key_error(key: &str, obj: &serde_json::Map<String, Value>, prefix: &str) -> Error {
    let candidates: Vec<String> = obj.keys().cloned().collect();
    let shown = if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    };
    match nearest_key(key, &candidates) {
        Some(near) => Error::Config(format!(
            "unknown config key {shown:?}; did you mean {near:?}?"
        )),
        None => Error::Config(format!(
            "unknown config key {shown:?}; valid keys here: {}",
            candidates.join(", ")
        )),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn set_leaf(slot: &mut Value, new: Value, path: &str) -> Result<()> {
    if type_name(slot) != type_name(&new) {
        return Err(Error::Config(format!(
            "config key {path:?} expects a {}, got {} ({new})",
            type_name(slot),
            type_name(&new)
        )));
    }
    *slot = new;
    Ok(())
}

/// Recursively merges `patch` into `base`, rejecting keys `base` does not
/// have and values of the wrong JSON type.
fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    let Value::Object(patch_obj) = patch else {
        return Err(Error::Config(format!(
            "config section {prefix:?} must be a JSON object"
        )));
    };
    let Value::Object(base_obj) = base else {
        return Err(Error::Config(format!("config key {prefix:?} is not a section")));
    };
    for (key, v) in patch_obj {
        let Some(slot) = base_obj.get_mut(&key) else {
            return Err(unknown_key_error(&key, base_obj, prefix));
        };
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        if slot.is_object() && v.is_object() {
            merge(slot, v, &path)?;
        } else {
            set_leaf(slot, v, &path)?;
        }
    }
    Ok(())
}

/// Every leaf path in a config tree, dotted.
fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(obj) => {
            for (k, child) in obj {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaf_paths(child, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn navigate<'a>(root: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    let mut cur = root;
    for seg in path.split('.') {
        cur = cur.as_object_mut()?.get_mut(seg)?;
    }
    Some(cur)
}

/// Parses a flag value: JSON if it parses, bare string otherwise (so
/// `--preset=toy` works without quoting).
fn flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `--key=value` override. `key` may be a dotted path or a bare
/// leaf name when that name is unambiguous across the whole config.
fn apply_flag(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut all = Vec::new();
    leaf_paths(root, "", &mut all);
    let path = if all.iter().any(|p| p == key) {
        key.to_string()
    } else {
        let matches: Vec<&String> = all
            .iter()
            .filter(|p| p.rsplit('.').next() == Some(key))
            .collect();
        match matches.len() {
            1 => matches[0].clone(),
            0 => {
                return Err(match nearest_key(key, &all) {
                    Some(near) => Error::Config(format!(
                        "unknown config key {key:?}; did you mean {near:?}?"
                    )),
                    None => Error::Config(format!("unknown config key {key:?}")),
                })
            }
            _ => {
                let shown: Vec<String> = matches.iter().map(|s| s.to_string()).collect();
                return Err(Error::Config(format!(
                    "config key {key:?} is ambiguous; use one of: {}",
                    shown.join(", ")
                )));
            }
        }
    };
    let slot = navigate(root, &path).expect("path came from leaf enumeration");
    set_leaf(slot, flag_value(raw), &path)
}

/// Loads a run configuration: preset defaults, then the JSON file (empty file
/// allowed), then flag overrides. `BNF2BNF_SEED` provides the seed when
/// neither the file nor a flag sets one. The master `seed` is copied into
/// `train.seed` and `corpus.seed` unless those were set explicitly.
pub fn parse_config(path: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig> {
    let file_value: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            if text.trim().is_empty() {
                Value::Object(Default::default())
            } else {
                serde_json::from_str(&text)?
            }
        }
        None => Value::Object(Default::default()),
    };

    // the preset decides the defaults, so resolve it first (flag wins)
    let preset_name = flags
        .iter()
        .rev()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| v.clone())
        .or_else(|| file_value.get("preset").and_then(|v| v.as_str().map(String::from)))
        .unwrap_or_else(|| "toy".into());
    let defaults = RunConfig::preset(&preset_name)?;
    let mut root = serde_json::to_value(&defaults)?;

    merge(&mut root, file_value, "")?;
    for (key, raw) in flags {
        apply_flag(&mut root, key, raw)?;
    }

    let explicitly_set = |key: &str| -> bool { flags.iter().any(|(k, _)| k == key) };
    let file_has = |section: &str, key: &str| -> bool {
        path.is_some()
            && std::fs::read_to_string(path.unwrap())
                .ok()
                .and_then(|t| serde_json::from_str::<Value>(&t).ok())
                .and_then(|v| v.get(section).and_then(|s| s.get(key).cloned()))
                .is_some()
    };

    // env seed fallback, below file and flags
    let seed_given = flags.iter().any(|(k, _)| k == "seed")
        || root.get("seed") != serde_json::to_value(&defaults)?.get("seed");
    if !seed_given {
        if let Ok(env_seed) = std::env::var("BNF2BNF_SEED") {
            let parsed: u64 = env_seed
                .parse()
                .map_err(|_| Error::Config(format!("BNF2BNF_SEED={env_seed:?} is not a seed")))?;
            root["seed"] = serde_json::json!(parsed);
        }
    }

    let master_seed = root["seed"].clone();
    if !explicitly_set("train.seed") && !file_has("train", "seed") {
        root["train"]["seed"] = master_seed.clone();
    }
    if !explicitly_set("corpus.seed") && !file_has("corpus", "seed") {
        root["corpus"]["seed"] = master_seed;
    }

    let cfg: RunConfig = serde_json::from_value(root)?;
    Ok(cfg)
}
