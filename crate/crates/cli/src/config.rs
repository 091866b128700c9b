//! The run configuration file: one JSON document per experiment.

use std::path::{Path, PathBuf};

use diet::featurizer::DenseSourceSpec;
use diet::model::ModelConfig;
use diet::pipeline::FeaturizationConfig;
use diet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_data: PathBuf,
    /// Evaluated after training when present.
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    /// Per-epoch evaluation set; carved from `train_data` when absent.
    #[serde(default)]
    pub dev_data: Option<PathBuf>,
    #[serde(default)]
    pub featurization: FeaturizationConfig,
    /// Includes the loss toggles under `model.losses`.
    #[serde(default)]
    pub model: ModelConfig,
    /// Includes the seed under `train.seed`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// 1-based line of the first `"key":` in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    let mut from = 0;
    while let Some(i) = text[from..].find(&needle) {
        let at = from + i;
        let rest = text[at + needle.len()..].trim_start();
        if rest.starts_with(':') {
            return Some(text[..at].matches('\n').count() + 1);
        }
        from = at + needle.len();
    }
    None
}

struct Source<'a> {
    name: String,
    text: &'a str,
}

impl Source<'_> {
    /// A config error pointing at `key` (or its nearest configured
    /// ancestor, given as fallbacks).
    fn error(&self, keys: &[&str], message: impl std::fmt::Display) -> Failure {
        let line = keys.iter().find_map(|k| line_of(self.text, k));
        let message = match line {
            Some(l) => format!("{}:{l}: {message}", self.name),
            None => format!("{}: {message}", self.name),
        };
        Failure {
            kind: "config",
            message,
            line,
            labels: None,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses and validates a config. Relative paths are taken relative to
    /// `base`.
    pub fn parse(name: &str, text: &str, base: &Path) -> Result<Self, Failure> {
        let src = Source {
            name: name.to_string(),
            text,
        };
        let mut config: PipelineConfig = serde_json::from_str(text).map_err(|e| {
            let line = e.line();
            Failure {
                kind: "config",
                message: format!("{name}:{line}:{}: {e}", e.column()),
                line: Some(line),
                labels: None,
            }
        })?;
        config.resolve_paths(base);
        config.validate(&src)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::from(diet::DietError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&path.display().to_string(), &text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.train_data);
        for p in [&mut self.test_data, &mut self.dev_data]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        if let Some(
            DenseSourceSpec::WordVectors { path } | DenseSourceSpec::SentenceVectors { path },
        ) = &mut self.featurization.dense
        {
            resolve(base, path);
        }
        resolve(base, &mut self.output_dir);
    }

    fn validate(&self, src: &Source<'_>) -> Result<(), Failure> {
        self.featurization
            .validate()
            .map_err(|e| src.error(&["use_sparse", "featurization"], e))?;
        if !self.model.losses.any() {
            return Err(src.error(
                &["losses", "model"],
                "at least one of the intent, entity and mask losses must be enabled",
            ));
        }
        self.model
            .validate()
            .map_err(|e| src.error(&["model"], e))?;
        self.train
            .validate()
            .map_err(|e| src.error(&["train"], e))?;
        let mut files = vec![("train_data", &self.train_data)];
        files.extend(self.test_data.iter().map(|p| ("test_data", p)));
        files.extend(self.dev_data.iter().map(|p| ("dev_data", p)));
        if let Some(
            DenseSourceSpec::WordVectors { path } | DenseSourceSpec::SentenceVectors { path },
        ) = &self.featurization.dense
        {
            files.push(("path", path));
        }
        for (key, path) in files {
            if !path.is_file() {
                return Err(src.error(&[key], format!("{key}: no such file {}", path.display())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diet::model::LossToggles;

    fn with_files() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.jsonl"), "").unwrap();
        std::fs::write(dir.path().join("glove.txt"), "").unwrap();
        let base = dir.path().to_path_buf();
        (dir, base)
    }

    #[test]
    fn defaults_and_relative_paths() {
        let (_d, base) = with_files();
        let c = PipelineConfig::parse("c.json", r#"{"train_data": "train.jsonl"}"#, &base).unwrap();
        assert_eq!(c.train_data, base.join("train.jsonl"));
        assert_eq!(c.output_dir, base.join("output"));
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train.epochs, 200);
    }

    #[test]
    fn entity_only_with_word_vectors() {
        let (_d, base) = with_files();
        let text = r#"{
  "train_data": "train.jsonl",
  "featurization": {"use_sparse": true, "dense": {"kind": "word_vectors", "path": "glove.txt"}},
  "model": {"losses": {"intent": false, "entity": true, "mask": false}}
}"#;
        let c = PipelineConfig::parse("c.json", text, &base).unwrap();
        assert_eq!(
            c.model.losses,
            LossToggles {
                intent: false,
                entity: true,
                mask: false
            }
        );
    }

    #[test]
    fn errors_carry_lines() {
        let (_d, base) = with_files();
        let text = "{\n  \"train_data\": \"train.jsonl\",\n  \"model\": {\n    \"losses\": {\"intent\": false, \"entity\": false, \"mask\": false}\n  }\n}";
        let e = PipelineConfig::parse("c.json", text, &base).unwrap_err();
        assert_eq!(e.line, Some(4));
        assert!(e.message.starts_with("c.json:4:"), "{}", e.message);

        let text = "{\n  \"train_data\": \"train.jsonl\",\n  \"modle\": {}\n}";
        let e = PipelineConfig::parse("c.json", text, &base).unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("unknown field"));

        let text = "{\n  \"train_data\": \"missing.jsonl\"\n}";
        let e = PipelineConfig::parse("c.json", text, &base).unwrap_err();
        assert_eq!(e.line, Some(2));

        let text = "{\n  \"train_data\": \"train.jsonl\",\n  \"featurization\": {\n    \"use_sparse\": false\n  }\n}";
        assert_eq!(
            PipelineConfig::parse("c.json", text, &base)
                .unwrap_err()
                .line,
            Some(4)
        );
    }

    #[test]
    fn line_lookup_skips_values() {
        assert_eq!(
            line_of("{\"a\": \"model\",\n\"model\": 1}", "model"),
            Some(2)
        );
        assert_eq!(line_of("{}", "model"), None);
    }
}
