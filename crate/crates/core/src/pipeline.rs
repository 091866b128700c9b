//! A trained model together with its featurizer and label inventories:
//! inference, evaluation and checkpoint files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use diet_autograd::{Graph, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bilou_to_spans, spans_to_tag_ids, tokenize, Dataset, EntitySpan, TagSet, Token};
use crate::evaluation::{EvalReport, MatchMode};
use crate::featurizer::{
    DenseSource, DenseSourceSpec, Featurizer, SparseVocab, TokenFeatures, DEFAULT_NGRAM_MAX,
};
use crate::losses::Example;
use crate::model::{argmax, crf_viterbi, DietModel, Mode, ModelConfig, ModelDims};
use crate::{DietError, Result};

pub const CHECKPOINT_FORMAT: &str = "diet-checkpoint/v1";

/// Utterances per packed inference batch.
const INFERENCE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizationConfig {
    pub use_sparse: bool,
    pub ngram_max: usize,
    pub dense: Option<DenseSourceSpec>,
}

impl Default for FeaturizationConfig {
    fn default() -> Self {
        Self {
            use_sparse: true,
            ngram_max: DEFAULT_NGRAM_MAX,
            dense: None,
        }
    }
}

impl FeaturizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_sparse && self.dense.is_none() {
            return Err(DietError::Config(
                "at least one of sparse or dense features must be enabled".into(),
            ));
        }
        if self.ngram_max == 0 {
            return Err(DietError::Config("ngram_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentScore {
    pub intent: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub text: String,
    pub intent: String,
    /// Every intent, most similar first.
    pub ranking: Vec<IntentScore>,
    pub entities: Vec<EntitySpan>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    featurization: FeaturizationConfig,
    model: ModelConfig,
    dims: ModelDims,
    vocab: Option<SparseVocab>,
    intents: Vec<String>,
    entity_labels: Vec<String>,
    params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct DietPipeline {
    featurization: FeaturizationConfig,
    featurizer: Featurizer,
    intents: Vec<String>,
    tagset: TagSet,
    model: DietModel,
}

impl DietPipeline {
    /// Builds the vocabulary from `train`, loads dense features and
    /// initializes a model sized for the dataset's inventories.
    pub fn new(
        train: &Dataset,
        featurization: FeaturizationConfig,
        model_config: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        featurization.validate()?;
        if train.intents.is_empty() {
            return Err(DietError::EmptyDataset(format!(
                "{} has no intents",
                train.name
            )));
        }
        let vocab = if featurization.use_sparse && model_config.use_sparse {
            Some(SparseVocab::build(train, featurization.ngram_max)?)
        } else {
            None
        };
        let dense = featurization
            .dense
            .as_ref()
            .map(DenseSource::load)
            .transpose()?;
        let featurizer = Featurizer::new(vocab, dense)?;
        let tagset = TagSet::new(&train.entity_labels);
        let dims = ModelDims {
            sparse_dim: featurizer.sparse_dim(),
            dense_dim: featurizer.dense_dim(),
            num_intents: train.intents.len(),
            num_tags: tagset.len(),
        };
        let model = DietModel::new(model_config, dims, seed)?;
        Ok(Self {
            featurization,
            featurizer,
            intents: train.intents.clone(),
            tagset,
            model,
        })
    }

    pub fn model(&self) -> &DietModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DietModel {
        &mut self.model
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn featurization(&self) -> &FeaturizationConfig {
        &self.featurization
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn tagset(&self) -> &TagSet {
        &self.tagset
    }

    /// Errors listing any intent or entity label outside the inventories.
    pub fn check_labels(&self, dataset: &Dataset) -> Result<()> {
        let (bad_i, bad_e) = dataset.unknown_labels(&self.intents, self.tagset.labels());
        if !bad_i.is_empty() {
            return Err(DietError::UnknownLabels {
                kind: "intent",
                labels: bad_i,
            });
        }
        if !bad_e.is_empty() {
            return Err(DietError::UnknownLabels {
                kind: "entity",
                labels: bad_e,
            });
        }
        Ok(())
    }

    pub fn examples(&self, dataset: &Dataset) -> Result<Vec<Example>> {
        self.check_labels(dataset)?;
        dataset
            .utterances
            .iter()
            .map(|u| {
                Ok(Example {
                    features: self.featurizer.featurize(&u.text, &u.tokens)?,
                    intent: self
                        .intents
                        .iter()
                        .position(|i| *i == u.intent)
                        .expect("checked above"),
                    tags: spans_to_tag_ids(u, &self.tagset)?,
                })
            })
            .collect()
    }

    fn decode_many(
        &self,
        inputs: &[(&str, &[Token])],
        features: &[TokenFeatures],
    ) -> Result<Vec<Prediction>> {
        let mut g = Graph::new(self.model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.model.forward(&mut g, features, Mode::Eval, &mut rng)?;
        let scores = self.model.intent_scores(&mut g, out.cls)?;
        let scores = g.value(scores).clone();
        let emissions = g.value(out.emissions).clone();
        let transitions = self.model.params().get(self.model.transitions_id());
        let k = self.tagset.len();
        let mut row = 0;
        let mut preds = Vec::with_capacity(inputs.len());
        for (s, &(text, tokens)) in inputs.iter().enumerate() {
            let n = out.packed.tokens_in(s);
            let sims = scores.row(s);
            let mut order: Vec<usize> = (0..sims.len()).collect();
            // Stable sort keeps the lowest index first among equal scores.
            order.sort_by(|&a, &b| {
                sims[b]
                    .partial_cmp(&sims[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let ranking = order
                .iter()
                .map(|&i| IntentScore {
                    intent: self.intents[i].clone(),
                    similarity: sims[i],
                })
                .collect();
            let entities = if n == 0 {
                Vec::new()
            } else {
                let em = diet_autograd::Tensor::new(
                    vec![n, k],
                    emissions.data()[row * k..(row + n) * k].to_vec(),
                )?;
                let (path, _) = crf_viterbi(&em, transitions)?;
                let tags: Vec<&str> = path.iter().map(|&t| self.tagset.tag(t)).collect();
                bilou_to_spans(text, tokens, &tags)
            };
            row += n;
            preds.push(Prediction {
                text: text.to_string(),
                intent: self.intents[argmax(sims)].clone(),
                ranking,
                entities,
            });
        }
        Ok(preds)
    }

    pub fn predict(&self, text: &str) -> Result<Prediction> {
        let tokens = tokenize(text);
        let f = self.featurizer.featurize(text, &tokens)?;
        Ok(self.decode_many(&[(text, &tokens)], &[f])?.remove(0))
    }

    pub fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction>> {
        let tokens: Vec<Vec<Token>> = texts.iter().map(|t| tokenize(t)).collect();
        self.predict_tokenized(texts, &tokens)
    }

    fn predict_tokenized(&self, texts: &[&str], tokens: &[Vec<Token>]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(texts.len());
        for start in (0..texts.len()).step_by(INFERENCE_BATCH) {
            let end = (start + INFERENCE_BATCH).min(texts.len());
            let inputs: Vec<(&str, &[Token])> = (start..end)
                .map(|i| (texts[i], tokens[i].as_slice()))
                .collect();
            let feats = inputs
                .iter()
                .map(|(t, toks)| self.featurizer.featurize(t, toks))
                .collect::<Result<Vec<_>>>()?;
            out.extend(self.decode_many(&inputs, &feats)?);
        }
        Ok(out)
    }

    /// Predictions for every utterance of `dataset`, using its stored tokens.
    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<Prediction>> {
        let texts: Vec<&str> = dataset.utterances.iter().map(|u| u.text.as_str()).collect();
        let tokens: Vec<Vec<Token>> = dataset
            .utterances
            .iter()
            .map(|u| u.tokens.clone())
            .collect();
        self.predict_tokenized(&texts, &tokens)
    }

    pub fn evaluate(&self, dataset: &Dataset, modes: &[MatchMode]) -> Result<EvalReport> {
        Ok(self.evaluate_timed(dataset, modes)?.0)
    }

    /// Report plus mean wall-clock inference time per utterance in
    /// milliseconds.
    pub fn evaluate_timed(
        &self,
        dataset: &Dataset,
        modes: &[MatchMode],
    ) -> Result<(EvalReport, f64)> {
        self.check_labels(dataset)?;
        let t0 = Instant::now();
        let preds = self.predict_dataset(dataset)?;
        let ms = t0.elapsed().as_secs_f64() * 1000.0 / dataset.len().max(1) as f64;
        let pred_intents: Vec<String> = preds.iter().map(|p| p.intent.clone()).collect();
        let gold_intents: Vec<String> = dataset
            .utterances
            .iter()
            .map(|u| u.intent.clone())
            .collect();
        let pred_spans: Vec<Vec<EntitySpan>> = preds.into_iter().map(|p| p.entities).collect();
        let gold_spans: Vec<Vec<EntitySpan>> = dataset
            .utterances
            .iter()
            .map(|u| u.entities.clone())
            .collect();
        let report = EvalReport::compute(
            &pred_intents,
            &gold_intents,
            &pred_spans,
            &gold_spans,
            modes,
        )?;
        Ok((report, ms))
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            featurization: self.featurization.clone(),
            model: self.model.config().clone(),
            dims: *self.model.dims(),
            vocab: self.featurizer.vocab.clone(),
            intents: self.intents.clone(),
            entity_labels: self.tagset.labels().to_vec(),
            params: self.model.params().clone(),
        };
        serde_json::to_string(&ck).map_err(|e| DietError::Checkpoint(e.to_string()))
    }

    /// Restores a pipeline. Dense features are reloaded from the path
    /// recorded in the featurization config.
    pub fn from_json(json: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(json).map_err(|e| DietError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(DietError::Checkpoint(format!(
                "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ck.format
            )));
        }
        let dense = ck
            .featurization
            .dense
            .as_ref()
            .map(DenseSource::load)
            .transpose()?;
        let featurizer = Featurizer::new(ck.vocab, dense)?;
        if featurizer.dense_dim() != ck.dims.dense_dim {
            return Err(DietError::Checkpoint(format!(
                "dense features have dimension {:?}, the model expects {:?}",
                featurizer.dense_dim(),
                ck.dims.dense_dim
            )));
        }
        let tagset = TagSet::new(&ck.entity_labels);
        if tagset.len() != ck.dims.num_tags || ck.intents.len() != ck.dims.num_intents {
            return Err(DietError::Checkpoint(
                "inventories do not match the model dimensions".into(),
            ));
        }
        let model = DietModel::from_params(ck.model, ck.dims, ck.params)?;
        Ok(Self {
            featurization: ck.featurization,
            featurizer,
            intents: ck.intents,
            tagset,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| DietError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| DietError::io(path, e))?;
        Self::from_json(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Utterance;

    fn toy() -> Dataset {
        Dataset::new(
            "toy",
            vec![
                Utterance::new("play ping pong", "play_game", &[(5, 14, "game_name")]),
                Utterance::new("call mom", "call", &[(5, 8, "person")]),
            ],
        )
    }

    fn small() -> ModelConfig {
        ModelConfig {
            transformer_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            embed_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn predictions_cover_every_intent_and_are_deterministic() {
        let p = DietPipeline::new(&toy(), FeaturizationConfig::default(), small(), 1).unwrap();
        let a = p.predict("play ping pong").unwrap();
        assert_eq!(a.ranking.len(), 2);
        assert!(a.ranking[0].similarity >= a.ranking[1].similarity);
        assert_eq!(a.intent, a.ranking[0].intent);
        assert_eq!(a, p.predict("play ping pong").unwrap());
        let empty = p.predict("").unwrap();
        assert!(empty.entities.is_empty());
        assert_eq!(empty.ranking.len(), 2);
        p.predict("zzzzqqq").unwrap();
        let batch = p
            .predict_batch(&["play ping pong", "", "call mom"])
            .unwrap();
        assert_eq!(batch[0], a);
        assert_eq!(batch[1], empty);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DietPipeline::new(&toy(), FeaturizationConfig::default(), small(), 2).unwrap();
        let json = p.to_json().unwrap();
        let q = DietPipeline::from_json(&json).unwrap();
        assert_eq!(q.to_json().unwrap(), json);
        assert_eq!(
            p.predict("call mom").unwrap(),
            q.predict("call mom").unwrap()
        );
        let bad = json.replace(CHECKPOINT_FORMAT, "other/v0");
        assert!(matches!(
            DietPipeline::from_json(&bad),
            Err(DietError::Checkpoint(_))
        ));
    }

    #[test]
    fn unknown_labels_are_listed() {
        let p = DietPipeline::new(&toy(), FeaturizationConfig::default(), small(), 3).unwrap();
        let other = Dataset::new("x", vec![Utterance::new("hello", "greet", &[])]);
        match p.evaluate(&other, &[MatchMode::Overlap]) {
            Err(DietError::UnknownLabels { kind, labels }) => {
                assert_eq!(kind, "intent");
                assert_eq!(labels, ["greet"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
