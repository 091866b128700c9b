//! Seeded templated-grammar datasets, plus synthetic word and sentence
//! vectors for exercising the dense-feature paths.
//!
//! Each intent owns a set of trigger phrases and prefers one entity type;
//! utterances are assembled as `filler? trigger slot tail?` with an
//! occasional second slot.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Dataset, Utterance};
use crate::featurizer::{DenseTable, SentenceVectors};
use crate::{DietError, Result};

struct IntentTemplate {
    name: &'static str,
    triggers: &'static [&'static str],
    /// Phrase used when the utterance carries no entity.
    bare: &'static [&'static str],
    /// Preferred entity pool, reduced modulo the configured count.
    entity: usize,
}

const INTENTS: &[IntentTemplate] = &[
    IntentTemplate {
        name: "play_game",
        triggers: &["play", "let's play", "start a game of", "i want to play"],
        bare: &["let's play a game", "i want to play something"],
        entity: 0,
    },
    IntentTemplate {
        name: "set_alarm",
        triggers: &[
            "set an alarm for",
            "wake me up at",
            "alarm at",
            "remind me at",
        ],
        bare: &["set an alarm", "i need an alarm"],
        entity: 1,
    },
    IntentTemplate {
        name: "weather_query",
        triggers: &[
            "what's the weather in",
            "is it raining in",
            "forecast for",
            "how cold is it in",
        ],
        bare: &["what's the weather like", "will it rain"],
        entity: 2,
    },
    IntentTemplate {
        name: "call_person",
        triggers: &["call", "phone", "ring", "give a call to"],
        bare: &["make a phone call", "i need to call someone"],
        entity: 3,
    },
    IntentTemplate {
        name: "order_food",
        triggers: &["order", "get me some", "i'd like to order", "deliver"],
        bare: &["i'm hungry", "order some food"],
        entity: 4,
    },
    IntentTemplate {
        name: "play_music",
        triggers: &["put on", "i want to hear", "play some", "stream"],
        bare: &["play some music", "put on a song"],
        entity: 5,
    },
    IntentTemplate {
        name: "book_flight",
        triggers: &[
            "book a flight to",
            "fly me to",
            "find flights to",
            "i need a ticket to",
        ],
        bare: &["book a flight", "i want to travel"],
        entity: 2,
    },
    IntentTemplate {
        name: "translate",
        triggers: &[
            "translate this into",
            "how do you say it in",
            "say that in",
            "convert to",
        ],
        bare: &["translate this", "what does that mean"],
        entity: 6,
    },
];

const ENTITIES: &[(&str, &[&str])] = &[
    (
        "game_name",
        &[
            "ping pong",
            "chess",
            "tic tac toe",
            "monopoly",
            "table tennis",
            "poker",
            "go fish",
            "scrabble",
            "checkers",
        ],
    ),
    (
        "time",
        &[
            "7am",
            "noon",
            "6 pm",
            "monday morning",
            "half past eight",
            "midnight",
            "tomorrow at nine",
            "5:30",
        ],
    ),
    (
        "location",
        &[
            "paris",
            "new york",
            "london",
            "san francisco",
            "tokyo",
            "berlin",
            "rio de janeiro",
            "cairo",
            "oslo",
        ],
    ),
    (
        "person",
        &[
            "mom",
            "john smith",
            "dad",
            "alice",
            "dr brown",
            "my sister",
            "bob",
            "the office",
        ],
    ),
    (
        "dish",
        &[
            "pizza",
            "pad thai",
            "sushi",
            "a burger",
            "fried rice",
            "tacos",
            "green curry",
            "pasta",
        ],
    ),
    (
        "genre",
        &[
            "jazz",
            "classical music",
            "hip hop",
            "rock",
            "lofi beats",
            "country",
            "metal",
            "blues",
        ],
    ),
    (
        "language",
        &[
            "french",
            "spanish",
            "german",
            "japanese",
            "brazilian portuguese",
            "italian",
            "korean",
            "hindi",
        ],
    ),
];

const FILLERS: &[&str] = &[
    "please",
    "hey",
    "can you",
    "could you",
    "ok",
    "hi there",
    "quickly",
];
const TAILS: &[&str] = &["please", "now", "thanks", "for me", "right away"];
const NOISE_WORDS: &[&str] = &["um", "uh", "like", "so", "well", "actually", "hmm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_intents: usize,
    pub num_entities: usize,
    /// Total utterances across train and test.
    pub num_utterances: usize,
    pub test_fraction: f64,
    /// No text appears in both splits (duplicates are dropped).
    pub disjoint: bool,
    /// Per-utterance probability of filler-word insertion and typos.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_intents: 3,
            num_entities: 2,
            num_utterances: 300,
            test_fraction: 0.2,
            disjoint: false,
            noise: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_intents == 0 || self.num_intents > INTENTS.len() {
            return Err(DietError::Config(format!(
                "num_intents must be in 1..={}",
                INTENTS.len()
            )));
        }
        if self.num_entities == 0 || self.num_entities > ENTITIES.len() {
            return Err(DietError::Config(format!(
                "num_entities must be in 1..={}",
                ENTITIES.len()
            )));
        }
        if self.num_utterances == 0 {
            return Err(DietError::Config(
                "num_utterances must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..=1.0).contains(&self.noise) {
            return Err(DietError::Config(
                "test_fraction must be in [0, 1) and noise in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub test: Dataset,
}

/// Names of the intents and entity types a config draws from.
pub fn inventories(config: &SyntheticConfig) -> (Vec<&'static str>, Vec<&'static str>) {
    (
        INTENTS[..config.num_intents]
            .iter()
            .map(|t| t.name)
            .collect(),
        ENTITIES[..config.num_entities]
            .iter()
            .map(|e| e.0)
            .collect(),
    )
}

fn typo<R: Rng + ?Sized>(word: &str, rng: &mut R) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.len() < 3 || !chars.iter().all(|c| c.is_alphabetic()) {
        return word.to_string();
    }
    let i = rng.random_range(0..chars.len() - 1);
    chars.swap(i, i + 1);
    chars.into_iter().collect()
}

/// Words of a phrase paired with an optional entity label.
type Piece = (String, Option<&'static str>);

fn utterance<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Utterance {
    let intent_idx = rng.random_range(0..config.num_intents);
    let intent = &INTENTS[intent_idx];
    let entity = &ENTITIES[intent.entity % config.num_entities];
    let mut pieces: Vec<Piece> = Vec::new();
    if rng.random_bool(0.3) {
        pieces.push((FILLERS.choose(rng).unwrap().to_string(), None));
    }
    if rng.random_bool(0.1) {
        pieces.push((intent.bare.choose(rng).unwrap().to_string(), None));
    } else {
        pieces.push((intent.triggers.choose(rng).unwrap().to_string(), None));
        pieces.push((entity.1.choose(rng).unwrap().to_string(), Some(entity.0)));
        // A time slot rides along with other intents now and then.
        if config.num_entities > 1 && entity.0 != "time" && rng.random_bool(0.2) {
            pieces.push(("at".into(), None));
            pieces.push((
                ENTITIES[1].1.choose(rng).unwrap().to_string(),
                Some(ENTITIES[1].0),
            ));
        }
    }
    if rng.random_bool(0.25) {
        pieces.push((TAILS.choose(rng).unwrap().to_string(), None));
    }
    if config.noise > 0.0 && rng.random_bool(config.noise) {
        let at = rng.random_range(0..=pieces.len());
        pieces.insert(at, (NOISE_WORDS.choose(rng).unwrap().to_string(), None));
        for p in pieces.iter_mut().filter(|p| p.1.is_none()) {
            if rng.random_bool(0.3) {
                p.0 =
                    p.0.split(' ')
                        .map(|w| typo(w, rng))
                        .collect::<Vec<_>>()
                        .join(" ");
            }
        }
    }
    let mut text = String::new();
    let mut spans = Vec::new();
    for (words, label) in &pieces {
        if !text.is_empty() {
            text.push(' ');
        }
        let start = text.chars().count();
        text.push_str(words);
        if let Some(l) = label {
            spans.push((start, text.chars().count(), *l));
        }
    }
    Utterance::new(&text, intent.name, &spans)
}

/// Generates train and test splits. The split is a seeded shuffle; the
/// inventories of both splits are the full configured inventories.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut all = Vec::with_capacity(config.num_utterances);
    let mut seen = HashSet::new();
    let mut attempts = 0;
    while all.len() < config.num_utterances && attempts < 100 * config.num_utterances {
        attempts += 1;
        let u = utterance(config, &mut rng);
        if config.disjoint && !seen.insert(u.text.clone()) {
            continue;
        }
        all.push(u);
    }
    if all.len() < config.num_utterances {
        log::warn!(
            "grammar produced only {} distinct utterances of {} requested",
            all.len(),
            config.num_utterances
        );
    }
    all.shuffle(&mut rng);
    let n_test = ((all.len() as f64) * config.test_fraction).round() as usize;
    let train_part = all.split_off(n_test);
    let (intents, labels) = inventories(config);
    let make = |name: &str, utts: Vec<Utterance>| Dataset {
        name: name.to_string(),
        utterances: utts,
        intents: intents
            .iter()
            .map(|s| s.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        entity_labels: labels
            .iter()
            .map(|s| s.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    Ok(SyntheticCorpus {
        train: make("synthetic-train", train_part),
        test: make("synthetic-test", all),
    })
}

fn random_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A random vector for every lowercased token of the given datasets.
pub fn word_vectors(datasets: &[&Dataset], dim: usize, seed: u64) -> Result<DenseTable> {
    let words: BTreeSet<String> = datasets
        .iter()
        .flat_map(|d| d.utterances.iter())
        .flat_map(|u| u.tokens.iter().map(|t| t.text.to_lowercase()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map: HashMap<String, Vec<f64>> = words
        .into_iter()
        .map(|w| (w, random_vector(dim, &mut rng)))
        .collect();
    DenseTable::from_map(dim, map)
}

/// Sentence-vector sidecar for every utterance: token vectors from a random
/// word table and a sentence vector mixing their mean with a
/// sentence-specific component.
pub fn sentence_vectors(datasets: &[&Dataset], dim: usize, seed: u64) -> Result<SentenceVectors> {
    let table = word_vectors(datasets, dim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let texts: BTreeSet<&str> = datasets
        .iter()
        .flat_map(|d| d.utterances.iter().map(|u| u.text.as_str()))
        .collect();
    let mut out = SentenceVectors::default();
    for text in texts {
        let tokens: Vec<Vec<f64>> = tokenize(text)
            .iter()
            .map(|t| {
                table
                    .lookup(&t.text)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; dim])
            })
            .collect();
        let n = tokens.len().max(1) as f64;
        let mut cls = random_vector(dim, &mut rng);
        for (d, c) in cls.iter_mut().enumerate() {
            *c = 0.2 * *c + tokens.iter().map(|v| v[d]).sum::<f64>() / n;
        }
        out.insert(text.to_string(), tokens, cls)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ping_pong_example_is_in_the_grammar() {
        assert_eq!(INTENTS[0].name, "play_game");
        assert_eq!(ENTITIES[0].0, "game_name");
        assert!(ENTITIES[0].1.contains(&"ping pong"));
        assert!(INTENTS[0].triggers.contains(&"play"));
    }

    #[test]
    fn sizes_and_inventories() {
        let c = SyntheticConfig::default();
        let corpus = generate(&c).unwrap();
        assert_eq!(corpus.train.len() + corpus.test.len(), 300);
        assert_eq!(corpus.test.len(), 60);
        assert_eq!(corpus.train.intents.len(), 3);
        assert_eq!(corpus.train.entity_labels.len(), 2);
        for u in corpus
            .train
            .utterances
            .iter()
            .chain(&corpus.test.utterances)
        {
            for e in &u.entities {
                assert!(corpus.train.entity_labels.contains(&e.label));
                assert_eq!(crate::data::char_slice(&u.text, e.start, e.end), e.value);
            }
        }
    }

    #[test]
    fn noise_keeps_spans_valid() {
        let c = SyntheticConfig {
            noise: 1.0,
            num_entities: 3,
            num_intents: 5,
            ..SyntheticConfig::default()
        };
        let corpus = generate(&c).unwrap();
        let clean = generate(&SyntheticConfig {
            noise: 0.0,
            ..c.clone()
        })
        .unwrap();
        assert_ne!(corpus.train, clean.train);
        for u in &corpus.train.utterances {
            for e in &u.entities {
                assert!(u.tokens.iter().any(|t| t.start == e.start));
                assert!(u.tokens.iter().any(|t| t.end == e.end));
            }
        }
    }

    #[test]
    fn vectors_cover_the_vocabulary() {
        let corpus = generate(&SyntheticConfig::default()).unwrap();
        let t = word_vectors(&[&corpus.train, &corpus.test], 6, 3).unwrap();
        assert_eq!(t.dim(), 6);
        for u in &corpus.test.utterances {
            for tok in &u.tokens {
                assert!(t.lookup(&tok.text).is_some());
            }
        }
        let s = sentence_vectors(&[&corpus.train], 4, 3).unwrap();
        let f = s.featurize(&corpus.train.utterances[0].text).unwrap();
        assert_eq!(f.len(), corpus.train.utterances[0].tokens.len() + 1);
    }
}
