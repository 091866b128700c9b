//! Balanced batching, the batch-size schedule and the training loop.

use std::io::Write;
use std::path::Path;

use diet_autograd::{Adam, AdamConfig, Graph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::evaluation::{aggregate_runs, EvalReport, MatchMode, RunSummary};
use crate::losses::{batch_loss, Example};
use crate::model::{Mode, ModelConfig};
use crate::pipeline::{DietPipeline, FeaturizationConfig};
use crate::{DietError, Result};

/// Utterances held out for per-epoch evaluation when not configured.
pub const DEFAULT_DEV_SIZE: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_min: usize,
    pub batch_max: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Held-out utterances taken from the training set. `None` takes
    /// `min(250, n / 10)`; `0` disables the split.
    pub dev_size: Option<usize>,
    /// Group batches by intent and up-sample rare intents.
    pub balanced: bool,
    /// Evaluate on the held-out split every this many epochs (and on the last).
    pub eval_every: usize,
    /// Save a checkpoint every this many epochs, if a directory is given.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_min: 64,
            batch_max: 128,
            optimizer: AdamConfig::default(),
            seed: 0,
            dev_size: None,
            balanced: true,
            eval_every: 1,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(DietError::Config("epochs must be at least 1".into()));
        }
        if self.batch_min == 0 || self.batch_min > self.batch_max {
            return Err(DietError::Config(format!(
                "batch sizes must satisfy 1 <= batch_min ({}) <= batch_max ({})",
                self.batch_min, self.batch_max
            )));
        }
        if self.eval_every == 0 || self.checkpoint_every == Some(0) {
            return Err(DietError::Config(
                "evaluation and checkpoint intervals must be positive".into(),
            ));
        }
        if self.optimizer.learning_rate.is_nan() || self.optimizer.learning_rate <= 0.0 {
            return Err(DietError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Batch size for `epoch` (0-based), growing linearly from `min` at the
/// first epoch to `max` at the last, rounded to the nearest integer.
pub fn batch_size_schedule(epoch: usize, total_epochs: usize, min: usize, max: usize) -> usize {
    if total_epochs <= 1 {
        return min;
    }
    let t = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
    (min as f64 + (max as f64 - min as f64) * t).round() as usize
}

/// A class's examples, reshuffled every time they have all been drawn.
struct Cycle {
    items: Vec<usize>,
    next: usize,
    completed: bool,
}

impl Cycle {
    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.next == self.items.len() {
            self.items.shuffle(rng);
            self.next = 0;
        }
        let x = self.items[self.next];
        self.next += 1;
        if self.next == self.items.len() {
            self.completed = true;
        }
        x
    }
}

/// Per-class counts for one batch: proportional to class size, at least
/// one each. With more classes than slots, classes take turns.
fn quotas(sizes: &[usize], batch: usize, turn: usize) -> Vec<usize> {
    let c = sizes.len();
    let n: usize = sizes.iter().sum();
    if c > batch {
        let mut q = vec![0; c];
        for i in 0..batch {
            q[(turn * batch + i) % c] = 1;
        }
        return q;
    }
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| batch as f64 * s as f64 / n as f64)
        .collect();
    let mut q: Vec<usize> = exact.iter().map(|&e| (e.floor() as usize).max(1)).collect();
    let mut total: usize = q.iter().sum();
    // Rotating tie-break so equal classes share the spare slots over time.
    let rot = |i: usize| (i + c - turn % c) % c;
    while total > batch {
        let i = (0..c)
            .filter(|&i| q[i] > 1)
            .max_by(|&a, &b| q[a].cmp(&q[b]).then(rot(b).cmp(&rot(a))))
            .expect("c <= batch leaves a quota above one");
        q[i] -= 1;
        total -= 1;
    }
    if total < batch {
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - q[a] as f64;
            let rb = exact[b] - q[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(rot(a).cmp(&rot(b)))
        });
        for &i in order.iter().cycle().take(batch - total) {
            q[i] += 1;
        }
    }
    q
}

/// One epoch of batches over example indices grouped by `labels`.
///
/// Every batch draws from each class in proportion to its share of the
/// data, with at least one example per class, so rare classes are
/// up-sampled. The epoch ends as soon as every class has been drawn in
/// full at least once; the final batch may therefore be short.
pub fn balanced_batches<R: Rng + ?Sized>(
    labels: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(DietError::EmptyDataset("no examples to batch".into()));
    }
    if batch_size == 0 {
        return Err(DietError::Config("batch size must be at least 1".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let mut cycles: Vec<Cycle> = Vec::new();
    for c in 0..num_classes {
        let mut items: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if items.is_empty() {
            continue;
        }
        items.shuffle(rng);
        cycles.push(Cycle {
            items,
            next: 0,
            completed: false,
        });
    }
    // Rare classes draw first within a batch.
    cycles.sort_by_key(|c| c.items.len());
    let sizes: Vec<usize> = cycles.iter().map(|c| c.items.len()).collect();
    let bs = batch_size.min(labels.len());
    let mut batches = Vec::new();
    let mut turn = 0;
    loop {
        let q = quotas(&sizes, bs, turn);
        let mut batch = Vec::with_capacity(bs);
        'fill: for (c, &k) in q.iter().enumerate() {
            for _ in 0..k {
                batch.push(cycles[c].draw(rng));
                if cycles.iter().all(|c| c.completed) {
                    break 'fill;
                }
            }
        }
        batches.push(batch);
        turn += 1;
        if cycles.iter().all(|c| c.completed) {
            break;
        }
    }
    Ok(batches)
}

/// Plain shuffled batches of one epoch.
pub fn shuffled_batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(DietError::EmptyDataset("no examples to batch".into()));
    }
    if batch_size == 0 {
        return Err(DietError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batch_size: usize,
    pub batches: usize,
    /// Batch means of each enabled term; `None` when the term is off.
    pub intent_loss: Option<f64>,
    pub entity_loss: Option<f64>,
    pub mask_loss: Option<f64>,
    pub total_loss: f64,
    pub dev_intent_accuracy: Option<f64>,
    pub dev_entity_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DietError::Invalid(e.to_string()))
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.epochs {
            w.serialize(r)
                .map_err(|e| DietError::Invalid(e.to_string()))?;
        }
        w.flush().map_err(|e| DietError::Invalid(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Writes `history.json` and `history.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let json = dir.join("history.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| DietError::io(&json, e))?;
        let csv = dir.join("history.csv");
        std::fs::write(&csv, self.to_csv()?).map_err(|e| DietError::io(&csv, e))
    }
}

/// Splits `dataset` into (train, dev) with a seeded shuffle.
pub fn dev_split(
    dataset: &Dataset,
    dev_size: Option<usize>,
    seed: u64,
) -> (Dataset, Option<Dataset>) {
    let n = dataset.len();
    let k = dev_size
        .unwrap_or((n / 10).min(DEFAULT_DEV_SIZE))
        .min(n.saturating_sub(1));
    if k == 0 {
        return (dataset.clone(), None);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev: Vec<usize> = order[..k].to_vec();
    let mut train: Vec<usize> = order[k..].to_vec();
    dev.sort_unstable();
    train.sort_unstable();
    (dataset.subset(&train), Some(dataset.subset(&dev)))
}

/// Called after every epoch with the record just appended and the current
/// pipeline.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &DietPipeline) -> Result<()> + 'a;

/// Trains a pipeline on `dataset`. A held-out split is carved from it
/// according to `train_config.dev_size` unless `dev` is given.
pub fn train(
    dataset: &Dataset,
    dev: Option<&Dataset>,
    featurization: &FeaturizationConfig,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(DietPipeline, TrainHistory)> {
    train_with_hook(
        dataset,
        dev,
        featurization,
        model_config,
        train_config,
        &mut |_, _| Ok(()),
    )
}

pub fn train_with_hook(
    dataset: &Dataset,
    dev: Option<&Dataset>,
    featurization: &FeaturizationConfig,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<(DietPipeline, TrainHistory)> {
    train_config.validate()?;
    model_config.validate()?;
    if dataset.is_empty() {
        return Err(DietError::EmptyDataset(dataset.name.clone()));
    }
    let seed = train_config.seed;
    let (train_set, carved) = match dev {
        Some(_) => (dataset.clone(), None),
        None => dev_split(dataset, train_config.dev_size, seed.wrapping_add(1)),
    };
    let dev = dev.or(carved.as_ref());
    // Inventories come from the full dataset so held-out labels stay known.
    let mut inventory = train_set.clone();
    inventory.intents = dataset.intents.clone();
    inventory.entity_labels = dataset.entity_labels.clone();
    let mut pipeline = DietPipeline::new(
        &inventory,
        featurization.clone(),
        model_config.clone(),
        seed,
    )?;
    let examples = pipeline.examples(&train_set)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.intent).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut adam = Adam::new(pipeline.model().params(), train_config.optimizer);
    let mut history = TrainHistory::default();
    let epochs = train_config.epochs;
    for epoch in 0..epochs {
        let bs = batch_size_schedule(
            epoch,
            epochs,
            train_config.batch_min,
            train_config.batch_max,
        );
        let batches = if train_config.balanced {
            balanced_batches(&labels, bs, &mut rng)?
        } else {
            shuffled_batches(labels.len(), bs, &mut rng)?
        };
        let mut sums = [0.0; 4];
        let mut seen = [false; 3];
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let model = pipeline.model();
            let grads = {
                let mut g = Graph::new(model.params());
                let loss = batch_loss(&mut g, model, &batch, Mode::Train, &mut rng)?;
                let total = g.value(loss.total).item();
                if !total.is_finite() {
                    return Err(DietError::Divergence { epoch, batch: b });
                }
                sums[3] += total;
                for (k, v) in [loss.intent, loss.entity, loss.mask]
                    .into_iter()
                    .enumerate()
                {
                    if let Some(v) = v {
                        sums[k] += v;
                        seen[k] = true;
                    }
                }
                let grads = g.backward(loss.total)?;
                if !grads.all_finite() {
                    return Err(DietError::Divergence { epoch, batch: b });
                }
                grads
            };
            adam.step(pipeline.model_mut().params_mut(), &grads)?;
        }
        let nb = batches.len() as f64;
        let mean = |k: usize| seen[k].then(|| sums[k] / nb);
        let mut record = EpochRecord {
            epoch,
            batch_size: bs,
            batches: batches.len(),
            intent_loss: mean(0),
            entity_loss: mean(1),
            mask_loss: mean(2),
            total_loss: sums[3] / nb,
            dev_intent_accuracy: None,
            dev_entity_f1: None,
        };
        if let Some(dev) = dev {
            if (epoch + 1) % train_config.eval_every == 0 || epoch + 1 == epochs {
                let report = pipeline.evaluate(dev, &[MatchMode::Overlap])?;
                record.dev_intent_accuracy = Some(report.intent.accuracy);
                record.dev_entity_f1 = report.entity(MatchMode::Overlap).map(|p| p.f1);
            }
        }
        log::info!(
            "epoch {epoch}: batch {bs}, loss {:.4}, dev acc {:?}, dev f1 {:?}",
            record.total_loss,
            record.dev_intent_accuracy,
            record.dev_entity_f1
        );
        history.epochs.push(record);
        hook(history.epochs.last().unwrap(), &pipeline)?;
    }
    Ok((pipeline, history))
}

/// Trains one model per (train, test) fold and aggregates the test reports.
pub fn cross_validate(
    folds: &[(Dataset, Dataset)],
    featurization: &FeaturizationConfig,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    modes: &[MatchMode],
) -> Result<RunSummary> {
    let mut reports: Vec<EvalReport> = Vec::with_capacity(folds.len());
    for (i, (train_set, test_set)) in folds.iter().enumerate() {
        let config = TrainConfig {
            seed: train_config.seed.wrapping_add(i as u64),
            ..train_config.clone()
        };
        let (pipeline, _) = train(train_set, None, featurization, model_config, &config)?;
        reports.push(pipeline.evaluate(test_set, modes)?);
    }
    aggregate_runs(&reports)
}
