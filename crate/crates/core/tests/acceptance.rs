//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line and the timings are not skewed by parallel
//! test threads.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use diet::data::{Dataset, EntitySpan};
use diet::evaluation::{entity_metrics, MatchMode};
use diet::featurizer::DenseSourceSpec;
use diet::losses::{batch_loss, plan_masking, Example, MaskAction};
use diet::model::{
    crf_nll, crf_viterbi, Activation, LossToggles, MaskConfig, Mode, ModelConfig, Packed,
};
use diet::pipeline::{DietPipeline, FeaturizationConfig};
use diet::synthetic::{generate, sentence_vectors, word_vectors, SyntheticConfig, SyntheticCorpus};
use diet::training::{balanced_batches, batch_size_schedule, train, TrainConfig};
use diet_autograd::{gradient_check, GradCheckOptions, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Scored = Vec<(Vec<usize>, f64)>;
type Criterion = (&'static str, fn() -> Outcome, f64);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn toy_corpus(noise: f64) -> SyntheticCorpus {
    generate(&SyntheticConfig {
        seed: 7,
        num_intents: 5,
        num_entities: 3,
        num_utterances: 500,
        test_fraction: 0.2,
        noise,
        ..SyntheticConfig::default()
    })
    .expect("synthetic corpus")
}

fn miniature() -> ModelConfig {
    ModelConfig {
        transformer_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        sparse_projection_dim: Some(16),
        sparse_dropout: 0.0,
        transformer_dropout: 0.0,
        attention_dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Log-sum-exp over every tag sequence, and the best one, by enumeration.
fn brute_force(em: &[f64], tr: &[f64], t: usize, k: usize) -> (f64, Vec<usize>, Scored) {
    let mut all = Vec::new();
    for code in 0..k.pow(t as u32) {
        let tags: Vec<usize> = (0..t).map(|i| code / k.pow(i as u32) % k).collect();
        let mut s = 0.0;
        for i in 0..t {
            s += em[i * k + tags[i]];
            if i > 0 {
                s += tr[tags[i - 1] * k + tags[i]];
            }
        }
        all.push((tags, s));
    }
    let m = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + all.iter().map(|p| (p.1 - m).exp()).sum::<f64>().ln();
    // Continuous random weights leave no ties.
    let best = all
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap()
        .0
        .clone();
    (log_z, best, all)
}

fn crf_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut max_nll_err, mut max_norm_err, mut viterbi_mismatch) = (0.0f64, 0.0f64, 0);
    for _ in 0..200 {
        let t = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let em: Vec<f64> = (0..t * k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let tr: Vec<f64> = (0..k * k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let emt = Tensor::new(vec![t, k], em.clone()).map_err(fail)?;
        let trt = Tensor::new(vec![k, k], tr.clone()).map_err(fail)?;
        let (log_z, best, all) = brute_force(&em, &tr, t, k);
        let mut mass = 0.0;
        for (tags, score) in &all {
            let nll = crf_nll(&emt, &trt, tags).map_err(fail)?;
            max_nll_err = max_nll_err.max((nll - (log_z - score)).abs());
            mass += (-nll).exp();
        }
        max_norm_err = max_norm_err.max((mass - 1.0).abs());
        let (path, _) = crf_viterbi(&emt, &trt).map_err(fail)?;
        if path != best {
            viterbi_mismatch += 1;
        }
    }
    check(
        max_nll_err < 1e-9 && max_norm_err < 1e-9 && viterbi_mismatch == 0,
        format!("nll err {max_nll_err:.2e}, normalization err {max_norm_err:.2e}, viterbi mismatches {viterbi_mismatch}"),
    )
}

fn gradient_correctness() -> Outcome {
    let corpus = generate(&SyntheticConfig {
        seed: 3,
        num_utterances: 3,
        test_fraction: 0.0,
        ..SyntheticConfig::default()
    })
    .map_err(fail)?;
    // Smooth activation and a step well above float roundoff: ReLU kinks and
    // exactly-zero gradients (the key bias under softmax) make differences
    // meaningless otherwise.
    let config = ModelConfig {
        ffn_activation: Activation::Gelu,
        ..miniature()
    };
    let pipeline = DietPipeline::new(&corpus.train, FeaturizationConfig::default(), config, 5)
        .map_err(fail)?;
    let examples = pipeline.examples(&corpus.train).map_err(fail)?;
    let batch: Vec<&Example> = examples.iter().collect();
    let model = pipeline.model();
    let report = gradient_check::<_, diet::DietError>(
        model.params(),
        |g| {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let out = batch_loss(g, model, &batch, Mode::Train, &mut rng)?;
            if out.mask.is_none() {
                return Err(diet::DietError::Invalid("mask loss inactive".into()));
            }
            Ok(out.total)
        },
        GradCheckOptions {
            step: 1e-4,
            ..GradCheckOptions::default()
        },
    )
    .map_err(fail)?;
    check(
        report.passed && report.max_rel_error < 1e-4,
        format!(
            "{} coordinates, max relative error {:.2e}",
            report.coords_checked, report.max_rel_error
        ),
    )
}

fn masking_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let config = MaskConfig::default();
    let (mut positions, mut selected) = (0usize, 0usize);
    let mut actions = [0usize; 3];
    while positions < 200_000 {
        let lens: Vec<usize> = (0..32).map(|_| rng.random_range(10..=30)).collect();
        let packed = Packed::new(lens.iter().map(|l| l + 1));
        let tokens: Vec<Vec<String>> = lens
            .iter()
            .map(|&l| (0..=l).map(|i| format!("w{i}")).collect())
            .collect();
        let refs: Vec<&[String]> = tokens.iter().map(Vec::as_slice).collect();
        let plan = plan_masking(&packed, &refs, &config, &mut rng);
        positions += lens.iter().sum::<usize>();
        selected += plan.len();
        for p in &plan.positions {
            actions[match p.action {
                MaskAction::Mask => 0,
                MaskAction::Random => 1,
                MaskAction::Keep => 2,
            }] += 1;
        }
    }
    let rate = selected as f64 / positions as f64;
    let split: Vec<f64> = actions
        .iter()
        .map(|&a| a as f64 / selected as f64)
        .collect();
    let ok = (rate - 0.15).abs() <= 0.01
        && (split[0] - 0.70).abs() <= 0.02
        && (split[1] - 0.10).abs() <= 0.02
        && (split[2] - 0.20).abs() <= 0.02;
    check(
        ok,
        format!(
            "{positions} positions, selected {rate:.4}, mask/random/keep {:.4}/{:.4}/{:.4}",
            split[0], split[1], split[2]
        ),
    )
}

fn toy_convergence() -> Outcome {
    let corpus = toy_corpus(0.0);
    let (feat, model) = (FeaturizationConfig::default(), ModelConfig::default());
    let start = Instant::now();
    let (pipeline, history) =
        train(&corpus.train, None, &feat, &model, &TrainConfig::default()).map_err(fail)?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let report = pipeline
        .evaluate(&corpus.test, &[MatchMode::Overlap])
        .map_err(fail)?;
    let f1 = report
        .entity(MatchMode::Overlap)
        .map(|p| p.f1)
        .unwrap_or(0.0);
    check(
        history.epochs.len() == 200 && report.intent.accuracy >= 0.95 && f1 >= 0.90 && minutes < 10.0,
        format!(
            "{} train / {} test, intent accuracy {:.4}, entity overlap F1 {:.4}, {minutes:.1} min on {} core(s)",
            corpus.train.len(),
            corpus.test.len(),
            report.intent.accuracy,
            f1,
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        ),
    )
}

fn write_lines(path: &Path, lines: Vec<String>) -> Result<(), String> {
    std::fs::write(path, lines.join("\n") + "\n").map_err(fail)
}

fn ablations() -> Outcome {
    let corpus = toy_corpus(0.3);
    let train_config = TrainConfig::default();
    let entity_f1 = |losses: LossToggles| -> Result<f64, String> {
        let model = ModelConfig {
            losses,
            ..ModelConfig::default()
        };
        let (p, _) = train(
            &corpus.train,
            None,
            &FeaturizationConfig::default(),
            &model,
            &train_config,
        )
        .map_err(fail)?;
        let report = p
            .evaluate(&corpus.test, &[MatchMode::Overlap])
            .map_err(fail)?;
        Ok(report
            .entity(MatchMode::Overlap)
            .map(|p| p.f1)
            .unwrap_or(0.0))
    };
    let joint = entity_f1(LossToggles {
        intent: true,
        entity: true,
        mask: false,
    })?;
    let single = entity_f1(LossToggles {
        intent: false,
        entity: true,
        mask: false,
    })?;

    // Every sparse / dense-source / mask cell of the ablation grid.
    let dir = tempfile::tempdir().map_err(fail)?;
    let small = Dataset {
        utterances: corpus.train.utterances[..60].to_vec(),
        ..corpus.train.clone()
    };
    let glove = dir.path().join("glove.txt");
    write_lines(
        &glove,
        word_vectors(&[&small], 12, 1).map_err(fail)?.to_lines(),
    )?;
    let bert = dir.path().join("bert.jsonl");
    write_lines(
        &bert,
        sentence_vectors(&[&small], 16, 2).map_err(fail)?.to_lines(),
    )?;
    let convert = dir.path().join("convert.jsonl");
    write_lines(
        &convert,
        sentence_vectors(&[&small], 10, 3).map_err(fail)?.to_lines(),
    )?;
    let sources = [
        None,
        Some(DenseSourceSpec::WordVectors { path: glove }),
        Some(DenseSourceSpec::SentenceVectors { path: bert }),
        Some(DenseSourceSpec::SentenceVectors { path: convert }),
    ];
    let mut cells = 0;
    for use_sparse in [true, false] {
        for dense in &sources {
            if !use_sparse && dense.is_none() {
                continue;
            }
            for mask in [true, false] {
                let feat = FeaturizationConfig {
                    use_sparse,
                    dense: dense.clone(),
                    ..FeaturizationConfig::default()
                };
                let model = ModelConfig {
                    losses: LossToggles {
                        mask,
                        ..LossToggles::default()
                    },
                    ..miniature()
                };
                let tc = TrainConfig {
                    epochs: 2,
                    batch_min: 8,
                    batch_max: 16,
                    ..TrainConfig::default()
                };
                let (_, history) = train(&small, None, &feat, &model, &tc).map_err(fail)?;
                let out = dir.path().join(format!("cell{cells}"));
                std::fs::create_dir(&out).map_err(fail)?;
                history.save(&out).map_err(fail)?;
                let csv = std::fs::read_to_string(out.join("history.csv")).map_err(fail)?;
                if csv.lines().count() != 3 || !out.join("history.json").exists() {
                    return Err(format!("cell {cells} wrote an incomplete history"));
                }
                cells += 1;
            }
        }
    }
    check(
        joint >= single - 0.02 && cells == 14,
        format!("entity F1 joint {joint:.4} vs entity-only {single:.4}; {cells} ablation cells completed"),
    )
}

fn schedule_and_batching() -> Outcome {
    let first = batch_size_schedule(0, 200, 64, 128);
    let last = batch_size_schedule(199, 200, 64, 128);
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 10 == 0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (mut checked, mut missing) = (0, 0);
    for bs in (10..=128).step_by(3) {
        for _ in 0..5 {
            for b in balanced_batches(&labels, bs, &mut rng).map_err(fail)? {
                if b.len() >= 10 {
                    checked += 1;
                    if !b.iter().any(|&i| labels[i] == 1) {
                        missing += 1;
                    }
                }
            }
        }
    }
    check(
        first == 64 && last == 128 && missing == 0 && checked > 0,
        format!("schedule {first}..{last}; {checked} batches of size >= 10, {missing} without the rare class"),
    )
}

fn random_spans<R: Rng>(rng: &mut R) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut at = 0;
    while spans.len() < 4 && at < 40 {
        at += rng.random_range(0..6);
        let len = rng.random_range(1..6);
        spans.push(EntitySpan {
            start: at,
            end: at + len,
            label: ["a", "b"][rng.random_range(0..2)].into(),
            value: String::new(),
        });
        at += len;
    }
    spans
}

fn evaluation_strictness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut holds = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let gold: Vec<Vec<EntitySpan>> = (0..n).map(|_| random_spans(&mut rng)).collect();
        let pred: Vec<Vec<EntitySpan>> = (0..n).map(|_| random_spans(&mut rng)).collect();
        let o = entity_metrics(&pred, &gold, MatchMode::Overlap).map_err(fail)?;
        let e = entity_metrics(&pred, &gold, MatchMode::Exact).map_err(fail)?;
        if e.f1 <= o.f1 && e.counts.tp <= o.counts.tp {
            holds += 1;
        }
    }
    let span = |s, e, l: &str| EntitySpan {
        start: s,
        end: e,
        label: l.into(),
        value: String::new(),
    };
    let gold = vec![vec![span(0, 4, "x"), span(10, 14, "y")]];
    let pred = vec![vec![span(0, 4, "x"), span(20, 24, "y")]];
    let mut hand = true;
    for mode in [MatchMode::Overlap, MatchMode::Exact] {
        let m = entity_metrics(&pred, &gold, mode).map_err(fail)?;
        hand &= (m.counts.tp, m.counts.fp, m.counts.fn_) == (1, 1, 1)
            && m.precision == 0.5
            && m.recall == 0.5
            && m.f1 == 0.5;
    }
    check(
        holds == 100 && hand,
        format!(
            "exact <= overlap in {holds}/100 trials; hand-counted example {}",
            if hand { "exact" } else { "wrong" }
        ),
    )
}

fn reproducibility() -> Outcome {
    let corpus = generate(&SyntheticConfig {
        seed: 13,
        num_utterances: 120,
        ..SyntheticConfig::default()
    })
    .map_err(fail)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let tc = TrainConfig {
        epochs: 4,
        batch_min: 16,
        batch_max: 32,
        seed: 99,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        transformer_dim: 32,
        ffn_dim: 64,
        ..ModelConfig::default()
    };
    let mut files = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        std::fs::create_dir(&out).map_err(fail)?;
        let (p, h) = train(
            &corpus.train,
            None,
            &FeaturizationConfig::default(),
            &model,
            &tc,
        )
        .map_err(fail)?;
        h.save(&out).map_err(fail)?;
        p.save(out.join("model.json")).map_err(fail)?;
        let mut bytes = Vec::new();
        for name in ["history.json", "history.csv", "model.json"] {
            bytes.push(std::fs::read(out.join(name)).map_err(fail)?);
        }
        files.push(bytes);
    }
    check(
        files[0] == files[1],
        format!(
            "history JSON/CSV and checkpoint {} across runs",
            if files[0] == files[1] {
                "identical"
            } else {
                "differ"
            }
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("CRF oracle equivalence", crf_oracle, 10.0),
        ("gradient correctness", gradient_correctness, 60.0),
        ("masking statistics", masking_statistics, 5.0),
        ("toy-scale convergence", toy_convergence, f64::INFINITY),
        ("ablation directionality", ablations, f64::INFINITY),
        (
            "schedule and batching",
            schedule_and_batching,
            f64::INFINITY,
        ),
        (
            "evaluation strictness",
            evaluation_strictness,
            f64::INFINITY,
        ),
        ("reproducibility", reproducibility, f64::INFINITY),
    ];
    let only: Option<usize> = std::env::var("DIET_ACCEPTANCE_ONLY")
        .ok()
        .and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(d) if secs < budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {budget}s budget")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {}: {status} {name} ({secs:.1}s): {detail}",
            i + 1
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
