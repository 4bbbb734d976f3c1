//! Mini-batch training loop and evaluation.
//!
//! One example is a single labeled volume. Every epoch shuffles the
//! volume-level examples with a seeded permutation, walks batches of
//! `batch_size` (the final partial batch is trained on), averages the
//! softmax cross-entropy gradient over the batch and applies one ADAM
//! update. After each epoch the model is evaluated on the held-out data in
//! eval mode.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DropoutSchedule, ModelParams};
use crate::tensor::{derive_seed, new_rng, Adam, AdamConfig, Graph};
use crate::volume::Recording;

/// Training hyperparameters. Defaults mirror the reference recipe:
/// learning rate 1e-4, batches of 24 volumes, the standard dropout
/// schedule, seeded shuffling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: DropoutSchedule,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 24,
            epochs: 1,
            dropout: DropoutSchedule::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
        }
    }
}

/// Accuracy and loss of one epoch on one split, with per-subject detail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    pub per_subject_accuracy: BTreeMap<String, f64>,
}

/// Final model state is mutated in place; the outcome carries the metric
/// history and the optimizer step count.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub optimizer_steps: u64,
}

struct Example {
    rec: usize,
    vol: usize,
    class: usize,
}

/// One prediction outcome used for metric aggregation.
pub(crate) struct Scored<'a> {
    pub subject: &'a str,
    pub correct: bool,
    pub loss: f64,
}

/// Aggregates per-volume outcomes into epoch metrics. Mean accuracy is the
/// overall fraction correct; the per-subject map averages within subjects.
pub(crate) fn aggregate_metrics(epoch: usize, split: Split, scored: &[Scored<'_>]) -> EpochMetrics {
    let mut per_subject: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for s in scored {
        let e = per_subject.entry(s.subject.to_string()).or_insert((0, 0));
        e.1 += 1;
        if s.correct {
            e.0 += 1;
            correct += 1;
        }
        loss_sum += s.loss;
    }
    let n = scored.len().max(1);
    EpochMetrics {
        epoch,
        split,
        mean_loss: loss_sum / n as f64,
        mean_accuracy: correct as f64 / n as f64,
        per_subject_accuracy: per_subject
            .into_iter()
            .map(|(k, (c, t))| (k, c as f64 / t as f64))
            .collect(),
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn build_examples(model: &ModelParams<f32>, data: &[Recording]) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    for (r, rec) in data.iter().enumerate() {
        rec.validate()?;
        for (v, &label) in rec.labels.iter().enumerate() {
            let class = model
                .vocabulary
                .class_of(&rec.task_id, label)
                .ok_or_else(|| {
                    Error::data(format!(
                        "recording {}/{}: label {label} not in the model vocabulary",
                        rec.subject_id, rec.task_id
                    ))
                })?;
            examples.push(Example { rec: r, vol: v, class });
        }
    }
    Ok(examples)
}

/// Trains the model in place and reports per-epoch metrics for the training
/// split and (when `eval_data` is non-empty) the validation split.
pub fn train(
    model: &mut ModelParams<f32>,
    data: &[Recording],
    config: &TrainConfig,
    eval_data: &[Recording],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut examples = build_examples(model, data)?;
    if examples.is_empty() {
        return Err(Error::data("no training volumes"));
    }

    let param_sizes: Vec<usize> = model.parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut optimizer = Adam::<f32>::new(&param_sizes, AdamConfig::with_lr(config.learning_rate));
    let mut metrics = Vec::new();

    for epoch in 1..=config.epochs {
        if config.shuffle {
            let mut rng = new_rng(derive_seed(config.seed, 0x5u64 << 56 | epoch as u64));
            examples.shuffle(&mut rng);
        }

        let mut scored_raw: Vec<(usize, bool, f64)> = Vec::with_capacity(examples.len());
        let mut position = 0u64;
        for (batch_idx, batch) in examples.chunks(config.batch_size).enumerate() {
            let mut grads: Vec<Vec<f32>> =
                param_sizes.iter().map(|&n| vec![0.0f32; n]).collect();
            let scale = 1.0f32 / batch.len() as f32;
            for ex in batch {
                let rec = &data[ex.rec];
                let volume = &rec.volumes[ex.vol];
                let mut dropout_rng = new_rng(derive_seed(
                    config.seed,
                    0xDu64 << 56 | (epoch as u64) << 32 | position,
                ));
                position += 1;

                let mut g = Graph::<f32>::new();
                let fwd =
                    model.forward_graph(&mut g, volume, Some((&config.dropout, &mut dropout_rng)))?;
                let (loss, probs) = g.softmax_cross_entropy(fwd.logits, ex.class)?;
                let loss_val = g.value(loss)[0] as f64;
                if !loss_val.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss {loss_val} at epoch {epoch}, batch {batch_idx}"
                    )));
                }
                g.backward(loss)?;
                for (acc, &var) in grads.iter_mut().zip(&fwd.param_vars) {
                    let grad = g.grad(var).expect("parameter gradient present");
                    for (a, &gv) in acc.iter_mut().zip(grad) {
                        *a += gv * scale;
                    }
                }
                scored_raw.push((ex.rec, argmax(&probs) == ex.class, loss_val));
            }
            optimizer.step(
                model
                    .parameters_mut()
                    .into_iter()
                    .map(|(name, t)| (name, t)),
                &grads,
            )?;
        }

        let scored: Vec<Scored<'_>> = scored_raw
            .iter()
            .map(|&(rec, correct, loss)| Scored {
                subject: &data[rec].subject_id,
                correct,
                loss,
            })
            .collect();
        let train_metrics = aggregate_metrics(epoch, Split::Train, &scored);
        on_epoch(&train_metrics);
        metrics.push(train_metrics);

        if !eval_data.is_empty() {
            let mut eval_metrics = evaluate(model, eval_data)?;
            eval_metrics.epoch = epoch;
            on_epoch(&eval_metrics);
            metrics.push(eval_metrics);
        }
    }

    Ok(TrainOutcome {
        metrics,
        optimizer_steps: optimizer.step_count(),
    })
}

/// Eval-mode decoding accuracy over every volume: argmax of the
/// probabilities against the label, ties toward the lowest class index.
pub fn evaluate(model: &ModelParams<f32>, data: &[Recording]) -> Result<EpochMetrics> {
    if data.is_empty() || data.iter().all(|r| r.volumes.is_empty()) {
        return Err(Error::data("evaluate needs at least one volume"));
    }
    let mut scored = Vec::new();
    for rec in data {
        rec.validate()?;
        for (v, &label) in rec.labels.iter().enumerate() {
            let class = model
                .vocabulary
                .class_of(&rec.task_id, label)
                .ok_or_else(|| {
                    Error::data(format!(
                        "recording {}/{}: label {label} not in the model vocabulary",
                        rec.subject_id, rec.task_id
                    ))
                })?;
            let decoded = model.decode(&rec.volumes[v])?;
            scored.push(Scored {
                subject: &rec.subject_id,
                correct: argmax(&decoded.probs) == class,
                loss: -(decoded.probs[class].max(f32::MIN_POSITIVE) as f64).ln(),
            });
        }
    }
    Ok(aggregate_metrics(0, Split::Validation, &scored))
}

/// Streams per-epoch metrics to `<stem>.csv` (epoch, split, mean loss,
/// mean accuracy) and `<stem>.jsonl` (full records with per-subject detail).
pub struct MetricsWriter {
    csv_path: PathBuf,
    jsonl_path: PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let jsonl_path = dir.join(format!("{stem}.jsonl"));
        std::fs::write(&csv_path, "epoch,split,mean_loss,mean_accuracy\n")?;
        std::fs::write(&jsonl_path, "")?;
        Ok(MetricsWriter { csv_path, jsonl_path })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        let mut csv = std::fs::OpenOptions::new().append(true).open(&self.csv_path)?;
        writeln!(
            csv,
            "{},{},{},{}",
            m.epoch, m.split, m.mean_loss, m.mean_accuracy
        )?;
        let mut jsonl = std::fs::OpenOptions::new().append(true).open(&self.jsonl_path)?;
        writeln!(jsonl, "{}", serde_json::to_string(m)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::volume::{LabelVocabulary, TaskSpec};

    fn toy_spec(targets: &[&str], subjects: usize) -> SyntheticSpec {
        SyntheticSpec {
            tasks: vec![TaskSpec::new("toy", targets)],
            subjects,
            blocks_per_target: 1,
            trs_per_block: 4,
            dims: (10, 12, 6),
            noise_sigma: 0.0,
            amplitude: 1.5,
            subject_jitter_vox: 0.0,
            seed: 5,
            ..Default::default()
        }
    }

    fn toy_model(spec: &SyntheticSpec, seed: u64) -> ModelParams<f32> {
        let vocab = LabelVocabulary::from_tasks(&spec.tasks);
        let cfg = ModelConfig::standard(spec.dims.0, spec.dims.1);
        ModelParams::init(cfg, vocab, seed).unwrap()
    }

    fn fast_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs,
            dropout: DropoutSchedule::none(),
            seed: 11,
            shuffle: true,
        }
    }

    #[test]
    fn separable_two_class_set_reaches_full_training_accuracy() {
        let spec = toy_spec(&["a", "b"], 2);
        let data = generate_synthetic(&spec).unwrap();
        let mut model = toy_model(&spec, 3);
        let outcome = train(&mut model, &data, &fast_config(20), &[], |_| {}).unwrap();
        let best = outcome
            .metrics
            .iter()
            .filter(|m| m.split == Split::Train)
            .map(|m| m.mean_accuracy)
            .fold(0.0, f64::max);
        assert_eq!(best, 1.0, "training accuracy never reached 1.0");
    }

    #[test]
    fn one_epoch_takes_ceil_n_over_batch_steps() {
        let spec = toy_spec(&["a", "b", "c"], 2); // 3 targets * 4 TRs * 2 subjects = 24 volumes
        let data = generate_synthetic(&spec).unwrap();
        let n: usize = data.iter().map(|r| r.num_volumes()).sum();
        assert_eq!(n, 24);
        let mut model = toy_model(&spec, 3);
        let mut cfg = fast_config(1);
        cfg.batch_size = 10;
        let outcome = train(&mut model, &data, &cfg, &[], |_| {}).unwrap();
        assert_eq!(outcome.optimizer_steps, 3); // ceil(24/10)
    }

    #[test]
    fn same_seed_reproduces_metrics_exactly() {
        let spec = SyntheticSpec {
            noise_sigma: 0.2,
            ..toy_spec(&["a", "b"], 2)
        };
        let data = generate_synthetic(&spec).unwrap();
        let eval = generate_synthetic(&SyntheticSpec { seed: 77, ..spec.clone() }).unwrap();

        let run = || {
            let mut model = toy_model(&spec, 3);
            let mut cfg = fast_config(3);
            cfg.dropout = DropoutSchedule::default();
            train(&mut model, &data, &cfg, &eval, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap()
        );
    }

    #[test]
    fn epoch_visits_every_volume_once() {
        let spec = toy_spec(&["a", "b"], 3);
        let data = generate_synthetic(&spec).unwrap();
        let n: usize = data.iter().map(|r| r.num_volumes()).sum();
        let mut model = toy_model(&spec, 3);
        let mut seen = 0usize;
        let outcome = train(&mut model, &data, &fast_config(1), &[], |m| {
            seen = m.per_subject_accuracy.len();
        })
        .unwrap();
        // Every subject appears, and the metric averaged over exactly n
        // volumes (weighted per-subject average equals the mean).
        assert_eq!(seen, 3);
        let m = &outcome.metrics[0];
        let weighted: f64 = m
            .per_subject_accuracy
            .values()
            .map(|acc| acc * (n as f64 / 3.0))
            .sum::<f64>()
            / n as f64;
        assert!((weighted - m.mean_accuracy).abs() < 1e-12);
    }

    #[test]
    fn first_step_decreases_loss_on_separable_batch() {
        let spec = toy_spec(&["a", "b"], 2);
        let data = generate_synthetic(&spec).unwrap();
        let mut model = toy_model(&spec, 9);
        let before = evaluate(&model, &data).unwrap().mean_loss;
        let mut cfg = fast_config(1);
        cfg.batch_size = 64; // single full batch
        // Small enough that the first-order descent term dominates the
        // (scale-free) ADAM step.
        cfg.learning_rate = 1e-5;
        train(&mut model, &data, &cfg, &[], |_| {}).unwrap();
        let after = evaluate(&model, &data).unwrap().mean_loss;
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn evaluate_is_read_only() {
        let spec = toy_spec(&["a", "b"], 2);
        let data = generate_synthetic(&spec).unwrap();
        let model = toy_model(&spec, 3);
        let digest = model.param_digest();
        evaluate(&model, &data).unwrap();
        assert_eq!(model.param_digest(), digest);
    }

    #[test]
    fn biased_model_scores_chance_on_balanced_data() {
        let spec = toy_spec(&["a", "b", "c", "d"], 2);
        let data = generate_synthetic(&spec).unwrap();
        let mut model = toy_model(&spec, 3);
        // Zero feature weights, huge bias on class 0: always predicts 0.
        for v in model.head_weight.data_mut() {
            *v = 0.0;
        }
        model.head_bias.data_mut()[0] = 1000.0;
        let m = evaluate(&model, &data).unwrap();
        assert!((m.mean_accuracy - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        // Metric aggregation path with injected perfect predictions.
        let scored: Vec<Scored<'_>> = (0..10)
            .map(|i| Scored {
                subject: if i < 5 { "s0" } else { "s1" },
                correct: true,
                loss: 0.01,
            })
            .collect();
        let m = aggregate_metrics(1, Split::Validation, &scored);
        assert_eq!(m.mean_accuracy, 1.0);
        assert_eq!(m.per_subject_accuracy.len(), 2);
        assert!(m.per_subject_accuracy.values().all(|&a| a == 1.0));
    }

    #[test]
    fn random_sixteen_class_model_scores_near_chance() {
        let targets: Vec<String> = (0..16).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = targets.iter().map(|s| s.as_str()).collect();
        let spec = SyntheticSpec {
            noise_sigma: 1.0,
            amplitude: 0.0, // pure noise: nothing to decode
            ..toy_spec(&refs, 2)
        };
        let data = generate_synthetic(&spec).unwrap();
        let model = toy_model(&spec, 31);
        let m = evaluate(&model, &data).unwrap();
        // 16 * 4 * 2 = 128 volumes at chance 1/16: binomial sd ~ 0.0214.
        let chance = 1.0 / 16.0;
        let sd = (chance * (1.0 - chance) / 128.0f64).sqrt();
        assert!(
            (m.mean_accuracy - chance).abs() < 4.0 * sd,
            "accuracy {} outside chance band",
            m.mean_accuracy
        );
    }

    #[test]
    fn unknown_label_names_the_recording() {
        let spec = toy_spec(&["a", "b"], 1);
        let mut data = generate_synthetic(&spec).unwrap();
        data[0].labels[0] = 9;
        let mut model = toy_model(&spec, 3);
        let err = train(&mut model, &data, &fast_config(1), &[], |_| {}).unwrap_err();
        assert!(err.to_string().contains("sub000"), "{err}");
    }

    #[test]
    fn metrics_writer_appends_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), "train").unwrap();
        let m = EpochMetrics {
            epoch: 1,
            split: Split::Train,
            mean_loss: 0.5,
            mean_accuracy: 0.75,
            per_subject_accuracy: BTreeMap::from([("s0".to_string(), 0.75)]),
        };
        w.append(&m).unwrap();
        w.append(&m).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let jsonl = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 2);
        let parsed: EpochMetrics = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(parsed.mean_accuracy, 0.75);
    }
}
