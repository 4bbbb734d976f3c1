//! Experiment orchestration: the task-level pretraining/test split,
//! subject-fraction subsetting, multi-task pretraining, and the
//! pretrained-versus-scratch transfer comparison with paired significance
//! tests per training-set fraction.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TrainMeta};
use crate::config::KeyValueFile;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::stats::{paired_t_test, TTest};
use crate::tensor::{derive_seed, new_rng};
use crate::train::{evaluate, train, EpochMetrics, Split, TrainConfig, TrainOutcome};
use crate::volume::{LabelVocabulary, Recording, TaskSpec};

/// How the corpus splits into pretraining/test sides and train/validation
/// subjects. Train and validation subject counts must exhaust each side's
/// cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_task: String,
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_task: "wm".to_string(),
            train_subjects: 300,
            val_subjects: 100,
            seed: 0,
        }
    }
}

/// Training-set fractions for the transfer comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionPlan {
    pub fractions: Vec<f64>,
}

impl Default for FractionPlan {
    fn default() -> Self {
        FractionPlan {
            fractions: vec![0.01, 0.05, 0.10, 0.20, 0.40, 0.60, 1.00],
        }
    }
}

impl FractionPlan {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::config("fraction plan is empty"));
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Bonferroni-adjusted significance level: 0.05 divided by the number
    /// of tests (0.05/7 for the default seven-fraction plan).
    pub fn bonferroni_alpha(&self) -> f64 {
        0.05 / self.fractions.len() as f64
    }
}

/// The corpus partitioned by task and subject.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub pretrain_train: Vec<Recording>,
    pub pretrain_val: Vec<Recording>,
    pub test_train: Vec<Recording>,
    pub test_val: Vec<Recording>,
    pub pretrain_vocabulary: LabelVocabulary,
    pub test_vocabulary: LabelVocabulary,
}

fn unique_subjects(recordings: &[Recording]) -> Vec<String> {
    let set: BTreeSet<&str> = recordings.iter().map(|r| r.subject_id.as_str()).collect();
    set.into_iter().map(|s| s.to_string()).collect()
}

fn split_subjects(
    recordings: Vec<Recording>,
    train_n: usize,
    val_n: usize,
    seed: u64,
) -> Result<(Vec<Recording>, Vec<Recording>)> {
    let mut subjects = unique_subjects(&recordings);
    if subjects.len() != train_n + val_n {
        return Err(Error::config(format!(
            "split of {}+{} subjects must exhaust the cohort of {}",
            train_n,
            val_n,
            subjects.len()
        )));
    }
    let mut rng = new_rng(seed);
    use rand::seq::SliceRandom;
    subjects.shuffle(&mut rng);
    let train_set: BTreeSet<&String> = subjects[..train_n].iter().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for rec in recordings {
        if train_set.contains(&rec.subject_id) {
            train.push(rec);
        } else {
            val.push(rec);
        }
    }
    Ok((train, val))
}

/// Partitions recordings into the pretraining side (every task except the
/// test task) and the test side, then splits each side's subjects with a
/// seeded shuffle.
pub fn split_by_task(
    corpus: Vec<Recording>,
    tasks: &[TaskSpec],
    spec: &SplitSpec,
) -> Result<CorpusSplit> {
    if !tasks.iter().any(|t| t.id == spec.test_task) {
        return Err(Error::config(format!(
            "test task '{}' not present in the task table",
            spec.test_task
        )));
    }
    if !corpus.iter().any(|r| r.task_id == spec.test_task) {
        return Err(Error::config(format!(
            "test task '{}' has no recordings",
            spec.test_task
        )));
    }
    let pretrain_tasks: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| t.id != spec.test_task)
        .cloned()
        .collect();
    let test_tasks: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| t.id == spec.test_task)
        .cloned()
        .collect();

    let (test_side, pretrain_side): (Vec<Recording>, Vec<Recording>) = corpus
        .into_iter()
        .partition(|r| r.task_id == spec.test_task);

    let (pretrain_train, pretrain_val) = split_subjects(
        pretrain_side,
        spec.train_subjects,
        spec.val_subjects,
        derive_seed(spec.seed, 0x51),
    )?;
    let (test_train, test_val) = split_subjects(
        test_side,
        spec.train_subjects,
        spec.val_subjects,
        derive_seed(spec.seed, 0x52),
    )?;

    Ok(CorpusSplit {
        pretrain_train,
        pretrain_val,
        test_train,
        test_val,
        pretrain_vocabulary: LabelVocabulary::from_tasks(&pretrain_tasks),
        test_vocabulary: LabelVocabulary::from_tasks(&test_tasks),
    })
}

/// Selects whole subjects for a training fraction: `round(fraction * N)`
/// subjects, at least one. Identical seeds give nested prefixes, so smaller
/// fractions are subsets of larger ones.
pub fn subset_fraction(
    recordings: &[Recording],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Recording>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut subjects = unique_subjects(recordings);
    let mut rng = new_rng(seed);
    use rand::seq::SliceRandom;
    subjects.shuffle(&mut rng);
    let k = ((fraction * subjects.len() as f64).round() as usize)
        .max(1)
        .min(subjects.len());
    let chosen: BTreeSet<&String> = subjects[..k].iter().collect();
    Ok(recordings
        .iter()
        .filter(|r| chosen.contains(&r.subject_id))
        .cloned()
        .collect())
}

/// Final-epoch validation accuracy per task (per-task breakdown).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task_id: String,
    pub accuracy: f64,
    pub volumes: usize,
}

/// Volume-weighted mean accuracy over a breakdown, optionally excluding one
/// task from the aggregate.
pub fn mean_accuracy_excluding(per_task: &[TaskAccuracy], exclude: Option<&str>) -> f64 {
    let mut correct = 0.0;
    let mut total = 0usize;
    for t in per_task {
        if Some(t.task_id.as_str()) == exclude {
            continue;
        }
        correct += t.accuracy * t.volumes as f64;
        total += t.volumes;
    }
    if total == 0 {
        0.0
    } else {
        correct / total as f64
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub per_task: Vec<TaskAccuracy>,
}

/// Short hash of the resolved configuration, for provenance logging.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretrains a fresh model over all pretraining tasks with a shared output
/// head, evaluating each epoch and reporting the final per-task breakdown.
pub fn run_pretraining(
    train_data: &[Recording],
    val_data: &[Recording],
    vocabulary: LabelVocabulary,
    model_config: ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<PretrainOutcome> {
    let task_count = unique_tasks(train_data).len();
    if task_count < 2 {
        return Err(Error::config(format!(
            "pretraining needs at least 2 tasks, corpus has {task_count}"
        )));
    }
    let hash = config_hash(&(&model_config, config));
    let mut model = ModelParams::<f32>::init(
        model_config,
        vocabulary,
        derive_seed(config.seed, 0x1417),
    )?;
    let outcome = train(&mut model, train_data, config, val_data, &mut on_epoch)?;

    let mut per_task = Vec::new();
    for task in unique_tasks(val_data) {
        let task_recs: Vec<Recording> = val_data
            .iter()
            .filter(|r| r.task_id == task)
            .cloned()
            .collect();
        let volumes = task_recs.iter().map(|r| r.num_volumes()).sum();
        let m = evaluate(&model, &task_recs)?;
        per_task.push(TaskAccuracy {
            task_id: task,
            accuracy: m.mean_accuracy,
            volumes,
        });
    }

    let checkpoint = Checkpoint::new(
        model,
        TrainMeta {
            epochs_completed: config.epochs as u64,
            seed: config.seed,
            config_hash: hash,
        },
    );
    Ok(PretrainOutcome {
        checkpoint,
        metrics: outcome.metrics,
        per_task,
    })
}

fn unique_tasks(recordings: &[Recording]) -> Vec<String> {
    let set: BTreeSet<&str> = recordings.iter().map(|r| r.task_id.as_str()).collect();
    set.into_iter().map(|s| s.to_string()).collect()
}

/// Per-fraction significance result.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SignificanceTest {
    #[serde(flatten)]
    pub t_test: TTest,
    pub alpha: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub metrics: Vec<EpochMetrics>,
}

impl VariantResult {
    /// Validation metrics of the final epoch.
    pub fn final_validation(&self) -> Option<&EpochMetrics> {
        self.metrics
            .iter()
            .rev()
            .find(|m| m.split == Split::Validation)
    }
}

/// One (fraction) cell of the comparison: both variants trained on the same
/// subject subset with identical configs, plus the paired test on final
/// per-subject validation accuracies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionCell {
    pub fraction: f64,
    pub train_subjects: Vec<String>,
    pub pretrained: VariantResult,
    pub scratch: VariantResult,
    pub significance: SignificanceTest,
}

impl FractionCell {
    /// Final-epoch validation accuracy gap, pretrained minus scratch.
    pub fn validation_gap(&self) -> f64 {
        let p = self
            .pretrained
            .final_validation()
            .map(|m| m.mean_accuracy)
            .unwrap_or(0.0);
        let s = self
            .scratch
            .final_validation()
            .map(|m| m.mean_accuracy)
            .unwrap_or(0.0);
        p - s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportConfig {
    pub fractions: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub alpha: f64,
}

/// Complete transfer-comparison record, serializable to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ReportConfig,
    pub cells: Vec<FractionCell>,
}

/// Trains the pretrained (head-swapped) and scratch variants on every
/// fraction of the test-task training subjects and compares their final
/// per-subject validation accuracies with paired t-tests.
///
/// Both variants share the training subset, shuffle order and dropout
/// stream for a fraction; only the initialization differs.
pub fn run_transfer_comparison(
    checkpoint: &Checkpoint,
    test_train: &[Recording],
    test_val: &[Recording],
    test_vocabulary: &LabelVocabulary,
    plan: &FractionPlan,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(f64, &str, &EpochMetrics),
) -> Result<ExperimentReport> {
    plan.validate()?;
    config.validate()?;
    if test_val.is_empty() {
        return Err(Error::data("transfer comparison needs validation data"));
    }
    let alpha = plan.bonferroni_alpha();
    let subset_seed = derive_seed(config.seed, 0xF0);

    let mut cells = Vec::with_capacity(plan.fractions.len());
    for &fraction in &plan.fractions {
        let subset = subset_fraction(test_train, fraction, subset_seed)?;
        let subjects = unique_subjects(&subset);

        let mut pretrained =
            checkpoint.swap_head(test_vocabulary.clone(), derive_seed(config.seed, 0xA0))?;
        let mut scratch = ModelParams::<f32>::init(
            checkpoint.params.config.clone(),
            test_vocabulary.clone(),
            derive_seed(config.seed, 0xB0),
        )?;

        let pre_out: TrainOutcome = train(&mut pretrained, &subset, config, test_val, |m| {
            on_epoch(fraction, "pretrained", m)
        })?;
        let scr_out: TrainOutcome = train(&mut scratch, &subset, config, test_val, |m| {
            on_epoch(fraction, "scratch", m)
        })?;

        let pre_result = VariantResult { metrics: pre_out.metrics };
        let scr_result = VariantResult { metrics: scr_out.metrics };
        let significance =
            compare_final_epoch(&pre_result, &scr_result, alpha)?;
        cells.push(FractionCell {
            fraction,
            train_subjects: subjects,
            pretrained: pre_result,
            scratch: scr_result,
            significance,
        });
    }

    Ok(ExperimentReport {
        config: ReportConfig {
            fractions: plan.fractions.clone(),
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            seed: config.seed,
            alpha,
        },
        cells,
    })
}

fn compare_final_epoch(
    pretrained: &VariantResult,
    scratch: &VariantResult,
    alpha: f64,
) -> Result<SignificanceTest> {
    let pre = pretrained
        .final_validation()
        .ok_or_else(|| Error::data("pretrained variant has no validation metrics"))?;
    let scr = scratch
        .final_validation()
        .ok_or_else(|| Error::data("scratch variant has no validation metrics"))?;
    let subjects: Vec<&String> = pre.per_subject_accuracy.keys().collect();
    let scr_subjects: Vec<&String> = scr.per_subject_accuracy.keys().collect();
    if subjects != scr_subjects {
        return Err(Error::data(
            "paired test requires identical validation subject sets",
        ));
    }
    let a: Vec<f64> = pre.per_subject_accuracy.values().copied().collect();
    let b: Vec<f64> = scr.per_subject_accuracy.values().copied().collect();
    let t_test = paired_t_test(&a, &b)?;
    Ok(SignificanceTest {
        significant: t_test.p < alpha,
        alpha,
        t_test,
    })
}

/// Writes `report.json`, per-epoch `learning_curves.csv` (one row per
/// variant, fraction and epoch) and the per-fraction `summary.csv`.
pub fn emit_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;

    let mut curves = String::from(
        "variant,fraction,epoch,train_loss,train_accuracy,validation_loss,validation_accuracy\n",
    );
    for cell in &report.cells {
        for (variant, result) in [
            ("pretrained", &cell.pretrained),
            ("scratch", &cell.scratch),
        ] {
            for epoch in 1..=report.config.epochs {
                let find = |split: Split| {
                    result
                        .metrics
                        .iter()
                        .find(|m| m.epoch == epoch && m.split == split)
                };
                let train_m = find(Split::Train);
                let val_m = find(Split::Validation);
                curves.push_str(&format!(
                    "{variant},{},{epoch},{},{},{},{}\n",
                    cell.fraction,
                    train_m.map(|m| m.mean_loss).unwrap_or(f64::NAN),
                    train_m.map(|m| m.mean_accuracy).unwrap_or(f64::NAN),
                    val_m.map(|m| m.mean_loss).unwrap_or(f64::NAN),
                    val_m.map(|m| m.mean_accuracy).unwrap_or(f64::NAN),
                ));
            }
        }
    }
    std::fs::File::create(dir.join("learning_curves.csv"))?.write_all(curves.as_bytes())?;

    let mut summary = String::from(
        "fraction,train_subjects,pretrained_val_accuracy,scratch_val_accuracy,gap,t,df,p,significant\n",
    );
    for cell in &report.cells {
        let pre = cell
            .pretrained
            .final_validation()
            .map(|m| m.mean_accuracy)
            .unwrap_or(f64::NAN);
        let scr = cell
            .scratch
            .final_validation()
            .map(|m| m.mean_accuracy)
            .unwrap_or(f64::NAN);
        summary.push_str(&format!(
            "{},{},{pre},{scr},{},{},{},{},{}\n",
            cell.fraction,
            cell.train_subjects.len(),
            pre - scr,
            cell.significance.t_test.t,
            cell.significance.t_test.df,
            cell.significance.t_test.p,
            cell.significance.significant,
        ));
    }
    std::fs::File::create(dir.join("summary.csv"))?.write_all(summary.as_bytes())?;
    Ok(())
}

/// Experiment settings loadable from a plain-text `key = value` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpecFile {
    pub split: SplitSpec,
    pub plan: FractionPlan,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ExperimentSpecFile {
    fn default() -> Self {
        ExperimentSpecFile {
            split: SplitSpec::default(),
            plan: FractionPlan::default(),
            pretrain_epochs: 40,
            finetune_epochs: 50,
            batch_size: 24,
            learning_rate: 1e-4,
        }
    }
}

impl ExperimentSpecFile {
    pub fn from_key_values(kv: &KeyValueFile) -> Result<Self> {
        let mut spec = ExperimentSpecFile::default();
        if let Some(v) = kv.get("test_task") {
            spec.split.test_task = v.to_string();
        }
        if let Some(v) = kv.get_usize("train_subjects")? {
            spec.split.train_subjects = v;
        }
        if let Some(v) = kv.get_usize("val_subjects")? {
            spec.split.val_subjects = v;
        }
        if let Some(v) = kv.get_u64("seed")? {
            spec.split.seed = v;
        }
        if let Some(v) = kv.get("fractions") {
            spec.plan.fractions = v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad fraction '{s}'")))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = kv.get_usize("pretrain_epochs")? {
            spec.pretrain_epochs = v;
        }
        if let Some(v) = kv.get_usize("finetune_epochs")? {
            spec.finetune_epochs = v;
        }
        if let Some(v) = kv.get_usize("batch_size")? {
            spec.batch_size = v;
        }
        if let Some(v) = kv.get_f64("learning_rate")? {
            spec.learning_rate = v;
        }
        spec.plan.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&KeyValueFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::model::DropoutSchedule;
    use crate::volume::{standard_tasks, Block, BrainVolume};

    fn desk_corpus(subjects: usize, trs: usize, dims: (usize, usize, usize)) -> Vec<Recording> {
        generate_synthetic(&SyntheticSpec {
            subjects,
            trs_per_block: trs,
            dims,
            noise_sigma: 0.0,
            amplitude: 50.0,
            subject_jitter_vox: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn split_by_task_partitions_tasks_and_vocabularies() {
        let corpus = desk_corpus(4, 2, (8, 9, 6));
        let spec = SplitSpec {
            test_task: "wm".to_string(),
            train_subjects: 2,
            val_subjects: 2,
            seed: 3,
        };
        let split = split_by_task(corpus, &standard_tasks(), &spec).unwrap();
        assert_eq!(split.pretrain_vocabulary.size(), 16);
        assert_eq!(split.test_vocabulary.size(), 4);
        assert_eq!(split.pretrain_vocabulary.tasks().len(), 6);
        assert!(split
            .pretrain_train
            .iter()
            .chain(&split.pretrain_val)
            .all(|r| r.task_id != "wm"));
        assert!(split
            .test_train
            .iter()
            .chain(&split.test_val)
            .all(|r| r.task_id == "wm"));

        // Disjoint and exhaustive subject sets on each side.
        let train_subj = unique_subjects(&split.test_train);
        let val_subj = unique_subjects(&split.test_val);
        assert_eq!(train_subj.len(), 2);
        assert_eq!(val_subj.len(), 2);
        assert!(train_subj.iter().all(|s| !val_subj.contains(s)));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let spec = SplitSpec {
            test_task: "wm".to_string(),
            train_subjects: 3,
            val_subjects: 1,
            seed: 9,
        };
        let a = split_by_task(desk_corpus(4, 2, (8, 9, 6)), &standard_tasks(), &spec).unwrap();
        let b = split_by_task(desk_corpus(4, 2, (8, 9, 6)), &standard_tasks(), &spec).unwrap();
        assert_eq!(unique_subjects(&a.test_train), unique_subjects(&b.test_train));
        assert_eq!(
            unique_subjects(&a.pretrain_val),
            unique_subjects(&b.pretrain_val)
        );
    }

    #[test]
    fn split_rejects_unknown_task_and_non_exhaustive_counts() {
        let corpus = desk_corpus(4, 2, (8, 9, 6));
        let mut spec = SplitSpec {
            test_task: "nope".to_string(),
            train_subjects: 2,
            val_subjects: 2,
            seed: 0,
        };
        assert!(split_by_task(corpus.clone(), &standard_tasks(), &spec).is_err());
        spec.test_task = "wm".to_string();
        spec.val_subjects = 1; // 2 + 1 != 4
        assert!(split_by_task(corpus, &standard_tasks(), &spec).is_err());
    }

    fn one_volume_recordings(n: usize) -> Vec<Recording> {
        (0..n)
            .map(|i| Recording {
                subject_id: format!("sub{i:04}"),
                task_id: "wm".to_string(),
                volumes: vec![BrainVolume::zeros((4, 4, 2), [2.0; 3])],
                labels: vec![0],
                blocks: vec![Block { start: 0, len: 1, target: 0 }],
                tr_seconds: 0.72,
            })
            .collect()
    }

    #[test]
    fn fraction_subsetting_matches_paper_arithmetic() {
        let recs = one_volume_recordings(300);
        assert_eq!(
            unique_subjects(&subset_fraction(&recs, 0.01, 5).unwrap()).len(),
            3
        );
        assert_eq!(
            unique_subjects(&subset_fraction(&recs, 0.40, 5).unwrap()).len(),
            120
        );
        assert_eq!(subset_fraction(&recs, 1.0, 5).unwrap().len(), 300);
        assert!(subset_fraction(&recs, 0.0, 5).is_err());
        assert!(subset_fraction(&recs, 1.5, 5).is_err());
        // Minimum of one subject.
        let tiny = one_volume_recordings(10);
        assert_eq!(
            unique_subjects(&subset_fraction(&tiny, 0.01, 5).unwrap()).len(),
            1
        );
    }

    #[test]
    fn fraction_subsets_are_nested_under_one_seed() {
        let recs = one_volume_recordings(50);
        let mut previous: BTreeSet<String> = BTreeSet::new();
        for f in [0.02, 0.1, 0.3, 0.62, 1.0] {
            let chosen: BTreeSet<String> = unique_subjects(&subset_fraction(&recs, f, 77).unwrap())
                .into_iter()
                .collect();
            assert!(previous.is_subset(&chosen), "fraction {f} broke nesting");
            previous = chosen;
        }
    }

    #[test]
    fn bonferroni_alpha_for_default_plan_is_one_seventh() {
        let plan = FractionPlan::default();
        assert_eq!(plan.fractions.len(), 7);
        assert!((plan.bonferroni_alpha() - 0.05 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn pretraining_beats_chance_on_noiseless_corpus() {
        // Small dims so the 40-epoch run stays quick; noiseless blobs are
        // separable, so validation accuracy must clear 5x chance (1/16).
        let corpus = desk_corpus(4, 2, (12, 14, 10));
        let spec = SplitSpec {
            test_task: "wm".to_string(),
            train_subjects: 2,
            val_subjects: 2,
            seed: 1,
        };
        let split = split_by_task(corpus, &standard_tasks(), &spec).unwrap();
        assert_eq!(split.pretrain_vocabulary.size(), 16);

        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 40,
            dropout: DropoutSchedule::none(),
            seed: 21,
            shuffle: true,
        };
        let model_cfg = ModelConfig::standard(12, 14);
        let out = run_pretraining(
            &split.pretrain_train,
            &split.pretrain_val,
            split.pretrain_vocabulary.clone(),
            model_cfg,
            &cfg,
            |_| {},
        )
        .unwrap();
        assert_eq!(out.checkpoint.num_classes(), 16);
        assert_eq!(out.per_task.len(), 6);

        let final_val = out
            .metrics
            .iter()
            .rev()
            .find(|m| m.split == Split::Validation)
            .unwrap();
        let chance = 1.0 / 16.0;
        assert!(
            final_val.mean_accuracy > 5.0 * chance,
            "validation accuracy {} below 5x chance",
            final_val.mean_accuracy
        );

        // The weighted per-task aggregate reproduces the overall accuracy,
        // and excluding a task recomputes it.
        let agg = mean_accuracy_excluding(&out.per_task, None);
        assert!((agg - final_val.mean_accuracy).abs() < 1e-9);
        let excl = mean_accuracy_excluding(&out.per_task, Some("gambling"));
        assert!(excl.is_finite());
    }

    #[test]
    fn pretraining_rejects_single_task_corpora() {
        let corpus: Vec<Recording> = desk_corpus(2, 2, (8, 9, 6))
            .into_iter()
            .filter(|r| r.task_id == "language")
            .collect();
        let cfg = TrainConfig::default();
        let err = run_pretraining(
            &corpus,
            &[],
            LabelVocabulary::from_tasks(&standard_tasks()),
            ModelConfig::standard(8, 9),
            &cfg,
            |_| {},
        )
        .unwrap_err();
        assert!(err.to_string().contains("2 tasks"), "{err}");
    }

    #[test]
    fn transfer_comparison_structure_and_report() {
        let corpus = desk_corpus(4, 2, (8, 9, 6));
        let spec = SplitSpec {
            test_task: "wm".to_string(),
            train_subjects: 2,
            val_subjects: 2,
            seed: 2,
        };
        let split = split_by_task(corpus, &standard_tasks(), &spec).unwrap();

        let pre_cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 2,
            dropout: DropoutSchedule::none(),
            seed: 5,
            shuffle: true,
        };
        let out = run_pretraining(
            &split.pretrain_train,
            &split.pretrain_val,
            split.pretrain_vocabulary.clone(),
            ModelConfig::standard(8, 9),
            &pre_cfg,
            |_| {},
        )
        .unwrap();

        let plan = FractionPlan {
            fractions: vec![0.5, 1.0],
        };
        let ft_cfg = TrainConfig {
            epochs: 2,
            ..pre_cfg.clone()
        };
        let report = run_transfer_comparison(
            &out.checkpoint,
            &split.test_train,
            &split.test_val,
            &split.test_vocabulary,
            &plan,
            &ft_cfg,
            |_, _, _| {},
        )
        .unwrap();

        assert_eq!(report.cells.len(), 2);
        assert!((report.config.alpha - 0.025).abs() < 1e-12);
        for cell in &report.cells {
            // df = paired subjects - 1.
            assert_eq!(cell.significance.t_test.df, 1);
            assert!(!cell.train_subjects.is_empty());
            // Identical data path for both variants: 2 epochs x 2 splits.
            assert_eq!(cell.pretrained.metrics.len(), 4);
            assert_eq!(cell.scratch.metrics.len(), 4);
        }
        // Nested fractions share the smaller subset.
        assert!(report.cells[0]
            .train_subjects
            .iter()
            .all(|s| report.cells[1].train_subjects.contains(s)));

        // Emit and re-parse the report; the JSON matches the shipped model.
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: ExperimentReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.cells.len(), report.cells.len());

        // learning_curves.csv: one row per variant x fraction x epoch.
        let curves = std::fs::read_to_string(dir.path().join("learning_curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 1 + 2 * 2 * 2);

        // summary.csv gap column equals the recomputed difference.
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        for (line, cell) in summary.lines().skip(1).zip(&report.cells) {
            let fields: Vec<&str> = line.split(',').collect();
            let gap: f64 = fields[4].parse().unwrap();
            assert!((gap - cell.validation_gap()).abs() < 1e-12);
        }
    }

    #[test]
    fn experiment_spec_file_parses_and_overrides() {
        let kv = KeyValueFile::parse(
            "test_task = wm\ntrain_subjects = 12\nval_subjects = 8\nseed = 3\nfractions = 0.01, 0.2, 1.0\nfinetune_epochs = 50\nbatch_size = 8\nlearning_rate = 0.001\n",
        )
        .unwrap();
        let spec = ExperimentSpecFile::from_key_values(&kv).unwrap();
        assert_eq!(spec.split.train_subjects, 12);
        assert_eq!(spec.plan.fractions, vec![0.01, 0.2, 1.0]);
        assert_eq!(spec.finetune_epochs, 50);
        assert!((spec.learning_rate - 1e-3).abs() < 1e-12);
        // Defaults hold where the file is silent.
        assert_eq!(spec.pretrain_epochs, 40);
    }
}
