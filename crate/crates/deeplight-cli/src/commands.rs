use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};

use deeplight::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainMeta};
use deeplight::config::KeyValueFile;
use deeplight::dataset::{generate_synthetic, read_dataset, read_manifest, write_dataset, SyntheticSpec};
use deeplight::error::{Error, Result};
use deeplight::experiment::{
    config_hash, emit_report, mean_accuracy_excluding, run_pretraining, run_transfer_comparison,
    split_by_task, subset_fraction, ExperimentSpecFile, FractionPlan, SplitSpec,
};
use deeplight::model::{DropoutSchedule, ModelConfig, ModelParams};
use deeplight::signal::{preprocess_recording, PreprocConfig};
use deeplight::train::{evaluate, train, MetricsWriter, Split, TrainConfig};
use deeplight::volume::{standard_tasks, Recording, TaskSpec};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-task dataset.
    Synth(SynthArgs),
    /// Run the voxel-level preprocessing chain over a dataset.
    Preprocess(PreprocessArgs),
    /// Pretrain on every task except the test task.
    Pretrain(PretrainArgs),
    /// Fine-tune from a checkpoint (or train from scratch) on the test task.
    Finetune(FinetuneArgs),
    /// Compare pretrained vs scratch variants across training fractions.
    Compare(CompareArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Regenerate summary tables from a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DropoutPreset {
    /// Conv 0/0/0/0/20/20/20/20/40/40/40/40 %, LSTM and head 50 %.
    Standard,
    /// All rates zero.
    None,
}

impl DropoutPreset {
    fn schedule(self) -> DropoutSchedule {
        match self {
            DropoutPreset::Standard => DropoutSchedule::default(),
            DropoutPreset::None => DropoutSchedule::none(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of tasks; 7 with no --targets selects the standard task table.
    #[arg(long, default_value_t = 7)]
    tasks: usize,
    /// Comma-separated decoding-target counts per task, e.g. 4,3,5,2,2,2,2.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 1)]
    blocks_per_target: usize,
    #[arg(long, default_value_t = 10)]
    trs_per_block: usize,
    /// Volume extents as XxYxZ.
    #[arg(long, default_value = "24x28x24")]
    dims: String,
    #[arg(long, default_value_t = 50.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 4.0)]
    noise: f64,
    /// Per-subject atom displacement in voxels (anatomy idiosyncrasy).
    #[arg(long, default_value_t = 1.5)]
    subject_jitter: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Input dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Key-value settings file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fwhm_mm: Option<f64>,
    #[arg(long)]
    highpass_cutoff_seconds: Option<f64>,
    #[arg(long)]
    filter_order: Option<usize>,
    #[arg(long)]
    onset_trs_excluded: Option<usize>,
    /// Single forward filter pass instead of zero-phase forward-backward.
    #[arg(long)]
    single_pass: bool,
    /// Apply the temporal filter before standardization.
    #[arg(long)]
    filter_before_standardize: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory (defaults to $DEEPLIGHT_RUN_DIR or ./run).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "wm")]
    test_task: String,
    /// Training subjects per side; defaults to 3/4 of the cohort.
    #[arg(long)]
    train_subjects: Option<usize>,
    #[arg(long)]
    val_subjects: Option<usize>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 24)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, value_enum, default_value_t = DropoutPreset::Standard)]
    dropout: DropoutPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Recompute the aggregate accuracy excluding one task in the report.
    #[arg(long)]
    exclude_task: Option<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "wm")]
    test_task: String,
    #[arg(long)]
    train_subjects: Option<usize>,
    #[arg(long)]
    val_subjects: Option<usize>,
    /// Fraction of training subjects to use, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 24)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, value_enum, default_value_t = DropoutPreset::Standard)]
    dropout: DropoutPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ignore the checkpoint weights and train from scratch.
    #[arg(long)]
    scratch: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "wm")]
    test_task: String,
    #[arg(long)]
    train_subjects: Option<usize>,
    #[arg(long)]
    val_subjects: Option<usize>,
    /// Comma-separated training fractions.
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 24)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, value_enum, default_value_t = DropoutPreset::Standard)]
    dropout: DropoutPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Only evaluate recordings of this task.
    #[arg(long)]
    task: Option<String>,
    /// Output JSON file for the metrics.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory containing report.json.
    #[arg(long)]
    run: PathBuf,
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(args) => synth(args),
        Command::Preprocess(args) => preprocess(args),
        Command::Pretrain(args) => pretrain(args),
        Command::Finetune(args) => finetune(args),
        Command::Compare(args) => compare(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Report(args) => report(args),
    }
}

fn run_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os("DEEPLIGHT_RUN_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("run"))
    })
}

fn parse_dims(text: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad dims component '{p}' in '{text}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::config(format!("dims must be XxYxZ, got '{text}'")));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn parse_fractions(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad fraction '{s}'")))
        })
        .collect()
}

/// Writes the resolved settings snapshot into the run directory and logs the
/// seed and configuration hash to stderr.
fn write_resolved_config(dir: &Path, entries: &[(&str, String)], seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut sorted: Vec<(&str, String)> = entries.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let text: String = sorted
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    std::fs::write(dir.join("config.resolved.txt"), &text)?;
    let hash = config_hash(&text);
    eprintln!("seed={seed} config_hash={hash}");
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let tasks: Vec<TaskSpec> = match &args.targets {
        None if args.tasks == 7 => standard_tasks(),
        maybe_counts => {
            let counts: Vec<usize> = match maybe_counts {
                Some(text) => text
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::config(format!("bad target count '{s}'")))
                    })
                    .collect::<Result<_>>()?,
                None => vec![2; args.tasks],
            };
            if counts.len() != args.tasks {
                return Err(Error::config(format!(
                    "--targets lists {} counts for {} tasks",
                    counts.len(),
                    args.tasks
                )));
            }
            counts
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let names: Vec<String> = (0..k).map(|j| format!("target{j}")).collect();
                    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                    TaskSpec::new(&format!("task{i}"), &refs)
                })
                .collect()
        }
    };

    let spec = SyntheticSpec {
        tasks,
        subjects: args.subjects,
        blocks_per_target: args.blocks_per_target,
        trs_per_block: args.trs_per_block,
        dims: parse_dims(&args.dims)?,
        amplitude: args.amplitude,
        noise_sigma: args.noise,
        subject_jitter_vox: args.subject_jitter,
        seed: args.seed,
        ..Default::default()
    };
    let recordings = generate_synthetic(&spec)?;
    let manifest = write_dataset(&recordings, &spec.tasks, &args.out)?;
    write_resolved_config(
        &args.out,
        &[
            ("command", "synth".to_string()),
            ("subjects", args.subjects.to_string()),
            ("tasks", spec.tasks.len().to_string()),
            ("blocks_per_target", spec.blocks_per_target.to_string()),
            ("trs_per_block", spec.trs_per_block.to_string()),
            ("dims", args.dims.clone()),
            ("amplitude", spec.amplitude.to_string()),
            ("noise", spec.noise_sigma.to_string()),
            ("subject_jitter", spec.subject_jitter_vox.to_string()),
            ("seed", args.seed.to_string()),
        ],
        args.seed,
    )?;
    eprintln!(
        "wrote {} recordings ({} tasks) to {}",
        manifest.entries.len(),
        spec.tasks.len(),
        args.out.display()
    );
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => PreprocConfig::from_file(path)?,
        None => PreprocConfig::default(),
    };
    if let Some(v) = args.fwhm_mm {
        cfg.fwhm_mm = v;
    }
    if let Some(v) = args.highpass_cutoff_seconds {
        cfg.highpass_cutoff_seconds = v;
    }
    if let Some(v) = args.filter_order {
        cfg.filter_order = v;
    }
    if let Some(v) = args.onset_trs_excluded {
        cfg.onset_trs_excluded = v;
    }
    if args.single_pass {
        cfg.zero_phase = false;
    }
    if args.filter_before_standardize {
        cfg.standardize_before_filter = false;
    }
    cfg.validate()?;

    let manifest = read_manifest(&args.data)?;
    let recordings = read_dataset(&args.data)?;
    let mut processed = Vec::with_capacity(recordings.len());
    let mut warning_count = 0usize;
    for rec in &recordings {
        let (out, warnings) = preprocess_recording(rec, &cfg)?;
        for w in &warnings {
            eprintln!(
                "warning: dropped block at {} (len {}) in {}/{}",
                w.block_start, w.block_len, w.subject_id, w.task_id
            );
        }
        warning_count += warnings.len();
        processed.push(out);
    }
    write_dataset(&processed, &manifest.tasks, &args.out)?;
    write_resolved_config(
        &args.out,
        &[
            ("command", "preprocess".to_string()),
            ("fwhm_mm", cfg.fwhm_mm.to_string()),
            ("highpass_cutoff_seconds", cfg.highpass_cutoff_seconds.to_string()),
            ("filter_order", cfg.filter_order.to_string()),
            ("onset_trs_excluded", cfg.onset_trs_excluded.to_string()),
            ("zero_phase", cfg.zero_phase.to_string()),
            (
                "standardize_before_filter",
                cfg.standardize_before_filter.to_string(),
            ),
        ],
        0,
    )?;
    eprintln!(
        "preprocessed {} recordings ({warning_count} dropped-block warnings) into {}",
        processed.len(),
        args.out.display()
    );
    Ok(())
}

/// Loads a dataset and splits it; subject counts default to a 3:1
/// train/validation split of each side's cohort.
fn load_split(
    data: &Path,
    test_task: &str,
    train_subjects: Option<usize>,
    val_subjects: Option<usize>,
    seed: u64,
) -> Result<(deeplight::experiment::CorpusSplit, Vec<TaskSpec>)> {
    let manifest = read_manifest(data)?;
    let recordings = read_dataset(data)?;
    let cohort: std::collections::BTreeSet<&str> =
        recordings.iter().map(|r| r.subject_id.as_str()).collect();
    let n = cohort.len();
    let train_n = train_subjects.unwrap_or_else(|| ((n as f64) * 0.75).round() as usize);
    let val_n = val_subjects.unwrap_or(n.saturating_sub(train_n));
    let spec = SplitSpec {
        test_task: test_task.to_string(),
        train_subjects: train_n,
        val_subjects: val_n,
        seed,
    };
    let split = split_by_task(recordings, &manifest.tasks, &spec)?;
    Ok((split, manifest.tasks))
}

fn model_config_for(recordings: &[Recording]) -> Result<ModelConfig> {
    let dims = recordings
        .iter()
        .flat_map(|r| r.volumes.first())
        .map(|v| v.dims)
        .next()
        .ok_or_else(|| Error::data("dataset has no volumes"))?;
    Ok(ModelConfig::standard(dims.0, dims.1))
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpecFile::from_file(path)?,
        None => ExperimentSpecFile::default(),
    };
    spec.split.test_task = args.test_task.clone();
    if let Some(v) = args.train_subjects {
        spec.split.train_subjects = v;
    }

    let out = run_dir(args.out);
    let (split, _tasks) = load_split(
        &args.data,
        &args.test_task,
        args.train_subjects,
        args.val_subjects,
        args.seed,
    )?;
    let model_cfg = model_config_for(&split.pretrain_train)?;
    let train_cfg = TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        epochs: args.epochs,
        dropout: args.dropout.schedule(),
        seed: args.seed,
        shuffle: true,
    };
    write_resolved_config(
        &out,
        &[
            ("command", "pretrain".to_string()),
            ("data", args.data.display().to_string()),
            ("test_task", args.test_task.clone()),
            ("epochs", args.epochs.to_string()),
            ("batch_size", args.batch_size.to_string()),
            ("learning_rate", args.learning_rate.to_string()),
            ("dropout", format!("{:?}", args.dropout)),
            ("seed", args.seed.to_string()),
            ("vocabulary", split.pretrain_vocabulary.size().to_string()),
        ],
        args.seed,
    )?;

    let metrics_dir = out.join("metrics");
    let mut writer = MetricsWriter::create(&metrics_dir, "pretrain")?;
    let outcome = run_pretraining(
        &split.pretrain_train,
        &split.pretrain_val,
        split.pretrain_vocabulary.clone(),
        model_cfg,
        &train_cfg,
        |m| {
            let _ = writer.append(m);
            eprintln!(
                "epoch {:3} {}: loss {:.4} accuracy {:.4}",
                m.epoch, m.split, m.mean_loss, m.mean_accuracy
            );
        },
    )?;

    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    save_checkpoint(&outcome.checkpoint, ckpt_dir.join("pretrained.ckpt"))?;

    std::fs::write(
        metrics_dir.join("per_task.json"),
        serde_json::to_vec_pretty(&outcome.per_task)?,
    )?;
    eprintln!("per-task validation accuracy:");
    for t in &outcome.per_task {
        eprintln!("  {:<12} {:.4} ({} volumes)", t.task_id, t.accuracy, t.volumes);
    }
    eprintln!(
        "aggregate {:.4}",
        mean_accuracy_excluding(&outcome.per_task, None)
    );
    if let Some(task) = &args.exclude_task {
        eprintln!(
            "aggregate excluding {task}: {:.4}",
            mean_accuracy_excluding(&outcome.per_task, Some(task))
        );
    }
    eprintln!("checkpoint: {}", ckpt_dir.join("pretrained.ckpt").display());
    Ok(())
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    let out = run_dir(args.out);
    let (split, _) = load_split(
        &args.data,
        &args.test_task,
        args.train_subjects,
        args.val_subjects,
        args.seed,
    )?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let subset = subset_fraction(
        &split.test_train,
        args.fraction,
        deeplight::tensor::derive_seed(args.seed, 0xF0),
    )?;
    let mut model = if args.scratch {
        ModelParams::<f32>::init(
            ckpt.params.config.clone(),
            split.test_vocabulary.clone(),
            deeplight::tensor::derive_seed(args.seed, 0xB0),
        )?
    } else {
        ckpt.swap_head(
            split.test_vocabulary.clone(),
            deeplight::tensor::derive_seed(args.seed, 0xA0),
        )?
    };
    let train_cfg = TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        epochs: args.epochs,
        dropout: args.dropout.schedule(),
        seed: args.seed,
        shuffle: true,
    };
    let variant = if args.scratch { "scratch" } else { "pretrained" };
    write_resolved_config(
        &out,
        &[
            ("command", "finetune".to_string()),
            ("data", args.data.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            ("variant", variant.to_string()),
            ("fraction", args.fraction.to_string()),
            ("epochs", args.epochs.to_string()),
            ("batch_size", args.batch_size.to_string()),
            ("learning_rate", args.learning_rate.to_string()),
            ("seed", args.seed.to_string()),
        ],
        args.seed,
    )?;

    let metrics_dir = out.join("metrics");
    let mut writer = MetricsWriter::create(&metrics_dir, &format!("finetune_{variant}"))?;
    let outcome = train(&mut model, &subset, &train_cfg, &split.test_val, |m| {
        let _ = writer.append(m);
        eprintln!(
            "epoch {:3} {}: loss {:.4} accuracy {:.4}",
            m.epoch, m.split, m.mean_loss, m.mean_accuracy
        );
    })?;

    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let final_ckpt = Checkpoint::new(
        model,
        TrainMeta {
            epochs_completed: args.epochs as u64,
            seed: args.seed,
            config_hash: config_hash(&train_cfg),
        },
    );
    save_checkpoint(&final_ckpt, ckpt_dir.join(format!("{variant}.ckpt")))?;
    let last_val = outcome
        .metrics
        .iter()
        .rev()
        .find(|m| m.split == Split::Validation);
    if let Some(m) = last_val {
        eprintln!("final validation accuracy {:.4}", m.mean_accuracy);
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpecFile::from_file(path)?,
        None => ExperimentSpecFile::default(),
    };
    if let Some(text) = &args.fractions {
        spec.plan.fractions = parse_fractions(text)?;
    }
    let plan = FractionPlan {
        fractions: spec.plan.fractions.clone(),
    };
    plan.validate()?;

    let out = run_dir(args.out);
    let (split, _) = load_split(
        &args.data,
        &args.test_task,
        args.train_subjects,
        args.val_subjects,
        args.seed,
    )?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let train_cfg = TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        epochs: args.epochs,
        dropout: args.dropout.schedule(),
        seed: args.seed,
        shuffle: true,
    };
    write_resolved_config(
        &out,
        &[
            ("command", "compare".to_string()),
            ("data", args.data.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            (
                "fractions",
                plan.fractions
                    .iter()
                    .map(|f| f.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("epochs", args.epochs.to_string()),
            ("batch_size", args.batch_size.to_string()),
            ("learning_rate", args.learning_rate.to_string()),
            ("seed", args.seed.to_string()),
        ],
        args.seed,
    )?;

    let metrics_dir = out.join("metrics");
    std::fs::create_dir_all(&metrics_dir)?;
    let report = run_transfer_comparison(
        &ckpt,
        &split.test_train,
        &split.test_val,
        &split.test_vocabulary,
        &plan,
        &train_cfg,
        |fraction, variant, m| {
            eprintln!(
                "fraction {fraction:.2} {variant} epoch {:3} {}: loss {:.4} accuracy {:.4}",
                m.epoch, m.split, m.mean_loss, m.mean_accuracy
            );
        },
    )?;
    emit_report(&report, &out)?;
    eprintln!("report: {}", out.join("report.json").display());
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &deeplight::experiment::ExperimentReport) {
    eprintln!("fraction  pretrained  scratch     gap        t       p        significant");
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
        eprintln!(
            "{:<9} {:<11.4} {:<11.4} {:<+10.4} {:<8.3} {:<8.2e} {}",
            cell.fraction,
            pre,
            scr,
            pre - scr,
            cell.significance.t_test.t,
            cell.significance.t_test.p,
            cell.significance.significant
        );
    }
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let recordings = read_dataset(&args.data)?;
    let tasks_in_vocab = ckpt.params.vocabulary.tasks();
    let selected: Vec<Recording> = recordings
        .into_iter()
        .filter(|r| match &args.task {
            Some(task) => &r.task_id == task,
            None => tasks_in_vocab.contains(&r.task_id),
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::data(
            "no recordings match the checkpoint vocabulary (or --task filter)",
        ));
    }
    let metrics = evaluate(&ckpt.params, &selected)?;
    eprintln!(
        "accuracy {:.4} over {} subjects",
        metrics.mean_accuracy,
        metrics.per_subject_accuracy.len()
    );
    if let Some(path) = args.out {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(&path, serde_json::to_vec_pretty(&metrics)?)?;
        eprintln!("metrics: {}", path.display());
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let path = args.run.join("report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let report: deeplight::experiment::ExperimentReport = serde_json::from_str(&text)?;
    emit_report(&report, &args.run)?;
    print_summary(&report);
    Ok(())
}

// Keep the key-value loader linked for experiment spec files given by path.
#[allow(dead_code)]
fn load_kv(path: &Path) -> Result<KeyValueFile> {
    KeyValueFile::load(path)
}
