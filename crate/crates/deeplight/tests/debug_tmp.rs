use deeplight::dataset::{generate_synthetic, SyntheticSpec};
use deeplight::experiment::*;
use deeplight::model::{DropoutSchedule, ModelConfig};
use deeplight::train::{Split, TrainConfig};
use deeplight::volume::standard_tasks;
use std::time::Instant;

fn probe(amp: f64, sigma: f64, trs: usize, pre_epochs: usize, seed: u64) { let jitter = 0.0; probe_j(amp, sigma, trs, pre_epochs, seed, jitter) }

fn probe_j(amp: f64, sigma: f64, trs: usize, pre_epochs: usize, seed: u64, jitter: f64) {
    let t0 = Instant::now();
    let corpus = generate_synthetic(&SyntheticSpec {
        subjects: 20,
        blocks_per_target: 1,
        trs_per_block: trs,
        dims: (24, 28, 24),
        noise_sigma: sigma,
        amplitude: amp,
        subject_jitter_vox: jitter,
        seed,
        ..Default::default()
    })
    .unwrap();
    let split = split_by_task(
        corpus,
        &standard_tasks(),
        &SplitSpec {
            test_task: "wm".into(),
            train_subjects: 14,
            val_subjects: 6,
            seed,
        },
    )
    .unwrap();
    let pre_cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: pre_epochs,
        dropout: DropoutSchedule::none(),
        seed: seed + 1000,
        shuffle: true,
    };
    let mut pretrain_trail = Vec::new();
    let out = run_pretraining(
        &split.pretrain_train,
        &split.pretrain_val,
        split.pretrain_vocabulary.clone(),
        ModelConfig::standard(24, 28),
        &pre_cfg,
        |m| {
            if m.split == Split::Validation {
                pretrain_trail.push(format!("{:.2}", m.mean_accuracy));
            }
        },
    )
    .unwrap();

    let ft_cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 50,
        dropout: DropoutSchedule::none(),
        seed: seed + 2000,
        shuffle: true,
    };
    let report = run_transfer_comparison(
        &out.checkpoint,
        &split.test_train,
        &split.test_val,
        &split.test_vocabulary,
        &FractionPlan {
            fractions: vec![0.01],
        },
        &ft_cfg,
        |_, _, _| {},
    )
    .unwrap();
    let cell = &report.cells[0];
    let pre = cell.pretrained.final_validation().unwrap().mean_accuracy;
    let scr = cell.scratch.final_validation().unwrap().mean_accuracy;
    println!(
        "amp{amp} s{sigma} j{jitter} trs{trs}: pretrain [{}] | fr0.01 pre {:.3} scr {:.3} gap {:+.3} p {:.2e} ({:.0}s)",
        pretrain_trail.join(" "),
        pre,
        scr,
        pre - scr,
        cell.significance.t_test.p,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
fn matrix() {
    probe_j(50.0, 4.0, 1, 6, 11, 1.5);
    probe_j(50.0, 4.0, 1, 6, 11, 2.5);
    probe_j(50.0, 4.0, 1, 6, 11, 3.5);
}
