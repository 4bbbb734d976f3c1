//! End-to-end gradient verification: reverse-mode gradients of the full
//! decoder against central finite differences, in double precision.

use deeplight::model::{ModelConfig, ModelParams};
use deeplight::tensor::Graph;
use deeplight::volume::{BrainVolume, LabelVocabulary, TaskSpec};

fn tiny_vocab(k: usize) -> LabelVocabulary {
    let names: Vec<String> = (0..k).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    LabelVocabulary::from_tasks(&[TaskSpec::new("toy", &refs)])
}

/// Loss of the downscaled model on one volume, as a pure function of the
/// parameter vector (the finite-difference oracle evaluates this).
fn loss_of(model: &ModelParams<f64>, volume: &BrainVolume, target: usize) -> f64 {
    let mut g = Graph::<f64>::new();
    let fwd = model.forward_graph(&mut g, volume, None).unwrap();
    let (loss, _) = g.softmax_cross_entropy(fwd.logits, target).unwrap();
    g.value(loss)[0]
}

#[test]
fn full_model_gradients_match_central_differences() {
    // Downscaled end-to-end model: volume 8x10x6, conv widths 2/4/8,
    // hidden size 4, 3 classes.
    let config = ModelConfig {
        conv_widths: [2, 2, 2, 2, 4, 4, 4, 4, 8, 8, 8, 8],
        lstm_hidden: 4,
        input_height: 8,
        input_width: 10,
        forget_gate_bias: 1.0,
    };
    let mut model = ModelParams::<f64>::init(config, tiny_vocab(3), 20260809).unwrap();
    let n = 8 * 10 * 6;
    let volume = BrainVolume::new(
        (8, 10, 6),
        [2.0; 3],
        (0..n)
            .map(|i| ((i * 29 % 83) as f32) * 0.09 - 2.0)
            .collect(),
    )
    .unwrap();
    let target = 1usize;

    // Reverse-mode gradients for every parameter.
    let mut g = Graph::<f64>::new();
    let fwd = model.forward_graph(&mut g, &volume, None).unwrap();
    let (loss, _) = g.softmax_cross_entropy(fwd.logits, target).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = fwd
        .param_vars
        .iter()
        .map(|&v| g.grad(v).unwrap().to_vec())
        .collect();

    let names: Vec<String> = model
        .parameters()
        .iter()
        .map(|(name, _)| name.clone())
        .collect();
    let total: usize = model.parameters().iter().map(|(_, t)| t.numel()).sum();
    println!("checking {total} parameters across {} tensors", names.len());

    let h = 1e-3;
    let mut checked = 0usize;
    let mut worst: (f64, String, usize) = (0.0, String::new(), 0);
    for (pi, name) in names.iter().enumerate() {
        let numel = analytic[pi].len();
        for j in 0..numel {
            let original = {
                let mut params = model.parameters_mut();
                let value = params[pi].1.data()[j];
                params[pi].1.data_mut()[j] = value + h;
                value
            };
            let up = loss_of(&model, &volume, target);
            {
                let mut params = model.parameters_mut();
                params[pi].1.data_mut()[j] = original - h;
            }
            let down = loss_of(&model, &volume, target);
            {
                let mut params = model.parameters_mut();
                params[pi].1.data_mut()[j] = original;
            }
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[pi][j];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            let rel = (ad - fd).abs() / denom;
            if rel > worst.0 {
                worst = (rel, name.clone(), j);
            }
            assert!(
                rel <= 1e-4,
                "{name}[{j}]: analytic {ad:.3e} vs fd {fd:.3e} (rel {rel:.2e})"
            );
            checked += 1;
        }
    }
    println!(
        "all {checked} gradients within 1e-4 (worst {:.2e} at {}[{}])",
        worst.0, worst.1, worst.2
    );
}

#[test]
fn four_slice_toy_volume_gradcheck() {
    // The minimal sequence case: Z = 4 slices through the full graph.
    let config = ModelConfig {
        conv_widths: [2, 2, 2, 2, 2, 2, 2, 2, 4, 4, 4, 4],
        lstm_hidden: 3,
        input_height: 6,
        input_width: 7,
        forget_gate_bias: 1.0,
    };
    let mut model = ModelParams::<f64>::init(config, tiny_vocab(2), 99).unwrap();
    let n = 6 * 7 * 4;
    let volume = BrainVolume::new(
        (6, 7, 4),
        [2.0; 3],
        (0..n).map(|i| ((i * 17 % 41) as f32) * 0.1 - 1.5).collect(),
    )
    .unwrap();

    let mut g = Graph::<f64>::new();
    let fwd = model.forward_graph(&mut g, &volume, None).unwrap();
    let (loss, _) = g.softmax_cross_entropy(fwd.logits, 0).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = fwd
        .param_vars
        .iter()
        .map(|&v| g.grad(v).unwrap().to_vec())
        .collect();

    let h = 1e-3;
    let names: Vec<String> = model
        .parameters()
        .iter()
        .map(|(name, _)| name.clone())
        .collect();
    for (pi, name) in names.iter().enumerate() {
        for j in 0..analytic[pi].len() {
            let original = {
                let mut params = model.parameters_mut();
                let value = params[pi].1.data()[j];
                params[pi].1.data_mut()[j] = value + h;
                value
            };
            let up = loss_of(&model, &volume, 0);
            {
                let mut params = model.parameters_mut();
                params[pi].1.data_mut()[j] = original - h;
            }
            let down = loss_of(&model, &volume, 0);
            {
                let mut params = model.parameters_mut();
                params[pi].1.data_mut()[j] = original;
            }
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[pi][j];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            assert!(
                (ad - fd).abs() / denom <= 1e-4,
                "{name}[{j}]: analytic {ad:.3e} vs fd {fd:.3e}"
            );
        }
    }
}
