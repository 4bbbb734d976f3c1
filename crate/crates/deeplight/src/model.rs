//! The whole-brain decoder: axial slicing, a 12-layer convolutional feature
//! extractor shared across slices, a bi-directional LSTM over the slice
//! sequence, and a softmax head sized by the label vocabulary.
//!
//! Two forward paths exist over the same kernels: a recording graph for
//! training and a allocation-light inference path; in eval mode they produce
//! bit-identical outputs because they execute the same operations in the
//! same order.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{
    glorot_normal_init, new_rng, DropoutSpec, Graph, Scalar, Tensor, Var,
};
use crate::volume::{BrainVolume, LabelVocabulary};

/// Stride schedule of the 12-layer stack; fixed by the architecture.
pub const CONV_STRIDES: [usize; 12] = [1, 1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1];

/// Kernel counts of the standard stack.
pub const STANDARD_CONV_WIDTHS: [usize; 12] = [16, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64];

/// Standard LSTM width: each direction carries 64 units.
pub const STANDARD_LSTM_HIDDEN: usize = 64;

/// Architecture hyperparameters. The standard configuration is the fixed
/// conv3 schedule with widths 16/32/64 and hidden size 64; smaller widths
/// exist for gradient-check scale models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_widths: [usize; 12],
    pub lstm_hidden: usize,
    /// Expected axial slice height (the volume X extent).
    pub input_height: usize,
    /// Expected axial slice width (the volume Y extent).
    pub input_width: usize,
    /// Initial forget-gate bias; stabilizes early training.
    pub forget_gate_bias: f64,
}

impl ModelConfig {
    pub fn standard(input_height: usize, input_width: usize) -> Self {
        ModelConfig {
            conv_widths: STANDARD_CONV_WIDTHS,
            lstm_hidden: STANDARD_LSTM_HIDDEN,
            input_height,
            input_width,
            forget_gate_bias: 1.0,
        }
    }

    /// Spatial extent after the stack: five ceil-halvings of each axis.
    pub fn output_plane(&self) -> (usize, usize) {
        let mut h = self.input_height;
        let mut w = self.input_width;
        for stride in CONV_STRIDES {
            h = crate::tensor::conv_out_extent(h, stride);
            w = crate::tensor::conv_out_extent(w, stride);
        }
        (h, w)
    }

    /// Flattened per-slice feature dimension.
    pub fn feature_dim(&self) -> usize {
        let (h, w) = self.output_plane();
        self.conv_widths[11] * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.iter().any(|&w| w == 0) || self.lstm_hidden == 0 {
            return Err(Error::config("layer widths must be >= 1"));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::config("input extents must be >= 1"));
        }
        Ok(())
    }
}

/// Per-layer dropout rates, applied in train mode only.
///
/// Convolution dropout acts on each layer's post-ReLU output; the LSTM rate
/// acts on slice embeddings entering the LSTM; the head rate acts on the
/// concatenated bi-LSTM readout entering the softmax layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutSchedule {
    pub conv: [f64; 12],
    pub lstm_input: f64,
    pub head_input: f64,
}

impl Default for DropoutSchedule {
    fn default() -> Self {
        DropoutSchedule {
            conv: [0.0, 0.0, 0.0, 0.0, 0.2, 0.2, 0.2, 0.2, 0.4, 0.4, 0.4, 0.4],
            lstm_input: 0.5,
            head_input: 0.5,
        }
    }
}

impl DropoutSchedule {
    pub fn none() -> Self {
        DropoutSchedule {
            conv: [0.0; 12],
            lstm_input: 0.0,
            head_input: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>, // [C_out, C_in, 3, 3]
    pub bias: Tensor<T>,   // [C_out]
}

#[derive(Debug, Clone)]
pub struct LstmWeights<T> {
    pub w_input: Tensor<T>,  // [4H, D]
    pub w_hidden: Tensor<T>, // [4H, H]
    pub bias: Tensor<T>,     // [4H]
}

/// All learnable weights plus the vocabulary they decode into.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub vocabulary: LabelVocabulary,
    pub conv: Vec<ConvLayer<T>>,
    pub lstm_fwd: LstmWeights<T>,
    pub lstm_bwd: LstmWeights<T>,
    pub head_weight: Tensor<T>, // [K, 2H]
    pub head_bias: Tensor<T>,   // [K]
}

/// Output of a decode: softmax probabilities and the raw logits.
#[derive(Debug, Clone)]
pub struct Decoded<T> {
    pub probs: Vec<T>,
    pub logits: Vec<T>,
}

/// Handles into a built training graph, parameter order matching
/// [`ModelParams::parameters`].
pub struct GraphForward {
    pub param_vars: Vec<Var>,
    pub logits: Var,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-normal initialization of every weight; biases start at zero
    /// except the LSTM forget gates.
    pub fn init(config: ModelConfig, vocabulary: LabelVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocabulary.size() < 2 {
            return Err(Error::config(format!(
                "vocabulary must have at least 2 classes, got {}",
                vocabulary.size()
            )));
        }
        let mut rng = new_rng(seed);
        let mut conv = Vec::with_capacity(12);
        let mut c_in = 1usize;
        for &c_out in &config.conv_widths {
            let weight = glorot_normal_init(
                vec![c_out, c_in, 3, 3],
                c_in * 9,
                c_out * 9,
                &mut rng,
            )?;
            conv.push(ConvLayer {
                weight,
                bias: Tensor::zeros(vec![c_out]),
            });
            c_in = c_out;
        }
        let feature_dim = config.feature_dim();
        let lstm_fwd = Self::init_lstm(feature_dim, &config, &mut rng)?;
        let lstm_bwd = Self::init_lstm(feature_dim, &config, &mut rng)?;
        let k = vocabulary.size();
        let head_weight =
            glorot_normal_init(vec![k, 2 * config.lstm_hidden], 2 * config.lstm_hidden, k, &mut rng)?;
        let head_bias = Tensor::zeros(vec![k]);
        Ok(ModelParams {
            config,
            vocabulary,
            conv,
            lstm_fwd,
            lstm_bwd,
            head_weight,
            head_bias,
        })
    }

    fn init_lstm(input_dim: usize, config: &ModelConfig, rng: &mut impl Rng) -> Result<LstmWeights<T>> {
        let h = config.lstm_hidden;
        let w_input = glorot_normal_init(vec![4 * h, input_dim], input_dim, h, rng)?;
        let w_hidden = glorot_normal_init(vec![4 * h, h], h, h, rng)?;
        let mut bias = Tensor::zeros(vec![4 * h]);
        for v in &mut bias.data_mut()[h..2 * h] {
            *v = T::from_f64(config.forget_gate_bias);
        }
        Ok(LstmWeights {
            w_input,
            w_hidden,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.size()
    }

    /// Named parameters in canonical order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * 12 + 6 + 2);
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &layer.weight));
            out.push((format!("conv{i}.bias"), &layer.bias));
        }
        for (prefix, lstm) in [("lstm_fwd", &self.lstm_fwd), ("lstm_bwd", &self.lstm_bwd)] {
            out.push((format!("{prefix}.w_input"), &lstm.w_input));
            out.push((format!("{prefix}.w_hidden"), &lstm.w_hidden));
            out.push((format!("{prefix}.bias"), &lstm.bias));
        }
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable view in the same canonical order.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::with_capacity(2 * 12 + 8);
        for (i, layer) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}.weight"), &mut layer.weight));
            out.push((format!("conv{i}.bias"), &mut layer.bias));
        }
        for (prefix, lstm) in [
            ("lstm_fwd", &mut self.lstm_fwd),
            ("lstm_bwd", &mut self.lstm_bwd),
        ] {
            out.push((format!("{prefix}.w_input"), &mut lstm.w_input));
            out.push((format!("{prefix}.w_hidden"), &mut lstm.w_hidden));
            out.push((format!("{prefix}.bias"), &mut lstm.bias));
        }
        out.push(("head.weight".to_string(), &mut self.head_weight));
        out.push(("head.bias".to_string(), &mut self.head_bias));
        out
    }

    /// SHA-256 over every parameter payload (little-endian f32).
    pub fn param_digest(&self) -> [u8; 32] {
        digest_tensors(self.parameters().iter().map(|(_, t)| *t))
    }

    /// SHA-256 over the conv and LSTM payloads only, excluding the head.
    pub fn feature_digest(&self) -> [u8; 32] {
        digest_tensors(
            self.parameters()
                .iter()
                .filter(|(name, _)| !name.starts_with("head."))
                .map(|(_, t)| *t),
        )
    }

    /// Re-initializes only the softmax head for a new vocabulary.
    pub fn reinit_head(&mut self, vocabulary: LabelVocabulary, seed: u64) -> Result<()> {
        if vocabulary.size() < 2 {
            return Err(Error::config(format!(
                "vocabulary must have at least 2 classes, got {}",
                vocabulary.size()
            )));
        }
        let mut rng = new_rng(seed);
        let k = vocabulary.size();
        let h2 = 2 * self.config.lstm_hidden;
        self.head_weight = glorot_normal_init(vec![k, h2], h2, k, &mut rng)?;
        self.head_bias = Tensor::zeros(vec![k]);
        self.vocabulary = vocabulary;
        Ok(())
    }

    fn check_volume(&self, volume: &BrainVolume) -> Result<()> {
        let (x, y, z) = volume.dims;
        if x != self.config.input_height || y != self.config.input_width {
            return Err(Error::dimension(format!(
                "volume slices are {x}x{y}, model expects {}x{}",
                self.config.input_height, self.config.input_width
            )));
        }
        if z == 0 {
            return Err(Error::dimension("volume has no axial slices".to_string()));
        }
        Ok(())
    }

    /// Builds the training/eval graph for one volume. Returns handles to the
    /// bound parameters (canonical order) and the logits node.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        volume: &BrainVolume,
        dropout: Option<(&DropoutSchedule, &mut dyn rand::RngCore)>,
    ) -> Result<GraphForward> {
        self.check_volume(volume)?;
        let slices = volume.dims.2;

        let batch = volume_to_slice_batch::<T>(volume);
        let mut x = g.constant(&batch);

        let mut param_vars = Vec::new();
        let mut conv_vars = Vec::with_capacity(12);
        for layer in &self.conv {
            let w = g.param(&layer.weight);
            let b = g.param(&layer.bias);
            param_vars.push(w);
            param_vars.push(b);
            conv_vars.push((w, b));
        }
        let mut lstm_vars = Vec::with_capacity(2);
        for lstm in [&self.lstm_fwd, &self.lstm_bwd] {
            let wi = g.param(&lstm.w_input);
            let wh = g.param(&lstm.w_hidden);
            let b = g.param(&lstm.bias);
            param_vars.extend([wi, wh, b]);
            lstm_vars.push((wi, wh, b));
        }
        let head_w = g.param(&self.head_weight);
        let head_b = g.param(&self.head_bias);
        param_vars.push(head_w);
        param_vars.push(head_b);

        let mut dropout = dropout;
        for (i, ((w, b), stride)) in conv_vars.iter().zip(CONV_STRIDES).enumerate() {
            x = g.conv2d_batch(x, *w, *b, stride)?;
            x = g.relu(x);
            if let Some((schedule, rng)) = dropout.as_mut() {
                if schedule.conv[i] > 0.0 {
                    x = g.dropout(x, DropoutSpec::train(schedule.conv[i]), rng)?;
                }
            }
        }

        let mut features = Vec::with_capacity(slices);
        for s in 0..slices {
            let mut f = g.gather_image(x, s)?;
            if let Some((schedule, rng)) = dropout.as_mut() {
                if schedule.lstm_input > 0.0 {
                    f = g.dropout(f, DropoutSpec::train(schedule.lstm_input), rng)?;
                }
            }
            features.push(f);
        }

        let (fwd_wi, fwd_wh, fwd_b) = lstm_vars[0];
        let (bwd_wi, bwd_wh, bwd_b) = lstm_vars[1];
        let h_fwd = g.lstm_sequence(&features, fwd_wi, fwd_wh, fwd_b, false)?;
        let h_bwd = g.lstm_sequence(&features, bwd_wi, bwd_wh, bwd_b, true)?;
        let mut readout = g.concat(h_fwd, h_bwd);
        if let Some((schedule, rng)) = dropout.as_mut() {
            if schedule.head_input > 0.0 {
                readout = g.dropout(readout, DropoutSpec::train(schedule.head_input), rng)?;
            }
        }
        let logits = g.dense(head_w, readout, head_b)?;
        Ok(GraphForward { param_vars, logits })
    }

    /// Deterministic eval-mode decode without graph bookkeeping.
    pub fn decode(&self, volume: &BrainVolume) -> Result<Decoded<T>> {
        self.check_volume(volume)?;
        let features = self.extract_feature_sequence(volume)?;
        let readout = self.bilstm_aggregate(&features)?;
        let k = self.num_classes();
        let mut logits = vec![T::ZERO; k];
        crate::tensor::kernels::matvec_acc(
            k,
            readout.len(),
            self.head_weight.data(),
            &readout,
            &mut logits,
        );
        for (l, &b) in logits.iter_mut().zip(self.head_bias.data()) {
            *l = l.add(b);
        }
        let probs = stable_softmax(&logits);
        Ok(Decoded { probs, logits })
    }

    /// Runs the conv stack over every axial slice at once and returns the
    /// per-slice flattened feature vectors, bottom to top.
    pub fn extract_feature_sequence(&self, volume: &BrainVolume) -> Result<Vec<Vec<T>>> {
        self.check_volume(volume)?;
        let slices = volume.dims.2;
        let batch = volume_to_slice_batch::<T>(volume);
        let mut data = batch.into_data();
        let (mut h, mut w) = (self.config.input_height, self.config.input_width);
        let mut c_in = 1usize;
        let mut col = Vec::new();
        for (layer, stride) in self.conv.iter().zip(CONV_STRIDES) {
            let c_out = layer.bias.numel();
            let geom =
                crate::tensor::kernels::ConvGeom::new(slices, c_in, h, w, c_out, stride);
            let mut out = vec![T::ZERO; geom.output_len()];
            crate::tensor::kernels::conv2d_forward(
                &geom,
                &data,
                layer.weight.data(),
                layer.bias.data(),
                &mut out,
                &mut col,
            );
            for v in &mut out {
                *v = v.max(T::ZERO);
            }
            data = out;
            h = geom.oh;
            w = geom.ow;
            c_in = c_out;
        }
        let plane = h * w;
        let feature_dim = c_in * plane;
        let mut features = Vec::with_capacity(slices);
        for s in 0..slices {
            let mut f = Vec::with_capacity(feature_dim);
            for c in 0..c_in {
                let base = (c * slices + s) * plane;
                f.extend_from_slice(&data[base..base + plane]);
            }
            features.push(f);
        }
        Ok(features)
    }

    /// Per-slice features of a single `[1, H, W]` slice.
    pub fn extract_features(&self, slice: &Tensor<T>) -> Result<Vec<T>> {
        let shape = slice.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::dimension(format!(
                "expected a [1, H, W] slice, got {shape:?}"
            )));
        }
        let vol = BrainVolume {
            dims: (shape[1], shape[2], 1),
            voxel_size_mm: [1.0; 3],
            data: slice.data().iter().map(|v| v.to_f64() as f32).collect(),
        };
        // A single-slice volume is laid out exactly like the slice itself.
        let mut seq = self.extract_feature_sequence_from_planes(&vol_plane_data::<T>(&vol), 1)?;
        Ok(seq.remove(0))
    }

    fn extract_feature_sequence_from_planes(
        &self,
        planes: &[T],
        slices: usize,
    ) -> Result<Vec<Vec<T>>> {
        let (mut h, mut w) = (self.config.input_height, self.config.input_width);
        let mut data = planes.to_vec();
        let mut c_in = 1usize;
        let mut col = Vec::new();
        for (layer, stride) in self.conv.iter().zip(CONV_STRIDES) {
            let c_out = layer.bias.numel();
            let geom =
                crate::tensor::kernels::ConvGeom::new(slices, c_in, h, w, c_out, stride);
            let mut out = vec![T::ZERO; geom.output_len()];
            crate::tensor::kernels::conv2d_forward(
                &geom,
                &data,
                layer.weight.data(),
                layer.bias.data(),
                &mut out,
                &mut col,
            );
            for v in &mut out {
                *v = v.max(T::ZERO);
            }
            data = out;
            h = geom.oh;
            w = geom.ow;
            c_in = c_out;
        }
        let plane = h * w;
        let mut features = Vec::with_capacity(slices);
        for s in 0..slices {
            let mut f = Vec::with_capacity(c_in * plane);
            for c in 0..c_in {
                let base = (c * slices + s) * plane;
                f.extend_from_slice(&data[base..base + plane]);
            }
            features.push(f);
        }
        Ok(features)
    }

    /// Bi-directional readout: final hidden states of the forward and
    /// reverse passes, concatenated.
    pub fn bilstm_aggregate(&self, features: &[Vec<T>]) -> Result<Vec<T>> {
        if features.is_empty() {
            return Err(Error::data("bilstm_aggregate needs at least one slice"));
        }
        let fwd = lstm_run(&self.lstm_fwd, self.config.lstm_hidden, features, false)?;
        let bwd = lstm_run(&self.lstm_bwd, self.config.lstm_hidden, features, true)?;
        let mut out = fwd;
        out.extend(bwd);
        Ok(out)
    }
}

fn vol_plane_data<T: Scalar>(volume: &BrainVolume) -> Vec<T> {
    volume_to_slice_batch::<T>(volume).into_data()
}

/// Lays a volume out as a `[1, Z, X, Y]` slice batch: slice z, row x,
/// column y, i.e. the X x Y axial plane at each z in bottom-to-top order.
pub fn volume_to_slice_batch<T: Scalar>(volume: &BrainVolume) -> Tensor<T> {
    let (nx, ny, nz) = volume.dims;
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                data.push(T::from_f64(volume.at(x, y, z) as f64));
            }
        }
    }
    Tensor::new(vec![1, nz, nx, ny], data).expect("shape matches by construction")
}

/// Ordered axial slices of a volume, each `[1, X, Y]`.
pub fn slice_volume<T: Scalar>(volume: &BrainVolume) -> Vec<Tensor<T>> {
    let (nx, ny, nz) = volume.dims;
    (0..nz)
        .map(|z| {
            let mut data = Vec::with_capacity(nx * ny);
            for x in 0..nx {
                for y in 0..ny {
                    data.push(T::from_f64(volume.at(x, y, z) as f64));
                }
            }
            Tensor::new(vec![1, nx, ny], data).expect("shape matches")
        })
        .collect()
}

/// Rebuilds a volume from its ordered axial slices.
pub fn reassemble_slices<T: Scalar>(
    slices: &[Tensor<T>],
    voxel_size_mm: [f64; 3],
) -> Result<BrainVolume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::data("cannot reassemble zero slices"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::dimension(format!("slices must be [1, X, Y], got {shape:?}")));
    }
    let (nx, ny, nz) = (shape[1], shape[2], slices.len());
    let mut vol = BrainVolume::zeros((nx, ny, nz), voxel_size_mm);
    for (z, slice) in slices.iter().enumerate() {
        if slice.shape() != shape {
            return Err(Error::dimension("inconsistent slice shapes".to_string()));
        }
        for x in 0..nx {
            for y in 0..ny {
                let idx = vol.index(x, y, z);
                vol.data[idx] = slice.data()[x * ny + y].to_f64() as f32;
            }
        }
    }
    Ok(vol)
}

/// Numerically stabilized softmax (max subtraction).
pub fn stable_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let zmax = z.iter().copied().fold(z[0], |a, b| a.max(b));
    let exps: Vec<T> = z.iter().map(|&v| v.sub(zmax).exp()).collect();
    let denom: T = exps.iter().copied().sum();
    exps.iter().map(|&e| e.div(denom)).collect()
}

/// Direct LSTM evaluation matching the graph op arithmetic exactly.
fn lstm_run<T: Scalar>(
    weights: &LstmWeights<T>,
    hidden: usize,
    features: &[Vec<T>],
    reverse: bool,
) -> Result<Vec<T>> {
    use crate::tensor::kernels::{matvec_acc, sigmoid};
    let d = features[0].len();
    if weights.w_input.shape() != [4 * hidden, d] {
        return Err(Error::dimension(format!(
            "LSTM input weights are {:?}, features have dim {d}",
            weights.w_input.shape()
        )));
    }
    let mut h = vec![T::ZERO; hidden];
    let mut c = vec![T::ZERO; hidden];
    let order: Vec<&Vec<T>> = if reverse {
        features.iter().rev().collect()
    } else {
        features.iter().collect()
    };
    for x in order {
        let mut pre = vec![T::ZERO; 4 * hidden];
        matvec_acc(4 * hidden, d, weights.w_input.data(), x, &mut pre);
        let mut rec = vec![T::ZERO; 4 * hidden];
        matvec_acc(4 * hidden, hidden, weights.w_hidden.data(), &h, &mut rec);
        let gates: Vec<T> = pre
            .iter()
            .zip(&rec)
            .zip(weights.bias.data())
            .map(|((&p, &r), &b)| p.add(r).add(b))
            .collect();
        for j in 0..hidden {
            let i_act = sigmoid(gates[j]);
            let f_act = sigmoid(gates[hidden + j]);
            let g_act = gates[2 * hidden + j].tanh();
            let o_act = sigmoid(gates[3 * hidden + j]);
            let new_c = i_act.mul(g_act).add(f_act.mul(c[j]));
            c[j] = new_c;
            h[j] = o_act.mul(new_c.tanh());
        }
    }
    Ok(h)
}

fn digest_tensors<'a, T: Scalar + 'a>(tensors: impl Iterator<Item = &'a Tensor<T>>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for t in tensors {
        for v in t.data() {
            hasher.update((v.to_f64() as f32).to_le_bytes());
        }
    }
    hasher.finalize().into()
}
