//! Reverse-mode autodiff over a flat operation tape.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Each
//! operation appends a node that records its parents, so node ids form a
//! topological order and the backward sweep is a single reverse scan.
//! Graphs are cheap and short-lived: the trainer builds one per example.

use rand::Rng;

use super::kernels::{self, ConvGeom, KERNEL};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Dropout behaviour switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Rate plus mode; in eval mode dropout is the identity.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: DropoutMode,
}

impl DropoutSpec {
    pub fn train(rate: f64) -> Self {
        DropoutSpec {
            rate,
            mode: DropoutMode::Train,
        }
    }

    pub fn eval(rate: f64) -> Self {
        DropoutSpec {
            rate,
            mode: DropoutMode::Eval,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu {
        x: Var,
    },
    MatVec {
        w: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    /// Extracts the flattened `[C*h*w]` feature vector of one batch image
    /// from a `[C, S, h, w]` map.
    GatherImage {
        x: Var,
        image: usize,
        batch: usize,
        plane: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

impl<T: Scalar> Node<T> {
    fn ensure_grad(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::ZERO; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }
}

/// Recording tape for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    col_scratch: Vec<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            col_scratch: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a tensor that does not need a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Inserts a tensor whose gradient will be populated by `backward`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient buffer of `v`, if one was populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Same-padded 3x3 convolution of a single `[C_in, H, W]` image.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let shape = self.shape(input);
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "conv2d expects [C, H, W] input, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let batched = self.reshape(input, vec![c, 1, h, w])?;
        let out = self.conv2d_batch(batched, weight, bias, stride)?;
        let out_shape = self.shape(out).to_vec();
        self.reshape(out, vec![out_shape[0], out_shape[2], out_shape[3]])
    }

    /// Same-padded 3x3 convolution over a `[C_in, S, H, W]` slice batch.
    pub fn conv2d_batch(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        if !matches!(stride, 1 | 2) {
            return Err(Error::config(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let b_shape = self.shape(bias).to_vec();
        if in_shape.len() != 4 {
            return Err(Error::dimension(format!(
                "conv2d_batch expects [C, S, H, W] input, got {in_shape:?}"
            )));
        }
        if w_shape.len() != 4 || w_shape[2] != KERNEL || w_shape[3] != KERNEL {
            return Err(Error::dimension(format!(
                "conv kernels must be [C_out, C_in, 3, 3], got {w_shape:?}"
            )));
        }
        if w_shape[1] != in_shape[0] {
            return Err(Error::dimension(format!(
                "input has {} channels but kernels expect {}",
                in_shape[0], w_shape[1]
            )));
        }
        if b_shape != [w_shape[0]] {
            return Err(Error::dimension(format!(
                "conv bias must be [{}], got {b_shape:?}",
                w_shape[0]
            )));
        }
        let geom = ConvGeom::new(in_shape[1], in_shape[0], in_shape[2], in_shape[3], w_shape[0], stride);
        let mut out = vec![T::ZERO; geom.output_len()];
        let mut col = std::mem::take(&mut self.col_scratch);
        kernels::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            self.value(bias),
            &mut out,
            &mut col,
        );
        self.col_scratch = col;
        let requires = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            vec![geom.c_out, geom.batch, geom.oh, geom.ow],
            out,
            requires,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Element-wise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).iter().map(|&v| v.max(T::ZERO)).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push(shape, data, requires, Op::Relu { x })
    }

    /// `W x` with `W [rows x cols]`, `x [cols]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let w_shape = self.shape(w).to_vec();
        let x_len = self.value(x).len();
        if w_shape.len() != 2 || w_shape[1] != x_len {
            return Err(Error::dimension(format!(
                "matvec shape mismatch: weights {w_shape:?} vs input [{x_len}]"
            )));
        }
        let (rows, cols) = (w_shape[0], w_shape[1]);
        let mut out = vec![T::ZERO; rows];
        kernels::matvec_acc(rows, cols, self.value(w), self.value(x), &mut out);
        let requires = self.requires(w) || self.requires(x);
        Ok(self.push(vec![rows], out, requires, Op::MatVec { w, x, rows, cols }))
    }

    /// Affine map `W x + b`.
    pub fn dense(&mut self, weight: Var, x: Var, bias: Var) -> Result<Var> {
        let y = self.matvec(weight, x)?;
        self.add(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::dimension(format!("add length mismatch: {la} vs {lb}")));
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x.add(y))
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, requires, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::dimension(format!("mul length mismatch: {la} vs {lb}")));
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x.mul(y))
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, requires, Op::Mul { a, b }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push(shape, data, requires, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push(shape, data, requires, Op::Tanh { x })
    }

    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let total = self.value(x).len();
        if offset + len > total {
            return Err(Error::dimension(format!(
                "slice {offset}..{} out of range for length {total}",
                offset + len
            )));
        }
        let data = self.value(x)[offset..offset + len].to_vec();
        let requires = self.requires(x);
        Ok(self.push(vec![len], data, requires, Op::Slice { x, offset }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut data = self.value(a).to_vec();
        data.extend_from_slice(self.value(b));
        let len = data.len();
        let requires = self.requires(a) || self.requires(b);
        self.push(vec![len], data, requires, Op::Concat { a, b })
    }

    /// Reinterprets the data with a new shape of identical element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::dimension(format!(
                "cannot reshape {} elements into {shape:?}",
                self.value(x).len()
            )));
        }
        let data = self.value(x).to_vec();
        let requires = self.requires(x);
        // Slice with offset 0 is an exact pass-through for gradients.
        Ok(self.push(shape, data, requires, Op::Slice { x, offset: 0 }))
    }

    /// Flattened feature vector `[C*h*w]` of image `image` from a
    /// `[C, S, h, w]` map.
    pub fn gather_image(&mut self, x: Var, image: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dimension(format!(
                "gather_image expects [C, S, h, w], got {shape:?}"
            )));
        }
        let (c, batch, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if image >= batch {
            return Err(Error::dimension(format!(
                "image index {image} out of range for batch {batch}"
            )));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let base = (ch * batch + image) * plane;
            data.extend_from_slice(&src[base..base + plane]);
        }
        let requires = self.requires(x);
        Ok(self.push(
            vec![c * plane],
            data,
            requires,
            Op::GatherImage {
                x,
                image,
                batch,
                plane,
            },
        ))
    }

    /// Inverted dropout: zeroes elements with probability `rate` and scales
    /// survivors by `1/(1-rate)`. Identity in eval mode.
    pub fn dropout(&mut self, x: Var, spec: DropoutSpec, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&spec.rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0, 1), got {}",
                spec.rate
            )));
        }
        if spec.mode == DropoutMode::Eval || spec.rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - spec.rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < spec.rate {
                    T::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<T> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v.mul(m))
            .collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        Ok(self.push(shape, data, requires, Op::Dropout { x, mask }))
    }

    /// Numerically stabilized softmax + negative log likelihood.
    ///
    /// Returns the scalar loss node and a snapshot of the probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<(Var, Vec<T>)> {
        let k = self.value(logits).len();
        if k < 2 {
            return Err(Error::dimension(format!(
                "softmax needs at least 2 classes, got {k}"
            )));
        }
        if target >= k {
            return Err(Error::data(format!(
                "target class {target} out of range for {k} classes"
            )));
        }
        let z = self.value(logits);
        let zmax = z.iter().copied().fold(z[0], |a, b| a.max(b));
        let exps: Vec<T> = z.iter().map(|&v| v.sub(zmax).exp()).collect();
        let denom: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e.div(denom)).collect();
        let loss = probs[target].ln().neg();
        let requires = self.requires(logits);
        let node = self.push(
            vec![1],
            vec![loss],
            requires,
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs: probs.clone(),
            },
        );
        Ok((node, probs))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).iter().copied().sum();
        let requires = self.requires(x);
        self.push(vec![1], vec![total], requires, Op::Sum { x })
    }

    /// Runs a standard LSTM cell over `inputs` and returns the final hidden
    /// state. Gate layout in the stacked weights is `[input, forget, cell,
    /// output]`. Initial hidden and cell state are zero.
    pub fn lstm_sequence(
        &mut self,
        inputs: &[Var],
        w_input: Var,
        w_hidden: Var,
        bias: Var,
        reverse: bool,
    ) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::data("lstm_sequence requires a non-empty sequence".to_string()));
        }
        let w_in_shape = self.shape(w_input).to_vec();
        let w_h_shape = self.shape(w_hidden).to_vec();
        if w_h_shape.len() != 2 || w_in_shape.len() != 2 || w_in_shape[0] != w_h_shape[0] {
            return Err(Error::dimension(format!(
                "inconsistent LSTM weights: {w_in_shape:?} vs {w_h_shape:?}"
            )));
        }
        let hidden = w_h_shape[1];
        if w_h_shape[0] != 4 * hidden {
            return Err(Error::dimension(format!(
                "stacked LSTM weights must be [4H x H], got {w_h_shape:?}"
            )));
        }
        if self.value(bias).len() != 4 * hidden {
            return Err(Error::dimension(format!(
                "LSTM bias must be [4H], got [{}]",
                self.value(bias).len()
            )));
        }

        let zero = Tensor::zeros(vec![hidden]);
        let mut h = self.constant(&zero);
        let mut c = self.constant(&zero);

        let order: Vec<Var> = if reverse {
            inputs.iter().rev().copied().collect()
        } else {
            inputs.to_vec()
        };
        for x in order {
            let pre = self.matvec(w_input, x)?;
            let rec = self.matvec(w_hidden, h)?;
            let lin = self.add(pre, rec)?;
            let gates = self.add(lin, bias)?;
            let i_gate = self.slice(gates, 0, hidden)?;
            let f_gate = self.slice(gates, hidden, hidden)?;
            let g_cand = self.slice(gates, 2 * hidden, hidden)?;
            let o_gate = self.slice(gates, 3 * hidden, hidden)?;
            let i_act = self.sigmoid(i_gate);
            let f_act = self.sigmoid(f_gate);
            let g_act = self.tanh(g_cand);
            let o_act = self.sigmoid(o_gate);
            let ig = self.mul(i_act, g_act)?;
            let fc = self.mul(f_act, c)?;
            c = self.add(ig, fc)?;
            let ct = self.tanh(c);
            h = self.mul(o_act, ct)?;
        }
        Ok(h)
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Errors if called a second time on the same graph; use
    /// [`Graph::backward_accumulate`] to sum gradients across multiple calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::numeric(
                "backward already ran on this graph; call backward_accumulate to sum gradients",
            ));
        }
        self.backward_accumulate(loss)
    }

    /// Like [`Graph::backward`] but explicitly permits accumulation into
    /// gradients left by a previous sweep.
    pub fn backward_accumulate(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dimension(format!(
                "backward requires a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        // Per-sweep gradient workspace, merged into the persistent node
        // gradients at the end so repeated sweeps accumulate instead of
        // re-propagating earlier seeds.
        let mut ws: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        ws[loss.0] = Some(vec![T::ONE]);

        let mut col = std::mem::take(&mut self.col_scratch);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = ws[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let geom = *geom;
                    let mut gi = self.take_ws(&mut ws, input);
                    let mut gw = self.take_ws(&mut ws, weight);
                    let mut gb = self.take_ws(&mut ws, bias);
                    kernels::conv2d_backward(
                        &geom,
                        &self.nodes[input.0].data,
                        &self.nodes[weight.0].data,
                        &gout,
                        gi.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                        &mut col,
                    );
                    put_ws(&mut ws, input, gi);
                    put_ws(&mut ws, weight, gw);
                    put_ws(&mut ws, bias, gb);
                }
                Op::Relu { x } => {
                    let x = *x;
                    if let Some(mut g) = self.take_ws(&mut ws, x) {
                        for ((gv, &go), xv) in
                            g.iter_mut().zip(&gout).zip(&self.nodes[x.0].data)
                        {
                            if xv.to_f64() > 0.0 {
                                *gv = gv.add(go);
                            }
                        }
                        put_ws(&mut ws, x, Some(g));
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (w, x, rows, cols) = (*w, *x, *rows, *cols);
                    if let Some(mut gx) = self.take_ws(&mut ws, x) {
                        kernels::matvec_transpose_acc(
                            rows,
                            cols,
                            &self.nodes[w.0].data,
                            &gout,
                            &mut gx,
                        );
                        put_ws(&mut ws, x, Some(gx));
                    }
                    if let Some(mut gw) = self.take_ws(&mut ws, w) {
                        // dW[r, c] += gout[r] * x[c]
                        let x_vals = &self.nodes[x.0].data;
                        for (gw_row, &go) in gw.chunks_exact_mut(cols).zip(&gout) {
                            if go.to_f64() == 0.0 {
                                continue;
                            }
                            for (gwv, &xv) in gw_row.iter_mut().zip(x_vals) {
                                *gwv = go.mul_add(xv, *gwv);
                            }
                        }
                        put_ws(&mut ws, w, Some(gw));
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for p in [a, b] {
                        if let Some(mut g) = self.take_ws(&mut ws, p) {
                            for (gv, &go) in g.iter_mut().zip(&gout) {
                                *gv = gv.add(go);
                            }
                            put_ws(&mut ws, p, Some(g));
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if let Some(mut g) = self.take_ws(&mut ws, a) {
                        for ((gv, &go), &bv) in
                            g.iter_mut().zip(&gout).zip(&self.nodes[b.0].data)
                        {
                            *gv = go.mul_add(bv, *gv);
                        }
                        put_ws(&mut ws, a, Some(g));
                    }
                    if let Some(mut g) = self.take_ws(&mut ws, b) {
                        for ((gv, &go), &av) in
                            g.iter_mut().zip(&gout).zip(&self.nodes[a.0].data)
                        {
                            *gv = go.mul_add(av, *gv);
                        }
                        put_ws(&mut ws, b, Some(g));
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    if let Some(mut g) = self.take_ws(&mut ws, x) {
                        for ((gv, &go), &y) in g.iter_mut().zip(&gout).zip(&self.nodes[id].data)
                        {
                            *gv = gv.add(go.mul(y.mul(T::ONE.sub(y))));
                        }
                        put_ws(&mut ws, x, Some(g));
                    }
                }
                Op::Tanh { x } => {
                    let x = *x;
                    if let Some(mut g) = self.take_ws(&mut ws, x) {
                        for ((gv, &go), &y) in g.iter_mut().zip(&gout).zip(&self.nodes[id].data)
                        {
                            *gv = gv.add(go.mul(T::ONE.sub(y.mul(y))));
                        }
                        put_ws(&mut ws, x, Some(g));
                    }
                }
                Op::Slice { x, offset } => {
                    let (x, offset) = (*x, *offset);
                    if let Some(mut g) = self.take_ws(&mut ws, x) {
                        for (gv, &go) in g[offset..offset + gout.len()].iter_mut().zip(&gout) {
                            *gv = gv.add(go);
                        }
                        put_ws(&mut ws, x, Some(g));
                    }
                }
                Op::Concat { a, b } => {
                    let (a, b) = (*a, *b);
                    let la = self.nodes[a.0].data.len();
                    if let Some(mut g) = self.take_ws(&mut ws, a) {
                        for (gv, &go) in g.iter_mut().zip(&gout[..la]) {
                            *gv = gv.add(go);
                        }
                        put_ws(&mut ws, a, Some(g));
                    }
                    if let Some(mut g) = self.take_ws(&mut ws, b) {
                        for (gv, &go) in g.iter_mut().zip(&gout[la..]) {
                            *gv = gv.add(go);
                        }
                        put_ws(&mut ws, b, Some(g));
                    }
                }
                Op::GatherImage {
                    x,
                    image,
                    batch,
                    plane,
                } => {
                    let (x, image, batch, plane) = (*x, *image, *batch, *plane);
                    if let Some(mut g) = self.take_ws(&mut ws, x) {
                        let channels = gout.len() / plane;
                        for ch in 0..channels {
                            let base = (ch * batch + image) * plane;
                            let src = &gout[ch * plane..(ch + 1) * plane];
                            for (gv, &go) in g[base..base + plane].iter_mut().zip(src) {
                                *gv = gv.add(go);
                            }
                        }
                        put_ws(&mut ws, x, Some(g));
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    if let Some(mut g) = self.take_ws(&mut ws, x) {
                        for ((gv, &go), &m) in g.iter_mut().zip(&gout).zip(mask) {
                            *gv = go.mul_add(m, *gv);
                        }
                        put_ws(&mut ws, x, Some(g));
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let (logits, target) = (*logits, *target);
                    if let Some(mut g) = self.take_ws(&mut ws, logits) {
                        let go = gout[0];
                        for (k, (gv, &p)) in g.iter_mut().zip(probs).enumerate() {
                            let delta = if k == target { T::ONE } else { T::ZERO };
                            *gv = gv.add(go.mul(p.sub(delta)));
                        }
                        put_ws(&mut ws, logits, Some(g));
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    if let Some(mut g) = self.take_ws(&mut ws, x) {
                        let go = gout[0];
                        for gv in g.iter_mut() {
                            *gv = gv.add(go);
                        }
                        put_ws(&mut ws, x, Some(g));
                    }
                }
            }
            ws[id] = Some(gout);
        }
        self.col_scratch = col;

        // Merge the sweep into persistent gradients; leaves that received no
        // contribution still get zeros so `grad` is Some for every
        // requires_grad input.
        for (node, sweep) in self.nodes.iter_mut().zip(ws) {
            if !node.requires_grad {
                continue;
            }
            match (node.grad.as_mut(), sweep) {
                (Some(acc), Some(g)) => {
                    for (av, gv) in acc.iter_mut().zip(g) {
                        *av = av.add(gv);
                    }
                }
                (None, Some(g)) => node.grad = Some(g),
                (None, None) if matches!(node.op, Op::Leaf) => {
                    node.grad = Some(vec![T::ZERO; node.data.len()]);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Takes parent `v`'s workspace buffer for accumulation, allocating zeros
    /// on first touch. Returns `None` when the parent does not need a
    /// gradient.
    fn take_ws(&self, ws: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            ws[v.0]
                .take()
                .unwrap_or_else(|| vec![T::ZERO; self.nodes[v.0].data.len()]),
        )
    }
}

/// Returns a taken workspace buffer, summing if another path already wrote
/// one back (possible only when an op's parents alias).
fn put_ws<T: Scalar>(ws: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    let Some(buf) = buf else { return };
    match &mut ws[v.0] {
        Some(existing) => {
            for (e, b) in existing.iter_mut().zip(buf) {
                *e = e.add(b);
            }
        }
        slot @ None => *slot = Some(buf),
    }
}
