//! Minimal dense network engine.
//!
//! The extractor is a chain of affine layers with ReLU between them (no
//! activation after the last layer, so features may be signed). Heads are a
//! single affine layer. Gradients are derived by hand; every forward that
//! needs a backward records an explicit trace.
//!
//! All arithmetic is `f64`. Matrices are row-major `(out_dim, in_dim)`.

use rand::Rng;

use crate::error::{ensure_dim, Error, Result};

/// Access to the trainable tensors of a parameter container.
///
/// Tensor order is fixed per type, so two containers of the same shape can be
/// zipped tensor-by-tensor (gradients, optimizer updates, aggregation).
pub trait Parameterized {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Overwrites the parameters from a flat vector produced by [`flatten`](Self::flatten).
    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure_dim("assign_flat", self.num_params(), flat.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn shape_signature(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init in `±1/sqrt(in_dim)` for both weights and bias.
    pub fn init_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weights = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        ensure_dim("layer weights", in_dim * out_dim, weights.len())?;
        ensure_dim("layer bias", out_dim, bias.len())?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Config("layer parameters must be finite".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut layer = Self::zeros(dim, dim);
        for i in 0..dim {
            layer.weights[i * dim + i] = 1.0;
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("dense forward", self.in_dim, x.len())?;
        Ok(self.affine(x))
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `dW += upstream ⊗ input`, `db += upstream` into `grad` and
    /// returns `W^T upstream`.
    fn backward(&self, input: &[f64], upstream: &[f64], grad: &mut DenseLayer) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in upstream.iter().enumerate() {
            grad.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * input[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

impl Parameterized for DenseLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.weights, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Feature extractor `h = f(x)`: affine layers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    layers: Vec<DenseLayer>,
}

/// Activations recorded by [`Extractor::forward_trace`].
#[derive(Debug, Clone, Default)]
pub struct ExtractorTrace {
    // inputs[i] is the input of layer i (post-ReLU for i > 0)
    inputs: Vec<Vec<f64>>,
    // outputs[i] is the affine output of layer i, before any ReLU
    outputs: Vec<Vec<f64>>,
}

impl ExtractorTrace {
    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// The feature vector.
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Extractor {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            ensure_dim(
                "extractor layer chaining",
                pair[0].out_dim(),
                pair[1].in_dim(),
            )?;
        }
        Ok(Self { layers })
    }

    /// Randomly initialized extractor through the widths `dims[0] -> ... -> dims[last]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid extractor widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::init_uniform(w[0], w[1], rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("extractor input", self.input_dim(), x.len())?;
        let mut a = self.layers[0].affine(x);
        for layer in &self.layers[1..] {
            relu_in_place(&mut a);
            a = layer.affine(&a);
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ExtractorTrace> {
        ensure_dim("extractor input", self.input_dim(), x.len())?;
        let mut trace = ExtractorTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut input = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.affine(&input);
            trace.inputs.push(input);
            if i + 1 < self.layers.len() {
                let mut next = out.clone();
                relu_in_place(&mut next);
                input = next;
            } else {
                input = Vec::new();
            }
            trace.outputs.push(out);
        }
        Ok(trace)
    }

    /// Reverse pass for `d(loss)/dh = upstream`, accumulating into `grads`.
    /// Returns `d(loss)/dx`.
    pub fn backward(
        &self,
        trace: &ExtractorTrace,
        upstream: &[f64],
        grads: &mut Extractor,
    ) -> Result<Vec<f64>> {
        if trace.is_empty() {
            return Err(Error::Usage(
                "extractor backward called without a recorded forward pass".into(),
            ));
        }
        ensure_dim(
            "extractor trace depth",
            self.layers.len(),
            trace.outputs.len(),
        )?;
        ensure_dim("extractor upstream", self.feature_dim(), upstream.len())?;
        ensure_dim(
            "extractor gradient depth",
            self.layers.len(),
            grads.layers.len(),
        )?;
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                for (d, z) in delta.iter_mut().zip(&trace.outputs[i]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = self.layers[i].backward(&trace.inputs[i], &delta, &mut grads.layers[i]);
        }
        Ok(delta)
    }
}

impl Parameterized for Extractor {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Linear classification head `logits = W h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    layer: DenseLayer,
}

impl Head {
    pub fn new(layer: DenseLayer) -> Self {
        Self { layer }
    }

    pub fn init<R: Rng + ?Sized>(feature_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Self::new(DenseLayer::init_uniform(feature_dim, num_classes, rng))
    }

    pub fn layer(&self) -> &DenseLayer {
        &self.layer
    }

    pub fn layer_mut(&mut self) -> &mut DenseLayer {
        &mut self.layer
    }

    pub fn num_classes(&self) -> usize {
        self.layer.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.in_dim()
    }

    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("head input", self.feature_dim(), h.len())?;
        Ok(self.layer.affine(h))
    }

    /// Accumulates head gradients for `d(loss)/dlogits = upstream`; returns `d(loss)/dh`.
    pub fn backward(&self, h: &[f64], upstream: &[f64], grads: &mut Head) -> Result<Vec<f64>> {
        ensure_dim("head input", self.feature_dim(), h.len())?;
        ensure_dim("head upstream", self.num_classes(), upstream.len())?;
        Ok(self.layer.backward(h, upstream, &mut grads.layer))
    }
}

impl Parameterized for Head {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layer.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layer.tensors_mut()
    }
}

/// Single-head classifier: the shared extractor with the global head (FedAvg
/// model) or with a fine-tuned head (FedAvg+FT model).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: Extractor,
    pub head: Head,
}

impl Model {
    pub fn new(extractor: Extractor, head: Head) -> Result<Self> {
        ensure_dim("model head", extractor.feature_dim(), head.feature_dim())?;
        Ok(Self { extractor, head })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.extractor.forward(x)?;
        self.head.forward(&h)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Forward + backward of `loss(logits(x))`, accumulating into `grads`.
    pub fn accumulate_grad<F>(&self, x: &[f64], loss: F, grads: &mut Model) -> Result<f64>
    where
        F: FnOnce(&[f64]) -> Result<LossGrad>,
    {
        let trace = self.extractor.forward_trace(x)?;
        let logits = self.head.forward(trace.output())?;
        let lg = loss(&logits)?;
        let dh = self
            .head
            .backward(trace.output(), &lg.grad, &mut grads.head)?;
        self.extractor.backward(&trace, &dh, &mut grads.extractor)?;
        Ok(lg.loss)
    }

    /// Views this model as a two-head model whose personalized head is a copy of its head.
    pub fn as_two_head(&self) -> TwoHeadModel {
        TwoHeadModel {
            extractor: self.extractor.clone(),
            global_head: self.head.clone(),
            personal_head: self.head.clone(),
        }
    }
}

impl Parameterized for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.extractor.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.extractor.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// Shared extractor with a global head and a personalized head.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoHeadModel {
    pub extractor: Extractor,
    pub global_head: Head,
    pub personal_head: Head,
}

/// Forward quantities of a two-head model on one input.
#[derive(Debug, Clone)]
pub struct TwoHeadOutput {
    pub feature: Vec<f64>,
    pub global_logits: Vec<f64>,
    pub personal_logits: Vec<f64>,
}

impl TwoHeadModel {
    pub fn new(extractor: Extractor, global_head: Head, personal_head: Head) -> Result<Self> {
        ensure_dim(
            "global head",
            extractor.feature_dim(),
            global_head.feature_dim(),
        )?;
        ensure_dim(
            "personal head",
            extractor.feature_dim(),
            personal_head.feature_dim(),
        )?;
        ensure_dim(
            "head classes",
            global_head.num_classes(),
            personal_head.num_classes(),
        )?;
        Ok(Self {
            extractor,
            global_head,
            personal_head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.global_head.num_classes()
    }

    pub fn forward(&self, x: &[f64]) -> Result<TwoHeadOutput> {
        let feature = self.extractor.forward(x)?;
        let global_logits = self.global_head.forward(&feature)?;
        let personal_logits = self.personal_head.forward(&feature)?;
        Ok(TwoHeadOutput {
            feature,
            global_logits,
            personal_logits,
        })
    }

    /// `e * global + (1 - e) * personal` logits.
    pub fn ensemble_logits(&self, x: &[f64], e: f64) -> Result<Vec<f64>> {
        let out = self.forward(x)?;
        Ok(mix_logits(&out.global_logits, &out.personal_logits, e))
    }

    /// Forward + backward of `loss` applied to the e-ensembled logits.
    pub fn accumulate_ensemble_grad<F>(
        &self,
        x: &[f64],
        e: f64,
        loss: F,
        grads: &mut TwoHeadModel,
    ) -> Result<f64>
    where
        F: FnOnce(&[f64]) -> Result<LossGrad>,
    {
        let trace = self.extractor.forward_trace(x)?;
        let h = trace.output();
        let yg = self.global_head.forward(h)?;
        let yl = self.personal_head.forward(h)?;
        let lg = loss(&mix_logits(&yg, &yl, e))?;
        let dh = self.backward_heads(h, &lg.grad, e, grads)?;
        self.extractor.backward(&trace, &dh, &mut grads.extractor)?;
        Ok(lg.loss)
    }

    /// Backward through both heads for `d(loss)/d(ensembled logits) = upstream`;
    /// returns `d(loss)/dh`.
    pub(crate) fn backward_heads(
        &self,
        h: &[f64],
        upstream: &[f64],
        e: f64,
        grads: &mut TwoHeadModel,
    ) -> Result<Vec<f64>> {
        let ug: Vec<f64> = upstream.iter().map(|g| e * g).collect();
        let ul: Vec<f64> = upstream.iter().map(|g| (1.0 - e) * g).collect();
        let mut dh = self.global_head.backward(h, &ug, &mut grads.global_head)?;
        let dh_l = self
            .personal_head
            .backward(h, &ul, &mut grads.personal_head)?;
        for (a, b) in dh.iter_mut().zip(dh_l) {
            *a += b;
        }
        Ok(dh)
    }

    pub fn global_model(&self) -> Model {
        Model {
            extractor: self.extractor.clone(),
            head: self.global_head.clone(),
        }
    }
}

impl Parameterized for TwoHeadModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.extractor.tensors();
        t.extend(self.global_head.tensors());
        t.extend(self.personal_head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.extractor.tensors_mut();
        t.extend(self.global_head.tensors_mut());
        t.extend(self.personal_head.tensors_mut());
        t
    }
}

pub(crate) fn mix_logits(global: &[f64], personal: &[f64], e: f64) -> Vec<f64> {
    global
        .iter()
        .zip(personal)
        .map(|(g, l)| e * g + (1.0 - e) * l)
        .collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// A scalar loss together with its gradient with respect to the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `-log softmax(z)[label]` and its gradient `softmax(z) - onehot(label)`.
pub fn cross_entropy(z: &[f64], label: usize) -> Result<LossGrad> {
    if label >= z.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    let logp = log_softmax(z);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    Ok(LossGrad {
        loss: -logp[label],
        grad,
    })
}

/// Cross-entropy on logits shifted by `log(class_counts)`.
pub fn balanced_cross_entropy(z: &[f64], label: usize, class_counts: &[u64]) -> Result<LossGrad> {
    ensure_dim("class counts", z.len(), class_counts.len())?;
    if class_counts.contains(&0) {
        return Err(Error::Config(
            "balanced softmax needs every class count > 0".into(),
        ));
    }
    let adjusted: Vec<f64> = z
        .iter()
        .zip(class_counts)
        .map(|(v, &c)| v + (c as f64).ln())
        .collect();
    cross_entropy(&adjusted, label)
}

/// Shannon entropy (natural log) of `softmax(z)` and its gradient
/// `dH/dz_j = -p_j (log p_j + H)`.
pub fn shannon_entropy(z: &[f64]) -> LossGrad {
    let logp = log_softmax(z);
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let h = -p.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
    let h = h.max(0.0);
    let grad = p.iter().zip(&logp).map(|(p, l)| -p * (l + h)).collect();
    LossGrad { loss: h, grad }
}

/// Entropy of an explicit probability vector (zero entries contribute zero).
pub fn entropy_of_probs(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Plain SGD with coupled weight decay: `p <- p - lr * (g + wd * p)`.
pub fn sgd_step<P: Parameterized>(
    params: &mut P,
    grads: &P,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let sig = params.shape_signature();
    if sig != grads.shape_signature() {
        return Err(Error::dim(
            "sgd_step",
            params.num_params(),
            grads.num_params(),
        ));
    }
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * (gv + weight_decay * *pv);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    ensure_dim("adam grads", params.len(), grads.len())?;
    ensure_dim("adam state", params.len(), state.first_moment.len())?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / c1;
        let v_hat = state.second_moment[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
