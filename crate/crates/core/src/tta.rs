//! Test-time robust personalization.
//!
//! For every test sample the head-ensemble weight `e` (a softmax over two
//! scalars, started at 0.5) is optimized with Adam against an unsupervised
//! loss built from
//!
//! - entropy of the ensembled prediction (EM),
//! - a feature-alignment term pulling `e` toward the head whose descriptor is
//!   closer to the history-smoothed test feature (FA),
//! - their mix weighted by the cosine similarity of the two heads'
//!   probability vectors (SLW).
//!
//! The history descriptor is an EMA over raw test features and carries over
//! from sample to sample within a stream. Optionally the whole two-head model
//! is then fine-tuned on the sample by marginal-entropy minimization over
//! augmented views, with `e` held fixed (the "plus" variant). All adaptation
//! is episodic: trained weights are never modified.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::nn::{
    adam_step, argmax, mix_logits, shannon_entropy, softmax, AdamState, Model, Parameterized,
    TwoHeadModel,
};
use crate::rng::RngStream;

/// Two learnable scalars; `e = softmax(a_g, a_l)[0]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnsembleState {
    pub a_g: f64,
    pub a_l: f64,
}

impl EnsembleState {
    pub fn e(&self) -> f64 {
        1.0 / (1.0 + (self.a_l - self.a_g).exp())
    }

    /// `(de/da_g, de/da_l)`.
    pub fn de_da(&self) -> [f64; 2] {
        let e = self.e();
        let d = e * (1.0 - e);
        [d, -d]
    }
}

/// EMA of raw test features; unset until the first sample of a stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistoryState {
    feature: Option<Vec<f64>>,
}

impl HistoryState {
    pub fn get(&self) -> Option<&[f64]> {
        self.feature.as_deref()
    }

    pub fn is_set(&self) -> bool {
        self.feature.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Slw,
    EmOnly,
    FaOnly,
    FixedHalf,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Slw => "slw",
            LossMode::EmOnly => "em_only",
            LossMode::FaOnly => "fa_only",
            LossMode::FixedHalf => "fixed_half",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub e_steps: usize,
    pub e_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub loss_mode: LossMode,
    pub use_history: bool,
    pub batch_wise: bool,
    pub batch_size: usize,
    /// Skip optimization and use this `e` for every sample.
    pub pinned_e: Option<f64>,
    pub ft_enabled: bool,
    pub ft_steps: usize,
    pub ft_lr: f64,
    pub ft_augments: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            e_steps: 20,
            e_lr: 0.1,
            alpha: 0.1,
            beta: 0.1,
            loss_mode: LossMode::Slw,
            use_history: true,
            batch_wise: false,
            batch_size: 32,
            pinned_e: None,
            ft_enabled: false,
            ft_steps: 3,
            ft_lr: 5e-4,
            ft_augments: 16,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_steps == 0 {
            return Err(Error::Config("e_steps must be >= 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if let Some(e) = self.pinned_e {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!(
                    "pinned_e must be in [0, 1], got {e}"
                )));
            }
        }
        if self.batch_size == 0 || self.ft_augments == 0 {
            return Err(Error::Config(
                "batch_size and ft_augments must be >= 1".into(),
            ));
        }
        if !(self.e_lr >= 0.0) || !(self.ft_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// One stochastic input transform used by marginal-entropy fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Identity,
    /// Additive `N(0, (0.1 sigma)^2)` per coordinate.
    GaussJitter,
    /// Scale by `1 ± 0.1`.
    FeatureScale,
    /// Zero each coordinate with probability 0.1.
    FeatureDropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub family: Vec<Augmentation>,
    pub sigma_data: f64,
}

impl AugmentationSpec {
    pub fn new(sigma_data: f64) -> Self {
        Self {
            family: vec![
                Augmentation::Identity,
                Augmentation::GaussJitter,
                Augmentation::FeatureScale,
                Augmentation::FeatureDropout,
            ],
            sigma_data,
        }
    }

    pub fn identity_only() -> Self {
        Self {
            family: vec![Augmentation::Identity],
            sigma_data: 0.0,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, aug: Augmentation, x: &[f64], rng: &mut R) -> Vec<f64> {
        match aug {
            Augmentation::Identity => x.to_vec(),
            Augmentation::GaussJitter => x
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + 0.1 * self.sigma_data * z
                })
                .collect(),
            Augmentation::FeatureScale => {
                let f = if rng.random::<bool>() { 1.1 } else { 0.9 };
                x.iter().map(|v| v * f).collect()
            }
            Augmentation::FeatureDropout => x
                .iter()
                .map(|&v| if rng.random::<f64>() < 0.1 { 0.0 } else { v })
                .collect(),
        }
    }

    /// `count` augmented views, transforms drawn uniformly from the family.
    pub fn views<R: Rng + ?Sized>(&self, x: &[f64], count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let aug = self.family[rng.random_range(0..self.family.len())];
                self.apply(aug, x, rng)
            })
            .collect()
    }
}

/// Loss value with its derivative in `e` and in `(a_g, a_l)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleLoss {
    pub loss: f64,
    pub de: f64,
    pub grad: [f64; 2],
}

impl EnsembleLoss {
    fn new(loss: f64, de: f64, ens: &EnsembleState) -> Self {
        let [dg, dl] = ens.de_da();
        Self {
            loss,
            de,
            grad: [de * dg, de * dl],
        }
    }
}

pub fn ensemble_logits(global: &[f64], personal: &[f64], e: f64) -> Result<Vec<f64>> {
    ensure_dim("ensemble logits", global.len(), personal.len())?;
    Ok(mix_logits(global, personal, e))
}

/// Entropy of the ensembled prediction; heads are constants.
pub fn em_loss(global: &[f64], personal: &[f64], ens: &EnsembleState) -> Result<EnsembleLoss> {
    let y = ensemble_logits(global, personal, ens.e())?;
    let h = shannon_entropy(&y);
    let de = h
        .grad
        .iter()
        .zip(global.iter().zip(personal))
        .map(|(g, (a, b))| g * (a - b))
        .sum();
    Ok(EnsembleLoss::new(h.loss, de, ens))
}

/// `beta * h + (1 - beta) * history`, or `h` itself while the history is unset.
pub fn smooth_feature(h: &[f64], history: &HistoryState, beta: f64) -> Result<Vec<f64>> {
    match history.get() {
        None => Ok(h.to_vec()),
        Some(hist) => {
            ensure_dim("history", hist.len(), h.len())?;
            Ok(h.iter()
                .zip(hist)
                .map(|(a, b)| beta * a + (1.0 - beta) * b)
                .collect())
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `e * |h' - h_g| + (1 - e) * |h' - h_l|`.
pub fn fa_loss(
    smoothed: &[f64],
    global_desc: &[f64],
    local_desc: &[f64],
    ens: &EnsembleState,
) -> Result<EnsembleLoss> {
    ensure_dim("global descriptor", smoothed.len(), global_desc.len())?;
    ensure_dim("local descriptor", smoothed.len(), local_desc.len())?;
    let dg = distance(smoothed, global_desc);
    let dl = distance(smoothed, local_desc);
    let e = ens.e();
    Ok(EnsembleLoss::new(e * dg + (1.0 - e) * dl, dg - dl, ens))
}

/// Cosine similarity of the two heads' probability vectors, in `[0, 1]`.
pub fn slw_lambda(global: &[f64], personal: &[f64]) -> f64 {
    let p = softmax(global);
    let q = softmax(personal);
    let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (np * nq)).clamp(0.0, 1.0)
}

/// Per-sample quantities the ensemble loss depends on.
#[derive(Debug, Clone, Copy)]
pub struct TheInputs<'a> {
    pub global_logits: &'a [f64],
    pub personal_logits: &'a [f64],
    pub smoothed_feature: &'a [f64],
    pub global_descriptor: &'a [f64],
    pub local_descriptor: &'a [f64],
}

/// Combined loss for the selected mode. `λ_s` does not depend on `e` and is
/// treated as a constant.
pub fn the_loss(
    inputs: &TheInputs<'_>,
    ens: &EnsembleState,
    mode: LossMode,
) -> Result<EnsembleLoss> {
    let (w_em, w_fa) = match mode {
        LossMode::Slw => {
            let l = slw_lambda(inputs.global_logits, inputs.personal_logits);
            (l, 1.0 - l)
        }
        LossMode::EmOnly => (1.0, 0.0),
        LossMode::FaOnly => (0.0, 1.0),
        LossMode::FixedHalf => (0.5, 0.5),
    };
    let mut loss = 0.0;
    let mut de = 0.0;
    if w_em > 0.0 {
        let em = em_loss(inputs.global_logits, inputs.personal_logits, ens)?;
        loss += w_em * em.loss;
        de += w_em * em.de;
    }
    if w_fa > 0.0 {
        let fa = fa_loss(
            inputs.smoothed_feature,
            inputs.global_descriptor,
            inputs.local_descriptor,
            ens,
        )?;
        loss += w_fa * fa.loss;
        de += w_fa * fa.de;
    }
    Ok(EnsembleLoss::new(loss, de, ens))
}

/// Optimizes `e` from 0.5 with Adam on the mean loss over `batch` (one entry
/// for sample-wise adaptation) and returns `e*`.
pub fn optimize_e(batch: &[TheInputs<'_>], cfg: &AdaptConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("optimize_e needs at least one sample".into()));
    }
    let mut ens = EnsembleState::default();
    let mut adam = AdamState::new(2, cfg.e_lr);
    let scale = 1.0 / batch.len() as f64;
    for _ in 0..cfg.e_steps {
        let mut grad = [0.0; 2];
        for inputs in batch {
            let l = the_loss(inputs, &ens, cfg.loss_mode)?;
            grad[0] += scale * l.grad[0];
            grad[1] += scale * l.grad[1];
        }
        let mut params = [ens.a_g, ens.a_l];
        adam_step(&mut params, &grad, &mut adam)?;
        ens = EnsembleState {
            a_g: params[0],
            a_l: params[1],
        };
    }
    Ok(ens.e())
}

/// EMA update with the raw (unsmoothed) feature; an unset history becomes `h`.
pub fn update_history(history: &mut HistoryState, h: &[f64], alpha: f64) -> Result<()> {
    match &mut history.feature {
        None => history.feature = Some(h.to_vec()),
        Some(hist) => {
            ensure_dim("history", hist.len(), h.len())?;
            for (a, v) in hist.iter_mut().zip(h) {
                *a = alpha * v + (1.0 - alpha) * *a;
            }
        }
    }
    Ok(())
}

/// Entropy of the mean softmax over `views`, with its gradient accumulated
/// into `grads` when given.
pub fn marginal_entropy(
    model: &TwoHeadModel,
    views: &[Vec<f64>],
    e: f64,
    grads: Option<&mut TwoHeadModel>,
) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::Usage(
            "marginal entropy needs at least one view".into(),
        ));
    }
    let c = model.num_classes();
    let b = views.len() as f64;
    let mut traces = Vec::with_capacity(views.len());
    let mut probs = Vec::with_capacity(views.len());
    let mut marginal = vec![0.0; c];
    for x in views {
        let trace = model.extractor.forward_trace(x)?;
        let h = trace.output();
        let z = mix_logits(
            &model.global_head.forward(h)?,
            &model.personal_head.forward(h)?,
            e,
        );
        let p = softmax(&z);
        for (m, v) in marginal.iter_mut().zip(&p) {
            *m += v / b;
        }
        traces.push(trace);
        probs.push(p);
    }
    let log_m: Vec<f64> = marginal
        .iter()
        .map(|v| v.max(f64::MIN_POSITIVE).ln())
        .collect();
    let loss = -marginal.iter().zip(&log_m).map(|(p, l)| p * l).sum::<f64>();
    if let Some(grads) = grads {
        let g: Vec<f64> = log_m.iter().map(|l| -(l + 1.0)).collect();
        for (trace, p) in traces.iter().zip(&probs) {
            let pg: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = p
                .iter()
                .zip(&g)
                .map(|(pi, gi)| pi * (gi - pg) / b)
                .collect();
            let dh = model.backward_heads(trace.output(), &dz, e, grads)?;
            model.extractor.backward(trace, &dh, &mut grads.extractor)?;
        }
    }
    Ok(loss)
}

/// Marginal-entropy fine-tuning of a copy of `model` on one input with `e`
/// fixed. Views are drawn once and reused for all steps.
pub fn memo_finetune(
    model: &TwoHeadModel,
    x: &[f64],
    e: f64,
    cfg: &AdaptConfig,
    aug: &AugmentationSpec,
    rng: &mut RngStream,
) -> Result<TwoHeadModel> {
    let views = aug.views(x, cfg.ft_augments, rng);
    let mut adapted = model.clone();
    let mut grads = adapted.zeros_like();
    for _ in 0..cfg.ft_steps {
        grads.fill_zero();
        marginal_entropy(&adapted, &views, e, Some(&mut grads))?;
        crate::nn::sgd_step(&mut adapted, &grads, cfg.ft_lr, 0.0)?;
    }
    Ok(adapted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Global,
    FedavgFt,
    MemoG,
    MemoP,
    Fedthe,
    FedthePlus,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Global,
        Method::FedavgFt,
        Method::MemoG,
        Method::MemoP,
        Method::Fedthe,
        Method::FedthePlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Global => "global",
            Method::FedavgFt => "fedavg_ft",
            Method::MemoG => "memo_g",
            Method::MemoP => "memo_p",
            Method::Fedthe => "fedthe",
            Method::FedthePlus => "fedthe_plus",
        }
    }

    pub fn uses_ensemble(self) -> bool {
        matches!(self, Method::Fedthe | Method::FedthePlus)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Trained state one client evaluates with.
#[derive(Debug, Clone, Copy)]
pub struct ClientModels<'a> {
    /// Aggregated extractor and global head with this client's personalized head.
    pub two_head: &'a TwoHeadModel,
    /// FedAvg+FT model; required by `fedavg_ft` and `memo_p`.
    pub fine_tuned: Option<&'a Model>,
    pub global_descriptor: &'a [f64],
    pub local_descriptor: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub predictions: Vec<usize>,
    pub correct: Vec<bool>,
    /// `1 - e*` per sample; empty for methods without a head ensemble.
    pub one_minus_e: Vec<f64>,
}

impl StreamResult {
    pub fn num_correct(&self) -> usize {
        self.correct.iter().filter(|c| **c).count()
    }

    pub fn accuracy(&self) -> f64 {
        self.num_correct() as f64 / self.correct.len().max(1) as f64
    }
}

/// Runs `method` over a stream in order. The history state starts unset and
/// lives for this call only.
pub fn predict_stream(
    method: Method,
    models: &ClientModels<'_>,
    stream: &crate::data::LabeledSet,
    cfg: &AdaptConfig,
    aug: &AugmentationSpec,
    rng: &mut RngStream,
) -> Result<StreamResult> {
    cfg.validate()?;
    let two = models.two_head;
    ensure_dim("stream dim", two.extractor.input_dim(), stream.dim())?;
    ensure_dim("stream classes", two.num_classes(), stream.num_classes())?;
    let mut predictions = Vec::with_capacity(stream.len());
    let mut one_minus_e = Vec::new();

    match method {
        Method::Global | Method::FedavgFt | Method::MemoG | Method::MemoP => {
            let single = match method {
                Method::Global | Method::MemoG => two.global_model(),
                _ => models
                    .fine_tuned
                    .ok_or_else(|| Error::Usage(format!("{method} needs a fine-tuned model")))?
                    .clone(),
            };
            let memo = matches!(method, Method::MemoG | Method::MemoP);
            let base = single.as_two_head();
            for (x, _) in stream.iter() {
                let pred = if memo {
                    let adapted = memo_finetune(&base, x, 1.0, cfg, aug, rng)?;
                    argmax(&adapted.ensemble_logits(x, 1.0)?)
                } else {
                    single.predict(x)?
                };
                predictions.push(pred);
            }
        }
        Method::Fedthe | Method::FedthePlus => {
            let plus = method == Method::FedthePlus || cfg.ft_enabled;
            let chunk = if cfg.batch_wise { cfg.batch_size } else { 1 };
            let mut history = HistoryState::default();
            let idx: Vec<usize> = (0..stream.len()).collect();
            for block in idx.chunks(chunk) {
                let outs = block
                    .iter()
                    .map(|&i| two.forward(stream.input(i)))
                    .collect::<Result<Vec<_>>>()?;
                let smoothed = outs
                    .iter()
                    .map(|o| {
                        if cfg.use_history {
                            smooth_feature(&o.feature, &history, cfg.beta)
                        } else {
                            Ok(o.feature.clone())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let e_star = match cfg.pinned_e {
                    Some(e) => e,
                    None => {
                        let inputs: Vec<TheInputs<'_>> = outs
                            .iter()
                            .zip(&smoothed)
                            .map(|(o, s)| TheInputs {
                                global_logits: &o.global_logits,
                                personal_logits: &o.personal_logits,
                                smoothed_feature: s,
                                global_descriptor: models.global_descriptor,
                                local_descriptor: models.local_descriptor,
                            })
                            .collect();
                        optimize_e(&inputs, cfg)?
                    }
                };
                if cfg.use_history {
                    for o in &outs {
                        update_history(&mut history, &o.feature, cfg.alpha)?;
                    }
                }
                for (&i, o) in block.iter().zip(&outs) {
                    let pred = if plus {
                        let adapted = memo_finetune(two, stream.input(i), e_star, cfg, aug, rng)?;
                        argmax(&adapted.ensemble_logits(stream.input(i), e_star)?)
                    } else {
                        argmax(&mix_logits(&o.global_logits, &o.personal_logits, e_star))
                    };
                    predictions.push(pred);
                    one_minus_e.push(1.0 - e_star);
                }
            }
        }
    }
    let correct = predictions
        .iter()
        .zip(stream.labels())
        .map(|(p, y)| p == y)
        .collect();
    Ok(StreamResult {
        predictions,
        correct,
        one_minus_e,
    })
}
