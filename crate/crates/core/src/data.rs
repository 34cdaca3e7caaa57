//! Synthetic benchmark data.
//!
//! Class-conditional isotropic Gaussians stand in for an image dataset. The
//! pipeline is: [`generate_base`] draws a pool, [`dirichlet_partition`] splits
//! it into non-i.i.d. clients, [`split_client`] cuts each client into
//! train/val/ID-test, and [`build_streams`] derives the per-client evaluation
//! streams:
//!
//! | stream | content |
//! |---|---|
//! | `id` | the client's own test split |
//! | `corrupted` | `id` with one random corruption per sample |
//! | `natural` | fresh draws from the mean-shifted generator, train label histogram |
//! | `ooc` | uniform draws from other clients' `id` pools |
//! | `mixture` | one copy of each of the above, shuffled together |
//! | `corrupted_ooc` | `ooc` with one random corruption per sample |

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::io;
use crate::rng::RngStream;

/// Inputs (row-major `n × dim`) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    num_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(
        dim: usize,
        num_classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::Config(
                "labeled set needs positive dim and class count".into(),
            ));
        }
        ensure_dim("labeled set inputs", labels.len() * dim, inputs.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            dim,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.inputs
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn push(&mut self, x: &[f64], label: usize) -> Result<()> {
        ensure_dim("labeled set push", self.dim, x.len())?;
        if label >= self.num_classes {
            return Err(Error::Config(format!("label {label} out of range")));
        }
        self.inputs.extend_from_slice(x);
        self.labels.push(label);
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let mut out = LabeledSet::empty(self.dim, self.num_classes);
        out.inputs.reserve(indices.len() * self.dim);
        for &i in indices {
            out.inputs.extend_from_slice(self.input(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

/// Parameters for [`GeneratorSpec::synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Class means are drawn from `N(0, mean_scale^2 I)`.
    pub mean_scale: f64,
    pub within_class_std: f64,
    /// Norm of every natural-shift offset as a fraction of the minimum
    /// pairwise distance between class means.
    pub shift_ratio: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 32,
            mean_scale: 0.5,
            within_class_std: 1.0,
            shift_ratio: 0.5,
        }
    }
}

/// Class-conditional Gaussian generator plus its naturally shifted twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub within_class_std: f64,
    pub natural_shift_delta: Vec<Vec<f64>>,
    pub seed: u64,
}

const TAG_MEANS: u64 = 1;
const TAG_BASE: u64 = 2;

impl GeneratorSpec {
    pub fn synthetic(params: &SyntheticParams, seed: u64) -> Result<Self> {
        if params.num_classes < 2 || params.input_dim == 0 {
            return Err(Error::Config(
                "generator needs >= 2 classes and a positive input dim".into(),
            ));
        }
        if !(params.mean_scale > 0.0)
            || !(params.within_class_std >= 0.0)
            || !(params.shift_ratio >= 0.0)
        {
            return Err(Error::Config(
                "generator scales must be non-negative (mean_scale > 0)".into(),
            ));
        }
        let mut rng = RngStream::new(seed).derive(TAG_MEANS);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let class_means: Vec<Vec<f64>> = (0..params.num_classes)
            .map(|_| {
                (0..params.input_dim)
                    .map(|_| params.mean_scale * normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let sep = min_pairwise_distance(&class_means);
        let natural_shift_delta = (0..params.num_classes)
            .map(|_| {
                let dir: Vec<f64> = (0..params.input_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let norm = l2(&dir).max(f64::MIN_POSITIVE);
                dir.iter()
                    .map(|v| v / norm * params.shift_ratio * sep)
                    .collect()
            })
            .collect();
        Ok(Self {
            num_classes: params.num_classes,
            input_dim: params.input_dim,
            class_means,
            within_class_std: params.within_class_std,
            natural_shift_delta,
            seed,
        })
    }

    pub fn min_mean_separation(&self) -> f64 {
        min_pairwise_distance(&self.class_means)
    }

    /// Largest `|delta_c| / min separation` over classes.
    pub fn shift_ratio(&self) -> f64 {
        let sep = self.min_mean_separation();
        self.natural_shift_delta
            .iter()
            .map(|d| l2(d) / sep)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, max_shift_ratio: f64) -> Result<()> {
        ensure_dim("class means", self.num_classes, self.class_means.len())?;
        ensure_dim(
            "shift deltas",
            self.num_classes,
            self.natural_shift_delta.len(),
        )?;
        for v in self.class_means.iter().chain(&self.natural_shift_delta) {
            ensure_dim("generator vector", self.input_dim, v.len())?;
        }
        if self.shift_ratio() > max_shift_ratio + 1e-12 {
            return Err(Error::Config(format!(
                "natural shift ratio {:.3} exceeds {max_shift_ratio}",
                self.shift_ratio()
            )));
        }
        Ok(())
    }

    fn sample_class<R: Rng + ?Sized>(
        &self,
        class: usize,
        shifted: bool,
        rng: &mut R,
        out: &mut Vec<f64>,
    ) {
        let mean = &self.class_means[class];
        let delta = &self.natural_shift_delta[class];
        for j in 0..self.input_dim {
            let noise = if self.within_class_std > 0.0 {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                self.within_class_std * z
            } else {
                0.0
            };
            let shift = if shifted { delta[j] } else { 0.0 };
            out.push(mean[j] + shift + noise);
        }
    }

    /// Draws `counts[c]` samples of every class `c`, class-major order.
    pub fn sample_counts<R: Rng + ?Sized>(
        &self,
        counts: &[usize],
        shifted: bool,
        rng: &mut R,
    ) -> Result<LabeledSet> {
        ensure_dim("class counts", self.num_classes, counts.len())?;
        let total: usize = counts.iter().sum();
        let mut inputs = Vec::with_capacity(total * self.input_dim);
        let mut labels = Vec::with_capacity(total);
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                self.sample_class(c, shifted, rng, &mut inputs);
                labels.push(c);
            }
        }
        LabeledSet::new(self.input_dim, self.num_classes, inputs, labels)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// i.i.d. class-conditional draws, `n_per_class` for every class.
pub fn generate_base(spec: &GeneratorSpec, n_per_class: usize) -> Result<LabeledSet> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    let mut rng = RngStream::new(spec.seed).derive(TAG_BASE);
    spec.sample_counts(&vec![n_per_class; spec.num_classes], false, &mut rng)
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn normalize_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    /// `histograms[k][c]` = samples of class `c` owned by client `k`.
    pub histograms: Vec<Vec<u64>>,
    pub alpha: f64,
    /// Every index assigned exactly once.
    pub complete: bool,
}

impl PartitionReport {
    /// Mean over clients of the TV distance between the client's label
    /// distribution and the pooled one.
    pub fn mean_tv_from_global(&self) -> f64 {
        let classes = self.histograms.first().map_or(0, Vec::len);
        let mut global = vec![0u64; classes];
        for h in &self.histograms {
            for (g, v) in global.iter_mut().zip(h) {
                *g += v;
            }
        }
        let global = normalize_counts(&global);
        let sum: f64 = self
            .histograms
            .iter()
            .map(|h| total_variation(&normalize_counts(h), &global))
            .sum();
        sum / self.histograms.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub report: PartitionReport,
}

const MAX_PARTITION_ATTEMPTS: usize = 1000;

/// Splits `data` across `clients` with per-class Dir(alpha) proportions.
///
/// Every client must end up with at least `C + 2` samples; proportions are
/// redrawn until that holds.
pub fn dirichlet_partition(
    data: &LabeledSet,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!(
            "Dirichlet alpha must be > 0, got {alpha}"
        )));
    }
    let classes = data.num_classes();
    let min_per_client = classes + 2;
    if data.len() < clients * min_per_client {
        return Err(Error::Config(format!(
            "{} samples cannot give {clients} clients {min_per_client} samples each",
            data.len()
        )));
    }
    let gamma =
        Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("gamma({alpha}): {e}")))?;
    let mut rng = RngStream::new(seed);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet(&gamma, clients, &mut rng);
            let n = members.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == clients {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).min(n)
                };
                let end = end.max(start);
                assignment[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assignment.iter().all(|a| a.len() >= min_per_client) {
            for a in &mut assignment {
                a.sort_unstable();
            }
            let histograms = assignment
                .iter()
                .map(|idx| {
                    let mut h = vec![0u64; classes];
                    for &i in idx {
                        h[data.label(i)] += 1;
                    }
                    h
                })
                .collect();
            let complete = check_complete(&assignment, data.len());
            return Ok(Partition {
                client_indices: assignment,
                report: PartitionReport {
                    histograms,
                    alpha,
                    complete,
                },
            });
        }
    }
    Err(Error::Config(format!(
        "no Dir({alpha}) partition gave every client >= {min_per_client} samples in {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

fn dirichlet<R: Rng + ?Sized>(gamma: &Gamma<f64>, k: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

fn check_complete(assignment: &[Vec<usize>], n: usize) -> bool {
    let mut seen = vec![false; n];
    for idx in assignment {
        for &i in idx {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
    }
    seen.into_iter().all(|s| s)
}

/// Disjoint train/val/test index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Uniform random train/val/test split of `indices`.
pub fn split_client<R: Rng + ?Sized>(
    indices: &[usize],
    fractions: [f64; 3],
    rng: &mut R,
) -> Result<ClientSplit> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n = indices.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "cannot split {n} samples three ways"
        )));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let n_train = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((fractions[1] * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(ClientSplit {
        train: shuffled,
        val,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    AdditiveGauss,
    FeatureScale,
    FeatureMask,
    Impulse,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::AdditiveGauss,
        CorruptionKind::FeatureScale,
        CorruptionKind::FeatureMask,
        CorruptionKind::Impulse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::AdditiveGauss => "additive_gauss",
            CorruptionKind::FeatureScale => "feature_scale",
            CorruptionKind::FeatureMask => "feature_mask",
            CorruptionKind::Impulse => "impulse",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!(
                "corruption severity must be in 1..=5, got {severity}"
            )));
        }
        Ok(Self { kind, severity })
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    /// Std of the additive Gaussian noise: `0.2 * severity * sigma_data`.
    pub fn noise_std(&self, sigma_data: f64) -> f64 {
        0.2 * self.severity as f64 * sigma_data
    }

    /// Magnitude of the feature-scale perturbation: `0.15 * severity`.
    pub fn scale_amount(&self) -> f64 {
        0.15 * self.severity as f64
    }

    /// Number of coordinates zeroed (mask) or spiked (impulse) in a `dim`-vector.
    pub fn affected_coords(&self, dim: usize) -> usize {
        let frac = match self.kind {
            CorruptionKind::FeatureMask => 0.08,
            CorruptionKind::Impulse => 0.04,
            _ => 0.0,
        } * self.severity as f64;
        ((frac * dim as f64).round() as usize).min(dim)
    }
}

/// Applies one corruption to `x`. Output depends only on the inputs and the
/// RNG state.
pub fn corrupt<R: Rng + ?Sized>(
    x: &[f64],
    corruption: Corruption,
    sigma_data: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = x.to_vec();
    match corruption.kind {
        CorruptionKind::AdditiveGauss => {
            let std = corruption.noise_std(sigma_data);
            for v in &mut out {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                *v += std * z;
            }
        }
        CorruptionKind::FeatureScale => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let factor = 1.0 + corruption.scale_amount() * sign;
            for v in &mut out {
                *v *= factor;
            }
        }
        CorruptionKind::FeatureMask => {
            let k = corruption.affected_coords(x.len());
            for i in rand::seq::index::sample(rng, x.len(), k) {
                out[i] = 0.0;
            }
        }
        CorruptionKind::Impulse => {
            let k = corruption.affected_coords(x.len());
            for i in rand::seq::index::sample(rng, x.len(), k) {
                out[i] = if rng.random::<bool>() { 3.0 } else { -3.0 } * sigma_data;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Id,
    Corrupted,
    Natural,
    Ooc,
    Mixture,
    CorruptedOoc,
}

impl StreamKind {
    pub const ALL: [StreamKind; 6] = [
        StreamKind::Id,
        StreamKind::Corrupted,
        StreamKind::Natural,
        StreamKind::Ooc,
        StreamKind::Mixture,
        StreamKind::CorruptedOoc,
    ];

    /// The five streams that make up a benchmark row.
    pub const BENCHMARK: [StreamKind; 5] = [
        StreamKind::Id,
        StreamKind::Corrupted,
        StreamKind::Ooc,
        StreamKind::Natural,
        StreamKind::Mixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Id => "id",
            StreamKind::Corrupted => "corrupted",
            StreamKind::Natural => "natural",
            StreamKind::Ooc => "ooc",
            StreamKind::Mixture => "mixture",
            StreamKind::CorruptedOoc => "corrupted_ooc",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stream '{s}'")))
    }
}

/// Where a test sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_client: usize,
    /// The component stream the sample was built for (never `Mixture`).
    pub origin: StreamKind,
    pub corruption: Option<Corruption>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestStream {
    pub kind: StreamKind,
    pub samples: LabeledSet,
    pub provenance: Vec<Provenance>,
}

impl TestStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One client's local splits before the evaluation streams are derived.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDraft {
    pub client_id: usize,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub id_test: LabeledSet,
    pub split: ClientSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientBench {
    pub client_id: usize,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test_streams: BTreeMap<StreamKind, TestStream>,
    /// Indices into the base pool; empty for imported benchmarks.
    pub split: ClientSplit,
}

impl ClientBench {
    pub fn stream(&self, kind: StreamKind) -> Result<&TestStream> {
        self.test_streams.get(&kind).ok_or_else(|| {
            Error::Config(format!("client {} has no '{kind}' stream", self.client_id))
        })
    }
}

const TAG_CORRUPTED: u64 = 11;
const TAG_NATURAL: u64 = 12;
const TAG_OOC: u64 = 13;
const TAG_MIXTURE: u64 = 14;
const TAG_CORRUPTED_OOC: u64 = 15;

/// Counts proportional to `hist` summing to exactly `total` (largest remainder).
pub fn proportional_counts(hist: &[u64], total: usize) -> Vec<usize> {
    let sum: u64 = hist.iter().sum();
    if sum == 0 {
        return vec![0; hist.len()];
    }
    let exact: Vec<f64> = hist
        .iter()
        .map(|&h| h as f64 * total as f64 / sum as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..hist.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn corrupted_copy(
    source: &LabeledSet,
    provenance: &[Provenance],
    kind: StreamKind,
    severity: u8,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<TestStream> {
    let mut samples = LabeledSet::empty(source.dim(), source.num_classes());
    let mut prov = Vec::with_capacity(source.len());
    for (i, (x, y)) in source.iter().enumerate() {
        let ck = CorruptionKind::ALL[rng.random_range(0..CorruptionKind::ALL.len())];
        let c = Corruption::new(ck, severity)?;
        samples.push(&corrupt(x, c, sigma, rng), y)?;
        prov.push(Provenance {
            source_client: provenance[i].source_client,
            origin: kind,
            corruption: Some(c),
        });
    }
    Ok(TestStream {
        kind,
        samples,
        provenance: prov,
    })
}

/// Derives every client's evaluation streams from the drafts.
pub fn build_streams(
    drafts: Vec<ClientDraft>,
    spec: &GeneratorSpec,
    severity: u8,
    seed: u64,
) -> Result<Vec<ClientBench>> {
    if drafts.len() < 2 {
        return Err(Error::Config(
            "out-of-client streams need at least two clients".into(),
        ));
    }
    Corruption::new(CorruptionKind::AdditiveGauss, severity)?;
    let root = RngStream::new(seed);
    let sigma = spec.within_class_std;

    let mut benches = Vec::with_capacity(drafts.len());
    for draft in &drafts {
        let cid = draft.client_id as u64;
        if draft.id_test.is_empty() || draft.train.is_empty() {
            return Err(Error::Config(format!(
                "client {cid} has an empty train or test split"
            )));
        }
        let n = draft.id_test.len();

        let id_prov = vec![
            Provenance {
                source_client: draft.client_id,
                origin: StreamKind::Id,
                corruption: None,
            };
            n
        ];
        let id = TestStream {
            kind: StreamKind::Id,
            samples: draft.id_test.clone(),
            provenance: id_prov.clone(),
        };

        let mut rng = root.derive_path(&[TAG_CORRUPTED, cid]);
        let corrupted = corrupted_copy(
            &draft.id_test,
            &id_prov,
            StreamKind::Corrupted,
            severity,
            sigma,
            &mut rng,
        )?;

        let mut rng = root.derive_path(&[TAG_NATURAL, cid]);
        let counts = proportional_counts(&draft.train.class_counts(), n);
        let mut natural_set = spec.sample_counts(&counts, true, &mut rng)?;
        // class-major draws; shuffle so the stream order carries no label information
        let mut order: Vec<usize> = (0..natural_set.len()).collect();
        order.shuffle(&mut rng);
        natural_set = natural_set.subset(&order);
        let natural = TestStream {
            kind: StreamKind::Natural,
            provenance: vec![
                Provenance {
                    source_client: draft.client_id,
                    origin: StreamKind::Natural,
                    corruption: None,
                };
                natural_set.len()
            ],
            samples: natural_set,
        };

        // pool of (client, row) over other clients' ID tests
        let pool: Vec<(usize, usize)> = drafts
            .iter()
            .filter(|d| d.client_id != draft.client_id)
            .flat_map(|d| (0..d.id_test.len()).map(move |r| (d.client_id, r)))
            .collect();
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "no other-client test samples for client {cid}"
            )));
        }
        let mut rng = root.derive_path(&[TAG_OOC, cid]);
        let picks: Vec<(usize, usize)> = if pool.len() >= n {
            rand::seq::index::sample(&mut rng, pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            (0..n)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect()
        };
        let mut ooc_set = LabeledSet::empty(spec.input_dim, spec.num_classes);
        let mut ooc_prov = Vec::with_capacity(n);
        for (client, row) in picks {
            let src = &drafts
                .iter()
                .find(|d| d.client_id == client)
                .expect("pool entries refer to drafts")
                .id_test;
            ooc_set.push(src.input(row), src.label(row))?;
            ooc_prov.push(Provenance {
                source_client: client,
                origin: StreamKind::Ooc,
                corruption: None,
            });
        }
        let ooc = TestStream {
            kind: StreamKind::Ooc,
            samples: ooc_set,
            provenance: ooc_prov,
        };

        let mut rng = root.derive_path(&[TAG_CORRUPTED_OOC, cid]);
        let corrupted_ooc = corrupted_copy(
            &ooc.samples,
            &ooc.provenance,
            StreamKind::CorruptedOoc,
            severity,
            sigma,
            &mut rng,
        )?;

        let mut rng = root.derive_path(&[TAG_MIXTURE, cid]);
        let parts = [&id, &corrupted, &natural, &ooc];
        let mut entries: Vec<(usize, usize)> = parts
            .iter()
            .enumerate()
            .flat_map(|(p, s)| (0..s.len()).map(move |r| (p, r)))
            .collect();
        entries.shuffle(&mut rng);
        let mut mix_set = LabeledSet::empty(spec.input_dim, spec.num_classes);
        let mut mix_prov = Vec::with_capacity(entries.len());
        for (p, r) in entries {
            mix_set.push(parts[p].samples.input(r), parts[p].samples.label(r))?;
            mix_prov.push(parts[p].provenance[r]);
        }
        let mixture = TestStream {
            kind: StreamKind::Mixture,
            samples: mix_set,
            provenance: mix_prov,
        };

        let mut test_streams = BTreeMap::new();
        for s in [id, corrupted, natural, ooc, mixture, corrupted_ooc] {
            test_streams.insert(s.kind, s);
        }
        benches.push(ClientBench {
            client_id: draft.client_id,
            train: draft.train.clone(),
            val: draft.val.clone(),
            test_streams,
            split: draft.split.clone(),
        });
    }
    Ok(benches)
}

/// Everything needed to build a benchmark besides the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub samples_per_class: usize,
    pub clients: usize,
    pub alpha: f64,
    pub split: [f64; 3],
    pub severity: u8,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 270,
            clients: 8,
            alpha: 0.1,
            split: DEFAULT_SPLIT,
            severity: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub generator: GeneratorSpec,
    pub partition: PartitionReport,
    pub clients: Vec<ClientBench>,
    pub seed: u64,
}

const TAG_PARTITION: u64 = 21;
const TAG_SPLIT: u64 = 22;
const TAG_STREAMS: u64 = 23;

/// Generate, partition, split and derive streams, all from `seed`.
pub fn build_benchmark(
    generator: GeneratorSpec,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<Benchmark> {
    let root = RngStream::new(seed);
    let base = generate_base(&generator, cfg.samples_per_class)?;
    let partition = dirichlet_partition(
        &base,
        cfg.clients,
        cfg.alpha,
        root.derive(TAG_PARTITION).seed(),
    )?;
    let mut drafts = Vec::with_capacity(cfg.clients);
    for (k, idx) in partition.client_indices.iter().enumerate() {
        let mut rng = root.derive_path(&[TAG_SPLIT, k as u64]);
        let split = split_client(idx, cfg.split, &mut rng)?;
        drafts.push(ClientDraft {
            client_id: k,
            train: base.subset(&split.train),
            val: base.subset(&split.val),
            id_test: base.subset(&split.test),
            split,
        });
    }
    let clients = build_streams(
        drafts,
        &generator,
        cfg.severity,
        root.derive(TAG_STREAMS).seed(),
    )?;
    Ok(Benchmark {
        generator,
        partition: partition.report,
        clients,
        seed,
    })
}

pub const BENCHMARK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BenchManifest {
    version: u32,
    seed: u64,
    generator: GeneratorSpec,
    partition: PartitionReport,
    clients: Vec<ClientManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClientManifest {
    client_id: usize,
    sets: Vec<SetManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SetManifest {
    /// `train`, `val` or a stream name.
    name: String,
    rows: usize,
    dim: usize,
    inputs: String,
    labels: String,
}

/// Writes `manifest.json` plus one `.f64` input matrix (little-endian, row-major)
/// and one `.csv` label/provenance file per set.
///
/// The label file has a header line; rows are `label` for train/val and
/// `label,source_client,origin,corruption,severity` for test streams (empty
/// corruption fields when uncorrupted). Replacing the matrices with features
/// extracted from a real dataset, with a matching manifest, is supported by
/// [`import_benchmark`].
pub fn export_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    io::create_dir(dir)?;
    let mut clients = Vec::new();
    for c in &bench.clients {
        let mut sets = Vec::new();
        let mut write_set =
            |name: &str, set: &LabeledSet, prov: Option<&[Provenance]>| -> Result<()> {
                let inputs = format!("client{}_{}.f64", c.client_id, name);
                let labels = format!("client{}_{}.csv", c.client_id, name);
                io::write_f64s(&dir.join(&inputs), set.inputs())?;
                let mut text = String::new();
                match prov {
                    None => {
                        text.push_str("label\n");
                        for l in set.labels() {
                            text.push_str(&format!("{l}\n"));
                        }
                    }
                    Some(prov) => {
                        text.push_str("label,source_client,origin,corruption,severity\n");
                        for (l, p) in set.labels().iter().zip(prov) {
                            let (ck, sev) = match p.corruption {
                                Some(c) => (c.kind.name().to_string(), c.severity().to_string()),
                                None => (String::new(), String::new()),
                            };
                            text.push_str(&format!(
                                "{l},{},{},{ck},{sev}\n",
                                p.source_client, p.origin
                            ));
                        }
                    }
                }
                io::write_text(&dir.join(&labels), &text)?;
                sets.push(SetManifest {
                    name: name.to_string(),
                    rows: set.len(),
                    dim: set.dim(),
                    inputs,
                    labels,
                });
                Ok(())
            };
        write_set("train", &c.train, None)?;
        write_set("val", &c.val, None)?;
        for (kind, s) in &c.test_streams {
            write_set(kind.name(), &s.samples, Some(&s.provenance))?;
        }
        clients.push(ClientManifest {
            client_id: c.client_id,
            sets,
        });
    }
    let manifest = BenchManifest {
        version: BENCHMARK_FORMAT_VERSION,
        seed: bench.seed,
        generator: bench.generator.clone(),
        partition: bench.partition.clone(),
        clients,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io::write_text(&dir.join("manifest.json"), &json)
}

pub fn import_benchmark(dir: &Path) -> Result<Benchmark> {
    let mpath = dir.join("manifest.json");
    let manifest: BenchManifest = serde_json::from_str(&io::read_text(&mpath)?)
        .map_err(|e| io::parse_err(&mpath, e.to_string()))?;
    if manifest.version != BENCHMARK_FORMAT_VERSION {
        return Err(io::parse_err(
            &mpath,
            format!("unsupported benchmark version {}", manifest.version),
        ));
    }
    let classes = manifest.generator.num_classes;
    let mut clients = Vec::new();
    for cm in &manifest.clients {
        let mut train = None;
        let mut val = None;
        let mut test_streams = BTreeMap::new();
        for sm in &cm.sets {
            let inputs = io::read_f64s(&dir.join(&sm.inputs), sm.rows * sm.dim)?;
            let lpath = dir.join(&sm.labels);
            let text = io::read_text(&lpath)?;
            let mut labels = Vec::with_capacity(sm.rows);
            let mut prov = Vec::with_capacity(sm.rows);
            for (lineno, line) in text.lines().enumerate().skip(1) {
                let fields: Vec<&str> = line.split(',').collect();
                let bad =
                    |what: &str| io::parse_err(&lpath, format!("line {}: bad {what}", lineno + 1));
                labels.push(fields[0].parse::<usize>().map_err(|_| bad("label"))?);
                if fields.len() == 5 {
                    let corruption = if fields[3].is_empty() {
                        None
                    } else {
                        let sev = fields[4].parse::<u8>().map_err(|_| bad("severity"))?;
                        Some(Corruption::new(fields[3].parse()?, sev)?)
                    };
                    prov.push(Provenance {
                        source_client: fields[1].parse().map_err(|_| bad("source_client"))?,
                        origin: fields[2].parse()?,
                        corruption,
                    });
                }
            }
            let set = LabeledSet::new(sm.dim, classes, inputs, labels)?;
            match sm.name.as_str() {
                "train" => train = Some(set),
                "val" => val = Some(set),
                other => {
                    let kind: StreamKind = other.parse()?;
                    ensure_dim("stream provenance", set.len(), prov.len())?;
                    test_streams.insert(
                        kind,
                        TestStream {
                            kind,
                            samples: set,
                            provenance: prov,
                        },
                    );
                }
            }
        }
        let missing = |what: &str| {
            io::parse_err(
                &mpath,
                format!("client {} lacks a {what} set", cm.client_id),
            )
        };
        clients.push(ClientBench {
            client_id: cm.client_id,
            train: train.ok_or_else(|| missing("train"))?,
            val: val.ok_or_else(|| missing("val"))?,
            test_streams,
            split: ClientSplit {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            },
        });
    }
    Ok(Benchmark {
        generator: manifest.generator,
        partition: manifest.partition,
        clients,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(std: f64, seed: u64) -> GeneratorSpec {
        GeneratorSpec::synthetic(
            &SyntheticParams {
                num_classes: 4,
                input_dim: 6,
                mean_scale: 1.0,
                within_class_std: std,
                shift_ratio: 0.5,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_std_reproduces_means() {
        let spec = small_spec(0.0, 1);
        let set = generate_base(&spec, 3).unwrap();
        for (x, y) in set.iter() {
            assert_eq!(x, spec.class_means[y].as_slice());
        }
        assert_eq!(set.class_counts(), vec![3, 3, 3, 3]);
    }

    #[test]
    fn far_apart_classes_are_nearest_mean_separable() {
        let mut means = vec![vec![0.0; 8]; 2];
        means[0][0] = 10.0;
        means[1][0] = -10.0;
        let spec = GeneratorSpec {
            num_classes: 2,
            input_dim: 8,
            class_means: means.clone(),
            within_class_std: 1.0,
            natural_shift_delta: vec![vec![0.0; 8]; 2],
            seed: 5,
        };
        let set = generate_base(&spec, 500).unwrap();
        let correct = set
            .iter()
            .filter(|(x, y)| {
                let d: Vec<f64> = means
                    .iter()
                    .map(|m| m.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                (if d[0] <= d[1] { 0 } else { 1 }) == *y
            })
            .count();
        assert!(correct as f64 / 1000.0 > 0.99);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_base(&small_spec(1.0, 9), 10).unwrap();
        let b = generate_base(&small_spec(1.0, 9), 10).unwrap();
        let bits = |s: &LabeledSet| s.inputs().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn shift_ratio_respected() {
        let spec = small_spec(1.0, 3);
        assert!((spec.shift_ratio() - 0.5).abs() < 1e-9);
        assert!(spec.validate(0.5).is_ok());
        assert!(spec.validate(0.25).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let set = generate_base(&small_spec(1.0, 2), 10).unwrap();
        let p = dirichlet_partition(&set, 1, 0.5, 4).unwrap();
        assert_eq!(p.client_indices[0], (0..40).collect::<Vec<_>>());
        assert!(p.report.complete);
    }

    #[test]
    fn partition_rejects_bad_config() {
        let set = generate_base(&small_spec(1.0, 2), 3).unwrap();
        assert!(dirichlet_partition(&set, 2, 0.0, 1).is_err());
        assert!(dirichlet_partition(&set, 0, 1.0, 1).is_err());
        // 12 samples, 4 classes: each client needs 6
        assert!(dirichlet_partition(&set, 3, 1.0, 1).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let idx: Vec<usize> = (100..110).collect();
        let mut rng = RngStream::new(1);
        let s = split_client(&idx, DEFAULT_SPLIT, &mut rng).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, idx);
        let again = split_client(&idx, DEFAULT_SPLIT, &mut RngStream::new(1)).unwrap();
        assert_eq!(s, again);
        assert!(split_client(&[1, 2], DEFAULT_SPLIT, &mut rng).is_err());
        assert!(split_client(&idx, [0.5, 0.5, 0.0], &mut rng).is_err());
    }

    #[test]
    fn corruption_constants() {
        let c = Corruption::new(CorruptionKind::AdditiveGauss, 5).unwrap();
        assert!((c.noise_std(1.0) - 1.0).abs() < 1e-12);
        assert!((c.noise_std(2.5) - 2.5).abs() < 1e-12);
        assert!(Corruption::new(CorruptionKind::Impulse, 0).is_err());
        assert!(Corruption::new(CorruptionKind::Impulse, 6).is_err());
        assert!("blur".parse::<CorruptionKind>().is_err());

        let mask = Corruption::new(CorruptionKind::FeatureMask, 5).unwrap();
        let x = vec![1.0; 50];
        let y = corrupt(&x, mask, 1.0, &mut RngStream::new(3));
        assert_eq!(y.iter().filter(|v| **v == 0.0).count(), 20);

        let scale = Corruption::new(CorruptionKind::FeatureScale, 5).unwrap();
        let y = corrupt(&x, scale, 1.0, &mut RngStream::new(3));
        assert!(
            y.iter().all(|v| (*v - 1.75).abs() < 1e-12)
                || y.iter().all(|v| (*v - 0.25).abs() < 1e-12)
        );

        let imp = Corruption::new(CorruptionKind::Impulse, 5).unwrap();
        let y = corrupt(&x, imp, 2.0, &mut RngStream::new(3));
        assert_eq!(y.iter().filter(|v| v.abs() == 6.0).count(), 10);
    }

    #[test]
    fn proportional_counts_sum_exactly() {
        assert_eq!(proportional_counts(&[3, 1, 0], 8), vec![6, 2, 0]);
        assert_eq!(proportional_counts(&[1, 1, 1], 4).iter().sum::<usize>(), 4);
    }

    fn bench(seed: u64) -> Benchmark {
        let spec = small_spec(1.0, seed);
        let cfg = BenchConfig {
            samples_per_class: 40,
            clients: 3,
            alpha: 0.5,
            ..BenchConfig::default()
        };
        build_benchmark(spec, &cfg, seed).unwrap()
    }

    #[test]
    fn streams_have_expected_shapes() {
        let b = bench(7);
        for c in &b.clients {
            let n = c.stream(StreamKind::Id).unwrap().len();
            let sizes: Vec<usize> = [
                StreamKind::Corrupted,
                StreamKind::Natural,
                StreamKind::Ooc,
                StreamKind::CorruptedOoc,
            ]
            .iter()
            .map(|k| c.stream(*k).unwrap().len())
            .collect();
            assert!(sizes.iter().all(|&s| s == n));
            assert_eq!(c.stream(StreamKind::Mixture).unwrap().len(), 4 * n);
            // natural histogram follows the train histogram
            let expected = proportional_counts(&c.train.class_counts(), n);
            let got: Vec<usize> = c
                .stream(StreamKind::Natural)
                .unwrap()
                .samples
                .class_counts()
                .iter()
                .map(|&v| v as usize)
                .collect();
            assert_eq!(got, expected);
            // OoC never includes the client's own samples
            assert!(c
                .stream(StreamKind::Ooc)
                .unwrap()
                .provenance
                .iter()
                .all(|p| p.source_client != c.client_id));
            // mixture provenance audits back to one copy of each component
            let mix = c.stream(StreamKind::Mixture).unwrap();
            for origin in [
                StreamKind::Id,
                StreamKind::Corrupted,
                StreamKind::Natural,
                StreamKind::Ooc,
            ] {
                assert_eq!(
                    mix.provenance.iter().filter(|p| p.origin == origin).count(),
                    n
                );
            }
            assert!(c
                .stream(StreamKind::Corrupted)
                .unwrap()
                .provenance
                .iter()
                .all(|p| p.corruption.is_some()));
            // train / val / test disjoint
            let mut all: Vec<usize> = c
                .split
                .train
                .iter()
                .chain(&c.split.val)
                .chain(&c.split.test)
                .copied()
                .collect();
            let before = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), before);
        }
    }

    #[test]
    fn single_client_ooc_is_rejected() {
        let spec = small_spec(1.0, 1);
        let base = generate_base(&spec, 5).unwrap();
        let split = split_client(
            &(0..20).collect::<Vec<_>>(),
            DEFAULT_SPLIT,
            &mut RngStream::new(0),
        )
        .unwrap();
        let draft = ClientDraft {
            client_id: 0,
            train: base.subset(&split.train),
            val: base.subset(&split.val),
            id_test: base.subset(&split.test),
            split,
        };
        assert!(build_streams(vec![draft], &spec, 5, 0).is_err());
    }

    #[test]
    fn benchmark_is_reproducible_and_round_trips() {
        let a = bench(11);
        let b = bench(11);
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        export_benchmark(&a, dir.path()).unwrap();
        let back = import_benchmark(dir.path()).unwrap();
        for (x, y) in a.clients.iter().zip(&back.clients) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.test_streams, y.test_streams);
        }
        assert_eq!(a.generator, back.generator);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_is_complete_and_disjoint(k in 1usize..6, alpha in 0.05f64..50.0, seed in 0u64..1000) {
            let set = generate_base(&small_spec(1.0, 1), 30).unwrap();
            let p = dirichlet_partition(&set, k, alpha, seed).unwrap();
            prop_assert!(p.report.complete);
            let mut all: Vec<usize> = p.client_indices.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..set.len()).collect::<Vec<_>>());
            prop_assert!(p.client_indices.iter().all(|c| c.len() >= 6));
        }

        #[test]
        fn corrupt_is_a_function_of_rng_state(seed in 0u64..500, sev in 1u8..=5, kind in 0usize..4) {
            let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
            let c = Corruption::new(CorruptionKind::ALL[kind], sev).unwrap();
            let a = corrupt(&x, c, 1.0, &mut RngStream::new(seed));
            let b = corrupt(&x, c, 1.0, &mut RngStream::new(seed));
            prop_assert_eq!(a.len(), x.len());
            prop_assert_eq!(a, b);
        }
    }
}
