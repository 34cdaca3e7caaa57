//! Federated rounds for the two-head model.
//!
//! Each round the server samples `ceil(r * K)` clients and broadcasts the
//! extractor, global head and global descriptor. A sampled client
//!
//! 1. trains a copy of (extractor, global head) for `local_epochs`,
//! 2. trains its own personalized head on the *received* extractor, frozen,
//! 3. averages the received extractor's features over its train split into
//!    the local descriptor,
//!
//! and the server replaces extractor, global head and global descriptor by the
//! data-size weighted mean of the returns, reduced in ascending client id.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{ensure_dim, Error, Result};
use crate::io;
use crate::nn::{
    balanced_cross_entropy, cross_entropy, sgd_step, Extractor, Head, Model, Parameterized,
    TwoHeadModel,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub participation_ratio: f64,
    pub local_epochs: usize,
    pub personalization_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub balanced_softmax: bool,
    /// Restart the personalized head from the received global head every round
    /// instead of warm-starting from the previous local one.
    pub reinit_personal_head: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            participation_ratio: 1.0,
            local_epochs: 5,
            personalization_epochs: 1,
            batch_size: 32,
            lr: 0.01,
            weight_decay: 5e-4,
            balanced_softmax: false,
            reinit_personal_head: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "participation_ratio must be in (0, 1], got {}",
                self.participation_ratio
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Clients sampled per round, `ceil(r * K)`.
    pub fn clients_per_round(&self, num_clients: usize) -> usize {
        ((self.participation_ratio * num_clients as f64).ceil() as usize).clamp(1, num_clients)
    }
}

/// Widths of the extractor's hidden layers and its feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            feature_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub extractor: Extractor,
    pub global_head: Head,
    /// Absent until the first aggregation.
    pub global_descriptor: Option<Vec<f64>>,
    pub round: usize,
}

impl ServerState {
    pub fn init(
        input_dim: usize,
        num_classes: usize,
        model: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RngStream::new(seed).derive(TAG_INIT);
        let extractor = Extractor::init(&model.layer_dims(input_dim), &mut rng)?;
        let global_head = Head::init(model.feature_dim, num_classes, &mut rng);
        Ok(Self {
            extractor,
            global_head,
            global_descriptor: None,
            round: 0,
        })
    }

    pub fn global_model(&self) -> Model {
        Model {
            extractor: self.extractor.clone(),
            head: self.global_head.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub personal_head: Head,
    pub local_descriptor: Option<Vec<f64>>,
    pub num_train: usize,
}

impl ClientState {
    pub fn two_head(&self, server: &ServerState) -> TwoHeadModel {
        TwoHeadModel {
            extractor: server.extractor.clone(),
            global_head: server.global_head.clone(),
            personal_head: self.personal_head.clone(),
        }
    }
}

/// What a sampled client sends back.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReturn {
    pub client_id: usize,
    pub extractor: Extractor,
    pub global_head: Head,
    pub local_descriptor: Vec<f64>,
    pub num_samples: usize,
}

const TAG_INIT: u64 = 100;
const TAG_SERVER: u64 = 101;
const TAG_CLIENT_TRAIN: u64 = 102;
const TAG_CLIENT_HEAD: u64 = 103;
const TAG_CLIENT_FT: u64 = 104;

/// The batching stream of client `client_id`'s local training. Persists
/// across rounds.
pub fn client_train_stream(seed: u64, client_id: usize) -> RngStream {
    RngStream::new(seed).derive_path(&[TAG_CLIENT_TRAIN, client_id as u64])
}

pub fn client_head_stream(seed: u64, client_id: usize) -> RngStream {
    RngStream::new(seed).derive_path(&[TAG_CLIENT_HEAD, client_id as u64])
}

pub fn client_ft_stream(seed: u64, client_id: usize) -> RngStream {
    RngStream::new(seed).derive_path(&[TAG_CLIENT_FT, client_id as u64])
}

/// Shuffled mini-batches of `0..n`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

// Laplace-smoothed so classes absent from a client keep a finite log prior.
fn smoothed_counts(train: &LabeledSet) -> Vec<u64> {
    train.class_counts().into_iter().map(|c| c + 1).collect()
}

fn sgd_epochs(
    train: &LabeledSet,
    mut model: Model,
    epochs: usize,
    balanced: bool,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Model> {
    if train.is_empty() {
        return Err(Error::Config("empty train split".into()));
    }
    let counts = balanced.then(|| smoothed_counts(train));
    let mut grads = model.zeros_like();
    for _ in 0..epochs {
        for batch in shuffled_batches(train.len(), cfg.batch_size, rng) {
            grads.fill_zero();
            for &i in &batch {
                let label = train.label(i);
                model.accumulate_grad(
                    train.input(i),
                    |z| match &counts {
                        Some(c) => balanced_cross_entropy(z, label, c),
                        None => cross_entropy(z, label),
                    },
                    &mut grads,
                )?;
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                for g in t {
                    *g *= scale;
                }
            }
            sgd_step(&mut model, &grads, cfg.lr, cfg.weight_decay)?;
        }
    }
    Ok(model)
}

/// Mean training loss of `model` over `train` (plain or balanced cross-entropy per `cfg`).
pub fn mean_train_loss(train: &LabeledSet, model: &Model, cfg: &TrainConfig) -> Result<f64> {
    let counts = cfg.balanced_softmax.then(|| smoothed_counts(train));
    let mut total = 0.0;
    for (x, y) in train.iter() {
        let z = model.logits(x)?;
        total += match &counts {
            Some(c) => balanced_cross_entropy(&z, y, c)?.loss,
            None => cross_entropy(&z, y)?.loss,
        };
    }
    Ok(total / train.len() as f64)
}

/// Mini-batch SGD of the received extractor and global head over the train
/// split, with balanced softmax when `cfg.balanced_softmax` is set.
pub fn local_train(
    train: &LabeledSet,
    received: Model,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Model> {
    sgd_epochs(
        train,
        received,
        cfg.local_epochs,
        cfg.balanced_softmax,
        cfg,
        rng,
    )
}

/// End-to-end fine-tuning of a copy of the global model (FedAvg+FT), plain
/// cross-entropy.
pub fn fedavg_ft(
    train: &LabeledSet,
    global: &Model,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Model> {
    sgd_epochs(
        train,
        global.clone(),
        cfg.personalization_epochs,
        false,
        cfg,
        rng,
    )
}

/// Trains only the personalized head on features of the frozen extractor,
/// plain cross-entropy so the head keeps the local label prior.
pub fn train_personal_head(
    train: &LabeledSet,
    extractor: &Extractor,
    mut head: Head,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Head> {
    if train.is_empty() {
        return Err(Error::Config("empty train split".into()));
    }
    let features: Vec<Vec<f64>> = train
        .iter()
        .map(|(x, _)| extractor.forward(x))
        .collect::<Result<_>>()?;
    let mut grads = head.zeros_like();
    for _ in 0..cfg.personalization_epochs {
        for batch in shuffled_batches(train.len(), cfg.batch_size, rng) {
            grads.fill_zero();
            for &i in &batch {
                let h = &features[i];
                let z = head.forward(h)?;
                let lg = cross_entropy(&z, train.label(i))?;
                head.backward(h, &lg.grad, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                for g in t {
                    *g *= scale;
                }
            }
            sgd_step(&mut head, &grads, cfg.lr, cfg.weight_decay)?;
        }
    }
    Ok(head)
}

/// Mean extractor feature over the train split.
pub fn compute_local_descriptor(train: &LabeledSet, extractor: &Extractor) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Config("cannot describe an empty train split".into()));
    }
    let mut sum = vec![0.0; extractor.feature_dim()];
    for (x, _) in train.iter() {
        for (s, v) in sum.iter_mut().zip(extractor.forward(x)?) {
            *s += v;
        }
    }
    let n = train.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn weighted_sum<'a, P, I>(items: I) -> Result<P>
where
    P: Parameterized + Clone + 'a,
    I: IntoIterator<Item = (&'a P, f64)>,
{
    let mut iter = items.into_iter();
    let (first, w0) = iter
        .next()
        .ok_or_else(|| Error::Usage("nothing to aggregate".into()))?;
    let sig = first.shape_signature();
    let mut acc = first.zeros_like();
    let add = |p: &P, w: f64, acc: &mut P| -> Result<()> {
        if p.shape_signature() != sig {
            return Err(Error::dim("aggregate", acc.num_params(), p.num_params()));
        }
        for (a, t) in acc.tensors_mut().into_iter().zip(p.tensors()) {
            for (av, tv) in a.iter_mut().zip(t) {
                *av += w * tv;
            }
        }
        Ok(())
    };
    add(first, w0, &mut acc)?;
    for (p, w) in iter {
        add(p, w, &mut acc)?;
    }
    Ok(acc)
}

/// Data-size weighted mean of the returned extractors, global heads and
/// local descriptors, over the returning clients only.
pub fn aggregate(server: &ServerState, returns: &[ClientReturn]) -> Result<ServerState> {
    if returns.is_empty() {
        return Err(Error::Usage(
            "aggregate needs at least one returning client".into(),
        ));
    }
    let mut order: Vec<&ClientReturn> = returns.iter().collect();
    order.sort_by_key(|r| r.client_id);
    let total: usize = order.iter().map(|r| r.num_samples).sum();
    if total == 0 {
        return Err(Error::Config("returning clients hold no samples".into()));
    }
    let weights: Vec<f64> = order
        .iter()
        .map(|r| r.num_samples as f64 / total as f64)
        .collect();

    let extractor = weighted_sum(order.iter().zip(&weights).map(|(r, &w)| (&r.extractor, w)))?;
    let global_head = weighted_sum(
        order
            .iter()
            .zip(&weights)
            .map(|(r, &w)| (&r.global_head, w)),
    )?;
    let dim = order[0].local_descriptor.len();
    let mut descriptor = vec![0.0; dim];
    for (r, &w) in order.iter().zip(&weights) {
        ensure_dim("local descriptor", dim, r.local_descriptor.len())?;
        for (d, v) in descriptor.iter_mut().zip(&r.local_descriptor) {
            *d += w * v;
        }
    }
    ensure_dim("global descriptor", extractor.feature_dim(), dim)?;
    Ok(ServerState {
        extractor,
        global_head,
        global_descriptor: Some(descriptor),
        round: server.round + 1,
    })
}

/// Hooks into [`run_training_observed`]; all methods default to no-ops.
pub trait RoundObserver {
    fn on_broadcast(&mut self, _round: usize, _client_id: usize, _server: &ServerState) {}
    fn on_round_end(
        &mut self,
        _round: usize,
        _sampled: &[usize],
        _server: &ServerState,
        _clients: &[ClientState],
    ) {
    }
}

impl RoundObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

pub fn run_training(
    trains: &[&LabeledSet],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainingOutcome> {
    run_training_observed(trains, model, cfg, &mut ())
}

/// Full federated training. Client `k` is `trains[k]`.
pub fn run_training_observed(
    trains: &[&LabeledSet],
    model: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn RoundObserver,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let first = trains
        .first()
        .ok_or_else(|| Error::Config("need at least one client".into()))?;
    let mut server = ServerState::init(first.dim(), first.num_classes(), model, cfg.seed)?;
    let mut clients: Vec<ClientState> = trains
        .iter()
        .enumerate()
        .map(|(k, t)| ClientState {
            client_id: k,
            personal_head: server.global_head.clone(),
            local_descriptor: None,
            num_train: t.len(),
        })
        .collect();
    let mut train_rngs: Vec<RngStream> = (0..trains.len())
        .map(|k| client_train_stream(cfg.seed, k))
        .collect();
    let mut head_rngs: Vec<RngStream> = (0..trains.len())
        .map(|k| client_head_stream(cfg.seed, k))
        .collect();
    let mut server_rng = RngStream::new(cfg.seed).derive(TAG_SERVER);
    let per_round = cfg.clients_per_round(trains.len());

    for round in 0..cfg.rounds {
        let mut sampled: Vec<usize> =
            rand::seq::index::sample(&mut server_rng, trains.len(), per_round).into_vec();
        sampled.sort_unstable();
        let mut returns = Vec::with_capacity(sampled.len());
        for &k in &sampled {
            observer.on_broadcast(round, k, &server);
            let received = server.global_model();
            let trained = local_train(trains[k], received, cfg, &mut train_rngs[k])?;
            let start_head = if cfg.reinit_personal_head {
                server.global_head.clone()
            } else {
                clients[k].personal_head.clone()
            };
            clients[k].personal_head = train_personal_head(
                trains[k],
                &server.extractor,
                start_head,
                cfg,
                &mut head_rngs[k],
            )?;
            let descriptor = compute_local_descriptor(trains[k], &server.extractor)?;
            clients[k].local_descriptor = Some(descriptor.clone());
            returns.push(ClientReturn {
                client_id: k,
                extractor: trained.extractor,
                global_head: trained.head,
                local_descriptor: descriptor,
                num_samples: trains[k].len(),
            });
        }
        server = aggregate(&server, &returns)?;
        observer.on_round_end(round, &sampled, &server, &clients);
    }
    Ok(TrainingOutcome { server, clients })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    round: usize,
    layer_dims: Vec<usize>,
    num_classes: usize,
    has_global_descriptor: bool,
    clients: Vec<ClientEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClientEntry {
    client_id: usize,
    num_train: usize,
    has_local_descriptor: bool,
}

/// Writes `manifest.json` and flat little-endian `f64` arrays: `extractor.f64`
/// and `global_head.f64` (tensor order of [`Parameterized::flatten`]),
/// `global_descriptor.f64`, and per client `client{k}_head.f64`,
/// `client{k}_descriptor.f64`.
pub fn save_checkpoint(dir: &Path, outcome: &TrainingOutcome) -> Result<()> {
    io::create_dir(dir)?;
    let s = &outcome.server;
    let mut layer_dims = vec![s.extractor.input_dim()];
    layer_dims.extend(s.extractor.layers().iter().map(|l| l.out_dim()));
    io::write_f64s(&dir.join("extractor.f64"), &s.extractor.flatten())?;
    io::write_f64s(&dir.join("global_head.f64"), &s.global_head.flatten())?;
    if let Some(d) = &s.global_descriptor {
        io::write_f64s(&dir.join("global_descriptor.f64"), d)?;
    }
    let mut entries = Vec::new();
    for c in &outcome.clients {
        io::write_f64s(
            &dir.join(format!("client{}_head.f64", c.client_id)),
            &c.personal_head.flatten(),
        )?;
        if let Some(d) = &c.local_descriptor {
            io::write_f64s(
                &dir.join(format!("client{}_descriptor.f64", c.client_id)),
                d,
            )?;
        }
        entries.push(ClientEntry {
            client_id: c.client_id,
            num_train: c.num_train,
            has_local_descriptor: c.local_descriptor.is_some(),
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        round: s.round,
        layer_dims,
        num_classes: s.global_head.num_classes(),
        has_global_descriptor: s.global_descriptor.is_some(),
        clients: entries,
    };
    io::write_text(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainingOutcome> {
    let mpath = dir.join("manifest.json");
    let m: CheckpointManifest = serde_json::from_str(&io::read_text(&mpath)?)
        .map_err(|e| io::parse_err(&mpath, e.to_string()))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(io::parse_err(
            &mpath,
            format!("unsupported checkpoint version {}", m.version),
        ));
    }
    if m.layer_dims.len() < 2 {
        return Err(io::parse_err(&mpath, "extractor needs at least one layer"));
    }
    let mut extractor = Extractor::new(
        m.layer_dims
            .windows(2)
            .map(|w| crate::nn::DenseLayer::zeros(w[0], w[1]))
            .collect(),
    )?;
    extractor.assign_flat(&io::read_f64s(
        &dir.join("extractor.f64"),
        extractor.num_params(),
    )?)?;
    let feature_dim = extractor.feature_dim();
    let blank_head = Head::new(crate::nn::DenseLayer::zeros(feature_dim, m.num_classes));
    let mut global_head = blank_head.clone();
    global_head.assign_flat(&io::read_f64s(
        &dir.join("global_head.f64"),
        global_head.num_params(),
    )?)?;
    let global_descriptor = if m.has_global_descriptor {
        Some(io::read_f64s(
            &dir.join("global_descriptor.f64"),
            feature_dim,
        )?)
    } else {
        None
    };
    let mut clients = Vec::new();
    for e in &m.clients {
        let mut head = blank_head.clone();
        head.assign_flat(&io::read_f64s(
            &dir.join(format!("client{}_head.f64", e.client_id)),
            head.num_params(),
        )?)?;
        let local_descriptor = if e.has_local_descriptor {
            Some(io::read_f64s(
                &dir.join(format!("client{}_descriptor.f64", e.client_id)),
                feature_dim,
            )?)
        } else {
            None
        };
        clients.push(ClientState {
            client_id: e.client_id,
            personal_head: head,
            local_descriptor,
            num_train: e.num_train,
        });
    }
    Ok(TrainingOutcome {
        server: ServerState {
            extractor,
            global_head,
            global_descriptor,
            round: m.round,
        },
        clients,
    })
}
