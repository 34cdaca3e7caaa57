//! Experiment configuration, the evaluation grid, metrics files, report
//! tables, e-trace histograms and the self-test.
//!
//! Config files are TOML. Every table and key is optional; absent keys take
//! their defaults and unknown keys are rejected.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! methods = ["global", "fedavg_ft", "fedthe", "fedthe_plus"]
//! streams = ["id", "corrupted", "ooc", "natural", "mixture"]
//! output_dir = "runs/desk"
//! threads = 0            # 0 = all available cores
//! save_checkpoints = true
//! save_traces = true
//!
//! [generator]            # data::SyntheticParams
//! num_classes = 10
//! [bench]                # data::BenchConfig
//! alpha = 0.1
//! [model]                # fl::ModelConfig
//! [train]                # fl::TrainConfig (its seed is replaced by each grid seed)
//! rounds = 30
//! [adapt]                # tta::AdaptConfig
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    build_benchmark, BenchConfig, Benchmark, GeneratorSpec, StreamKind, SyntheticParams,
};
use crate::error::{Error, Result};
use crate::fl::{
    client_ft_stream, fedavg_ft, run_training, save_checkpoint, ModelConfig, TrainConfig,
    TrainingOutcome,
};
use crate::io;
use crate::nn::Model;
use crate::rng::RngStream;
use crate::tta::{
    predict_stream, AdaptConfig, AugmentationSpec, ClientModels, LossMode, Method, StreamResult,
};

/// A method of the grid: one of the six base methods or an ablation of the
/// head-ensembling method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Global,
    FedavgFt,
    MemoG,
    MemoP,
    /// Two-head ensemble with `e` fixed at 0.5, no test-time optimization.
    TwoHead,
    Fedthe,
    FedthePlus,
    FedtheEmOnly,
    FedtheFaOnly,
    FedtheFixedHalf,
    FedtheBatch,
    FedtheNoHistory,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::Global,
        Variant::FedavgFt,
        Variant::MemoG,
        Variant::MemoP,
        Variant::TwoHead,
        Variant::Fedthe,
        Variant::FedthePlus,
        Variant::FedtheEmOnly,
        Variant::FedtheFaOnly,
        Variant::FedtheFixedHalf,
        Variant::FedtheBatch,
        Variant::FedtheNoHistory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::FedavgFt => "fedavg_ft",
            Variant::MemoG => "memo_g",
            Variant::MemoP => "memo_p",
            Variant::TwoHead => "two_head",
            Variant::Fedthe => "fedthe",
            Variant::FedthePlus => "fedthe_plus",
            Variant::FedtheEmOnly => "fedthe_em_only",
            Variant::FedtheFaOnly => "fedthe_fa_only",
            Variant::FedtheFixedHalf => "fedthe_fixed_half",
            Variant::FedtheBatch => "fedthe_batch",
            Variant::FedtheNoHistory => "fedthe_no_history",
        }
    }

    pub fn base(self) -> Method {
        match self {
            Variant::Global => Method::Global,
            Variant::FedavgFt => Method::FedavgFt,
            Variant::MemoG => Method::MemoG,
            Variant::MemoP => Method::MemoP,
            Variant::FedthePlus => Method::FedthePlus,
            _ => Method::Fedthe,
        }
    }

    /// Short description of what differs from the base method.
    pub fn ablation(self) -> &'static str {
        match self {
            Variant::TwoHead => "pinned_e=0.5",
            Variant::FedtheEmOnly => "loss=em_only",
            Variant::FedtheFaOnly => "loss=fa_only",
            Variant::FedtheFixedHalf => "loss=fixed_half",
            Variant::FedtheBatch => "batch_wise",
            Variant::FedtheNoHistory => "no_history",
            _ => "none",
        }
    }

    pub fn adapt_config(self, base: &AdaptConfig) -> AdaptConfig {
        let mut cfg = base.clone();
        match self {
            Variant::TwoHead => cfg.pinned_e = Some(0.5),
            Variant::FedtheEmOnly => cfg.loss_mode = LossMode::EmOnly,
            Variant::FedtheFaOnly => cfg.loss_mode = LossMode::FaOnly,
            Variant::FedtheFixedHalf => cfg.loss_mode = LossMode::FixedHalf,
            Variant::FedtheBatch => cfg.batch_wise = true,
            Variant::FedtheNoHistory => cfg.use_history = false,
            _ => {}
        }
        cfg
    }

    fn needs_fine_tuned(self) -> bool {
        matches!(self, Variant::FedavgFt | Variant::MemoP)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub streams: Vec<String>,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub save_checkpoints: bool,
    pub save_traces: bool,
    pub generator: SyntheticParams,
    pub bench: BenchConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            methods: [
                "global",
                "fedavg_ft",
                "memo_g",
                "memo_p",
                "fedthe",
                "fedthe_plus",
            ]
            .map(String::from)
            .to_vec(),
            streams: StreamKind::BENCHMARK.map(|s| s.name().to_string()).to_vec(),
            output_dir: PathBuf::from("runs/default"),
            threads: 0,
            save_checkpoints: true,
            save_traces: true,
            generator: SyntheticParams::default(),
            bench: BenchConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.streams.is_empty() {
            return Err(Error::Config("streams must not be empty".into()));
        }
        self.variants()?;
        self.stream_kinds()?;
        if !(self.bench.alpha > 0.0) || !self.bench.alpha.is_finite() {
            return Err(Error::Config(format!(
                "bench.alpha must be > 0, got {}",
                self.bench.alpha
            )));
        }
        if self.bench.clients == 0 {
            return Err(Error::Config("bench.clients must be >= 1".into()));
        }
        if !(1..=5).contains(&self.bench.severity) {
            return Err(Error::Config(format!(
                "bench.severity must be in 1..=5, got {}",
                self.bench.severity
            )));
        }
        if self.generator.num_classes < 2 || self.generator.input_dim == 0 {
            return Err(Error::Config(
                "generator needs >= 2 classes and input_dim >= 1".into(),
            ));
        }
        self.train.validate()?;
        self.adapt.validate()
    }

    /// Methods in grid order, deduplicated.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        let mut v = self
            .methods
            .iter()
            .map(|m| m.parse())
            .collect::<Result<Vec<Variant>>>()?;
        v.sort_unstable();
        v.dedup();
        Ok(v)
    }

    pub fn stream_kinds(&self) -> Result<Vec<StreamKind>> {
        let mut v = self
            .streams
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<StreamKind>>>()?;
        v.sort_unstable();
        v.dedup();
        Ok(v)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| io::parse_err(path, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&io::read_text(path)?, path)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub seed: u64,
    pub method: String,
    pub ablation: String,
    pub client: usize,
    pub stream: String,
    pub correct: usize,
    pub n_samples: usize,
    pub accuracy: f64,
}

impl MetricsRecord {
    fn new(
        seed: u64,
        variant: Variant,
        client: usize,
        stream: StreamKind,
        result: &StreamResult,
    ) -> Self {
        let correct = result.num_correct();
        let n = result.correct.len();
        Self {
            seed,
            method: variant.name().to_string(),
            ablation: variant.ablation().to_string(),
            client,
            stream: stream.name().to_string(),
            correct,
            n_samples: n,
            accuracy: if n == 0 {
                0.0
            } else {
                correct as f64 / n as f64
            },
        }
    }
}

/// Wall time of one grid unit; kept out of the metrics file so that file is
/// byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub seed: u64,
    pub method: String,
    pub client: usize,
    pub stream: String,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub seed: u64,
    pub method: String,
    pub client: usize,
    pub stream: String,
    pub sample_index: usize,
    pub one_minus_e: f64,
    pub correct: bool,
}

pub const TRACE_HEADER: &str = "seed,method,client,stream,sample_index,one_minus_e,correct";

impl TraceRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:?},{}",
            self.seed,
            self.method,
            self.client,
            self.stream,
            self.sample_index,
            self.one_minus_e,
            u8::from(self.correct)
        )
    }
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let text = io::read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        _ => {
            return Err(io::parse_err(
                path,
                format!("expected header '{TRACE_HEADER}'"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| io::parse_err(path, format!("line {}: bad {what}", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("field count"));
        }
        rows.push(TraceRow {
            seed: f[0].parse().map_err(|_| bad("seed"))?,
            method: f[1].to_string(),
            client: f[2].parse().map_err(|_| bad("client"))?,
            stream: f[3].to_string(),
            sample_index: f[4].parse().map_err(|_| bad("sample_index"))?,
            one_minus_e: f[5].parse().map_err(|_| bad("one_minus_e"))?,
            correct: match f[6] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("correct flag")),
            },
        });
    }
    Ok(rows)
}

/// Everything one seed of the grid produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub bench: Benchmark,
    pub training: TrainingOutcome,
    pub records: Vec<MetricsRecord>,
    pub traces: Vec<TraceRow>,
    pub timings: Vec<TimingRecord>,
}

const TAG_EVAL: u64 = 300;

fn thread_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    }
}

/// Runs `f` over `0..n` on up to `threads` workers and returns results in
/// index order.
fn parallel_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, threads: usize, f: F) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(n).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|o| o.expect("every index filled"))
        .collect()
}

/// Builds the benchmark, trains once and evaluates every method on every
/// client's requested streams for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let variants = cfg.variants()?;
    let streams = cfg.stream_kinds()?;
    let threads = thread_count(cfg.threads);

    let generator = GeneratorSpec::synthetic(&cfg.generator, seed)?;
    let sigma = generator.within_class_std;
    let bench = build_benchmark(generator, &cfg.bench, seed)?;
    let trains: Vec<_> = bench.clients.iter().map(|c| &c.train).collect();
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let training = run_training(&trains, &cfg.model, &train_cfg)?;

    let global = training.server.global_model();
    let fine_tuned: Vec<Option<Model>> = if variants.iter().any(|v| v.needs_fine_tuned()) {
        parallel_map(trains.len(), threads, |k| {
            fedavg_ft(
                trains[k],
                &global,
                &train_cfg,
                &mut client_ft_stream(seed, k),
            )
            .map(Some)
        })
        .into_iter()
        .collect::<Result<_>>()?
    } else {
        vec![None; trains.len()]
    };
    let two_heads: Vec<_> = training
        .clients
        .iter()
        .map(|c| c.two_head(&training.server))
        .collect();
    let global_desc = training
        .server
        .global_descriptor
        .clone()
        .unwrap_or_else(|| vec![0.0; training.server.extractor.feature_dim()]);
    let local_descs: Vec<Vec<f64>> = training
        .clients
        .iter()
        .map(|c| {
            c.local_descriptor
                .clone()
                .unwrap_or_else(|| global_desc.clone())
        })
        .collect();
    let aug = AugmentationSpec::new(sigma);

    let mut units = Vec::new();
    for &v in &variants {
        for k in 0..bench.clients.len() {
            for &s in &streams {
                units.push((v, k, s));
            }
        }
    }
    let outputs = parallel_map(units.len(), threads, |i| {
        let (v, k, s) = units[i];
        let start = Instant::now();
        let result = (|| {
            let models = ClientModels {
                two_head: &two_heads[k],
                fine_tuned: fine_tuned[k].as_ref(),
                global_descriptor: &global_desc,
                local_descriptor: &local_descs[k],
            };
            let stream = bench.clients[k].stream(s)?;
            let mut rng =
                RngStream::new(seed).derive_path(&[TAG_EVAL, v as u64, k as u64, s as u64]);
            predict_stream(
                v.base(),
                &models,
                &stream.samples,
                &v.adapt_config(&cfg.adapt),
                &aug,
                &mut rng,
            )
        })();
        (result, start.elapsed().as_secs_f64())
    });

    let mut records = Vec::with_capacity(units.len());
    let mut traces = Vec::new();
    let mut timings = Vec::with_capacity(units.len());
    for (&(v, k, s), (result, secs)) in units.iter().zip(outputs) {
        let result = result.map_err(|e| Error::Grid {
            seed,
            method: v.name().to_string(),
            client: k,
            stream: s.name().to_string(),
            source: Box::new(e),
        })?;
        records.push(MetricsRecord::new(seed, v, k, s, &result));
        timings.push(TimingRecord {
            seed,
            method: v.name().to_string(),
            client: k,
            stream: s.name().to_string(),
            wall_time_secs: secs,
        });
        for (i, (&ome, &ok)) in result.one_minus_e.iter().zip(&result.correct).enumerate() {
            traces.push(TraceRow {
                seed,
                method: v.name().to_string(),
                client: k,
                stream: s.name().to_string(),
                sample_index: i,
                one_minus_e: ome,
                correct: ok,
            });
        }
    }
    Ok(SeedRun {
        seed,
        bench,
        training,
        records,
        traces,
        timings,
    })
}

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub runs: Vec<SeedRun>,
    pub metrics_path: PathBuf,
    pub trace_path: Option<PathBuf>,
}

impl GridOutput {
    pub fn records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.runs.iter().flat_map(|r| r.records.iter())
    }

    pub fn traces(&self) -> impl Iterator<Item = &TraceRow> {
        self.runs.iter().flat_map(|r| r.traces.iter())
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs every seed in ascending order. `metrics.jsonl`, `timings.jsonl` and
/// `etrace.csv` in the output directory are recreated and then appended one
/// seed at a time; per-seed checkpoints go to `seed{N}/checkpoint`.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutput> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    io::create_dir(out)?;
    let metrics_path = out.join("metrics.jsonl");
    let timings_path = out.join("timings.jsonl");
    let trace_path = out.join("etrace.csv");
    io::write_text(&metrics_path, "")?;
    io::write_text(&timings_path, "")?;
    if cfg.save_traces {
        io::write_text(&trace_path, &format!("{TRACE_HEADER}\n"))?;
    }
    io::write_text(&out.join("config.toml"), &cfg.to_toml()?)?;

    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut runs = Vec::new();
    for seed in seeds {
        let run = run_seed(cfg, seed)?;
        if cfg.save_checkpoints {
            save_checkpoint(
                &out.join(format!("seed{seed}")).join("checkpoint"),
                &run.training,
            )?;
        }
        let mut text = String::new();
        for r in &run.records {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
            text.push('\n');
        }
        append(&metrics_path, &text)?;
        let mut text = String::new();
        for t in &run.timings {
            text.push_str(&serde_json::to_string(t).map_err(|e| Error::Config(e.to_string()))?);
            text.push('\n');
        }
        append(&timings_path, &text)?;
        if cfg.save_traces {
            let mut text = String::new();
            for t in &run.traces {
                text.push_str(&t.to_line());
                text.push('\n');
            }
            append(&trace_path, &text)?;
        }
        runs.push(run);
    }
    Ok(GridOutput {
        runs,
        metrics_path,
        trace_path: cfg.save_traces.then_some(trace_path),
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = io::read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| io::parse_err(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

impl Cell {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// One per stream, mean ± std across seeds of the client-averaged accuracy.
    pub cells: Vec<Cell>,
    /// Mean of the stream cells ± std across streams.
    pub average: Cell,
    /// Per-seed stream average, mean ± std across seeds.
    pub average_over_seeds: Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub streams: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub num_seeds: usize,
}

impl ReportTable {
    pub fn columns(&self) -> Vec<String> {
        let mut c = self.streams.clone();
        c.push("Average".into());
        c
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Cell for `(method, stream)`; `stream` may be `Average`.
    pub fn cell(&self, method: &str, stream: &str) -> Option<Cell> {
        let row = self.row(method)?;
        if stream == "Average" {
            return Some(row.average);
        }
        let i = self.streams.iter().position(|s| s == stream)?;
        Some(row.cells[i])
    }

    /// Aligned text table, accuracies in percent. `Average` carries the std
    /// across streams; the last column carries the std across seeds.
    pub fn to_text(&self) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.columns());
        header.push("Average (seed std)".into());
        let mut rows = vec![header];
        for r in &self.rows {
            let mut line = vec![r.method.clone()];
            line.extend(r.cells.iter().map(Cell::to_string));
            line.push(r.average.to_string());
            line.push(r.average_over_seeds.to_string());
            rows.push(line);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        let _ = writeln!(out, "({} seeds; std is population std)", self.num_seeds);
        out
    }

    /// Comma-separated export with fractions, one row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for c in self.columns() {
            let _ = write!(out, ",{c}_mean,{c}_std");
        }
        out.push_str(",Average_seed_std\n");
        for r in &self.rows {
            out.push_str(&r.method);
            for c in r.cells.iter().chain(std::iter::once(&r.average)) {
                let _ = write!(out, ",{:?},{:?}", c.mean, c.std);
            }
            let _ = writeln!(out, ",{:?}", r.average_over_seeds.std);
        }
        out
    }
}

fn stream_order(name: &str) -> (usize, String) {
    let pos = StreamKind::BENCHMARK
        .iter()
        .chain(StreamKind::ALL.iter())
        .position(|s| s.name() == name)
        .unwrap_or(usize::MAX);
    (pos, name.to_string())
}

fn method_order(name: &str) -> (usize, String) {
    let pos = Variant::ALL
        .iter()
        .position(|v| v.name() == name)
        .unwrap_or(usize::MAX);
    (pos, name.to_string())
}

/// Client-average per (method, stream, seed), then mean ± std across seeds.
pub fn build_report(records: &[MetricsRecord]) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(Error::Usage("no metrics records".into()));
    }
    let mut per: BTreeMap<(&str, &str, u64), Vec<f64>> = BTreeMap::new();
    for r in records {
        per.entry((&r.method, &r.stream, r.seed))
            .or_default()
            .push(r.accuracy);
    }
    let mut streams: Vec<String> = records.iter().map(|r| r.stream.clone()).collect();
    streams.sort_by_key(|s| stream_order(s));
    streams.dedup();
    let mut methods: Vec<String> = records.iter().map(|r| r.method.clone()).collect();
    methods.sort_by_key(|m| method_order(m));
    methods.dedup();
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let client_avg = |m: &str, s: &str, seed: u64| per.get(&(m, s, seed)).map(|v| Cell::of(v).mean);
    let mut rows = Vec::new();
    for m in &methods {
        let cells: Vec<Cell> = streams
            .iter()
            .map(|s| {
                Cell::of(
                    &seeds
                        .iter()
                        .filter_map(|&seed| client_avg(m, s, seed))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let average = Cell::of(&cells.iter().map(|c| c.mean).collect::<Vec<_>>());
        let per_seed: Vec<f64> = seeds
            .iter()
            .filter_map(|&seed| {
                let v: Vec<f64> = streams
                    .iter()
                    .filter_map(|s| client_avg(m, s, seed))
                    .collect();
                (!v.is_empty()).then(|| Cell::of(&v).mean)
            })
            .collect();
        rows.push(ReportRow {
            method: m.clone(),
            cells,
            average,
            average_over_seeds: Cell::of(&per_seed),
        });
    }
    Ok(ReportTable {
        streams,
        rows,
        num_seeds: seeds.len(),
    })
}

pub fn report(metrics: &Path) -> Result<ReportTable> {
    build_report(&read_metrics(metrics)?)
}

/// Density histogram of `1 - e*` on `[0, 1]` for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EHistogram {
    pub stream: String,
    pub count: usize,
    pub density: Vec<f64>,
}

impl EHistogram {
    pub fn bin_width(&self) -> f64 {
        1.0 / self.density.len() as f64
    }

    /// Fraction of samples with `1 - e*` below `x`, counting whole bins.
    pub fn mass_below(&self, x: f64) -> f64 {
        let w = self.bin_width();
        let bins = ((x / w).floor() as usize).min(self.density.len());
        self.density[..bins].iter().sum::<f64>() * w
    }
}

/// One histogram per stream, in benchmark stream order.
pub fn e_histograms<'a, I: IntoIterator<Item = &'a TraceRow>>(
    rows: I,
    bins: usize,
) -> Result<Vec<EHistogram>> {
    if bins == 0 {
        return Err(Error::Usage("bins must be >= 1".into()));
    }
    let mut counts: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
    for r in rows {
        let b = ((r.one_minus_e * bins as f64).floor() as usize).min(bins - 1);
        counts
            .entry(stream_order(&r.stream))
            .or_insert_with(|| vec![0; bins])[b] += 1;
    }
    if counts.is_empty() {
        return Err(Error::Usage("empty e-trace".into()));
    }
    Ok(counts
        .into_iter()
        .map(|((_, stream), c)| {
            let n: usize = c.iter().sum();
            EHistogram {
                stream,
                count: n,
                density: c
                    .iter()
                    .map(|&k| k as f64 * bins as f64 / n as f64)
                    .collect(),
            }
        })
        .collect())
}

/// Reads a trace file, optionally keeps one method, and bins it.
pub fn export_e_histogram(
    trace: &Path,
    bins: usize,
    method: Option<&str>,
) -> Result<Vec<EHistogram>> {
    let rows = read_traces(trace)?;
    e_histograms(
        rows.iter().filter(|r| method.is_none_or(|m| r.method == m)),
        bins,
    )
}

/// Comma-separated `stream,bin_lo,bin_hi,density`.
pub fn histograms_to_csv(hists: &[EHistogram]) -> String {
    let mut out = String::from("stream,bin_lo,bin_hi,density\n");
    for h in hists {
        let w = h.bin_width();
        for (i, d) in h.density.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?}",
                h.stream,
                i as f64 * w,
                (i + 1) as f64 * w,
                d
            );
        }
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub mod selftest;
