use std::path::Path;

use fedthe::fl::load_checkpoint;
use fedthe::harness::{
    build_report, e_histograms, median, parse_config, read_metrics, read_traces, run_grid,
    ExperimentConfig, MetricsRecord, TraceRow, TRACE_HEADER,
};
use proptest::prelude::*;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![5],
        methods: vec!["fedthe".into()],
        streams: vec!["id".into()],
        output_dir: out.to_path_buf(),
        threads: 1,
        ..ExperimentConfig::default()
    };
    cfg.bench.samples_per_class = 40;
    cfg.bench.clients = 3;
    cfg.train.rounds = 2;
    cfg
}

#[test]
fn config_rejects_bad_input() {
    let p = Path::new("x.toml");
    assert!(parse_config("methods = []", p).unwrap_err().is_validation());
    assert!(parse_config("[bench]\nalpha = 0.0", p)
        .unwrap_err()
        .is_validation());
    assert!(parse_config("methods = [\"nope\"]", p)
        .unwrap_err()
        .is_validation());
    assert!(parse_config("unknown_key = 1", p)
        .unwrap_err()
        .is_validation());
    assert!(parse_config("[bench]\nseverity = 6", p)
        .unwrap_err()
        .is_validation());
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = ExperimentConfig {
        seeds: vec![3, 1],
        ..ExperimentConfig::default()
    };
    cfg.adapt.beta = 0.3;
    cfg.adapt.pinned_e = Some(0.25);
    cfg.train.reinit_personal_head = true;
    let back = parse_config(&cfg.to_toml().unwrap(), Path::new("c.toml")).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn shipped_desk_config_parses() {
    let text = include_str!("../../../configs/desk.toml");
    let cfg = parse_config(text, Path::new("desk.toml")).unwrap();
    assert_eq!(cfg.seeds.len(), 3);
    assert_eq!(cfg.bench.clients, 8);
}

#[test]
fn one_record_per_client_and_rerun_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let grid = run_grid(&cfg).unwrap();
    let records: Vec<&MetricsRecord> = grid.records().collect();
    assert_eq!(records.len(), cfg.bench.clients);
    let first = std::fs::read(&grid.metrics_path).unwrap();
    assert_eq!(
        read_metrics(&grid.metrics_path).unwrap().len(),
        cfg.bench.clients
    );

    let again = run_grid(&cfg).unwrap();
    assert_eq!(std::fs::read(&again.metrics_path).unwrap(), first);

    let traces = std::fs::read_to_string(grid.trace_path.as_ref().unwrap()).unwrap();
    assert_eq!(traces.lines().next(), Some(TRACE_HEADER));
    let rows = read_traces(grid.trace_path.as_ref().unwrap()).unwrap();
    let samples: usize = records.iter().map(|r| r.n_samples).sum();
    assert_eq!(rows.len(), samples);

    let restored = load_checkpoint(&dir.path().join("seed5").join("checkpoint")).unwrap();
    assert_eq!(restored, grid.runs[0].training);
}

fn record(
    seed: u64,
    method: &str,
    client: usize,
    stream: &str,
    correct: usize,
    n: usize,
) -> MetricsRecord {
    MetricsRecord {
        seed,
        method: method.into(),
        ablation: "none".into(),
        client,
        stream: stream.into(),
        correct,
        n_samples: n,
        accuracy: correct as f64 / n as f64,
    }
}

#[test]
fn report_of_one_record() {
    let table = build_report(&[record(0, "fedthe", 0, "id", 7, 10)]).unwrap();
    let cell = table.cell("fedthe", "id").unwrap();
    assert!((cell.mean - 0.7).abs() < 1e-12);
    assert_eq!(cell.std, 0.0);
    assert_eq!(table.columns(), vec!["id".to_string(), "Average".into()]);
}

#[test]
fn report_spreads_across_seeds() {
    let recs = [
        record(0, "global", 0, "ooc", 6, 10),
        record(1, "global", 0, "ooc", 8, 10),
    ];
    let cell = build_report(&recs).unwrap().cell("global", "ooc").unwrap();
    assert!((cell.mean - 0.7).abs() < 1e-12);
    assert!((cell.std - 0.1).abs() < 1e-12);
}

#[test]
fn report_columns_follow_streams() {
    let mut recs = Vec::new();
    for s in ["id", "corrupted", "ooc"] {
        recs.push(record(0, "global", 0, s, 1, 2));
    }
    let table = build_report(&recs).unwrap();
    let cols = table.columns();
    assert_eq!(cols.last().map(String::as_str), Some("Average"));
    assert_eq!(cols.len(), 4);
    assert!(table.to_text().contains("global"));
    assert_eq!(table.to_csv().lines().count(), 2);
}

fn trace(stream: &str, v: f64) -> TraceRow {
    TraceRow {
        seed: 0,
        method: "fedthe".into(),
        client: 0,
        stream: stream.into(),
        sample_index: 0,
        one_minus_e: v,
        correct: true,
    }
}

#[test]
fn constant_trace_fills_one_bin() {
    let rows: Vec<TraceRow> = (0..30).map(|_| trace("id", 0.5)).collect();
    let hists = e_histograms(&rows, 10).unwrap();
    assert_eq!(hists.len(), 1);
    let nonzero = hists[0].density.iter().filter(|d| **d > 0.0).count();
    assert_eq!(nonzero, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn histogram_density_integrates_to_one(values in prop::collection::vec(0.0f64..=1.0, 1..200), bins in 1usize..40) {
        let rows: Vec<TraceRow> = values.iter().map(|&v| trace("ooc", v)).collect();
        let h = &e_histograms(&rows, bins).unwrap()[0];
        let total: f64 = h.density.iter().sum::<f64>() * h.bin_width();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert_eq!(h.count, values.len());
    }

    #[test]
    fn report_mean_lies_between_extremes(accs in prop::collection::vec(0usize..=20, 1..6)) {
        let recs: Vec<MetricsRecord> = accs.iter().enumerate().map(|(s, &c)| record(s as u64, "m", 0, "id", c, 20)).collect();
        let cell = build_report(&recs).unwrap().cell("m", "id").unwrap();
        let lo = *accs.iter().min().unwrap() as f64 / 20.0;
        let hi = *accs.iter().max().unwrap() as f64 / 20.0;
        prop_assert!(cell.mean >= lo - 1e-9 && cell.mean <= hi + 1e-9);
        prop_assert!(cell.std >= 0.0);
    }

    #[test]
    fn median_splits_the_sample(values in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let m = median(&values);
        let below = values.iter().filter(|v| **v < m).count();
        let above = values.iter().filter(|v| **v > m).count();
        prop_assert!(below <= values.len() / 2 && above <= values.len() / 2);
    }
}
