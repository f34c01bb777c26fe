use mshllm::commands::{cmd_ablate, cmd_eval, cmd_grid, cmd_train, cmd_transfer, prepare, TrainOptions};
use mshllm::config::{DataSource, RunConfig, Variant};
use mshllm::data::{load_csv, Frequency};
use mshllm::synth::{write_synth, SynthSpec};

fn tiny() -> RunConfig {
    let mut c = RunConfig::synthetic_default();
    c.data = DataSource::Synth(SynthSpec::two_season(600, 0.1, 4));
    c.model.input_len = 48;
    c.model.horizon = 8;
    c.model.scales.windows = vec![4];
    c.model.prototypes.vocab_size = 80;
    c.model.prototypes.width = 8;
    c.model.prototypes.counts = vec![10, 5];
    c.model.hyperedges.counts = vec![6, 3];
    c.model.backbone.layers = 1;
    c.train.epochs = 1;
    c.train.stride = 16;
    c
}

#[test]
fn transfer_onto_itself_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let t = cmd_transfer(&cfg, &cfg, dir.path()).unwrap();
    let e = cmd_eval(&cfg, &dir.path().join("source/checkpoint.json"), None).unwrap();
    assert_eq!(t.len(), e.len());
    for (a, b) in t.iter().zip(&e) {
        assert_eq!(a.metric, b.metric);
        assert!((a.value - b.value).abs() <= 1e-12 || (a.value.is_nan() && b.value.is_nan()));
        assert!(a.protocol.starts_with("zeroshot"));
    }
}

#[test]
fn patch_mixing_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_ablate(&tiny(), Variant::Pm, dir.path()).unwrap();
    assert!(o.records.iter().any(|r| r.metric == "mse" && r.value.is_finite()));
    let text = std::fs::read_to_string(dir.path().join("pm/config.toml")).unwrap();
    assert!(text.contains("mixing = \"patch\""));
}

#[test]
fn csv_source_trains_like_the_generated_series() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::two_season(600, 0.1, 4);
    let csv = dir.path().join("s.csv");
    write_synth(&spec, &csv).unwrap();
    let ds = load_csv(&csv, Frequency::Hourly).unwrap();
    let direct = spec.generate().unwrap();
    for (a, b) in ds.values.data().iter().zip(direct.values.data()) {
        assert!((a - b).abs() <= 1e-11 * b.abs().max(1.0));
    }
    let mut cfg = tiny();
    cfg.data = DataSource::Csv {
        path: csv,
        frequency: Frequency::Hourly,
    };
    let o = cmd_train(&cfg, &dir.path().join("run"), &TrainOptions::default()).unwrap();
    assert!(o.records.iter().all(|r| r.dataset == "s"));
}

#[test]
fn masking_changes_the_inputs_deterministically() {
    let mut cfg = tiny();
    let clean = prepare(&cfg).unwrap();
    cfg.mask_rate = 0.2;
    let a = prepare(&cfg).unwrap();
    let b = prepare(&cfg).unwrap();
    assert_eq!(a.train[0].input, b.train[0].input);
    assert_ne!(a.train[0].input, clean.train[0].input);
    let zeros = a.train_ds.values.data().iter().filter(|&&v| v == 0.0).count() as f64;
    let frac = zeros / a.train_ds.values.len() as f64;
    assert!((frac - 0.2).abs() < 0.05, "{frac}");
}

#[test]
fn grid_picks_the_lowest_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.data = DataSource::Synth(SynthSpec::two_season(400, 0.1, 1));
    cfg.model.prototypes.vocab_size = 400;
    let g = cmd_grid(&cfg, 2, dir.path()).unwrap();
    let rows: Vec<Vec<String>> = g
        .summary_csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    let vals: Vec<f64> = rows.iter().map(|r| r.last().unwrap().parse().unwrap()).collect();
    let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(vals[g.best_index], best);
    assert!(dir.path().join("grid.csv").exists());
}
