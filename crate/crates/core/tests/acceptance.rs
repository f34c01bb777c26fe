//! Ten acceptance criteria, run in sequence by one test so that each runtime
//! is measured without contention. Each prints a PASS/FAIL line to stderr
//! (bypassing the harness capture) and the test fails if any criterion does.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mshllm::backbone::BackboneVariant;
use mshllm::commands::{cmd_ablate, cmd_train, cmd_transfer, prepare, TrainOptions};
use mshllm::config::{DataSource, Protocol, RunConfig, Variant};
use mshllm::data::{revin_denormalize, revin_normalize, WindowSample};
use mshllm::hyperedge::{hyperedge_features, patch_features, patch_incidence, sparsify_topk, IncidenceMatrix};
use mshllm::metrics::{mase, owa, smape, zero_shot_eval};
use mshllm::model::{Mixing, Model};
use mshllm::numerics::{Graph, ParamId, Tensor};
use mshllm::synth::SynthSpec;
use mshllm::train::loss_mse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn fill(rows: usize, cols: usize, mut f: impl FnMut() -> f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| f()).collect()).unwrap()
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(rows, cols, 1.0, rng)
}

// ---------------------------------------------------------------- 1

fn gradient_config() -> RunConfig {
    let mut c = RunConfig::synthetic_default();
    c.model.input_len = 64;
    c.model.horizon = 8;
    c.model.channels = 4;
    c.model.scales.windows = vec![4];
    c.model.prototypes.vocab_size = 80;
    c.model.prototypes.width = 8;
    c.model.prototypes.counts = vec![10, 5];
    c.model.hyperedges.counts = vec![8, 4];
    c.model.hyperedges.eta = 2;
    c.model.backbone.variant = BackboneVariant::FrozenTransformer;
    c.model.backbone.layers = 2;
    c
}

fn sample_loss(model: &Model, samples: &[WindowSample]) -> f64 {
    let mut g = Graph::new();
    let shared = model.shared(&mut g).unwrap();
    let mut terms = Vec::new();
    for s in samples {
        let out = model.forward(&mut g, &shared, &s.input).unwrap();
        let t = g.constant(s.target.clone());
        terms.push(loss_mse(&mut g, out.pred, t).unwrap());
    }
    let stacked = g.concat_rows(&terms).unwrap();
    let loss = g.mean(stacked);
    g.value(loss).data()[0]
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = gradient_config();
    let meta = Model::prompt_meta("grad", cfg.frequency(), cfg.model.horizon);
    let mut model = Model::new(cfg.model.clone(), 11, meta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<WindowSample> = (0..2)
        .map(|i| WindowSample {
            input: randn(64, 4, &mut rng).map(|v| v + i as f64),
            target: randn(8, 4, &mut rng),
            origin_index: 0,
        })
        .collect();

    // analytic gradients
    let mut g = Graph::new();
    let shared = model.shared(&mut g).unwrap();
    let mut terms = Vec::new();
    for s in &samples {
        let out = model.forward(&mut g, &shared, &s.input).unwrap();
        let t = g.constant(s.target.clone());
        terms.push(loss_mse(&mut g, out.pred, t).unwrap());
    }
    let stacked = g.concat_rows(&terms).unwrap();
    let loss = g.mean(stacked);
    model.store.zero_grad();
    g.backward(loss, &mut model.store).unwrap();

    // every trainable tensor once, then random entries up to 30
    let trainable: Vec<ParamId> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut picks: Vec<(ParamId, usize)> = trainable
        .iter()
        .map(|&id| (id, rng.random_range(0..model.store.value(id).len())))
        .collect();
    while picks.len() < 30 {
        let id = trainable[rng.random_range(0..trainable.len())];
        picks.push((id, rng.random_range(0..model.store.value(id).len())));
    }

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for &(id, k) in &picks {
        let analytic = model.store.get(id).grad().data()[k];
        let orig = model.store.value(id).data()[k];
        model.store.get_mut(id).tensor.data_mut()[k] = orig + eps;
        let lp = sample_loss(&model, &samples);
        model.store.get_mut(id).tensor.data_mut()[k] = orig - eps;
        let lm = sample_loss(&model, &samples);
        model.store.get_mut(id).tensor.data_mut()[k] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        // gradients under 1e-6 are compared against that floor instead of themselves
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        if rel > 1e-4 {
            failures.push(format!("{}[{k}]: analytic {analytic:.6e} numeric {numeric:.6e}", model.store.get(id).name));
        }
    }
    ensure(failures.is_empty(), failures.join("; "))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{} entries over {} tensors, worst relative error {worst:.2e}",
        picks.len(),
        trainable.len()
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_incidence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let n = rng.random_range(1..30);
        let m = rng.random_range(1..20);
        let eta = rng.random_range(1..6);
        let raw = fill(n, m, || {
            // relu-shaped scores with exact zeros and ties
            let v: f64 = rng.random_range(-1.0..1.0);
            if rng.random_bool(0.1) {
                0.5
            } else {
                v.max(0.0)
            }
        });
        let inc = sparsify_topk(&raw, eta, 1);
        let c = rng.random_range(0.01..100.0);
        let scaled = sparsify_topk(&raw.map(|v| v * c), eta, 1);
        ensure(scaled.entries == inc.entries, format!("case {case}: rescaling by {c} changed the incidence"))?;
        for i in 0..n {
            let row = raw.row_slice(i);
            let ones = inc.entries.row_slice(i).iter().filter(|&&v| v == 1.0).count();
            ensure(ones <= eta, format!("case {case} row {i}: {ones} > {eta} members"))?;
            let argmax = (0..m).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            ensure(inc.entries.get(i, argmax) == 1.0, format!("case {case} row {i}: argmax {argmax} dropped"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok("1000 matrices".into())
}

// ---------------------------------------------------------------- 3

fn criterion_aggregation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(1..40);
        let m = rng.random_range(1..12);
        let d = rng.random_range(1..5);
        let x = randn(n, d, &mut rng);
        let entries = fill(n, m, || if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let inc = IncidenceMatrix { entries: entries.clone(), scale: 1 };
        let got = hyperedge_features(&x, &inc).unwrap();
        for e in 0..m {
            let members: Vec<usize> = (0..n).filter(|&j| entries.get(j, e) == 1.0).collect();
            for k in 0..d {
                let expect = if members.is_empty() {
                    0.0
                } else {
                    members.iter().map(|&j| x.get(j, k)).sum::<f64>() / members.len() as f64
                };
                let err = (got.matrix.get(e, k) - expect).abs();
                worst = worst.max(err);
                ensure(err <= 1e-12, format!("case {case}: edge {e} dim {k} off by {err:e}"))?;
            }
        }
        let p = rng.random_range(1..=n);
        let via_patch = patch_features(&x, p).unwrap();
        let via_inc = hyperedge_features(&x, &patch_incidence(n, p, 1).unwrap()).unwrap();
        ensure(via_patch.matrix == via_inc.matrix, format!("case {case}: patch path differs"))?;
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("100 instances, worst error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_revin() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let t = rng.random_range(1..200);
        let d = rng.random_range(1..6);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let mut x = fill(t, d, || rng.random_range(-1.0..1.0) * scale + 5.0);
        let constant = rng.random_range(0..d);
        for r in 0..t {
            x.set(r, constant, 3.25);
        }
        let (xn, st) = revin_normalize(&x);
        let back = revin_denormalize(&xn, &st).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            let err = (a - b).abs();
            worst = worst.max(err);
            ensure(err <= 1e-9, format!("case {case}: error {err:e}"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 windows with constant channels, worst error {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let h = rng.random_range(1..30);
        let a: Vec<f64> = (0..h).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..h).map(|_| rng.random_range(-5.0..5.0)).collect();
        ensure(smape(&a, &b).unwrap() == smape(&b, &a).unwrap(), "smape not symmetric")?;

        let m = rng.random_range(1..5);
        let ins: Vec<f64> = (0..m + 10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(0.1..50.0);
        let sc = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let base = mase(&a, &b, &ins, m).unwrap();
        let scaled = mase(&sc(&a), &sc(&b), &sc(&ins), m).unwrap();
        ensure((base - scaled).abs() <= 1e-9 * base.max(1.0), format!("mase {base} vs {scaled} after scaling by {c}"))?;

        let (x, y) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
        ensure((owa(x, y, x, y).unwrap() - 1.0).abs() <= 1e-12, "owa(x,y,x,y) != 1")?;
    }
    let doubling = smape(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
    ensure((doubling - 200.0 / 3.0).abs() <= 1e-9, format!("doubling smape {doubling}"))?;
    let mixed = owa(5.0, 4.0, 10.0, 2.0).unwrap();
    ensure((mixed - 1.25).abs() <= 1e-12, format!("mixed owa {mixed}"))?;
    // m = 1 on [1, 3, 2, 5, 4, 6]: mean |diff| = (2+1+3+1+2)/5 = 1.8
    let hand = mase(&[7.0, 8.0], &[6.5, 9.0], &[1.0, 3.0, 2.0, 5.0, 4.0, 6.0], 1).unwrap();
    ensure((hand - 0.75 / 1.8).abs() <= 1e-12, format!("hand mase {hand}"))?;
    Ok("symmetry, scale covariance, owa identity and hand values".into())
}

// ---------------------------------------------------------------- 6

/// RevIN-mean baseline: each channel forecast as its input-window mean.
fn baseline_mse(samples: &[WindowSample]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let (_, st) = revin_normalize(&s.input);
        for t in 0..s.target.rows() {
            for c in 0..s.target.cols() {
                total += (s.target.get(t, c) - st.mean[c]).powi(2);
                n += 1;
            }
        }
    }
    total / n as f64
}

struct LearningRuns {
    backbone_hashes: Vec<(String, String)>,
}

fn learning_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::synthetic_default();
    c.seed = seed;
    if let DataSource::Synth(s) = &mut c.data {
        *s = SynthSpec::two_season(4000, 0.1, seed);
    }
    c
}

fn criterion_learning(runs: &mut LearningRuns) -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (mut full, mut wo_hm, mut base) = (0.0, 0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let cfg = learning_config(seed);
        ensure(cfg.train.epochs <= 30, "more than 30 epochs")?;
        let prep = prepare(&cfg).map_err(|e| e.to_string())?;
        let b = baseline_mse(&prep.test);
        let out = dir.path().join(format!("seed{seed}"));
        let f = cmd_train(&cfg, &out.join("full"), &TrainOptions::default()).map_err(|e| e.to_string())?;
        let w = cmd_ablate(&cfg, Variant::WoHm, &out).map_err(|e| e.to_string())?;
        ensure(w.model.config.mixing == Mixing::Direct, "ablation did not switch mixing")?;
        let mse_of = |recs: &[mshllm::metrics::MetricRecord]| {
            recs.iter().find(|r| r.metric == "mse").map(|r| r.value).unwrap_or(f64::NAN)
        };
        let (fm, wm) = (mse_of(&f.records), mse_of(&w.records));
        per_seed.push(format!("seed {seed}: full {fm:.4} w/o HM {wm:.4} baseline {b:.4}"));
        for o in [&f, &w] {
            runs.backbone_hashes.push((o.backbone_hash_before.clone(), o.backbone_hash_after.clone()));
        }
        full += fm / 3.0;
        wo_hm += wm / 3.0;
        base += b / 3.0;
    }
    let detail = format!(
        "mean test MSE full {full:.4}, w/o HM {wo_hm:.4}, baseline {base:.4} ({})",
        per_seed.join("; ")
    );
    ensure(full <= 0.8 * base, format!("(a) failed: {detail}"))?;
    ensure(full < wo_hm, format!("(b) failed: {detail}"))?;
    within(start.elapsed(), Duration::from_secs(15 * 60)).map_err(|e| format!("{e}; {detail}"))?;
    Ok(format!("{detail}; {:.0}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 7

fn criterion_ablation_lengths() -> Outcome {
    let base = RunConfig::synthetic_default();
    let meta = || Model::prompt_meta("synthetic", base.frequency(), base.model.horizon);
    let full = Model::new(base.model.clone(), 0, meta()).unwrap();
    let s = full.config.active_scales();
    let c_l = s * base.model.prompt_len;
    let c_d = full.data_prompt_len;
    let c_c = full.capability_tokens.len();
    let m_sum: usize = base.model.hyperedges.counts.iter().sum();
    ensure(full.total_len == c_l + c_d + c_c + m_sum, "full length does not add up")?;
    let input = randn(base.model.input_len, base.model.channels, &mut ChaCha8Rng::seed_from_u64(7));
    let mut lines = Vec::new();
    for (v, removed) in [
        (Variant::WoCl, c_l),
        (Variant::WoCd, c_d),
        (Variant::WoCc, c_c),
        (Variant::WoMop, c_l + c_d + c_c),
    ] {
        let mut c = base.clone();
        v.apply(&mut c);
        let m = Model::new(c.model.clone(), 0, meta()).unwrap();
        ensure(
            full.total_len - m.total_len == removed,
            format!("{}: length {} vs full {}, expected drop {removed}", v.label(), m.total_len, full.total_len),
        )?;
        let mut g = Graph::new();
        let shared = m.shared(&mut g).unwrap();
        let out = m.forward(&mut g, &shared, &input).unwrap();
        ensure(g.value(out.sequence.seq).rows() == m.total_len, format!("{}: assembled rows", v.label()))?;
        if v == Variant::WoMop {
            ensure(m.total_len == m_sum, "-w/o MoP should keep only the aligned blocks")?;
        }
        lines.push(format!("{} -{removed}", v.label()));
    }
    Ok(format!("L_total {} ; {}", full.total_len, lines.join(", ")))
}

// ---------------------------------------------------------------- 8

fn tiny(seed: u64) -> RunConfig {
    let mut c = RunConfig::synthetic_default();
    c.seed = seed;
    if let DataSource::Synth(s) = &mut c.data {
        *s = SynthSpec::two_season(1200, 0.1, seed);
    }
    c.model.input_len = 48;
    c.model.horizon = 8;
    c.model.scales.windows = vec![4];
    c.model.prototypes.vocab_size = 80;
    c.model.prototypes.width = 8;
    c.model.prototypes.counts = vec![10, 5];
    c.model.hyperedges.counts = vec![6, 3];
    c.model.backbone.layers = 1;
    c.train.epochs = 2;
    c.train.stride = 16;
    c
}

fn criterion_frozen_backbone(runs: &LearningRuns) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut checked = runs.backbone_hashes.len();
    for (i, (b, a)) in runs.backbone_hashes.iter().enumerate() {
        ensure(b == a, format!("learning run {i}: backbone hash changed"))?;
    }
    for v in Variant::ALL {
        let mut c = tiny(1);
        c.train.aso_epochs = 1;
        if matches!(v, Variant::R1 | Variant::R2) {
            // the word lists hold 48 words, so the first level can keep at most 12
            c.model.prototypes.counts = vec![12, 5];
        }
        let o = cmd_ablate(&c, v, dir.path()).map_err(|e| format!("{}: {e}", v.label()))?;
        ensure(
            o.backbone_hash_before == o.backbone_hash_after,
            format!("{}: backbone hash changed", v.label()),
        )?;
        checked += 1;
    }
    Ok(format!("{checked} runs"))
}

// ---------------------------------------------------------------- 9

fn criterion_protocols() -> Outcome {
    let mut lines = Vec::new();
    for length in [4000usize, 4010, 4037] {
        for fraction in [0.05, 0.10] {
            let mut c = tiny(0);
            if let DataSource::Synth(s) = &mut c.data {
                s.length = length;
            }
            let full = prepare(&c).map_err(|e| e.to_string())?.train_ds.len();
            c.protocol = Protocol::FewShot { fraction };
            let got = prepare(&c).map_err(|e| e.to_string())?.train_ds.len();
            let expect = (fraction * full as f64 - 1e-9).ceil() as usize;
            ensure(got == expect, format!("{fraction} of {full}: {got} rows, expected {expect}"))?;
            if length == 4010 {
                lines.push(format!("{:.0}% of {full} -> {got}", fraction * 100.0));
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let a = tiny(0);
    let mut b = tiny(0);
    if let DataSource::Synth(s) = &mut b.data {
        s.name = "synthetic_b".into();
        s.seed = 99;
        s.phase_step = 1.0;
        s.components[1].amplitude = 0.8;
    }
    let records = cmd_transfer(&a, &b, dir.path()).map_err(|e| e.to_string())?;
    let smape_b = records.iter().find(|r| r.metric == "smape").map(|r| r.value).unwrap_or(f64::NAN);
    ensure(smape_b.is_finite(), format!("transfer SMAPE {smape_b}"))?;
    ensure(records.iter().all(|r| r.protocol.starts_with("zeroshot")), "records not tagged zeroshot")?;

    let trained = cmd_train(&a, &dir.path().join("again"), &TrainOptions::default()).map_err(|e| e.to_string())?;
    let target = prepare(&b).map_err(|e| e.to_string())?;
    let freq = a.frequency();
    let models = [(freq, trained.model)];
    let before = models[0].1.store.hash_all();
    zero_shot_eval(&models, "a", "b", &target.test, freq, None).map_err(|e| e.to_string())?;
    ensure(models[0].1.store.hash_all() == before, "parameters changed during zero-shot evaluation")?;
    Ok(format!("{}; zero-shot A->B SMAPE {smape_b:.3}", lines.join(", ")))
}

// ---------------------------------------------------------------- 10

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&cfg, &a, &TrainOptions::default()).map_err(|e| e.to_string())?;
    cmd_train(&cfg, &b, &TrainOptions::default()).map_err(|e| e.to_string())?;
    for f in ["train_log.csv", "epoch_log.csv", "metrics.csv"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        ensure(x == y, format!("{f} differs between runs"))?;
    }
    Ok("train_log.csv, epoch_log.csv, metrics.csv identical".into())
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    // written straight to the stream so it shows even when output is captured
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} [{tag}] {name} ({secs:.1}s): {detail}");
    ok
}

#[test]
fn acceptance_criteria() {
    let mut runs = LearningRuns { backbone_hashes: Vec::new() };
    let results = [
        report(1, "gradient correctness", criterion_gradients),
        report(2, "incidence invariants", criterion_incidence),
        report(3, "hyperedge aggregation oracle", criterion_aggregation),
        report(4, "RevIN round trip", criterion_revin),
        report(5, "metric oracles", criterion_metrics),
        report(6, "learning signal", || criterion_learning(&mut runs)),
        report(7, "ablation arithmetic", criterion_ablation_lengths),
        report(8, "frozen backbone", || criterion_frozen_backbone(&runs)),
        report(9, "few-shot and zero-shot protocols", criterion_protocols),
        report(10, "determinism", criterion_determinism),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
