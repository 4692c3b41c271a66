//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stderr, so the verdicts show up even when output capture
//! is on.

mod common;

use std::fs;
use std::io::Write as _;
use std::time::Instant;

use common::{meet_ts, p, stderr, stdout, toy_setup};
use meet_core::config::{Ablation, ExperimentConfig, ModelConfig, ViewGrouping};
use meet_core::data::{synth_archive, synth_generate, PatientRecord, RawWindow, SynthSpec, WindowArchive};
use meet_core::diagnostics::{op_names, GRADCHECK_TOLERANCE};
use meet_core::eval::{compute_metrics, run_on_windows, run_once};
use meet_core::gbdt::{GbdtModel, GbdtParams, TreeNode};
use meet_core::model::{train_alternating, Model, Samples};
use meet_core::numerics::{multihead_self_attention, Mode, Padding, Tape, Tensor};
use meet_core::pipeline::Pipeline;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn check(n: u32, failures: &[String], detail: &str) {
    verdict(n, failures.is_empty(), detail);
    assert!(failures.is_empty(), "criterion {n}:\n{}", failures.join("\n"));
}

// ---- 1: gradient fidelity -------------------------------------------------

#[test]
fn criterion_1_gradient_fidelity() {
    let toy = ModelConfig::toy();
    let mut failures = Vec::new();
    if (toy.seq_len, toy.d_in, toy.n_views, toy.view_dim) != (8, 3, 2, 4) {
        failures.push(format!("toy shapes differ: {toy:?}"));
    }
    let t = Instant::now();
    let o = meet_ts(&["gradcheck"]);
    let secs = t.elapsed().as_secs_f64();
    if !o.status.success() {
        failures.push(format!("exit {:?}: {}", o.status.code(), stderr(&o)));
    }
    let out = stdout(&o);
    let mut worst: f64 = 0.0;
    let mut ops = 0;
    let mut composed = 0;
    for line in out.lines().filter(|l| l.ends_with(" ok") || l.ends_with(" FAIL")) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let err: f64 = f[1].parse().unwrap();
        worst = worst.max(err);
        if err >= GRADCHECK_TOLERANCE {
            failures.push(line.to_string());
        }
        if f[0].starts_with("model:") {
            composed += 1;
        } else {
            ops += 1;
        }
    }
    for op in op_names() {
        if out.lines().filter(|l| l.split_whitespace().next() == Some(op)).count() != 1 {
            failures.push(format!("op {op} not reported exactly once"));
        }
    }
    if composed == 0 {
        failures.push("no composed-model checks".into());
    }
    if secs >= 60.0 {
        failures.push(format!("took {secs:.1} s"));
    }
    check(
        1,
        &failures,
        &format!("{ops} ops + {composed} parameter tensors, worst relative error {worst:.2e}, {secs:.2} s"),
    );
}

// ---- 2: oracle equivalence ------------------------------------------------

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv_case(rng: &mut ChaCha8Rng) -> f64 {
    let (bs, cin, cout, s) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..10));
    let same = rng.random_bool(0.5);
    let k = if same { 2 * rng.random_range(0..3) + 1 } else { rng.random_range(1..=s) };
    let (x, w, b) = (random(&[bs, cin, s], rng), random(&[cout, cin, k], rng), random(&[cout], rng));
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone()).unwrap();
    let vw = tape.leaf(w.clone()).unwrap();
    let vb = tape.leaf(b.clone()).unwrap();
    let pad = if same { k / 2 } else { 0 };
    let y = tape
        .conv1d(vx, vw, vb, if same { Padding::Same } else { Padding::Valid })
        .unwrap();
    let y = tape.value(y).data().to_vec();
    let so = s + 2 * pad + 1 - k;
    let mut worst: f64 = 0.0;
    for bi in 0..bs {
        for o in 0..cout {
            for t in 0..so {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if (0..s as isize).contains(&src) {
                            acc += w.data()[(o * cin + c) * k + j] * x.data()[(bi * cin + c) * s + src as usize];
                        }
                    }
                }
                worst = worst.max((acc - y[(bi * cout + o) * so + t]).abs());
            }
        }
    }
    worst
}

/// One or two tokens; the two-token softmax is written out as a logistic.
fn attention_case(rng: &mut ChaCha8Rng) -> f64 {
    let (b, tn, heads, dh) = (rng.random_range(1..3), rng.random_range(1..=2), rng.random_range(1..3), rng.random_range(1..4));
    let d = heads * dh;
    let tok = random(&[b, tn, d], rng);
    let (wq, wk, wv) = (random(&[d, d], rng), random(&[d, d], rng), random(&[d, d], rng));
    let mut tape = Tape::new();
    let vs: Vec<_> = [&tok, &wq, &wk, &wv].iter().map(|t| tape.leaf((*t).clone()).unwrap()).collect();
    let out = multihead_self_attention(&mut tape, vs[0], vs[1], vs[2], vs[3], heads).unwrap();
    let y = tape.value(out.output).data().to_vec();
    let proj = |w: &Tensor<f64>, bi: usize, ti: usize, j: usize| -> f64 {
        (0..d).map(|i| tok.data()[(bi * tn + ti) * d + i] * w.data()[i * d + j]).sum()
    };
    let mut worst: f64 = 0.0;
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..tn {
                let score = |tj: usize| -> f64 {
                    (0..dh).map(|e| proj(&wq, bi, ti, h * dh + e) * proj(&wk, bi, tj, h * dh + e)).sum::<f64>()
                        / (dh as f64).sqrt()
                };
                let weights = if tn == 1 {
                    vec![1.0]
                } else {
                    let p0 = 1.0 / (1.0 + (score(1) - score(0)).exp());
                    vec![p0, 1.0 - p0]
                };
                for e in 0..dh {
                    let expect: f64 = (0..tn).map(|tj| weights[tj] * proj(&wv, bi, tj, h * dh + e)).sum();
                    worst = worst.max((expect - y[(bi * tn + ti) * d + h * dh + e]).abs());
                }
            }
        }
    }
    worst
}

fn metrics_case(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..6);
    let n = rng.random_range(1..60);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut cm = vec![vec![0usize; k]; k];
    for (&q, &y) in pred.iter().zip(&labels) {
        cm[y][q] += 1;
    }
    let acc = (0..k).map(|c| cm[c][c]).sum::<usize>() as f64 / n as f64;
    let f1 = (0..k)
        .map(|c| {
            let tp = cm[c][c] as f64;
            let col: usize = (0..k).map(|y| cm[y][c]).sum();
            let row: usize = cm[c].iter().sum();
            let prec = if col == 0 { 0.0 } else { tp / col as f64 };
            let rec = if row == 0 { 0.0 } else { tp / row as f64 };
            if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            }
        })
        .sum::<f64>()
        / k as f64;
    let m = compute_metrics(&pred, &labels, k).unwrap();
    (m.accuracy - acc).abs().max((m.macro_f1 - f1).abs())
}

fn split_gain(rows: &[Vec<f64>], r: &[f64], f: usize, t: f64) -> (f64, usize) {
    let total: f64 = r.iter().sum();
    let (mut sl, mut nl) = (0.0, 0);
    for (row, ri) in rows.iter().zip(r) {
        if row[f] <= t {
            sl += ri;
            nl += 1;
        }
    }
    let n = rows.len();
    let sr = total - sl;
    if nl == 0 || nl == n {
        return (f64::NEG_INFINITY, nl);
    }
    (sl * sl / nl as f64 + sr * sr / (n - nl) as f64 - total * total / n as f64, nl)
}

/// Returns the gain gap between the fitted root split and the best
/// threshold found by scanning every midpoint of every feature.
fn gbdt_case(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(6..30);
    let d = rng.random_range(1..5);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(0..8) as f64 * 0.5).collect()).collect();
    let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    y[0] = 0;
    y[1] = 1;
    let min_leaf = rng.random_range(1..3);
    let params = GbdtParams {
        rounds: 1,
        max_depth: 1,
        shrinkage: 0.1,
        min_samples_leaf: min_leaf,
    };
    let x = Tensor::new(&[n, d], rows.concat()).unwrap();
    let model = GbdtModel::fit(&x, &y, 2, &params).unwrap();
    let r: Vec<f64> = y.iter().map(|&c| if c == 0 { 0.5 } else { -0.5 }).collect();
    let mut best: Option<f64> = None;
    for f in 0..d {
        let mut vals: Vec<f64> = rows.iter().map(|row| row[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let (g, nl) = split_gain(&rows, &r, f, 0.5 * (w[0] + w[1]));
            if nl >= min_leaf && n - nl >= min_leaf {
                best = Some(best.map_or(g, |b: f64| b.max(g)));
            }
        }
    }
    match (&model.rounds()[0][0].nodes()[0], best) {
        (TreeNode::Leaf(_), None) => 0.0,
        (TreeNode::Split { feature, threshold, .. }, Some(b)) => (split_gain(&rows, &r, *feature, *threshold).0 - b).abs(),
        _ => f64::INFINITY,
    }
}

#[test]
fn criterion_2_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    type Case = fn(&mut ChaCha8Rng) -> f64;
    let cases: [(&str, Case); 4] = [
        ("conv1d", conv_case),
        ("attention", attention_case),
        ("metrics", metrics_case),
        ("gbdt split", gbdt_case),
    ];
    for (name, case) in cases {
        let worst = (0..100).map(|_| case(&mut rng)).fold(0.0, f64::max);
        summary.push(format!("{name} {worst:.1e}"));
        if !(worst <= 1e-8) {
            failures.push(format!("{name}: worst deviation {worst}"));
        }
    }
    check(2, &failures, &format!("100 instances each, worst deviation: {}", summary.join(", ")));
}

// ---- 3: shape contract ----------------------------------------------------

#[test]
fn criterion_3_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for case in 0..20 {
        let heads = rng.random_range(1..4);
        let k1 = 2 * rng.random_range(1..4) + 1;
        let seq_len = rng.random_range(2..14);
        let c = ModelConfig {
            d_in: rng.random_range(1..6),
            seq_len,
            n_views: rng.random_range(1..5),
            view_dim: rng.random_range(1..6),
            view_grouping: if rng.random_bool(0.5) { ViewGrouping::FullWidth } else { ViewGrouping::ChannelGroups },
            k: 2 * rng.random_range(0..3) + 1,
            k1,
            k2: 2 * rng.random_range(0..(k1 - 1) / 2) + 1,
            pool_stride: rng.random_range(1..=seq_len),
            f_long: rng.random_range(1..7),
            f_short: heads * rng.random_range(1..4),
            heads,
            d_proj: rng.random_range(1..9),
            n_classes: rng.random_range(2..5),
            seed: case,
            ..ModelConfig::toy()
        };
        let b = rng.random_range(1..5);
        let mut model = Model::<f64>::new(&c).unwrap();
        let x = random(&[b, c.d_in, c.seq_len], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let out = model.forward(&mut tape, xv, Mode::Train).unwrap();
        let trace = out.cdta.expect("full model runs the cascaded encoder");
        let (nv, s) = (c.n_views, c.seq_len);
        let expected: [(&str, _, Vec<usize>); 5] = [
            ("H_ev", out.views.var, vec![b, nv, s, c.view_dim]),
            ("C_long (views batched)", trace.c_long, vec![b * nv, c.f_long, s / c.pool_stride]),
            ("C_short", trace.c_short, vec![b, nv, c.f_short]),
            ("A", out.fused.attended, vec![b, nv * c.f_short]),
            ("Z", out.fused.z, vec![b, c.d_proj]),
        ];
        for (name, var, shape) in expected {
            if tape.shape(var) != shape.as_slice() {
                failures.push(format!("case {case} {name}: {:?} vs {shape:?} ({c:?})", tape.shape(var)));
            }
        }
    }
    check(3, &failures, "20 random configs, H_ev / C_long / C_short / A / Z shapes");
}

// ---- 4 and 5: synthetic benchmark -----------------------------------------

/// Desk-scale settings calibrated so the tree baseline lands in 0.70-0.85.
fn benchmark() -> (SynthSpec, ExperimentConfig) {
    let mut cfg = ExperimentConfig {
        model: ModelConfig::compact(),
        ..ExperimentConfig::default()
    };
    cfg.gbdt.rounds = 50;
    (SynthSpec::default(), cfg)
}

const SEEDS: u64 = 5;

fn mean_accuracy(slot: usize, variant: Ablation) -> f64 {
    let (spec, cfg) = benchmark();
    (0..SEEDS)
        .map(|s| {
            let archive = synth_archive(&spec, s).unwrap();
            run_once(&archive, slot, variant, &cfg, s).unwrap().accuracy
        })
        .sum::<f64>()
        / SEEDS as f64
}

#[test]
fn criterion_4_ablation_ordering() {
    let t = Instant::now();
    let slot = 23;
    let acc: Vec<f64> = Ablation::ALL.iter().map(|&v| mean_accuracy(slot, v)).collect();
    let (full, no_mere, no_cdta, no_both) = (acc[0], acc[1], acc[2], acc[3]);
    let secs = t.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    if !(0.70..=0.85).contains(&no_both) {
        failures.push(format!("no_both {no_both:.4} outside 0.70-0.85"));
    }
    if full < no_mere {
        failures.push(format!("full {full:.4} < no_mere {no_mere:.4}"));
    }
    if full < no_cdta {
        failures.push(format!("full {full:.4} < no_cdta {no_cdta:.4}"));
    }
    if no_mere.min(no_cdta) < no_both - 0.02 {
        failures.push(format!("min(no_mere, no_cdta) {:.4} < no_both - 0.02", no_mere.min(no_cdta)));
    }
    if secs >= 600.0 {
        failures.push(format!("took {secs:.0} s"));
    }
    check(
        4,
        &failures,
        &format!(
            "slot {slot}, mean accuracy over {SEEDS} seeds: full {full:.4}, no_mere {no_mere:.4}, no_cdta {no_cdta:.4}, no_both {no_both:.4}, {secs:.0} s"
        ),
    );
}

#[test]
fn criterion_5_early_signal() {
    let (spec, _) = benchmark();
    let early = spec.early_hours();
    let fin = spec.hours.min(23);
    let a_early = mean_accuracy(early, Ablation::Full);
    let a_final = mean_accuracy(fin, Ablation::Full);
    let gap = (a_early - a_final).abs();
    let failures = if gap <= 0.05 {
        vec![]
    } else {
        vec![format!("gap {gap:.4} > 0.05")]
    };
    check(
        5,
        &failures,
        &format!("full model, slot {early}: {a_early:.4}, slot {fin}: {a_final:.4}, gap {gap:.4}"),
    );
}

// ---- 6: determinism -------------------------------------------------------

#[test]
fn criterion_6_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_setup(d);
    let mut failures = Vec::new();
    let mut ckpts = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let o = meet_ts(&[
            "train", "--config", p(&d.join("cfg.txt")), "--windows", p(&d.join("toy.win")),
            "--slot", "8", "--seed", "17", "--out-checkpoint", p(&d.join(name)),
        ]);
        if !o.status.success() {
            failures.push(format!("train failed: {}", stderr(&o)));
        }
        ckpts.push(fs::read(d.join(name)).unwrap_or_default());
    }
    if ckpts[0].is_empty() || ckpts[0] != ckpts[1] {
        failures.push("checkpoints differ".into());
    }
    let mut csvs = Vec::new();
    for (out, workers) in [("s1", "1"), ("s2", "3")] {
        let o = meet_ts(&[
            "sweep", "--config", p(&d.join("cfg.txt")), "--windows", p(&d.join("toy.win")),
            "--slots", "2,7", "--variants", "full,no_cdta", "--runs", "2", "--seed", "17",
            "--workers", workers, "--out-dir", p(&d.join(out)),
        ]);
        if !o.status.success() {
            failures.push(format!("sweep failed: {}", stderr(&o)));
        }
        csvs.push(fs::read(d.join(out).join("sweep.csv")).unwrap_or_default());
    }
    if csvs[0].is_empty() || csvs[0] != csvs[1] {
        failures.push("sweep CSVs differ".into());
    }
    check(
        6,
        &failures,
        &format!("checkpoints {} bytes identical, sweep CSV identical across 1 and 3 workers", ckpts[0].len()),
    );
}

// ---- 7: training sanity ---------------------------------------------------

fn separable(n: usize, c: &ModelConfig, seed: u64) -> Samples<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let sign = if y == 0 { 1.0 } else { -1.0 };
        for ch in 0..c.d_in {
            for _ in 0..c.seq_len {
                let noise = rng.random_range(-0.3..0.3);
                data.push(if ch == 0 { sign + noise } else { noise });
            }
        }
        labels.push(y);
    }
    Samples::new(Tensor::new(&[n, c.d_in, c.seq_len], data).unwrap(), labels).unwrap()
}

#[test]
fn criterion_7_training_sanity() {
    let c = ModelConfig {
        n_classes: 2,
        epochs: 50,
        batch_size: 16,
        learning_rate: 1e-2,
        ..ModelConfig::toy()
    };
    let mut model = Model::<f64>::new(&c).unwrap();
    let h = train_alternating(&mut model, &separable(64, &c, 0), &separable(32, &c, 1)).unwrap();
    let mut failures = Vec::new();
    let first_perfect = h.valid_accuracy.iter().position(|&a| a == 1.0);
    if first_perfect.is_none() {
        failures.push(format!("best validation accuracy {:?}", h.valid_accuracy.iter().cloned().fold(0.0, f64::max)));
    }
    let mut worst: f64 = 0.0;
    for s in h.steps.iter().chain(&h.epochs) {
        worst = worst.max((s.total - (s.l_mse + c.alpha * s.l_reg + c.beta * s.l_pred)).abs());
    }
    if !(worst <= 1e-10) {
        failures.push(format!("loss additivity off by {worst}"));
    }
    check(
        7,
        &failures,
        &format!(
            "validation accuracy 1.0 first at epoch {}, additivity residual {worst:.1e} over {} steps",
            first_perfect.map_or(0, |e| e + 1),
            h.steps.len()
        ),
    );
}

// ---- 8: leakage guard -----------------------------------------------------

#[test]
fn criterion_8_leakage_guard() {
    let spec = SynthSpec {
        n_per_class: 20,
        d_in: 4,
        hours: 16,
        ..SynthSpec::default()
    };
    let (records, labels) = synth_generate(&spec, 8).unwrap();
    let cfg = ExperimentConfig {
        model: ModelConfig {
            epochs: 4,
            ..ModelConfig::compact()
        },
        ..ExperimentConfig::default()
    };
    let bits = |w: &[RawWindow]| w.iter().flat_map(|w| w.values.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let mut failures = Vec::new();
    for t in [2, 5, 11] {
        let zeroed: Vec<PatientRecord> = records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.rows[t..].iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v = 0.0));
                r
            })
            .collect();
        let a = WindowArchive::from_records(&records, &labels, spec.n_classes).unwrap();
        let b = WindowArchive::from_records(&zeroed, &labels, spec.n_classes).unwrap();
        let (wa, wb) = (a.windows(t).unwrap(), b.windows(t).unwrap());
        if bits(&wa) != bits(&wb) {
            failures.push(format!("slot {t}: windows differ"));
        }
        for variant in [Ablation::Full, Ablation::NoBoth] {
            let fit = |ws: &[RawWindow]| {
                let refs: Vec<&RawWindow> = ws.iter().collect();
                Pipeline::fit(&refs, &a.feature_names, spec.n_classes, variant, &cfg, 1).unwrap().pipeline.to_bytes()
            };
            if fit(&wa) != fit(&wb) {
                failures.push(format!("slot {t} {variant}: trained pipelines differ"));
            }
            let ma = run_on_windows(&wa, &a.feature_names, spec.n_classes, variant, &cfg, 1).unwrap();
            let mb = run_on_windows(&wb, &b.feature_names, spec.n_classes, variant, &cfg, 1).unwrap();
            if ma != mb {
                failures.push(format!("slot {t} {variant}: metrics differ"));
            }
        }
    }
    check(8, &failures, "slots 2, 5, 11: windows, trained pipelines and metrics bit-identical");
}

// ---- 9: real records (optional) -------------------------------------------

/// Runs only when `MEET_TS_PHYSIONET_DIR` points at a directory of challenge
/// PSV files.
#[test]
fn criterion_9_physionet_pipeline() {
    let Ok(data) = std::env::var("MEET_TS_PHYSIONET_DIR") else {
        let _ = std::io::stderr().write_all(b"criterion 9: SKIP (MEET_TS_PHYSIONET_DIR not set)\n");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut failures = Vec::new();
    let archive = d.join("physionet.win");
    let o = meet_ts(&["ingest", "--data-dir", &data, "--scheme", "qsofa", "--out", p(&archive)]);
    let patients: usize = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("patients: "))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0);
    if !o.status.success() || patients < 10_000 {
        failures.push(format!("ingest: exit {:?}, {patients} patients", o.status.code()));
    }
    let o = meet_ts(&["ablate", "--windows", p(&archive), "--slots", "2-23", "--runs", "5", "--out-dir", p(&d.join("r"))]);
    if !o.status.success() {
        failures.push(format!("sweep: exit {:?}: {}", o.status.code(), stderr(&o)));
    }
    let csv = fs::read_to_string(d.join("r/ablation.csv")).unwrap_or_default();
    if csv.lines().count() != 1 + 22 * 4 {
        failures.push(format!("CSV has {} lines", csv.lines().count()));
    }
    let svg = fs::read_to_string(d.join("r/ablation.svg")).unwrap_or_default();
    if roxmltree::Document::parse(&svg).is_err() {
        failures.push("SVG is not well-formed".into());
    }
    check(9, &failures, &format!("{patients} patients ingested, 22-slot x 5-run sweep reported"));
}
