//! Metrics, single runs, the slot × variant × run sweep and its reports.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::{Ablation, ExperimentConfig};
use crate::data::{stratified_split, RawWindow, WindowArchive};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub accuracy: f64,
    /// Unweighted mean of `per_class_f1` over every class.
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub n_test: usize,
}

/// Accuracy and per-class F1. Classes that never occur contribute an F1 of 0.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<RunMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    if n_classes == 0 {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {} outside 0..{n_classes}",
                p.max(y)
            )));
        }
        predicted[p] += 1;
        actual[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let per_class_f1: Vec<f64> = (0..n_classes)
        .map(|c| {
            let denom = predicted[c] + actual[c];
            if denom == 0 {
                0.0
            } else {
                // 2PR/(P+R) with P = tp/predicted, R = tp/actual.
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let n = labels.len();
    Ok(RunMetrics {
        accuracy: tp.iter().sum::<usize>() as f64 / n as f64,
        macro_f1: per_class_f1.iter().sum::<f64>() / n_classes as f64,
        per_class_f1,
        n_test: n,
    })
}

/// Split, fit on the training side, score on the held-out side.
pub fn run_on_windows(
    windows: &[RawWindow],
    feature_names: &[String],
    n_classes: usize,
    variant: Ablation,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RunMetrics> {
    let (train, test) = stratified_split(windows, config.split_ratio, seed)?;
    let train: Vec<&RawWindow> = train.iter().map(|&i| &windows[i]).collect();
    let test: Vec<&RawWindow> = test.iter().map(|&i| &windows[i]).collect();
    if test.is_empty() {
        return Err(Error::Data("the split left no test windows".into()));
    }
    let mut pipeline = Pipeline::fit(&train, feature_names, n_classes, variant, config, seed)?.pipeline;
    let pred = pipeline.predict(&test)?;
    let labels: Vec<usize> = test.iter().map(|w| w.label).collect();
    compute_metrics(&pred.classes, &labels, n_classes)
}

pub fn run_once(
    archive: &WindowArchive,
    slot: usize,
    variant: Ablation,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RunMetrics> {
    let windows = archive.windows(slot)?;
    if windows.is_empty() {
        return Err(Error::Data(format!("no windows at slot {slot}")));
    }
    run_on_windows(&windows, &archive.feature_names, archive.n_classes, variant, config, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub slot: usize,
    pub variant: Ablation,
    /// One entry per run, in run order.
    pub runs: Vec<RunMetrics>,
    /// First error met by any run; the cell then carries no aggregates.
    pub failure: Option<String>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SweepCell {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn accuracy(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.accuracy).collect::<Vec<_>>())
    }

    pub fn macro_f1(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.macro_f1).collect::<Vec<_>>())
    }
}

/// Every `(slot, variant)` cell over `config.runs` runs seeded
/// `base_seed + run`. Runs execute on `config.workers` threads; cells come
/// back in slot-major, variant order regardless.
pub fn sweep(archive: &WindowArchive, config: &ExperimentConfig, base_seed: u64) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let per_slot: Vec<(usize, Result<Vec<RawWindow>>)> = config
        .slots
        .iter()
        .map(|&s| (s, archive.windows(s)))
        .collect();
    let jobs: Vec<(usize, Ablation, usize)> = per_slot
        .iter()
        .enumerate()
        .flat_map(|(i, _)| {
            config
                .variants
                .iter()
                .flat_map(move |&v| (0..config.runs).map(move |r| (i, v, r)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start workers: {e}")))?;
    let results: Vec<Result<RunMetrics>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, variant, run)| {
                let (slot, windows) = &per_slot[i];
                let windows = windows.as_ref().map_err(|e| Error::Data(e.to_string()))?;
                if windows.is_empty() {
                    return Err(Error::Data(format!("no windows at slot {slot}")));
                }
                run_on_windows(
                    windows,
                    &archive.feature_names,
                    archive.n_classes,
                    variant,
                    config,
                    base_seed + run as u64,
                )
            })
            .collect()
    });
    let mut cells: Vec<SweepCell> = Vec::new();
    for (&(i, variant, run), res) in jobs.iter().zip(results) {
        if run == 0 {
            cells.push(SweepCell {
                slot: per_slot[i].0,
                variant,
                runs: Vec::new(),
                failure: None,
            });
        }
        let cell = cells.last_mut().expect("run 0 opens a cell");
        match res {
            Ok(m) => cell.runs.push(m),
            Err(e) => {
                if cell.failure.is_none() {
                    cell.failure = Some(format!("run {run}: {e}"));
                }
            }
        }
    }
    for cell in &mut cells {
        if cell.failed() {
            cell.runs.clear();
        }
    }
    Ok(cells)
}

pub const CSV_HEADER: &str = "slot,variant,run_count,mean_acc,std_acc,mean_f1,std_f1";

pub const METRIC_NOTE: &str = "F1 is macro (unweighted over classes); std is the population std over runs";

/// Failed cells keep their row with `run_count` 0 and `NaN` metrics.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in cells {
        let (ma, sa) = c.accuracy();
        let (mf, sf) = c.macro_f1();
        writeln!(
            out,
            "{},{},{},{ma:.6},{sa:.6},{mf:.6},{sf:.6}",
            c.slot,
            c.variant,
            c.runs.len()
        )
        .expect("writing to a String");
    }
    out
}

pub fn sweep_summary(cells: &[SweepCell]) -> String {
    let mut out = format!("# {METRIC_NOTE}\n");
    for c in cells {
        match &c.failure {
            Some(e) => writeln!(out, "slot {:>2} {:<8} FAILED {e}", c.slot, c.variant),
            None => {
                let (ma, sa) = c.accuracy();
                let (mf, sf) = c.macro_f1();
                writeln!(
                    out,
                    "slot {:>2} {:<8} acc {ma:.4} ± {sa:.4}  macro-F1 {mf:.4} ± {sf:.4}",
                    c.slot, c.variant
                )
            }
        }
        .expect("writing to a String");
    }
    out
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Two line charts, accuracy and macro F1, against slot hours.
pub fn sweep_svg(cells: &[SweepCell]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 110.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let mut slots: Vec<usize> = cells.iter().map(|c| c.slot).collect();
    slots.sort_unstable();
    slots.dedup();
    let mut variants: Vec<Ablation> = Vec::new();
    for c in cells {
        if !variants.contains(&c.variant) {
            variants.push(c.variant);
        }
    }
    let (x_min, x_max) = match (slots.first(), slots.last()) {
        (Some(&a), Some(&b)) if a < b => (a as f64, b as f64),
        (Some(&a), _) => (a as f64 - 1.0, a as f64 + 1.0),
        _ => (2.0, 23.0),
    };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * pw;
    let py = |y: f64| TOP + (1.0 - y) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * W,
        H + 20.0
    )
    .unwrap();
    writeln!(s, "<title>Sweep results: {}</title>", xml_escape(METRIC_NOTE)).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
        W,
        H + 12.0,
        xml_escape(METRIC_NOTE)
    )
    .unwrap();
    type Metric = fn(&SweepCell) -> (f64, f64);
    let charts: [(&str, Metric); 2] = [("Accuracy", SweepCell::accuracy), ("Macro F1", SweepCell::macro_f1)];
    for (chart, (title, metric)) in charts.iter().enumerate() {
        writeln!(s, r#"<g transform="translate({},0)">"#, chart as f64 * W).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="20" font-size="13" text-anchor="middle">{title} (mean over runs)</text>"#,
            LEFT + pw / 2.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            TOP + ph,
            LEFT + pw,
            TOP + ph
        )
        .unwrap();
        writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + ph).unwrap();
        for &slot in &slots {
            let x = px(slot as f64);
            writeln!(
                s,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle">{slot}</text>"#,
                TOP + ph + 14.0
            )
            .unwrap();
        }
        for tick in 0..=5 {
            let y = tick as f64 / 5.0;
            writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"#,
                LEFT - 6.0,
                py(y) + 4.0
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">Observation window (hours)</text>"#,
            LEFT + pw / 2.0,
            TOP + ph + 32.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{title}</text>"#,
            TOP + ph / 2.0
        )
        .unwrap();
        for (vi, &variant) in variants.iter().enumerate() {
            let colour = PALETTE[vi % PALETTE.len()];
            let points: Vec<String> = cells
                .iter()
                .filter(|c| c.variant == variant && !c.failed())
                .map(|c| format!("{:.1},{:.1}", px(c.slot as f64), py(metric(c).0)))
                .collect();
            if !points.is_empty() {
                writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                    points.join(" ")
                )
                .unwrap();
            }
            let ly = TOP + 14.0 * vi as f64;
            writeln!(
                s,
                r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{2}" y="{3}">{variant}</text>"#,
                LEFT + pw + 10.0,
                LEFT + pw + 28.0,
                LEFT + pw + 32.0,
                ly + 4.0
            )
            .unwrap();
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
