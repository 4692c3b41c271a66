use meet_core::data::{
    make_window, parse_psv, serialize_psv, stratified_split, synth_archive, PatientRecord,
    Preprocessor, RawWindow, SynthSpec, WindowArchive,
};
use meet_core::gbdt::{GbdtModel, GbdtParams};
use meet_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cell(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => f64::NAN,
        1 => f64::from(rng.random_range(-100i32..100)),
        2 => rng.random_range(-1e6..1e6),
        _ => rng.random_range(-1e-3..1e-3),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psv_round_trip(cols in 1usize..6, rows in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let columns: Vec<String> = (0..cols).map(|c| format!("c{c}")).collect();
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| random_cell(&mut rng)).collect())
            .collect();
        let rec = PatientRecord::new("p", columns, data).unwrap();
        let text = serialize_psv(&rec);
        let back = parse_psv("p", &text).unwrap();
        prop_assert_eq!(&back.columns, &rec.columns);
        for (a, b) in back.rows.iter().flatten().zip(rec.rows.iter().flatten()) {
            prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
        prop_assert_eq!(serialize_psv(&back), text);
    }
}

fn random_windows(n: usize, d: usize, s: usize, missing: f64, seed: u64) -> Vec<RawWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| RawWindow {
            patient_id: format!("p{i:04}"),
            slot: s,
            label: i % 4,
            d_in: d,
            values: (0..d * s)
                .map(|j| {
                    // Feature 2 is never observed.
                    if j / s == 2 || rng.random_bool(missing) {
                        f64::NAN
                    } else {
                        rng.random_range(-3.0..8.0) * (1 + j / s) as f64
                    }
                })
                .collect(),
        })
        .collect()
}

#[test]
fn standardized_training_columns() {
    let ws = random_windows(50, 4, 6, 0.3, 1);
    let refs: Vec<&RawWindow> = ws.iter().collect();
    let pre = Preprocessor::fit(&refs).unwrap();
    assert_eq!(pre.medians[2], 0.0);
    let x = pre.tensor(&refs).unwrap();
    assert!(x.data().iter().all(|v| v.is_finite()));
    let (n, d, s) = (50, 4, 6);
    for f in 0..d {
        let col: Vec<f64> = (0..n)
            .flat_map(|i| (0..s).map(move |t| (i, t)))
            .map(|(i, t)| x.data()[(i * d + f) * s + t])
            .collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-10, "feature {f} mean {mean}");
        if f != 2 {
            assert!((var.sqrt() - 1.0).abs() < 1e-10, "feature {f} std {}", var.sqrt());
        } else {
            assert!(col.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn held_out_windows_use_training_statistics() {
    let ws = random_windows(30, 3, 4, 0.2, 2);
    let train: Vec<&RawWindow> = ws[..20].iter().collect();
    let pre = Preprocessor::fit(&train).unwrap();
    let w = &ws[25];
    let out = pre.transform(w).unwrap();
    for f in 0..3 {
        let series: Vec<f64> = (0..4).map(|t| w.get(f, t)).collect();
        let mut last = None;
        for (t, v) in series.iter().enumerate() {
            if !v.is_nan() {
                last = Some(*v);
            }
            let raw = last.unwrap_or(pre.medians[f]);
            assert_eq!(out[f * 4 + t], (raw - pre.means[f]) / pre.stds[f]);
        }
    }
}

fn record(id: &str, hours: usize) -> PatientRecord {
    PatientRecord::new(
        id,
        vec!["A".into(), "B".into()],
        (0..hours).map(|h| vec![h as f64, -(h as f64)]).collect(),
    )
    .unwrap()
}

#[test]
fn slot_two_keeps_every_eligible_record() {
    let recs: Vec<PatientRecord> = (0..20).map(|i| record(&format!("r{i:02}"), 1 + i % 7)).collect();
    let eligible = recs.iter().filter(|r| r.hours() >= 2).count();
    let windows: Vec<_> = recs.iter().filter_map(|r| make_window(r, &[0, 1], 2, 0)).collect();
    assert_eq!(windows.len(), eligible);
    let labels = vec![0; recs.len()];
    let archive = WindowArchive::from_records(&recs, &labels, 1).unwrap();
    assert_eq!(archive.windows(2).unwrap().len(), eligible);
}

#[test]
fn later_hours_never_reach_a_window() {
    let spec = SynthSpec {
        n_per_class: 4,
        ..SynthSpec::default()
    };
    let (recs, labels) = meet_core::data::synth_generate(&spec, 3).unwrap();
    for t in [2, 5, 11] {
        let zeroed: Vec<PatientRecord> = recs
            .iter()
            .map(|r| {
                let mut r = r.clone();
                for row in &mut r.rows[t..] {
                    row.iter_mut().for_each(|v| *v = 0.0);
                }
                r
            })
            .collect();
        let a = WindowArchive::from_records(&recs, &labels, 3).unwrap().windows(t).unwrap();
        let b = WindowArchive::from_records(&zeroed, &labels, 3).unwrap().windows(t).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            let bits = |w: &RawWindow| w.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }
}

#[test]
fn split_is_stratified_disjoint_and_seeded() {
    let ws = random_windows(100, 2, 3, 0.0, 4);
    let (train, test) = stratified_split(&ws, 0.8, 9).unwrap();
    assert_eq!(train.len(), 80);
    assert_eq!(test.len(), 20);
    for class in 0..4 {
        let n = train.iter().filter(|&&i| ws[i].label == class).count();
        assert!((19..=21).contains(&n), "class {class}: {n}");
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| ws[i].patient_id.clone()).collect::<std::collections::HashSet<_>>();
    assert!(ids(&train).is_disjoint(&ids(&test)));
    assert_eq!(stratified_split(&ws, 0.8, 9).unwrap(), (train.clone(), test));
    assert_ne!(stratified_split(&ws, 0.8, 10).unwrap().0, train);
}

#[test]
fn split_rejects_lonely_class() {
    let mut ws = random_windows(9, 2, 3, 0.0, 5);
    ws[0].label = 7;
    assert!(stratified_split(&ws, 0.8, 0).is_err());
}

fn flat_accuracy(spec: &SynthSpec, seed: u64) -> f64 {
    let archive = synth_archive(spec, seed).unwrap();
    let ws = archive.windows(spec.hours.min(23)).unwrap();
    let (train, test) = stratified_split(&ws, 0.7, seed).unwrap();
    let tr: Vec<&RawWindow> = train.iter().map(|&i| &ws[i]).collect();
    let te: Vec<&RawWindow> = test.iter().map(|&i| &ws[i]).collect();
    let pre = Preprocessor::fit(&tr).unwrap();
    let flat = |v: &[&RawWindow]| {
        let x = pre.tensor(v).unwrap();
        let n = v.len();
        Tensor::new(&[n, x.len() / n], x.into_data()).unwrap()
    };
    let ytr: Vec<usize> = tr.iter().map(|w| w.label).collect();
    let yte: Vec<usize> = te.iter().map(|w| w.label).collect();
    let m = GbdtModel::fit(&flat(&tr), &ytr, spec.n_classes, &GbdtParams::default()).unwrap();
    let p = m.predict(&flat(&te)).unwrap();
    p.classes.iter().zip(&yte).filter(|(a, b)| a == b).count() as f64 / yte.len() as f64
}

#[test]
fn strong_motif_is_easy_for_trees() {
    let spec = SynthSpec {
        n_per_class: 30,
        n_classes: 3,
        d_in: 4,
        hours: 12,
        motif_strength: 10.0,
        noise_sd: 0.1,
    };
    for seed in 0..2 {
        let acc = flat_accuracy(&spec, seed);
        assert!(acc >= 0.95, "seed {seed}: {acc}");
    }
}

#[test]
fn absent_motif_is_chance() {
    let spec = SynthSpec {
        n_per_class: 30,
        n_classes: 3,
        d_in: 4,
        hours: 12,
        motif_strength: 0.0,
        noise_sd: 1.0,
    };
    let mean = (0..5).map(|s| flat_accuracy(&spec, s)).sum::<f64>() / 5.0;
    // 5 runs x 27 test windows; chance is 1/3 with sd ~0.04 for the mean.
    assert!((mean - 1.0 / 3.0).abs() < 0.15, "mean accuracy {mean}");
}
