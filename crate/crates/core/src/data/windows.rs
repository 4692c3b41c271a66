//! Early-hour windows, their preprocessing, patient-level splits and the
//! binary window archive.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::labels::LabelRuleSet;
use super::psv::PatientRecord;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// Column holding the challenge's own outcome flag; never used as an input.
pub const LABEL_COLUMN: &str = "SepsisLabel";
pub const MIN_SLOT: usize = 2;
pub const MAX_SLOT: usize = 23;

pub fn check_slot(slot: usize) -> Result<()> {
    if (MIN_SLOT..=MAX_SLOT).contains(&slot) {
        Ok(())
    } else {
        Err(Error::config("slot", format!("{slot} is outside {MIN_SLOT}..={MAX_SLOT}")))
    }
}

/// Input feature names of a record: every column except the outcome flag.
pub fn feature_names(record: &PatientRecord) -> Vec<String> {
    record
        .columns
        .iter()
        .filter(|c| *c != LABEL_COLUMN)
        .cloned()
        .collect()
}

/// The first `slot` hours of one patient, before imputation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawWindow {
    pub patient_id: String,
    pub slot: usize,
    pub label: usize,
    pub d_in: usize,
    /// `[D_in, S]` row-major; NaN where unobserved.
    pub values: Vec<f64>,
}

impl RawWindow {
    pub fn get(&self, feature: usize, t: usize) -> f64 {
        self.values[feature * self.slot + t]
    }
}

/// Window over the first `slot` hours of `record` for the given `features`
/// (column indices), or `None` if the record is shorter than `slot`.
pub fn make_window(
    record: &PatientRecord,
    features: &[usize],
    slot: usize,
    label: usize,
) -> Option<RawWindow> {
    if record.hours() < slot {
        return None;
    }
    let mut values = Vec::with_capacity(features.len() * slot);
    for &c in features {
        values.extend(record.rows[..slot].iter().map(|r| r[c]));
    }
    Some(RawWindow {
        patient_id: record.id.clone(),
        slot,
        label,
        d_in: features.len(),
        values,
    })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Forward-fill, then fill leading gaps with `fill`.
pub fn impute_series(series: &[f64], fill: f64) -> Vec<f64> {
    let mut last = None;
    series
        .iter()
        .map(|&v| {
            if !v.is_nan() {
                last = Some(v);
            }
            last.unwrap_or(fill)
        })
        .collect()
}

/// Imputation and standardization fitted on training windows only.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    /// Median of observed training values per feature; 0 where a feature was
    /// never observed in training.
    pub medians: Vec<f64>,
    pub means: Vec<f64>,
    /// Population standard deviation after imputation; 1 where it is 0.
    pub stds: Vec<f64>,
}

impl Preprocessor {
    pub fn fit(train: &[&RawWindow]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit preprocessing on no windows".into()))?;
        let d = first.d_in;
        if let Some(w) = train.iter().find(|w| w.d_in != d || w.slot != first.slot) {
            return Err(Error::dim(format!(
                "window {} is {}x{}, expected {d}x{}",
                w.patient_id, w.d_in, w.slot, first.slot
            )));
        }
        let medians: Vec<f64> = (0..d)
            .map(|f| {
                let observed = train
                    .iter()
                    .flat_map(|w| w.values[f * w.slot..(f + 1) * w.slot].iter().copied())
                    .filter(|v| !v.is_nan())
                    .collect();
                median(observed).unwrap_or(0.0)
            })
            .collect();
        let mut means = vec![0.0; d];
        let mut stds = vec![0.0; d];
        for f in 0..d {
            let filled: Vec<f64> = train
                .iter()
                .flat_map(|w| impute_series(&w.values[f * w.slot..(f + 1) * w.slot], medians[f]))
                .collect();
            let n = filled.len() as f64;
            let mean = filled.iter().sum::<f64>() / n;
            let var = filled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            means[f] = mean;
            stds[f] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(Self {
            medians,
            means,
            stds,
        })
    }

    pub fn d_in(&self) -> usize {
        self.medians.len()
    }

    /// Imputed, standardized `[D_in, S]` values.
    pub fn transform(&self, w: &RawWindow) -> Result<Vec<f64>> {
        if w.d_in != self.d_in() {
            return Err(Error::dim(format!(
                "window has {} features, preprocessing was fit on {}",
                w.d_in,
                self.d_in()
            )));
        }
        let mut out = Vec::with_capacity(w.values.len());
        for f in 0..w.d_in {
            let series = impute_series(&w.values[f * w.slot..(f + 1) * w.slot], self.medians[f]);
            out.extend(series.iter().map(|v| (v - self.means[f]) / self.stds[f]));
        }
        Ok(out)
    }

    /// Stacks transformed windows into `[N, D_in, S]`.
    pub fn tensor(&self, windows: &[&RawWindow]) -> Result<Tensor<f64>> {
        let first = windows
            .first()
            .ok_or_else(|| Error::InvalidArgument("no windows".into()))?;
        let mut data = Vec::with_capacity(windows.len() * first.values.len());
        for w in windows {
            if w.slot != first.slot {
                return Err(Error::dim("windows of different lengths".to_string()));
            }
            data.extend(self.transform(w)?);
        }
        Tensor::new(&[windows.len(), first.d_in, first.slot], data)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.usize(self.d_in());
        w.f64s(&self.medians);
        w.f64s(&self.means);
        w.f64s(&self.stds);
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let d = r.count(24)?;
        Ok(Self {
            medians: r.f64s(d)?,
            means: r.f64s(d)?,
            stds: r.f64s(d)?,
        })
    }
}

/// Patient-disjoint split preserving class proportions. Returns indices into
/// `windows` for the training and held-out sides, each in ascending order.
pub fn stratified_split(windows: &[RawWindow], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("split_ratio", "must lie strictly between 0 and 1"));
    }
    let mut patients: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        let entry = patients.entry(&w.patient_id).or_insert((w.label, Vec::new()));
        if entry.0 != w.label {
            return Err(Error::Data(format!(
                "patient {} has windows with different labels",
                w.patient_id
            )));
        }
        entry.1.push(i);
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, (label, _)) in &patients {
        by_class.entry(*label).or_default().push(id);
    }
    let mut rng = rng::stream(seed, "split");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut ids) in by_class {
        let n = ids.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "class {class} has {n} patient(s); a split needs at least 2"
            )));
        }
        ids.shuffle(&mut rng);
        let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        for (k, id) in ids.iter().enumerate() {
            let side = if k < n_train { &mut train } else { &mut test };
            side.extend_from_slice(&patients[id].1);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// One patient's first hours, kept once and cut into windows on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientPrefix {
    pub id: String,
    pub label: usize,
    /// Hours stored, at most `MAX_SLOT`.
    pub hours: usize,
    /// `[hours, D_in]` row-major; NaN where unobserved.
    pub values: Vec<f64>,
}

/// Labelled early-hour data for many patients.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowArchive {
    pub feature_names: Vec<String>,
    pub n_classes: usize,
    pub patients: Vec<PatientPrefix>,
}

const ARCHIVE_MAGIC: &[u8; 8] = b"MEETWIN1";

impl WindowArchive {
    /// Builds an archive from records and labels already computed on the
    /// full records. Features are the columns of the first record other than
    /// the outcome flag; every record must contain them. Patients are sorted
    /// by id.
    pub fn from_records(records: &[PatientRecord], labels: &[usize], n_classes: usize) -> Result<Self> {
        if records.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} records but {} labels",
                records.len(),
                labels.len()
            )));
        }
        let first = records
            .first()
            .ok_or_else(|| Error::Data("no patient records".into()))?;
        let names = feature_names(first);
        let mut patients = Vec::with_capacity(records.len());
        for (r, &label) in records.iter().zip(labels) {
            if label >= n_classes {
                return Err(Error::Data(format!("label {label} of {} out of range", r.id)));
            }
            let cols = names
                .iter()
                .map(|n| {
                    r.column_index(n)
                        .ok_or_else(|| Error::Data(format!("record {} lacks column `{n}`", r.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let hours = r.hours().min(MAX_SLOT);
            let mut values = Vec::with_capacity(hours * cols.len());
            for row in &r.rows[..hours] {
                values.extend(cols.iter().map(|&c| row[c]));
            }
            patients.push(PatientPrefix {
                id: r.id.clone(),
                label,
                hours,
                values,
            });
        }
        patients.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = patients.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Data(format!("duplicate patient id {}", w[0].id)));
        }
        Ok(Self {
            feature_names: names,
            n_classes,
            patients,
        })
    }

    pub fn d_in(&self) -> usize {
        self.feature_names.len()
    }

    /// Windows at `slot` for every patient with at least `slot` hours.
    pub fn windows(&self, slot: usize) -> Result<Vec<RawWindow>> {
        check_slot(slot)?;
        let d = self.d_in();
        Ok(self
            .patients
            .iter()
            .filter(|p| p.hours >= slot)
            .map(|p| {
                let mut values = Vec::with_capacity(d * slot);
                for f in 0..d {
                    values.extend((0..slot).map(|t| p.values[t * d + f]));
                }
                RawWindow {
                    patient_id: p.id.clone(),
                    slot,
                    label: p.label,
                    d_in: d,
                    values,
                }
            })
            .collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for p in &self.patients {
            c[p.label] += 1;
        }
        c
    }

    /// Text summary: class counts plus window and skip counts for each slot.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "patients: {}", self.patients.len());
        let _ = writeln!(s, "features: {}", self.d_in());
        let _ = writeln!(s, "classes: {}", self.n_classes);
        for (k, n) in self.class_counts().iter().enumerate() {
            let _ = writeln!(s, "class {k}: {n}");
        }
        let _ = writeln!(s, "slot,windows,skipped");
        for slot in MIN_SLOT..=MAX_SLOT {
            let n = self.patients.iter().filter(|p| p.hours >= slot).count();
            let _ = writeln!(s, "{slot},{n},{}", self.patients.len() - n);
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(ARCHIVE_MAGIC);
        w.usize(self.feature_names.len());
        for n in &self.feature_names {
            w.str(n);
        }
        w.usize(self.n_classes);
        w.usize(self.patients.len());
        for p in &self.patients {
            w.str(&p.id);
            w.usize(p.label);
            w.usize(p.hours);
            w.f64s(&p.values);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err(Error::Format("not a window archive (bad magic)".into()));
        }
        let nf = r.count(8)?;
        let feature_names = (0..nf).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let n_classes = r.usize()?;
        let np = r.count(24)?;
        let mut patients = Vec::with_capacity(np);
        for _ in 0..np {
            let id = r.str()?;
            let label = r.usize()?;
            let hours = r.usize()?;
            if label >= n_classes || hours > MAX_SLOT {
                return Err(Error::Format(format!("corrupt entry for patient {id}")));
            }
            let values = r.f64s(hours * nf)?;
            patients.push(PatientPrefix {
                id,
                label,
                hours,
                values,
            });
        }
        if !r.is_at_end() {
            return Err(Error::Format("trailing bytes after window archive".into()));
        }
        Ok(Self {
            feature_names,
            n_classes,
            patients,
        })
    }
}

/// Labels every record with `rules` (over its full length) and archives it.
pub fn ingest(records: &[PatientRecord], rules: &LabelRuleSet) -> Result<WindowArchive> {
    let labels = records
        .iter()
        .map(|r| rules.apply(r))
        .collect::<Result<Vec<_>>>()?;
    WindowArchive::from_records(records, &labels, rules.n_classes)
}
