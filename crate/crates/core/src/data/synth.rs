//! Synthetic patients with weak class motifs planted early in the sequence.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::psv::PatientRecord;
use super::windows::WindowArchive;
use crate::error::{Error, Result};
use crate::rng;

/// Shape of every planted motif before scaling.
pub const MOTIF: [f64; 3] = [0.5, 1.0, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub d_in: usize,
    pub hours: usize,
    pub motif_strength: f64,
    pub noise_sd: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            n_classes: 3,
            d_in: 6,
            hours: 48,
            motif_strength: 3.25,
            noise_sd: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_per_class", self.n_per_class),
            ("n_classes", self.n_classes),
            ("d_in", self.d_in),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.hours < 2 {
            return Err(Error::config("hours", "must be at least 2"));
        }
        if !(self.motif_strength.is_finite() && self.motif_strength >= 0.0) {
            return Err(Error::config("motif_strength", "must be finite and non-negative"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd > 0.0) {
            return Err(Error::config("noise_sd", "must be positive"));
        }
        Ok(())
    }

    /// Number of leading hours that can carry a motif: `ceil(hours / 4)`.
    pub fn early_hours(&self) -> usize {
        self.hours.div_ceil(4)
    }
}

/// Channel and sign of the motif for `class`: classes cycle over channels,
/// and each further cycle flips the sign.
pub fn motif_placement(class: usize, d_in: usize) -> (usize, f64) {
    let sign = if (class / d_in).is_multiple_of(2) { 1.0 } else { -1.0 };
    (class % d_in, sign)
}

/// Records (columns `x0..`) and their planted labels. Patients are
/// interleaved by class; the motif starts at a uniformly drawn lag so that it
/// ends within the early hours.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<(Vec<PatientRecord>, Vec<usize>)> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "synth");
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::config("noise_sd", e.to_string()))?;
    let columns: Vec<String> = (0..spec.d_in).map(|j| format!("x{j}")).collect();
    let early = spec.early_hours();
    let len = MOTIF.len().min(early);
    let mut records = Vec::with_capacity(spec.n_per_class * spec.n_classes);
    let mut labels = Vec::with_capacity(records.capacity());
    for i in 0..spec.n_per_class {
        for class in 0..spec.n_classes {
            let mut rows: Vec<Vec<f64>> = (0..spec.hours)
                .map(|_| (0..spec.d_in).map(|_| noise.sample(&mut rng)).collect())
                .collect();
            let lag = rng.random_range(0..=early - len);
            let (channel, sign) = motif_placement(class, spec.d_in);
            for (j, m) in MOTIF[..len].iter().enumerate() {
                rows[lag + j][channel] += sign * spec.motif_strength * m;
            }
            let id = format!("synth{:06}", i * spec.n_classes + class);
            records.push(PatientRecord::new(id, columns.clone(), rows)?);
            labels.push(class);
        }
    }
    Ok((records, labels))
}

/// [`synth_generate`] packed straight into a window archive.
pub fn synth_archive(spec: &SynthSpec, seed: u64) -> Result<WindowArchive> {
    let (records, labels) = synth_generate(spec, seed)?;
    WindowArchive::from_records(&records, &labels, spec.n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled() {
        let spec = SynthSpec {
            n_per_class: 3,
            ..SynthSpec::default()
        };
        let (a, la) = synth_generate(&spec, 5).unwrap();
        let (b, lb) = synth_generate(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a.len(), 9);
        assert_eq!(la, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert_eq!(a[0].hours(), 48);
    }

    #[test]
    fn motif_confined_to_early_hours() {
        // With near-zero noise the only large values are the motif.
        let spec = SynthSpec {
            n_per_class: 5,
            motif_strength: 10.0,
            noise_sd: 1e-6,
            ..SynthSpec::default()
        };
        let (recs, labels) = synth_generate(&spec, 1).unwrap();
        for (r, &c) in recs.iter().zip(&labels) {
            let (ch, _) = motif_placement(c, spec.d_in);
            for (t, row) in r.rows.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if v.abs() > 1.0 {
                        assert!(t < spec.early_hours() && j == ch);
                    }
                }
            }
        }
    }

    #[test]
    fn placement_cycles() {
        assert_eq!(motif_placement(1, 2), (1, 1.0));
        assert_eq!(motif_placement(2, 2), (0, -1.0));
    }
}
