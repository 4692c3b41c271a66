//! Patient files, labelling rules, early windows and synthetic data.

mod labels;
mod psv;
mod synth;
mod windows;

pub use labels::{Comparator, LabelRuleSet, Rule, Scheme, DEFAULT_QSOFA_RULES, DEFAULT_SOFA_RULES};
pub use psv::{parse_psv, serialize_psv, PatientRecord};
pub use synth::{motif_placement, synth_archive, synth_generate, SynthSpec, MOTIF};
pub use windows::{
    check_slot, feature_names, impute_series, ingest, make_window, stratified_split,
    PatientPrefix, Preprocessor, RawWindow, WindowArchive, LABEL_COLUMN, MAX_SLOT, MIN_SLOT,
};
