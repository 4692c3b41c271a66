#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn meet_ts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meet-ts"))
        .args(args)
        .env_remove("MEET_TS_WORKERS")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Small network and tree settings for quick end-to-end runs.
pub const SMALL_CONFIG: &str = "\
# quick settings
n_views = 4
view_dim = 4
k = 3
pool_stride = 4
f_long = 8
f_short = 8
heads = 2
d_proj = 16
epochs = 5
batch_size = 16
learning_rate = 0.003
gbdt_rounds = 20
";

/// Writes the small config and a 60-patient, 12-hour synthetic archive
/// (plus its PSV files under `psv/`) into `dir`.
pub fn toy_setup(dir: &Path) {
    std::fs::write(dir.join("cfg.txt"), SMALL_CONFIG).unwrap();
    let o = meet_ts(&[
        "synth",
        "--out",
        p(&dir.join("toy.win")),
        "--psv-dir",
        p(&dir.join("psv")),
        "--n-per-class",
        "20",
        "--hours",
        "12",
        "--features",
        "4",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}
