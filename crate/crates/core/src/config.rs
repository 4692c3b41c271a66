//! Model and experiment configuration, with a plain `key = value` text form
//! used by config files and embedded in checkpoints.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gbdt::GbdtParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    Full,
    NoMere,
    NoCdta,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoMere,
        Ablation::NoCdta,
        Ablation::NoBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMere => "no_mere",
            Ablation::NoCdta => "no_cdta",
            Ablation::NoBoth => "no_both",
        }
    }

    pub fn uses_mere(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoCdta)
    }

    pub fn uses_cdta(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoMere)
    }

    /// `no_both` trains no network; the tree head sees raw features.
    pub fn uses_network(self) -> bool {
        self != Ablation::NoBoth
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Ablation::Full),
            "no_mere" => Ok(Ablation::NoMere),
            "no_cdta" => Ok(Ablation::NoCdta),
            "no_both" => Ok(Ablation::NoBoth),
            other => Err(Error::config(
                "ablation",
                format!("unknown variant `{other}` (full, no_mere, no_cdta, no_both)"),
            )),
        }
    }
}

/// How each endogenous view selects its input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewGrouping {
    /// Every view convolves all input channels.
    FullWidth,
    /// View `g` convolves channels `c` with `c % m == g % m`, `m = min(n_views, d_in)`.
    ChannelGroups,
}

impl ViewGrouping {
    fn as_str(self) -> &'static str {
        match self {
            ViewGrouping::FullWidth => "full_width",
            ViewGrouping::ChannelGroups => "channel_groups",
        }
    }
}

impl FromStr for ViewGrouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full_width" => Ok(ViewGrouping::FullWidth),
            "channel_groups" => Ok(ViewGrouping::ChannelGroups),
            other => Err(Error::config(
                "view_grouping",
                format!("unknown grouping `{other}` (full_width, channel_groups)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub seq_len: usize,
    pub n_views: usize,
    pub view_dim: usize,
    pub view_grouping: ViewGrouping,
    pub k: usize,
    pub k1: usize,
    pub k2: usize,
    pub pool_stride: usize,
    pub f_long: usize,
    pub f_short: usize,
    pub heads: usize,
    pub d_proj: usize,
    pub n_classes: usize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 40,
            seq_len: 5,
            n_views: 35,
            view_dim: 8,
            view_grouping: ViewGrouping::FullWidth,
            k: 5,
            k1: 5,
            k2: 3,
            pool_stride: 2,
            f_long: 64,
            f_short: 32,
            heads: 4,
            d_proj: 64,
            n_classes: 3,
            alpha: 1e-4,
            beta: 1.0,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("seq_len", self.seq_len),
            ("n_views", self.n_views),
            ("view_dim", self.view_dim),
            ("k", self.k),
            ("k1", self.k1),
            ("k2", self.k2),
            ("pool_stride", self.pool_stride),
            ("f_long", self.f_long),
            ("f_short", self.f_short),
            ("heads", self.heads),
            ("d_proj", self.d_proj),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in dims {
            if v < 1 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        for (name, v) in [("k", self.k), ("k1", self.k1), ("k2", self.k2)] {
            if v % 2 == 0 {
                return Err(Error::config(name, format!("kernel size {v} must be odd")));
            }
        }
        if self.k2 >= self.k1 {
            return Err(Error::config(
                "k2",
                format!("short kernel {} must be smaller than long kernel {}", self.k2, self.k1),
            ));
        }
        if !self.f_short.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} heads do not divide f_short = {}", self.heads, self.f_short),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least 2 classes"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Tiny architecture used by gradient checks.
    pub fn toy() -> Self {
        Self {
            d_in: 3,
            seq_len: 8,
            n_views: 2,
            view_dim: 4,
            k: 3,
            k1: 5,
            k2: 3,
            f_long: 4,
            f_short: 4,
            heads: 2,
            d_proj: 6,
            n_classes: 3,
            alpha: 0.1,
            beta: 1.0,
            ..Self::default()
        }
    }

    /// Small architecture for desk-scale experiments on a few hundred
    /// windows.
    pub fn compact() -> Self {
        Self {
            n_views: 4,
            view_dim: 4,
            k: 3,
            k1: 5,
            k2: 3,
            pool_stride: 4,
            f_long: 8,
            f_short: 8,
            heads: 2,
            d_proj: 16,
            alpha: 1e-2,
            beta: 1.0,
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 16,
            ..Self::default()
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_in", self.d_in.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("n_views", self.n_views.to_string()),
            ("view_dim", self.view_dim.to_string()),
            ("view_grouping", self.view_grouping.as_str().to_string()),
            ("k", self.k.to_string()),
            ("k1", self.k1.to_string()),
            ("k2", self.k2.to_string()),
            ("pool_stride", self.pool_stride.to_string()),
            ("f_long", self.f_long.to_string()),
            ("f_short", self.f_short.to_string()),
            ("heads", self.heads.to_string()),
            ("d_proj", self.d_proj.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("alpha", fmt_f64(self.alpha)),
            ("beta", fmt_f64(self.beta)),
            ("learning_rate", fmt_f64(self.learning_rate)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("ablation", self.ablation.as_str().to_string()),
        ]
    }

    /// Applies one `key = value` pair; returns `Ok(false)` for keys that are
    /// not model fields.
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_in" => self.d_in = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "n_views" => self.n_views = parse(key, value)?,
            "view_dim" => self.view_dim = parse(key, value)?,
            "view_grouping" => self.view_grouping = value.parse()?,
            "k" => self.k = parse(key, value)?,
            "k1" => self.k1 = parse(key, value)?,
            "k2" => self.k2 = parse(key, value)?,
            "pool_stride" => self.pool_stride = parse(key, value)?,
            "f_long" => self.f_long = parse(key, value)?,
            "f_short" => self.f_short = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "d_proj" => self.d_proj = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        render(&self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_lines(text)? {
            if !cfg.set(&key, &value)? {
                return Err(unknown_key(line, &key));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything one experiment needs: the network, the tree head, and the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub gbdt: GbdtParams,
    pub split_ratio: f64,
    pub runs: usize,
    pub slots: Vec<usize>,
    pub variants: Vec<Ablation>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            gbdt: GbdtParams::default(),
            split_ratio: 0.8,
            runs: 5,
            slots: (2..=23).collect(),
            variants: Ablation::ALL.to_vec(),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gbdt.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config("split_ratio", "must lie in (0, 1)"));
        }
        if self.runs < 1 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        if self.slots.is_empty() {
            return Err(Error::config("slots", "no slots given"));
        }
        if let Some(bad) = self.slots.iter().find(|&&s| !(2..=23).contains(&s)) {
            return Err(Error::config("slots", format!("slot {bad} outside 2..=23")));
        }
        if self.variants.is_empty() {
            return Err(Error::config("variants", "no variants given"));
        }
        if self.workers < 1 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut entries = self.model.entries();
        entries.extend([
            ("gbdt_rounds", self.gbdt.rounds.to_string()),
            ("gbdt_depth", self.gbdt.max_depth.to_string()),
            ("gbdt_shrinkage", fmt_f64(self.gbdt.shrinkage)),
            ("gbdt_min_samples_leaf", self.gbdt.min_samples_leaf.to_string()),
            ("split_ratio", fmt_f64(self.split_ratio)),
            ("runs", self.runs.to_string()),
            ("slots", format_list(&self.slots)),
            (
                "variants",
                self.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(","),
            ),
            ("workers", self.workers.to_string()),
        ]);
        render(&entries)
    }

    /// Parses config-file text. Unknown keys are rejected with their line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_lines(text)? {
            if cfg.model.set(&key, &value)? {
                continue;
            }
            match key.as_str() {
                "gbdt_rounds" => cfg.gbdt.rounds = parse(&key, &value)?,
                "gbdt_depth" => cfg.gbdt.max_depth = parse(&key, &value)?,
                "gbdt_shrinkage" => cfg.gbdt.shrinkage = parse(&key, &value)?,
                "gbdt_min_samples_leaf" => cfg.gbdt.min_samples_leaf = parse(&key, &value)?,
                "split_ratio" => cfg.split_ratio = parse(&key, &value)?,
                "runs" => cfg.runs = parse(&key, &value)?,
                "slots" => cfg.slots = parse_slots(&value)?,
                "variants" => {
                    cfg.variants = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(str::parse)
                        .collect::<Result<_>>()?
                }
                "workers" => cfg.workers = parse(&key, &value)?,
                _ => return Err(unknown_key(line, &key)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_f64(v: f64) -> String {
    // `{:?}` round-trips exactly.
    format!("{v:?}")
}

fn format_list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn render(entries: &[(&str, String)]) -> String {
    entries
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn unknown_key(line: usize, key: &str) -> Error {
    Error::Parse {
        line,
        reason: format!("unknown key `{key}`"),
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

/// Accepts `a-b` ranges and comma lists, e.g. `2-5,8,23`.
pub fn parse_slots(value: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (usize, usize) = (parse("slots", a)?, parse("slots", b)?);
            if a > b {
                return Err(Error::config("slots", format!("empty range `{part}`")));
            }
            out.extend(a..=b);
        } else {
            out.push(parse("slots", part)?);
        }
    }
    Ok(out)
}

fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            reason: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
