//! Point-based labelling rules.
//!
//! Rule file format, one entry per line (`#` starts a comment):
//!
//! ```text
//! SBP,<=,100,1
//! Resp,>=,22,1
//! classmap,0:0;1:1;2+:2
//! ```
//!
//! A rule awards its points when the most extreme observed value of the
//! feature in the rule's direction satisfies the comparison. `k+` in the class
//! map covers every total of at least `k`.

use std::fmt;
use std::str::FromStr;

use super::psv::PatientRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    fn holds(self, v: f64, t: f64) -> bool {
        match self {
            Comparator::Lt => v < t,
            Comparator::Le => v <= t,
            Comparator::Gt => v > t,
            Comparator::Ge => v >= t,
        }
    }

    fn wants_low(self) -> bool {
        matches!(self, Comparator::Lt | Comparator::Le)
    }
}

impl FromStr for Comparator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "<" => Comparator::Lt,
            "<=" => Comparator::Le,
            ">" => Comparator::Gt,
            ">=" => Comparator::Ge,
            _ => return Err(Error::InvalidArgument(format!("unknown comparator `{s}`"))),
        })
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Qsofa,
    Sofa,
    Custom,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qsofa" => Ok(Scheme::Qsofa),
            "sofa" => Ok(Scheme::Sofa),
            "custom" => Ok(Scheme::Custom),
            _ => Err(Error::config("scheme", format!("`{s}` is not qsofa, sofa or custom"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub feature: String,
    pub comparator: Comparator,
    pub threshold: f64,
    pub points: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRuleSet {
    pub scheme: Scheme,
    pub rules: Vec<Rule>,
    /// `(min_points, open_ended, class)`; exact entries match one total,
    /// open-ended ones every total at or above `min_points`.
    classmap: Vec<(u32, bool, usize)>,
    pub n_classes: usize,
}

pub const DEFAULT_QSOFA_RULES: &str = "\
# Systolic pressure and respiratory rate from the hourly vitals, plus the
# recorded sepsis flag as a third point source.
SBP,<=,100,1
Resp,>=,22,1
SepsisLabel,>=,1,1
classmap,0:0;1:1;2:2;3:3
";

pub const DEFAULT_SOFA_RULES: &str = "\
# Organ-dysfunction proxies available in the hourly labs.
Platelets,<,150,1
Bilirubin_total,>=,1.2,1
Creatinine,>=,1.2,1
MAP,<,70,1
classmap,0:0;1:1;2+:2
";

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

impl LabelRuleSet {
    pub fn default_for(scheme: Scheme) -> Result<Self> {
        match scheme {
            Scheme::Qsofa => Self::parse(DEFAULT_QSOFA_RULES, scheme),
            Scheme::Sofa => Self::parse(DEFAULT_SOFA_RULES, scheme),
            Scheme::Custom => Err(Error::config("rules", "the custom scheme needs a rule file")),
        }
    }

    pub fn parse(text: &str, scheme: Scheme) -> Result<Self> {
        let mut rules = Vec::new();
        let mut classmap = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields[0] == "classmap" {
                if fields.len() != 2 {
                    return Err(parse_err(n, "expected `classmap,<points>:<class>;...`"));
                }
                let mut entries = Vec::new();
                for entry in fields[1].split(';').map(str::trim).filter(|e| !e.is_empty()) {
                    let (p, c) = entry
                        .split_once(':')
                        .ok_or_else(|| parse_err(n, format!("bad classmap entry `{entry}`")))?;
                    let (p, open) = match p.trim().strip_suffix('+') {
                        Some(p) => (p, true),
                        None => (p.trim(), false),
                    };
                    let p: u32 = p
                        .parse()
                        .map_err(|_| parse_err(n, format!("bad point total `{p}`")))?;
                    let c: usize = c
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(n, format!("bad class `{c}`")))?;
                    entries.push((p, open, c));
                }
                classmap = Some(entries);
                continue;
            }
            if fields.len() != 4 {
                return Err(parse_err(n, "expected `feature,comparator,threshold,points`"));
            }
            let comparator = fields[1].parse().map_err(|e: Error| parse_err(n, e.to_string()))?;
            let threshold: f64 = fields[2]
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| parse_err(n, format!("bad threshold `{}`", fields[2])))?;
            let points: u32 = fields[3]
                .parse()
                .map_err(|_| parse_err(n, format!("bad points `{}`", fields[3])))?;
            rules.push(Rule {
                feature: fields[0].to_string(),
                comparator,
                threshold,
                points,
            });
        }
        let classmap = classmap.ok_or_else(|| Error::config("rules", "missing classmap line"))?;
        if rules.is_empty() {
            return Err(Error::config("rules", "no rules"));
        }
        let n_classes = classmap.iter().map(|e| e.2).max().unwrap_or(0) + 1;
        let set = Self {
            scheme,
            rules,
            classmap,
            n_classes,
        };
        for total in set.attainable_totals() {
            set.class_of(total)?;
        }
        let expected = match scheme {
            Scheme::Qsofa => Some(4),
            Scheme::Sofa => Some(3),
            Scheme::Custom => None,
        };
        if let Some(k) = expected {
            if set.n_classes != k {
                return Err(Error::config(
                    "rules",
                    format!("this scheme has {k} classes, the class map gives {}", set.n_classes),
                ));
            }
        }
        Ok(set)
    }

    /// Every subset sum of rule points.
    pub fn attainable_totals(&self) -> Vec<u32> {
        let mut totals = vec![0u32];
        for r in &self.rules {
            let more: Vec<u32> = totals.iter().map(|t| t + r.points).collect();
            totals.extend(more);
            totals.sort_unstable();
            totals.dedup();
        }
        totals
    }

    pub fn class_of(&self, total: u32) -> Result<usize> {
        if let Some(e) = self.classmap.iter().find(|e| !e.1 && e.0 == total) {
            return Ok(e.2);
        }
        self.classmap
            .iter()
            .filter(|e| e.1 && e.0 <= total)
            .max_by_key(|e| e.0)
            .map(|e| e.2)
            .ok_or_else(|| Error::config("rules", format!("class map does not cover {total} points")))
    }

    pub fn points(&self, record: &PatientRecord) -> Result<u32> {
        let mut total = 0;
        for rule in &self.rules {
            let col = record
                .column_index(&rule.feature)
                .ok_or_else(|| Error::Data(format!("unknown feature `{}` in label rules", rule.feature)))?;
            let observed = record.rows.iter().map(|r| r[col]).filter(|v| !v.is_nan());
            let worst = if rule.comparator.wants_low() {
                observed.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))))
            } else {
                observed.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            };
            if worst.is_some_and(|v| rule.comparator.holds(v, rule.threshold)) {
                total += rule.points;
            }
        }
        Ok(total)
    }

    /// Class of `record`, judged over all of its hours.
    pub fn apply(&self, record: &PatientRecord) -> Result<usize> {
        self.class_of(self.points(record)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(cols: &[&str], rows: &[&[f64]]) -> PatientRecord {
        PatientRecord::new(
            "p",
            cols.iter().map(|c| c.to_string()).collect(),
            rows.iter().map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn qsofa_two_points() {
        let rules = LabelRuleSet::default_for(Scheme::Qsofa).unwrap();
        assert_eq!(rules.n_classes, 4);
        let r = record(&["SBP", "Resp", "SepsisLabel"], &[&[120.0, 18.0, 0.0], &[95.0, 24.0, 0.0]]);
        assert_eq!(rules.apply(&r).unwrap(), 2);
    }

    #[test]
    fn nothing_fires_is_class_zero() {
        let rules = LabelRuleSet::default_for(Scheme::Qsofa).unwrap();
        let r = record(&["SBP", "Resp", "SepsisLabel"], &[&[130.0, f64::NAN, 0.0]]);
        assert_eq!(rules.apply(&r).unwrap(), 0);
    }

    #[test]
    fn sofa_buckets_high_totals() {
        let rules = LabelRuleSet::default_for(Scheme::Sofa).unwrap();
        assert_eq!(rules.n_classes, 3);
        assert_eq!(rules.class_of(4).unwrap(), 2);
        assert_eq!(rules.class_of(1).unwrap(), 1);
    }

    #[test]
    fn custom_rules_hand_sum() {
        let text = "A,<,5,2\nB,>=,10,3 # comment\nC,>,0,1\nclassmap,0:0;1:0;2:1;3:1;4+:2\n";
        let rules = LabelRuleSet::parse(text, Scheme::Custom).unwrap();
        // A min 4 (<5: 2 pts), B max 9 (no), C max 0.5 (>0: 1 pt) -> 3 -> class 1
        let r = record(&["A", "B", "C"], &[&[6.0, 9.0, -1.0], &[4.0, 2.0, 0.5]]);
        assert_eq!(rules.points(&r).unwrap(), 3);
        assert_eq!(rules.apply(&r).unwrap(), 1);
    }

    #[test]
    fn unknown_feature_rejected() {
        let rules = LabelRuleSet::default_for(Scheme::Sofa).unwrap();
        let r = record(&["HR"], &[&[80.0]]);
        assert!(matches!(rules.apply(&r), Err(Error::Data(_))));
    }

    #[test]
    fn classmap_must_cover_totals() {
        assert!(LabelRuleSet::parse("A,<,1,1\nB,<,1,1\nclassmap,0:0;1:1\n", Scheme::Custom).is_err());
        assert!(LabelRuleSet::parse("A,<,1,1\nclassmap,0:0;1:1\n", Scheme::Sofa).is_err());
        assert!(LabelRuleSet::parse("A,~,1,1\nclassmap,0:0;1:1\n", Scheme::Custom).is_err());
    }
}
