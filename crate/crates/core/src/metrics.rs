//! Accuracy, NLPP, MMPCL and false-negative / true-positive confidence,
//! assembled into a per-test-set report.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::ReliabilityBins;
use crate::error::{Error, Result};
use crate::labels::{ClassProbs, Label};

/// Floor on the true-class probability inside NLPP.
pub const NLPP_FLOOR: f64 = 1e-12;

fn check_aligned(probs: &[ClassProbs], labels: &[usize]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: labels.len() });
    }
    Ok(())
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v.iter().sum()
}

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
pub fn accuracy(probs: &[ClassProbs], labels: &[usize]) -> Result<f64> {
    check_aligned(probs, labels)?;
    let hits = probs.iter().zip(labels).filter(|(p, y)| p.argmax() == **y).count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Mean of `-ln max(p_{n,y_n}, 1e-12)`.
pub fn nlpp(probs: &[ClassProbs], labels: &[usize]) -> Result<f64> {
    check_aligned(probs, labels)?;
    let terms = probs.iter().zip(labels).map(|(p, &y)| -p.0[y].max(NLPP_FLOOR).ln()).collect();
    Ok(sorted_sum(terms) / probs.len() as f64)
}

/// Mean over rows of the largest class probability.
pub fn mmpcl(probs: &[ClassProbs]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(sorted_sum(probs.iter().map(|p| p.max()).collect()) / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "FN")]
    FalseNegative,
    #[serde(rename = "TP")]
    TruePositive,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::FalseNegative => "FN",
            Group::TruePositive => "TP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfidence {
    /// `None` when the subset is empty.
    pub mmpcl: Option<f64>,
    pub count: usize,
}

/// MMPCL over the false negatives (`true = class`, `predicted ≠ class`) or
/// true positives (`true = predicted = class`) for one class.
pub fn groupwise_confidence(
    probs: &[ClassProbs],
    predicted: &[usize],
    true_labels: &[usize],
    group: Group,
    class_of_interest: usize,
) -> Result<GroupConfidence> {
    if probs.len() != predicted.len() || probs.len() != true_labels.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: predicted.len().min(true_labels.len()) });
    }
    let subset: Vec<ClassProbs> = probs
        .iter()
        .zip(predicted.iter().zip(true_labels))
        .filter(|(_, (&pred, &truth))| {
            truth == class_of_interest
                && match group {
                    Group::FalseNegative => pred != class_of_interest,
                    Group::TruePositive => pred == class_of_interest,
                }
        })
        .map(|(p, _)| *p)
        .collect();
    Ok(GroupConfidence { mmpcl: if subset.is_empty() { None } else { Some(mmpcl(&subset)?) }, count: subset.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub group: Group,
    pub class: Label,
    pub mmpcl: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetMetrics {
    pub name: String,
    pub size: usize,
    pub accuracy: f64,
    pub nlpp: f64,
    pub mmpcl: f64,
    pub groups: Vec<GroupEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliability: Option<ReliabilityBins>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub calibrated: bool,
    pub test_sets: Vec<TestSetMetrics>,
}

/// One named test set: predictions and the ground truth to score them against.
#[derive(Debug, Clone)]
pub struct NamedPredictions {
    pub name: String,
    pub probs: Vec<ClassProbs>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub model: String,
    pub calibrated: bool,
    /// Classes whose FN/TP confidence is reported. Negative is left out.
    pub group_classes: Vec<Label>,
    /// Test sets that also get reliability bins for the positive class.
    pub reliability_for: Vec<String>,
    pub n_bins: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            model: String::new(),
            calibrated: false,
            group_classes: vec![Label::Positive, Label::Uncertain],
            reliability_for: Vec::new(),
            n_bins: crate::calibration::DEFAULT_BINS,
        }
    }
}

fn set_metrics(set: &NamedPredictions, opts: &ReportOptions) -> Result<TestSetMetrics> {
    let predicted: Vec<usize> = set.probs.iter().map(|p| p.argmax()).collect();
    let mut groups = Vec::new();
    for group in [Group::FalseNegative, Group::TruePositive] {
        for &class in &opts.group_classes {
            let g = groupwise_confidence(&set.probs, &predicted, &set.labels, group, class.index())?;
            groups.push(GroupEntry { group, class, mmpcl: g.mmpcl, count: g.count });
        }
    }
    let reliability = if opts.reliability_for.contains(&set.name) {
        let pos = Label::Positive.index();
        let scores: Vec<f64> = set.probs.iter().map(|p| p.0[pos].clamp(0.0, 1.0)).collect();
        let hits: Vec<bool> = set.labels.iter().map(|&y| y == pos).collect();
        Some(crate::calibration::reliability_bins(&scores, &hits, opts.n_bins)?)
    } else {
        None
    };
    Ok(TestSetMetrics {
        name: set.name.clone(),
        size: set.probs.len(),
        accuracy: accuracy(&set.probs, &set.labels)?,
        nlpp: nlpp(&set.probs, &set.labels)?,
        mmpcl: mmpcl(&set.probs)?,
        groups,
        reliability,
    })
}

pub fn build_report(sets: &[NamedPredictions], opts: &ReportOptions) -> Result<MetricsReport> {
    let test_sets = sets
        .iter()
        .map(|s| set_metrics(s, opts).map_err(|e| Error::InTestSet { set: s.name.clone(), source: Box::new(e) }))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { model: opts.model.clone(), calibrated: opts.calibrated, test_sets })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn set(&self, name: &str) -> Option<&TestSetMetrics> {
        self.test_sets.iter().find(|s| s.name == name)
    }

    /// Flat CSV, one row per test set × metric: `test_set,metric,value,count`.
    ///
    /// Empty FN/TP subsets leave `value` blank unless `zero_empty_groups` is set,
    /// in which case they print as `0`.
    pub fn write_csv<W: Write>(&self, mut w: W, zero_empty_groups: bool) -> std::io::Result<()> {
        writeln!(w, "test_set,metric,value,count")?;
        for s in &self.test_sets {
            writeln!(w, "{},accuracy,{:.17e},{}", s.name, s.accuracy, s.size)?;
            writeln!(w, "{},nlpp,{:.17e},{}", s.name, s.nlpp, s.size)?;
            writeln!(w, "{},mmpcl,{:.17e},{}", s.name, s.mmpcl, s.size)?;
            for g in &s.groups {
                let value = match g.mmpcl {
                    Some(v) => format!("{v:.17e}"),
                    None if zero_empty_groups => "0".to_string(),
                    None => String::new(),
                };
                writeln!(w, "{},mmpcl_{}_{},{},{}", s.name, g.group, g.class, value, g.count)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(c: usize) -> ClassProbs {
        let mut p = [0.0; 3];
        p[c] = 1.0;
        ClassProbs(p)
    }

    #[test]
    fn accuracy_cases() {
        let labels = [0, 2, 1, 1];
        let probs: Vec<_> = labels.iter().map(|&c| one_hot(c)).collect();
        assert_eq!(accuracy(&probs, &labels).unwrap(), 1.0);
        assert_eq!(accuracy(&[ClassProbs::uniform(); 4], &[0; 4]).unwrap(), 1.0);
        let half = [one_hot(0), one_hot(1), one_hot(2), one_hot(2)];
        assert_eq!(accuracy(&half, &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn nlpp_cases() {
        assert_eq!(nlpp(&[one_hot(1)], &[1]).unwrap(), 0.0);
        let u = nlpp(&[ClassProbs::uniform(); 5], &[0, 1, 2, 2, 0]).unwrap();
        assert!((u - 3f64.ln()).abs() < 1e-12);
        let zero = nlpp(&[one_hot(0)], &[2]).unwrap();
        assert!((zero - 27.631).abs() < 1e-3);
        assert_eq!(zero, -(1e-12f64).ln());
    }

    #[test]
    fn mmpcl_cases() {
        assert_eq!(mmpcl(&[one_hot(0), one_hot(2)]).unwrap(), 1.0);
        assert!((mmpcl(&[ClassProbs::uniform()]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let m = mmpcl(&[ClassProbs([0.5, 0.3, 0.2]), ClassProbs([0.8, 0.1, 0.1])]).unwrap();
        assert!((m - 0.65).abs() < 1e-15);
    }

    #[test]
    fn group_cases() {
        let probs = [one_hot(2), one_hot(1)];
        let pred = [2, 1];
        let truth = [2, 1];
        let fn_ = groupwise_confidence(&probs, &pred, &truth, Group::FalseNegative, 2).unwrap();
        assert_eq!(fn_, GroupConfidence { mmpcl: None, count: 0 });
        let tp = groupwise_confidence(&probs, &pred, &truth, Group::TruePositive, 2).unwrap();
        assert_eq!(tp, GroupConfidence { mmpcl: Some(1.0), count: 1 });

        let p = [ClassProbs([0.1, 0.8, 0.1])];
        let g = groupwise_confidence(&p, &[1], &[2], Group::FalseNegative, 2).unwrap();
        assert_eq!(g, GroupConfidence { mmpcl: Some(0.8), count: 1 });
    }

    #[test]
    fn report_excludes_negative_groups_and_matches_sizes() {
        let set = NamedPredictions {
            name: "A".into(),
            probs: vec![one_hot(0), one_hot(1), one_hot(2)],
            labels: vec![0, 2, 2],
        };
        let twin = NamedPredictions { name: "B".into(), ..set.clone() };
        let report = build_report(&[set, twin], &ReportOptions::default()).unwrap();
        assert_eq!(report.test_sets.len(), 2);
        let (a, b) = (&report.test_sets[0], &report.test_sets[1]);
        assert_eq!(a.size, 3);
        assert_eq!(a.groups.len(), 4);
        assert!(a.groups.iter().all(|g| g.class != Label::Negative));
        assert_eq!((a.accuracy, a.nlpp, a.mmpcl, &a.groups), (b.accuracy, b.nlpp, b.mmpcl, &b.groups));
        let fn_pos = a.groups.iter().find(|g| g.group == Group::FalseNegative && g.class == Label::Positive).unwrap();
        assert_eq!(fn_pos.count, 1);
    }

    #[test]
    fn report_names_failing_set() {
        let bad = NamedPredictions { name: "broken".into(), probs: vec![], labels: vec![] };
        let err = build_report(&[bad], &ReportOptions::default()).unwrap_err();
        assert!(err.to_string().starts_with("broken:"));
    }

    #[test]
    fn csv_marks_absent_groups() {
        let set = NamedPredictions { name: "S".into(), probs: vec![one_hot(0)], labels: vec![0] };
        let report = build_report(&[set], &ReportOptions::default()).unwrap();
        let mut plain = Vec::new();
        report.write_csv(&mut plain, false).unwrap();
        let plain = String::from_utf8(plain).unwrap();
        assert!(plain.contains("S,mmpcl_FN_positive,,0\n"));
        let mut compat = Vec::new();
        report.write_csv(&mut compat, true).unwrap();
        assert!(String::from_utf8(compat).unwrap().contains("S,mmpcl_FN_positive,0,0\n"));
    }
}
