use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 3;

/// The three uncertainty labels, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative = 0,
    Uncertain = 1,
    Positive = 2,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::Negative, Label::Uncertain, Label::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Uncertain => "uncertain",
            Label::Positive => "positive",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLabelError(pub String);

impl fmt::Display for ParseLabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown label {:?} (expected negative, uncertain or positive)", self.0)
    }
}

impl std::error::Error for ParseLabelError {}

impl FromStr for Label {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "negative" => Ok(Label::Negative),
            "uncertain" => Ok(Label::Uncertain),
            "positive" => Ok(Label::Positive),
            _ => Err(ParseLabelError(s.to_string())),
        }
    }
}

/// Predictive distribution over the three labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs(pub [f64; NUM_CLASSES]);

impl ClassProbs {
    pub fn uniform() -> Self {
        ClassProbs([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    pub fn get(&self, label: Label) -> f64 {
        self.0[label.index()]
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for j in 1..NUM_CLASSES {
            if self.0[j] > self.0[best] {
                best = j;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    pub fn predicted(&self) -> Label {
        Label::ALL[self.argmax()]
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Within `[0, 1]` element-wise and summing to one within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.0.iter().all(|p| (0.0..=1.0).contains(p)) && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

impl From<[f64; NUM_CLASSES]> for ClassProbs {
    fn from(p: [f64; NUM_CLASSES]) -> Self {
        ClassProbs(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        for l in Label::ALL {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
        assert_eq!(" Positive ".parse::<Label>().unwrap(), Label::Positive);
        assert!("maybe".parse::<Label>().is_err());
        assert_eq!(Label::from_index(3), None);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(ClassProbs::uniform().argmax(), 0);
        assert_eq!(ClassProbs([0.2, 0.4, 0.4]).argmax(), 1);
        assert_eq!(ClassProbs([0.1, 0.2, 0.7]).predicted(), Label::Positive);
    }
}
