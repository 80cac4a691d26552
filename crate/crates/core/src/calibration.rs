//! Isotonic calibration and reliability binning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{ClassProbs, NUM_CLASSES};

pub const DEFAULT_BINS: usize = 10;

/// Piecewise-linear nondecreasing map fitted by pool-adjacent-violators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl IsotonicMap {
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Fitted value at each breakpoint's score, i.e. the isotonic fit itself.
    pub fn apply(&self, score: f64) -> f64 {
        isotonic_apply(self, score)
    }
}

struct Block {
    sum_wy: f64,
    sum_w: f64,
    /// Number of distinct scores pooled into this block.
    len: usize,
}

impl Block {
    fn mean(&self) -> f64 {
        self.sum_wy / self.sum_w
    }
}

/// Weighted least-squares nondecreasing fit of `targets` against `scores`.
///
/// Points sharing a score are pooled first, so the map has one breakpoint
/// per distinct score.
pub fn pava_fit(scores: &[f64], targets: &[f64], weights: Option<&[f64]>) -> Result<IsotonicMap> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if targets.len() != scores.len() {
        return Err(Error::LengthMismatch { left: scores.len(), right: targets.len() });
    }
    if let Some(w) = weights {
        if w.len() != scores.len() {
            return Err(Error::LengthMismatch { left: scores.len(), right: w.len() });
        }
        if w.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("weights must be positive and finite".into()));
        }
    }
    if scores.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("scores and targets must be finite".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut breakpoints = Vec::new();
    let mut blocks: Vec<Block> = Vec::new();
    for &i in &order {
        let w = weights.map_or(1.0, |w| w[i]);
        if breakpoints.last() == Some(&scores[i]) {
            let b = blocks.last_mut().unwrap();
            b.sum_wy += w * targets[i];
            b.sum_w += w;
        } else {
            breakpoints.push(scores[i]);
            blocks.push(Block { sum_wy: w * targets[i], sum_w: w, len: 1 });
        }
    }

    let mut pooled: Vec<Block> = Vec::with_capacity(blocks.len());
    for b in blocks {
        pooled.push(b);
        while pooled.len() > 1 {
            let last = &pooled[pooled.len() - 1];
            let prev = &pooled[pooled.len() - 2];
            if prev.mean() <= last.mean() {
                break;
            }
            let last = pooled.pop().unwrap();
            let prev = pooled.last_mut().unwrap();
            prev.sum_wy += last.sum_wy;
            prev.sum_w += last.sum_w;
            prev.len += last.len;
        }
    }

    let mut values = Vec::with_capacity(breakpoints.len());
    for b in &pooled {
        let v = b.mean().clamp(0.0, 1.0);
        values.extend(std::iter::repeat_n(v, b.len));
    }
    Ok(IsotonicMap { breakpoints, values })
}

/// Linear interpolation between breakpoints, clamped to the end values.
pub fn isotonic_apply(map: &IsotonicMap, score: f64) -> f64 {
    let xs = &map.breakpoints;
    let ys = &map.values;
    if score <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if score >= xs[last] {
        return ys[last];
    }
    // First breakpoint strictly greater than score.
    let hi = xs.partition_point(|x| *x <= score);
    let lo = hi - 1;
    if xs[lo] == score {
        return ys[lo];
    }
    let t = (score - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + t * (ys[hi] - ys[lo])
}

/// One-vs-rest isotonic maps, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCalibrator {
    pub maps: Vec<IsotonicMap>,
}

impl ClassCalibrator {
    pub fn fit(probs: &[ClassProbs], labels: &[usize]) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::LengthMismatch { left: probs.len(), right: labels.len() });
        }
        let maps = (0..NUM_CLASSES)
            .map(|c| {
                let scores: Vec<f64> = probs.iter().map(|p| p.0[c]).collect();
                let targets: Vec<f64> = labels.iter().map(|&y| if y == c { 1.0 } else { 0.0 }).collect();
                pava_fit(&scores, &targets, None)
            })
            .collect::<Result<_>>()?;
        Ok(Self { maps })
    }

    /// Maps each class score and renormalises onto the simplex; a row that
    /// maps to all zeros becomes uniform.
    pub fn apply(&self, p: &ClassProbs) -> ClassProbs {
        let mut out = [0.0; NUM_CLASSES];
        for (c, o) in out.iter_mut().enumerate() {
            *o = isotonic_apply(&self.maps[c], p.0[c]);
        }
        let total: f64 = out.iter().sum();
        if total > 0.0 {
            ClassProbs(out.map(|v| v / total))
        } else {
            ClassProbs::uniform()
        }
    }
}

/// Fits the calibrator on `(probs, labels)` and applies it to `eval_probs`.
pub fn calibrate_probs(probs: &[ClassProbs], labels: &[usize], eval_probs: &[ClassProbs]) -> Result<Vec<ClassProbs>> {
    let cal = ClassCalibrator::fit(probs, labels)?;
    Ok(eval_probs.iter().map(|p| cal.apply(p)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    /// `None` for empty bins.
    pub mean_predicted: Option<f64>,
    pub fraction_positive: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// CSV with columns `bin_low,bin_high,mean_predicted,fraction_positive,count`;
    /// empty bins leave the two means blank.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_low,bin_high,mean_predicted,fraction_positive,count")?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
        for b in &self.bins {
            writeln!(
                w,
                "{:.17e},{:.17e},{},{},{}",
                b.low,
                b.high,
                fmt(b.mean_predicted),
                fmt(b.fraction_positive),
                b.count
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                s.trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::InvalidConfig(format!("bad number {s:?} in reliability CSV")))
            }
        };
        let mut bins = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::InvalidConfig(e.to_string()))?;
            if rec.len() != 5 {
                return Err(Error::InvalidConfig("reliability CSV needs 5 columns".into()));
            }
            bins.push(ReliabilityBin {
                low: parse(&rec[0])?.unwrap_or(0.0),
                high: parse(&rec[1])?.unwrap_or(0.0),
                mean_predicted: parse(&rec[2])?,
                fraction_positive: parse(&rec[3])?,
                count: rec[4].trim().parse().map_err(|_| Error::InvalidConfig("bad bin count".into()))?,
            });
        }
        Ok(Self { bins })
    }
}

/// Equal-width bins over `[0, 1]`. Bin `k` covers `(k/B, (k+1)/B]`, except the
/// first, which also contains 0.
pub fn reliability_bins(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<ReliabilityBins> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be at least 1".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidConfig(format!("score {s} outside [0, 1]")));
    }
    let mut sum_score = vec![0.0; n_bins];
    let mut positives = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let mut k = ((s * n_bins as f64).ceil() as usize).saturating_sub(1).min(n_bins - 1);
        // s * n_bins can round up past an edge (0.3 * 10 > 3).
        if k > 0 && s <= k as f64 / n_bins as f64 {
            k -= 1;
        }
        sum_score[k] += s;
        counts[k] += 1;
        positives[k] += usize::from(y);
    }
    let bins = (0..n_bins)
        .map(|k| {
            let n = counts[k];
            ReliabilityBin {
                low: k as f64 / n_bins as f64,
                high: (k + 1) as f64 / n_bins as f64,
                mean_predicted: (n > 0).then(|| sum_score[k] / n as f64),
                fraction_positive: (n > 0).then(|| positives[k] as f64 / n as f64),
                count: n,
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}
