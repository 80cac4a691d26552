use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabelledExample;
use crate::error::{Error, Result};
use crate::labels::Label;

pub const NEG_INCONS_TEST: &str = "NegINCONSTest";
pub const CHEX_INCONS_TEST: &str = "CheXINCONSTest";
pub const CONS_TEST: &str = "CONSTest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Agreement {
    Consistent,
    Inconsistent,
    /// No secondary label.
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { val_fraction: 0.1, test_fraction: 0.1, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if ok(self.val_fraction) && ok(self.test_fraction) && self.val_fraction + self.test_fraction < 1.0 {
            Ok(())
        } else {
            Err(Error::FractionOverflow { val: self.val_fraction, test: self.test_fraction })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<LabelledExample>,
    pub val: Vec<LabelledExample>,
    pub test: Vec<LabelledExample>,
}

/// Floor allocation per stratum, topped up by largest fractional remainder
/// until the total reaches `round(fraction · N)`. `capacity` bounds each stratum.
fn allocate(sizes: &[usize], capacity: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let mut alloc: Vec<usize> =
        sizes.iter().zip(capacity).map(|(&n, &cap)| ((fraction * n as f64).floor() as usize).min(cap)).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let remainder = |i: usize| fraction * sizes[i] as f64 - (fraction * sizes[i] as f64).floor();
    // Stable sort keeps stratum order among equal remainders.
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)));
    let mut assigned: usize = alloc.iter().sum();
    for &i in &order {
        if assigned < target && alloc[i] < capacity[i] && (alloc[i] as f64) < fraction * sizes[i] as f64 {
            alloc[i] += 1;
            assigned += 1;
        }
    }
    // Only reachable for tiny strata already squeezed by an earlier split.
    for &i in &order {
        let extra = (capacity[i] - alloc[i]).min(target.saturating_sub(assigned));
        alloc[i] += extra;
        assigned += extra;
    }
    alloc
}

/// Splits jointly stratified by primary label and labeller agreement.
/// Each split keeps the input order.
pub fn stratified_split(examples: &[LabelledExample], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut strata: Vec<((Label, Agreement), Vec<usize>)> = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        let key = (e.primary_label, e.agreement());
        match strata.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => strata.push((key, vec![i])),
        }
    }
    strata.sort_by_key(|(k, _)| (k.0.index(), k.1));

    let sizes: Vec<usize> = strata.iter().map(|(_, m)| m.len()).collect();
    let val = allocate(&sizes, &sizes, spec.val_fraction);
    let room: Vec<usize> = sizes.iter().zip(&val).map(|(n, v)| n - v).collect();
    let test = allocate(&sizes, &room, spec.test_fraction);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assignment = vec![0u8; examples.len()];
    for (s, (_, members)) in strata.iter().enumerate() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        for &i in &members[..val[s]] {
            assignment[i] = 1;
        }
        for &i in &members[val[s]..val[s] + test[s]] {
            assignment[i] = 2;
        }
    }
    let mut split = Split::default();
    for (e, a) in examples.iter().zip(assignment) {
        match a {
            0 => split.train.push(e.clone()),
            1 => split.val.push(e.clone()),
            _ => split.test.push(e.clone()),
        }
    }
    Ok(split)
}

/// One evaluation set: feature rows with the ground truth for that view.
#[derive(Debug, Clone, PartialEq)]
pub struct TestView {
    pub name: String,
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl TestView {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn feature_matrix(&self) -> ndarray::Array2<f64> {
        super::feature_matrix(&self.features).expect("rows of one corpus share a dimension")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestViews {
    pub neg_incons: TestView,
    pub chex_incons: TestView,
    pub cons: TestView,
}

impl TestViews {
    /// In reporting order.
    pub fn all(&self) -> [&TestView; 3] {
        [&self.neg_incons, &self.chex_incons, &self.cons]
    }
}

fn view(name: &str, rows: &[&LabelledExample], label: impl Fn(&LabelledExample) -> Label) -> TestView {
    TestView {
        name: name.to_string(),
        ids: rows.iter().map(|e| e.id.clone()).collect(),
        features: rows.iter().map(|e| e.features.clone()).collect(),
        labels: rows.iter().map(|e| label(e)).collect(),
    }
}

/// Builds the secondary-label and primary-label views of the inconsistent
/// test examples, and a seeded consistent subsample of the same size (or all
/// consistent examples when there are fewer).
pub fn make_test_views(test: &[LabelledExample], seed: u64) -> Result<TestViews> {
    let (consistent, inconsistent) = super::partition_by_agreement(test)?;
    if inconsistent.is_empty() {
        return Err(Error::InconsistentSetEmpty);
    }
    let incons: Vec<&LabelledExample> = inconsistent.iter().collect();
    let k = incons.len().min(consistent.len());
    if k < incons.len() {
        log::warn!("only {} consistent test examples for {} inconsistent ones", consistent.len(), incons.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, consistent.len(), k).into_vec();
    picked.sort_unstable();
    let cons: Vec<&LabelledExample> = picked.iter().map(|&i| &consistent[i]).collect();
    Ok(TestViews {
        neg_incons: view(NEG_INCONS_TEST, &incons, |e| e.secondary_label.expect("partitioned")),
        chex_incons: view(CHEX_INCONS_TEST, &incons, |e| e.primary_label),
        cons: view(CONS_TEST, &cons, |e| e.primary_label),
    })
}
