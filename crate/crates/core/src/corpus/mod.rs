//! Data preparation: text to tokens, tokens to mean-pooled embeddings,
//! labeller-agreement partitioning, stratified splits, the three evaluation
//! views, and a synthetic dual-labeller corpus.

mod io;
mod split;
mod synth;
mod text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Label;

pub use io::{read_corpus_csv, read_features_csv, write_corpus_csv, write_features_csv};
pub use split::{
    make_test_views, stratified_split, Agreement, Split, SplitSpec, TestView, TestViews, CHEX_INCONS_TEST, CONS_TEST,
    NEG_INCONS_TEST,
};
pub use synth::{synth_generate, synthetic_embeddings, SynthConfig};
pub use text::{embed_mean, load_embeddings, preprocess_text, read_embeddings, EmbeddingTable};

/// A report as read from a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub text: String,
    pub primary_label: Label,
    pub secondary_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledExample {
    pub id: String,
    pub features: Vec<f64>,
    pub primary_label: Label,
    pub secondary_label: Option<Label>,
}

impl LabelledExample {
    pub fn agreement(&self) -> Agreement {
        match self.secondary_label {
            None => Agreement::Unknown,
            Some(s) if s == self.primary_label => Agreement::Consistent,
            Some(_) => Agreement::Inconsistent,
        }
    }
}

/// Embeds every report. Returns the examples and the ids of reports with no
/// in-vocabulary token (embedded as the zero vector).
pub fn embed_corpus(raw: &[RawExample], table: &EmbeddingTable) -> (Vec<LabelledExample>, Vec<String>) {
    let mut flagged = Vec::new();
    let examples = raw
        .iter()
        .map(|r| {
            let (features, oov) = embed_mean(&preprocess_text(&r.text), table);
            if oov {
                flagged.push(r.id.clone());
            }
            LabelledExample {
                id: r.id.clone(),
                features,
                primary_label: r.primary_label,
                secondary_label: r.secondary_label,
            }
        })
        .collect();
    (examples, flagged)
}

/// Splits examples into those whose two labels agree and those whose labels
/// differ. Input order is preserved within each part.
pub fn partition_by_agreement(examples: &[LabelledExample]) -> Result<(Vec<LabelledExample>, Vec<LabelledExample>)> {
    let mut consistent = Vec::new();
    let mut inconsistent = Vec::new();
    for e in examples {
        match e.agreement() {
            Agreement::Consistent => consistent.push(e.clone()),
            Agreement::Inconsistent => inconsistent.push(e.clone()),
            Agreement::Unknown => return Err(Error::MissingSecondaryLabel { id: e.id.clone() }),
        }
    }
    Ok((consistent, inconsistent))
}

/// Stacks equal-length rows into a matrix.
pub fn feature_matrix(rows: &[Vec<f64>]) -> Result<ndarray::Array2<f64>> {
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::dims(dim, r.len()));
    }
    Ok(ndarray::Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]))
}

/// Row-major feature matrix and primary-label indices.
pub fn to_arrays(examples: &[LabelledExample]) -> Result<(ndarray::Array2<f64>, Vec<usize>)> {
    let dim = examples.first().map_or(0, |e| e.features.len());
    let mut flat = Vec::with_capacity(examples.len() * dim);
    for e in examples {
        if e.features.len() != dim {
            return Err(Error::dims(dim, e.features.len()));
        }
        flat.extend_from_slice(&e.features);
    }
    let xs = ndarray::Array2::from_shape_vec((examples.len(), dim), flat).expect("shape checked");
    Ok((xs, examples.iter().map(|e| e.primary_label.index()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, a: Label, b: Option<Label>) -> LabelledExample {
        LabelledExample { id: id.into(), features: vec![0.0], primary_label: a, secondary_label: b }
    }

    #[test]
    fn partition_examples() {
        let xs = vec![
            ex("a", Label::Positive, Some(Label::Positive)),
            ex("b", Label::Uncertain, Some(Label::Negative)),
            ex("c", Label::Negative, Some(Label::Negative)),
        ];
        let (c, i) = partition_by_agreement(&xs).unwrap();
        assert_eq!(c.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(i[0].id, "b");
    }

    #[test]
    fn partition_requires_secondary_label() {
        let xs = vec![ex("a", Label::Positive, Some(Label::Positive)), ex("zz", Label::Negative, None)];
        match partition_by_agreement(&xs) {
            Err(Error::MissingSecondaryLabel { id }) => assert_eq!(id, "zz"),
            other => panic!("{other:?}"),
        }
    }
}
