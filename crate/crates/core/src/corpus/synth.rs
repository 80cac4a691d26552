use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::text::{preprocess_text, EmbeddingTable};
use super::RawExample;
use crate::error::{Error, Result};
use crate::labels::Label;

use Label::{Negative as N, Positive as P, Uncertain as U};

const FINDINGS: &[&str] = &["{x}", "pulmonary {x}", "interstitial {x}", "perihilar {x}"];

/// Consistent cue phrases per class.
const CONSISTENT: [&[&str]; 3] = [
    &["no evidence of {x}", "no {x}", "{x} has resolved", "negative for {x}"],
    &["possible {x}", "{x} may be present", "questionable {x}"],
    &["{x} is present", "there is {x}", "moderate {x} is seen", "worsening {x}"],
];

/// Cue phrases on which the two labellers disagree, with (primary, secondary).
const INCONSISTENT: [(Label, Label, &[&str]); 4] = [
    (U, N, &["cannot exclude {x}", "{x} cannot be ruled out"]),
    (U, P, &["suggestive of {x}", "findings suggestive of {x}"]),
    (N, U, &["no definite {x}", "no convincing {x}"]),
    (P, U, &["probable {x}", "{x} is likely"]),
];

const BACKGROUND: &[&str] = &[
    "the heart size is normal",
    "the cardiomediastinal silhouette is stable",
    "lungs are well expanded",
    "there is no pneumothorax",
    "no focal consolidation",
    "no acute osseous abnormality",
    "the trachea is midline",
    "sternotomy wires are intact",
    "the endotracheal tube is in standard position",
    "a right internal jugular line ends in the upper svc",
    "the nasogastric tube courses below the diaphragm",
    "degenerative changes of the thoracic spine",
    "the aorta is tortuous",
    "hilar contours are unremarkable",
    "small bilateral pleural effusions are unchanged",
    "bibasilar atelectasis is noted",
    "the upper abdomen is unremarkable",
    "surgical clips are present in the right upper quadrant",
    "portable upright frontal view of the chest",
    "comparison is made to the prior study",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_examples: usize,
    /// Fraction of reports on which the two labellers disagree.
    pub disagreement_rate: f64,
    /// Class mixture (negative, uncertain, positive) of agreeing reports.
    pub consistent_weights: [f64; 3],
    /// Mixture over the disagreement patterns (U/N, U/P, N/U, P/U), written
    /// as primary/secondary.
    pub inconsistent_weights: [f64; 4],
    /// Range of background sentences per report.
    pub min_background: usize,
    pub max_background: usize,
    /// Dimension of the matching synthetic embedding table.
    pub dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_examples: 10_000,
            disagreement_rate: 0.04,
            consistent_weights: [1.0 / 3.0; 3],
            inconsistent_weights: [0.28, 0.28, 0.22, 0.22],
            min_background: 1,
            max_background: 2,
            dim: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_examples == 0 {
            return bad("num_examples must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.disagreement_rate) {
            return bad("disagreement_rate must lie in [0, 1]");
        }
        let weights_ok = |w: &[f64]| w.iter().all(|v| v.is_finite() && *v >= 0.0) && w.iter().sum::<f64>() > 0.0;
        if !weights_ok(&self.consistent_weights) || !weights_ok(&self.inconsistent_weights) {
            return bad("mixture weights must be non-negative with a positive sum");
        }
        if self.min_background > self.max_background || self.max_background > BACKGROUND.len() {
            return bad("need min_background <= max_background <= 20");
        }
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        Ok(())
    }
}

fn sentence(template: &str, rng: &mut ChaCha8Rng) -> String {
    let finding = FINDINGS.choose(rng).unwrap();
    let mut s = template.replace("{x}", finding);
    // Capitalise the first letter, as in a dictated report.
    if let Some(first) = s.get(..1) {
        s.replace_range(..1, &first.to_uppercase());
    }
    s
}

fn report(cue: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> String {
    let count = rng.random_range(cfg.min_background..=cfg.max_background);
    let mut findings: Vec<String> =
        index::sample(rng, BACKGROUND.len(), count).into_iter().map(|i| sentence(BACKGROUND[i], rng)).collect();
    let at = rng.random_range(0..=findings.len());
    findings.insert(at, sentence(cue, rng));
    format!("FINDINGS: {}. IMPRESSION: {}.", findings.join(". "), sentence(cue, rng))
}

/// Generates reports from cue templates. Exactly `round(rate · N)` reports
/// carry a disagreement cue.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<RawExample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.num_examples;
    let k = (cfg.disagreement_rate * n as f64).round() as usize;
    let mut disagree = vec![false; n];
    for i in index::sample(&mut rng, n, k) {
        disagree[i] = true;
    }
    let consistent = WeightedIndex::new(cfg.consistent_weights).expect("validated");
    let inconsistent = WeightedIndex::new(cfg.inconsistent_weights).expect("validated");
    let width = n.to_string().len();
    Ok((0..n)
        .map(|i| {
            let (primary, secondary, cues) = if disagree[i] {
                INCONSISTENT[inconsistent.sample(&mut rng)]
            } else {
                let c = consistent.sample(&mut rng);
                let l = Label::from_index(c).unwrap();
                (l, l, CONSISTENT[c])
            };
            let cue = cues.choose(&mut rng).unwrap();
            RawExample {
                id: format!("syn{i:0width$}"),
                text: report(cue, cfg, &mut rng),
                primary_label: primary,
                secondary_label: Some(secondary),
            }
        })
        .collect())
}

/// Every token the generator can emit, sorted.
fn vocabulary() -> Vec<String> {
    let mut words: Vec<String> = FINDINGS
        .iter()
        .chain(CONSISTENT.iter().flat_map(|c| c.iter()))
        .chain(INCONSISTENT.iter().flat_map(|(_, _, c)| c.iter()))
        .chain(BACKGROUND)
        .chain(&["findings", "impression"])
        .flat_map(|s| preprocess_text(s))
        .collect();
    words.sort();
    words.dedup();
    words
}

const NEGATION: usize = 0;
const HEDGE: usize = 1;
const AFFIRM: usize = 2;
const FINDING: usize = 3;
const NUM_GROUPS: usize = 4;

/// Words that share directions in the synthetic table, the way related words
/// sit close together in pretrained embeddings. The cues labellers disagree
/// on use words that lean two ways.
const SEMANTIC_GROUPS: &[(&str, &[usize])] = &[
    ("no", &[NEGATION]),
    ("negative", &[NEGATION]),
    ("resolved", &[NEGATION]),
    ("cannot", &[NEGATION]),
    ("possible", &[HEDGE]),
    ("may", &[HEDGE]),
    ("questionable", &[HEDGE]),
    ("exclude", &[HEDGE]),
    ("ruled", &[HEDGE]),
    ("definite", &[HEDGE]),
    ("convincing", &[HEDGE]),
    ("suggestive", &[HEDGE, AFFIRM]),
    ("probable", &[HEDGE, AFFIRM]),
    ("likely", &[HEDGE, AFFIRM]),
    ("present", &[AFFIRM]),
    ("there", &[AFFIRM]),
    ("moderate", &[AFFIRM]),
    ("worsening", &[AFFIRM]),
    ("seen", &[AFFIRM]),
    ("edema", &[FINDING]),
    ("pulmonary", &[FINDING]),
    ("interstitial", &[FINDING]),
    ("perihilar", &[FINDING]),
];

/// Share of a grouped word's squared norm along its group direction.
const GROUP_WEIGHT: f64 = 0.8;

fn normalise(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    normalise((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Random unit-norm vectors for the generator's vocabulary. Words in the
/// same semantic group are correlated through a shared random direction.
pub fn synthetic_embeddings(dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::InvalidConfig("dim must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x454d_4245_4444_494e);
    let centres: Vec<Vec<f64>> = (0..NUM_GROUPS).map(|_| random_unit(dim, &mut rng)).collect();
    let mut table = EmbeddingTable::new(dim);
    for word in vocabulary() {
        let own = random_unit(dim, &mut rng);
        let v = match SEMANTIC_GROUPS.iter().find(|(w, _)| *w == word) {
            Some((_, groups)) => {
                let shared = normalise((0..dim).map(|d| groups.iter().map(|&g| centres[g][d]).sum()).collect());
                let mixed = shared.iter().zip(&own);
                normalise(mixed.map(|(c, o)| GROUP_WEIGHT.sqrt() * c + (1.0 - GROUP_WEIGHT).sqrt() * o).collect())
            }
            None => own,
        };
        table.insert(&word, &v)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{embed_mean, preprocess_text};

    #[test]
    fn zero_rate_is_all_consistent() {
        let cfg = SynthConfig { num_examples: 500, disagreement_rate: 0.0, ..Default::default() };
        let xs = synth_generate(&cfg, 1).unwrap();
        assert!(xs.iter().all(|e| Some(e.primary_label) == e.secondary_label));
    }

    #[test]
    fn realised_rate_matches_target() {
        let xs = synth_generate(&SynthConfig::default(), 7).unwrap();
        let k = xs.iter().filter(|e| Some(e.primary_label) != e.secondary_label).count();
        let rate = k as f64 / xs.len() as f64;
        assert!((0.02..=0.06).contains(&rate), "{rate}");
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig { num_examples: 300, ..Default::default() };
        assert_eq!(synth_generate(&cfg, 3).unwrap(), synth_generate(&cfg, 3).unwrap());
        assert_ne!(synth_generate(&cfg, 3).unwrap(), synth_generate(&cfg, 4).unwrap());
        assert_eq!(synthetic_embeddings(8, 3).unwrap(), synthetic_embeddings(8, 3).unwrap());
    }

    #[test]
    fn table_covers_generated_text() {
        let cfg = SynthConfig { num_examples: 400, disagreement_rate: 0.2, ..Default::default() };
        let table = synthetic_embeddings(16, 0).unwrap();
        for e in synth_generate(&cfg, 0).unwrap() {
            let tokens = preprocess_text(&e.text);
            assert!(tokens.iter().all(|t| table.get(t).is_some()), "{}", e.text);
            assert!(!embed_mean(&tokens, &table).1);
        }
        for t in table.tokens() {
            let v = table.get(t).unwrap();
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { disagreement_rate: 1.5, ..Default::default() },
            SynthConfig { num_examples: 0, ..Default::default() },
            SynthConfig { consistent_weights: [0.0; 3], ..Default::default() },
            SynthConfig { min_background: 5, max_background: 2, ..Default::default() },
        ] {
            assert!(matches!(synth_generate(&cfg, 0), Err(Error::InvalidConfig(_))));
        }
    }
}
