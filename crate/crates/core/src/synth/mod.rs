//! Seeded generators with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weaksup::{LabelMatrix, Vote};

pub mod corpus;

pub use corpus::{
    default_templates, gen_corpus, read_gold_relations, write_gold_relations, GoldRelation,
    PlantedMention, SynthConfig, SynthCorpus, SystemSpec, TemplateKind, TemplateSpec,
};

/// Accuracy and propensity of one simulated labeling function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LfSpec {
    pub accuracy: f64,
    pub propensity: f64,
}

/// Draws Y ~ Bernoulli(prior); each function votes with probability
/// `propensity` and, when voting, agrees with Y with probability `accuracy`.
pub fn gen_label_matrix(
    n: usize,
    specs: &[LfSpec],
    prior: f64,
    seed: u64,
) -> Result<(LabelMatrix, Vec<bool>)> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let in_unit = |p: f64| (0.0..=1.0).contains(&p);
    if !in_unit(prior)
        || specs
            .iter()
            .any(|s| !in_unit(s.accuracy) || !in_unit(s.propensity))
    {
        return Err(Error::invalid("probabilities must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gold = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_bool(prior);
        let row: Vec<Vote> = specs
            .iter()
            .map(|s| {
                if !rng.random_bool(s.propensity) {
                    Vote::Abstain
                } else if rng.random_bool(s.accuracy) == y {
                    Vote::True
                } else {
                    Vote::False
                }
            })
            .collect();
        gold.push(y);
        rows.push(row);
    }
    Ok((LabelMatrix::from_rows(&rows)?, gold))
}
