//! Seeded synthetic knowledge bases with latent structure.
//!
//! Entities are grouped into types, and each type into communities. Every
//! relation maps one domain type to one range type. For each community in the
//! domain, the relation has a small pool of plausible objects; a subject's
//! objects are drawn from its community's pool with Zipfian fan-out. Held-out
//! triples are therefore predictable from the subject's community.

use std::collections::BTreeSet;

use kbq_core::kbstore::{NameTable, Triple, Vocab};
use kbq_core::{KbqError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_types: usize,
    pub community_size: usize,
    /// Objects per (relation, community) pool.
    pub pool_size: usize,
    /// Probability that a domain entity has any edge for a relation.
    pub participation: f64,
    pub max_fanout: usize,
    /// Zipf exponent of the fan-out distribution.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_entities: 1000,
            num_relations: 20,
            num_types: 10,
            community_size: 10,
            pool_size: 6,
            participation: 0.6,
            max_fanout: 5,
            zipf_exponent: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The 20-entity, 5-relation configuration used for localist checks.
    pub fn tiny(seed: u64) -> Self {
        Self {
            num_entities: 20,
            num_relations: 5,
            num_types: 2,
            community_size: 5,
            pool_size: 4,
            participation: 0.8,
            max_fanout: 3,
            zipf_exponent: 1.2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KbqError::Config(m));
        if self.num_types == 0 || self.num_entities < self.num_types {
            return bad(format!("need at least one entity per type ({} < {})", self.num_entities, self.num_types));
        }
        if self.num_relations == 0 || self.community_size == 0 || self.pool_size == 0 || self.max_fanout == 0 {
            return bad("relations, community size, pool size and fan-out must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.participation) {
            return bad(format!("participation {} outside [0, 1]", self.participation));
        }
        Ok(())
    }
}

fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    w.iter()
        .scan(0.0, |acc, x| {
            *acc += x / total;
            Some(*acc)
        })
        .collect()
}

/// Generate a KB. Entities are named `e<i>`, relations `r<i>`.
pub fn generate(cfg: &SynthConfig) -> Result<(Vocab, Vec<Triple>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_entities;
    // Contiguous types; type t holds entities [start_t, start_{t+1}).
    let types: Vec<Vec<usize>> = (0..cfg.num_types)
        .map(|t| (t * n / cfg.num_types..(t + 1) * n / cfg.num_types).collect())
        .collect();
    let cdf = zipf_cdf(cfg.max_fanout, cfg.zipf_exponent);

    let mut triples = BTreeSet::new();
    for r in 0..cfg.num_relations {
        let domain = &types[rng.gen_range(0..cfg.num_types)];
        let range = &types[rng.gen_range(0..cfg.num_types)];
        for community in domain.chunks(cfg.community_size) {
            let pool: Vec<usize> = range
                .choose_multiple(&mut rng, cfg.pool_size.min(range.len()))
                .copied()
                .collect();
            for &s in community {
                if !rng.gen_bool(cfg.participation) {
                    continue;
                }
                let u: f64 = rng.gen();
                let fanout = cdf.iter().position(|&c| u <= c).unwrap_or(cfg.max_fanout - 1) + 1;
                for &o in pool.choose_multiple(&mut rng, fanout.min(pool.len())) {
                    triples.insert(Triple::new(r, s, o));
                }
            }
        }
    }
    if triples.is_empty() {
        return Err(KbqError::EmptyKb);
    }

    let mut entities = NameTable::default();
    for i in 0..n {
        entities.intern(&format!("e{i}"));
    }
    let mut relations = NameTable::default();
    for i in 0..cfg.num_relations {
        relations.intern(&format!("r{i}"));
    }
    Ok((Vocab { entities, relations }, triples.into_iter().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let cfg = SynthConfig::default();
        let (v, a) = generate(&cfg).unwrap();
        let (_, b) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(v.num_entities(), 1000);
        assert_eq!(v.num_relations(), 20);
        assert!(a.len() > 1500, "{}", a.len());
        assert!(a.iter().all(|t| t.subj < 1000 && t.obj < 1000 && t.rel < 20));
        let (_, c) = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fanout_is_skewed() {
        let (_, t) = generate(&SynthConfig::default()).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for tr in &t {
            *counts.entry((tr.rel, tr.subj)).or_insert(0usize) += 1;
        }
        let ones = counts.values().filter(|&&c| c == 1).count();
        let fives = counts.values().filter(|&&c| c == 5).count();
        assert!(ones > 3 * fives);
    }

    #[test]
    fn tiny_has_twenty_entities() {
        let (v, t) = generate(&SynthConfig::tiny(0)).unwrap();
        assert_eq!((v.num_entities(), v.num_relations()), (20, 5));
        assert!(!t.is_empty());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig {
            num_types: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            participation: 2.0,
            ..Default::default()
        })
        .is_err());
    }
}
