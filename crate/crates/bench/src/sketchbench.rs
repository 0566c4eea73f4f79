//! Statistical checks of count-min sketch recovery and linearity.

use std::sync::Arc;

use kbq_core::cms::{CountMinSketch, HashFamily, WeightedSet};
use kbq_core::{KbqError, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryConfig {
    /// Members per set.
    pub m: usize,
    pub width: usize,
    pub depth: usize,
    /// Candidate set size; candidates include every member.
    pub candidates: usize,
    pub trials: usize,
    pub universe: usize,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            m: 50,
            width: 128,
            depth: 16,
            candidates: 500,
            trials: 2000,
            universe: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub config: RecoveryConfig,
    /// Trials in which some candidate's lookup differed from its weight.
    pub failures: usize,
    /// Individual candidate lookups that were wrong.
    pub lookup_errors: usize,
    pub lookups: usize,
}

impl RecoveryReport {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.config.trials as f64
    }

    /// Bound on the failure probability: `|C| / 2^N_D`.
    pub fn delta(&self) -> f64 {
        self.config.candidates as f64 / 2f64.powi(self.config.depth as i32)
    }

    /// `delta` plus three binomial standard errors.
    pub fn threshold(&self) -> f64 {
        let d = self.delta().min(1.0);
        d + 3.0 * (d * (1.0 - d) / self.config.trials as f64).sqrt()
    }

    /// Whether the sizing preconditions of the bound hold.
    pub fn preconditions_hold(&self) -> bool {
        let c = &self.config;
        c.width > 2 * c.m && (c.depth as f64) >= (c.candidates as f64 / self.delta()).log2()
    }

    pub fn passes(&self) -> bool {
        self.failure_rate() <= self.threshold()
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        format!(
            "m={} N_W={} N_D={} |C|={} trials={}\nfailures={} empirical={:.6} delta={:.6} threshold={:.6}\nlookup errors={}/{} empirical={:.3e} per-lookup bound={:.3e}",
            c.m,
            c.width,
            c.depth,
            c.candidates,
            c.trials,
            self.failures,
            self.failure_rate(),
            self.delta(),
            self.threshold(),
            self.lookup_errors,
            self.lookups,
            self.lookup_errors as f64 / self.lookups.max(1) as f64,
            2f64.powi(-(c.depth as i32)),
        )
    }
}

/// Each trial draws a fresh hash family, a candidate set `C` of distinct ids
/// and a member set `A` of the first `m` candidates with integer weights, then
/// looks up every candidate.
pub fn recovery_trials(cfg: &RecoveryConfig) -> Result<RecoveryReport> {
    if cfg.m > cfg.candidates || cfg.candidates > cfg.universe {
        return Err(KbqError::Config("need m <= candidates <= universe".into()));
    }
    if cfg.trials == 0 {
        return Err(KbqError::Config("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut failures = 0;
    let mut lookup_errors = 0;
    for _ in 0..cfg.trials {
        let family = Arc::new(HashFamily::new(rng.gen(), cfg.depth, cfg.width, cfg.universe)?);
        let cands = sample(&mut rng, cfg.universe, cfg.candidates).into_vec();
        let weights: Vec<f32> = (0..cfg.m).map(|_| rng.gen_range(1..=9) as f32).collect();
        let set = WeightedSet::from_pairs(cfg.universe, cands[..cfg.m].iter().copied().zip(weights.iter().copied()))?;
        let sketch = CountMinSketch::from_set(&set, family)?;
        let mut wrong = 0;
        for &c in &cands {
            if sketch.lookup(c)? != set.weight(c) {
                wrong += 1;
            }
        }
        lookup_errors += wrong;
        if wrong > 0 {
            failures += 1;
        }
    }
    Ok(RecoveryReport {
        config: *cfg,
        failures,
        lookup_errors,
        lookups: cfg.trials * cfg.candidates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearityConfig {
    pub pairs: usize,
    pub max_set_size: usize,
    pub width: usize,
    pub depth: usize,
    pub universe: usize,
    pub seed: u64,
}

impl Default for LinearityConfig {
    fn default() -> Self {
        Self {
            pairs: 500,
            max_set_size: 10,
            width: 2000,
            depth: 20,
            universe: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearityReport {
    pub pairs: usize,
    /// Pairs with `S(a + b) == S(a) + S(b)` bit for bit.
    pub add_exact: usize,
    /// Collision-free pairs with `S(a * b) == S(a) * S(b)` bit for bit.
    pub hadamard_exact: usize,
    /// Unconditioned random pairs drawn before finding each collision-free one.
    pub hadamard_draws: usize,
    /// Unconditioned random pairs for which the product identity held anyway.
    pub hadamard_unconditioned_exact: usize,
}

impl LinearityReport {
    pub fn passes(&self) -> bool {
        self.add_exact == self.pairs && self.hadamard_exact == self.pairs
    }
}

fn random_set<R: Rng>(rng: &mut R, cfg: &LinearityConfig) -> Result<WeightedSet> {
    let n = rng.gen_range(1..=cfg.max_set_size);
    let ids = sample(rng, cfg.universe, n).into_vec();
    WeightedSet::from_pairs(cfg.universe, ids.into_iter().map(|i| (i, rng.gen_range(1..=16) as f32)))
}

/// No row has a cell holding a member of `a` and a different member of `b`.
pub fn cross_collision_free(family: &HashFamily, a: &WeightedSet, b: &WeightedSet) -> bool {
    (0..family.depth()).all(|row| {
        a.ids()
            .all(|i| b.ids().all(|j| i == j || family.hash(row, i) != family.hash(row, j)))
    })
}

/// `S(v_A + v_B) = S(v_A) + S(v_B)` on random pairs, and
/// `S(v_A * v_B) = S(v_A) * S(v_B)` on random pairs without cross-set cell
/// collisions. Weights are small integers, so every sum is exact in `f32`.
pub fn linearity_trials(cfg: &LinearityConfig) -> Result<LinearityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let family = Arc::new(HashFamily::new(rng.gen(), cfg.depth, cfg.width, cfg.universe)?);
    let sk = |s: &WeightedSet| CountMinSketch::from_set(s, family.clone());
    let mut report = LinearityReport {
        pairs: cfg.pairs,
        add_exact: 0,
        hadamard_exact: 0,
        hadamard_draws: 0,
        hadamard_unconditioned_exact: 0,
    };
    for _ in 0..cfg.pairs {
        let (a, b) = (random_set(&mut rng, cfg)?, random_set(&mut rng, cfg)?);
        if sk(&a.sum(&b)?)? == sk(&a)?.add(&sk(&b)?)? {
            report.add_exact += 1;
        }
    }
    for _ in 0..cfg.pairs {
        loop {
            let mut a = random_set(&mut rng, cfg)?;
            let b = random_set(&mut rng, cfg)?;
            // Share some members so the product is not always empty.
            for (i, w) in b.iter().take(2) {
                a.set(i, w)?;
            }
            report.hadamard_draws += 1;
            let exact = sk(&a.product(&b))? == sk(&a)?.hadamard(&sk(&b)?)?;
            if exact {
                report.hadamard_unconditioned_exact += 1;
            }
            if cross_collision_free(&family, &a, &b) {
                if exact {
                    report.hadamard_exact += 1;
                }
                break;
            }
        }
    }
    Ok(report)
}
