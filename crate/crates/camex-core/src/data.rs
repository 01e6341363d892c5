//! Synthetic tasks for the training harness.
//!
//! The language-modeling task is a regime-switching Markov chain: each
//! regime owns a row-stochastic transition matrix over the vocabulary, and
//! the active regime follows a sticky chain that may switch only at segment
//! boundaries. That alignment is what makes experts specializable and the
//! previous-segment routing signal informative at desk scale.
//!
//! The classification task reuses the same machinery: one regime generates a
//! whole sequence (a cluster in sequence space) and the class label is the
//! regime index.

use crate::error::{CamexError, Result};
use crate::seeds;
use crate::tensor::Tensor;
use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Next-token prediction under segment-aligned regime switches.
    MarkovLm,
    /// Whole-sequence classification: which regime generated this sequence.
    Classification,
}

/// Generator description; everything downstream is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub n_regimes: usize,
    pub seq_len: usize,
    /// Regime switches happen only at multiples of this.
    pub seg_len: usize,
    /// Probability of keeping the current regime at a boundary.
    pub stay_prob: f64,
    /// Probability mass spread uniformly off each regime's preferred
    /// successor. Zero makes every regime a deterministic cycle.
    pub chain_noise: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn markov_lm(
        vocab: usize,
        n_regimes: usize,
        seq_len: usize,
        seg_len: usize,
        seed: u64,
    ) -> SyntheticTask {
        SyntheticTask {
            kind: TaskKind::MarkovLm,
            vocab,
            n_regimes,
            seq_len,
            seg_len,
            stay_prob: 0.8,
            chain_noise: 0.15,
            seed,
        }
    }

    /// One regime, zero noise: sequences are fixed cycles and a perfect
    /// model reaches perplexity 1.
    pub fn deterministic_chain(vocab: usize, seq_len: usize, seed: u64) -> SyntheticTask {
        SyntheticTask {
            kind: TaskKind::MarkovLm,
            vocab,
            n_regimes: 1,
            seq_len,
            seg_len: seq_len,
            stay_prob: 1.0,
            chain_noise: 0.0,
            seed,
        }
    }

    /// One regime with fully uniform rows: the best possible perplexity is
    /// the vocabulary size.
    pub fn uniform_chain(vocab: usize, seq_len: usize, seed: u64) -> SyntheticTask {
        SyntheticTask {
            kind: TaskKind::MarkovLm,
            vocab,
            n_regimes: 1,
            seq_len,
            seg_len: seq_len,
            stay_prob: 1.0,
            chain_noise: 1.0,
            seed,
        }
    }

    pub fn classification(
        vocab: usize,
        n_classes: usize,
        seq_len: usize,
        seed: u64,
    ) -> SyntheticTask {
        SyntheticTask {
            kind: TaskKind::Classification,
            vocab,
            n_regimes: n_classes,
            seq_len,
            seg_len: seq_len,
            stay_prob: 1.0,
            chain_noise: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(CamexError::Contract {
                detail: format!("vocabulary must have at least 2 tokens, got {}", self.vocab),
            });
        }
        if self.n_regimes == 0 {
            return Err(CamexError::Contract {
                detail: "at least one regime is required".into(),
            });
        }
        if self.seq_len == 0 || self.seg_len == 0 || self.seq_len % self.seg_len != 0 {
            return Err(CamexError::Contract {
                detail: format!(
                    "segment length {} must divide sequence length {}",
                    self.seg_len, self.seq_len
                ),
            });
        }
        if !(0.0..=1.0).contains(&self.stay_prob) || !(0.0..=1.0).contains(&self.chain_noise) {
            return Err(CamexError::Contract {
                detail: "stay_prob and chain_noise must lie in [0, 1]".into(),
            });
        }
        if self.kind == TaskKind::Classification && self.n_regimes > self.vocab {
            return Err(CamexError::Contract {
                detail: format!(
                    "classification reads label logits from class tokens; {} classes exceed vocab {}",
                    self.n_regimes, self.vocab
                ),
            });
        }
        Ok(())
    }
}

/// One LM example: `tokens[t]` is the input at position `t`, `targets[t]`
/// the token it should predict (`tokens` and `targets` overlap by one shift;
/// the generator draws `seq_len + 1` tokens so every position has a target).
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// Active regime per segment, for diagnostics and oracle checks.
    pub regimes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsExample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Lm(Vec<LmExample>),
    Classification(Vec<ClsExample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Lm(v) => v.len(),
            Dataset::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-stochastic transition matrix of each regime. Regime `r` sends token
/// `i` to `(i * mult_r + off_r) mod V` with probability `1 - noise`, spread
/// over the rest uniformly; `mult_r` alternates between `1` and `V - 1`
/// (a backwards cycle) and offsets stagger the regimes apart.
pub fn transition_matrices(task: &SyntheticTask) -> Result<Vec<Tensor>> {
    task.validate()?;
    let v = task.vocab;
    let mut out = Vec::with_capacity(task.n_regimes);
    for r in 0..task.n_regimes {
        let mult = if r % 2 == 0 { 1 } else { v - 1 };
        let off = 1 + (r / 2) % (v - 1);
        let mut m = Tensor::zeros(vec![v, v]);
        for i in 0..v {
            let hot = (i * mult + off) % v;
            let spread = task.chain_noise / v as f64;
            for j in 0..v {
                m.data_mut()[i * v + j] = spread;
            }
            m.data_mut()[i * v + hot] += 1.0 - task.chain_noise;
        }
        out.push(m);
    }
    Ok(out)
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(row).map_err(|e| CamexError::Numeric {
        op: "sample_row",
        detail: format!("invalid transition row: {e}"),
    })?;
    Ok(rng.sample(dist))
}

fn regime_sequence<R: Rng>(task: &SyntheticTask, rng: &mut R) -> Vec<usize> {
    let k = task.seq_len / task.seg_len;
    let mut regimes = Vec::with_capacity(k);
    let mut cur = rng.gen_range(0..task.n_regimes);
    regimes.push(cur);
    for _ in 1..k {
        if task.n_regimes > 1 && rng.gen::<f64>() >= task.stay_prob {
            let mut next = rng.gen_range(0..task.n_regimes - 1);
            if next >= cur {
                next += 1;
            }
            cur = next;
        }
        regimes.push(cur);
    }
    regimes
}

/// Generates a dataset. Deterministic: example `i` of `(task, n_examples)`
/// depends only on `(task.seed, i)`.
pub fn gen_task(task: &SyntheticTask, n_examples: usize) -> Result<Dataset> {
    task.validate()?;
    let mats = transition_matrices(task)?;
    let v = task.vocab;
    match task.kind {
        TaskKind::MarkovLm => {
            let mut examples = Vec::with_capacity(n_examples);
            for ex in 0..n_examples {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[task.seed, 0x1111, ex as u64]));
                let regimes = regime_sequence(task, &mut rng);
                let mut tokens = Vec::with_capacity(task.seq_len + 1);
                tokens.push(rng.gen_range(0..v));
                for t in 0..task.seq_len {
                    let regime = regimes[t / task.seg_len];
                    let row = &mats[regime].data()[tokens[t] * v..(tokens[t] + 1) * v];
                    tokens.push(sample_row(row, &mut rng)?);
                }
                let targets = tokens[1..].to_vec();
                tokens.truncate(task.seq_len);
                examples.push(LmExample {
                    tokens,
                    targets,
                    regimes,
                });
            }
            Ok(Dataset::Lm(examples))
        }
        TaskKind::Classification => {
            let mut examples = Vec::with_capacity(n_examples);
            for ex in 0..n_examples {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[task.seed, 0x2222, ex as u64]));
                let label = rng.gen_range(0..task.n_regimes);
                let mut tokens = Vec::with_capacity(task.seq_len);
                tokens.push(rng.gen_range(0..v));
                for t in 0..task.seq_len - 1 {
                    let row = &mats[label].data()[tokens[t] * v..(tokens[t] + 1) * v];
                    tokens.push(sample_row(row, &mut rng)?);
                }
                examples.push(ClsExample { tokens, label });
            }
            Ok(Dataset::Classification(examples))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_rows_are_stochastic() {
        let task = SyntheticTask::markov_lm(16, 3, 64, 16, 7);
        let mats = transition_matrices(&task).unwrap();
        assert_eq!(mats.len(), 3);
        for m in &mats {
            for i in 0..16 {
                let row: f64 = m.data()[i * 16..(i + 1) * 16].iter().sum();
                assert!((row - 1.0).abs() <= 1e-12, "row sums to {row}");
                assert!(m.data()[i * 16..(i + 1) * 16].iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn regimes_are_distinct() {
        let task = SyntheticTask::markov_lm(16, 4, 64, 16, 7);
        let mats = transition_matrices(&task).unwrap();
        for a in 0..4 {
            for b in (a + 1)..4 {
                assert!(
                    mats[a].max_abs_diff(&mats[b]).unwrap() > 0.1,
                    "regimes {a} and {b} are near-identical"
                );
            }
        }
    }

    #[test]
    fn deterministic_chain_is_a_fixed_cycle() {
        let task = SyntheticTask::deterministic_chain(8, 24, 3);
        let mats = transition_matrices(&task).unwrap();
        for i in 0..8 {
            let row = &mats[0].data()[i * 8..(i + 1) * 8];
            assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
            assert_eq!(row[(i + 1) % 8], 1.0);
        }
        let ds = gen_task(&task, 2).unwrap();
        let Dataset::Lm(examples) = ds else { panic!("expected LM data") };
        for e in &examples {
            for t in 0..e.tokens.len() {
                assert_eq!(e.targets[t], (e.tokens[t] + 1) % 8);
            }
        }
    }

    #[test]
    fn uniform_chain_rows_are_flat() {
        let task = SyntheticTask::uniform_chain(8, 16, 3);
        let mats = transition_matrices(&task).unwrap();
        for p in mats[0].data() {
            assert!((p - 0.125).abs() <= 1e-15);
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let task = SyntheticTask::markov_lm(16, 2, 64, 16, 7);
        let a = gen_task(&task, 5).unwrap();
        let b = gen_task(&task, 5).unwrap();
        assert_eq!(a, b);
        let other = gen_task(&SyntheticTask { seed: 8, ..task }, 5).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn prefix_of_larger_dataset_matches_smaller() {
        // Per-example seeding means example i is independent of n_examples.
        let task = SyntheticTask::markov_lm(16, 2, 32, 16, 11);
        let small = gen_task(&task, 3).unwrap();
        let big = gen_task(&task, 6).unwrap();
        let (Dataset::Lm(s), Dataset::Lm(b)) = (small, big) else { panic!() };
        assert_eq!(s[..], b[..3]);
    }

    #[test]
    fn regime_switches_align_to_segments() {
        let task = SyntheticTask::markov_lm(16, 3, 64, 16, 9);
        let ds = gen_task(&task, 20).unwrap();
        let Dataset::Lm(examples) = ds else { panic!() };
        let mut switched = 0;
        for e in &examples {
            assert_eq!(e.regimes.len(), 4);
            for w in e.regimes.windows(2) {
                if w[0] != w[1] {
                    switched += 1;
                }
            }
            assert_eq!(e.tokens.len(), 64);
            assert_eq!(e.targets.len(), 64);
            assert!(e.tokens.iter().all(|&t| t < 16));
            assert!(e.targets.iter().all(|&t| t < 16));
        }
        // stay_prob 0.8 over 20 examples x 3 boundaries: some switches happen.
        assert!(switched > 0, "no regime ever switched");
    }

    #[test]
    fn targets_follow_active_regime() {
        // With zero noise the target is exactly the regime's hot successor.
        let task = SyntheticTask {
            chain_noise: 0.0,
            ..SyntheticTask::markov_lm(12, 3, 32, 8, 5)
        };
        let mats = transition_matrices(&task).unwrap();
        let ds = gen_task(&task, 10).unwrap();
        let Dataset::Lm(examples) = ds else { panic!() };
        for e in &examples {
            for t in 0..32 {
                let regime = e.regimes[t / 8];
                let row = &mats[regime].data()[e.tokens[t] * 12..(e.tokens[t] + 1) * 12];
                assert_eq!(row[e.targets[t]], 1.0);
            }
        }
    }

    #[test]
    fn classification_labels_cover_classes() {
        let task = SyntheticTask::classification(16, 4, 32, 13);
        let ds = gen_task(&task, 40).unwrap();
        let Dataset::Classification(examples) = ds else { panic!() };
        let mut seen = [false; 4];
        for e in &examples {
            assert_eq!(e.tokens.len(), 32);
            seen[e.label] = true;
        }
        assert!(seen.iter().all(|&s| s), "some class never sampled");
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(SyntheticTask::markov_lm(1, 2, 64, 16, 0).validate().is_err());
        assert!(SyntheticTask::markov_lm(16, 0, 64, 16, 0).validate().is_err());
        assert!(SyntheticTask::markov_lm(16, 2, 60, 16, 0).validate().is_err());
        assert!(SyntheticTask::classification(4, 8, 16, 0).validate().is_err());
        let mut t = SyntheticTask::markov_lm(16, 2, 64, 16, 0);
        t.stay_prob = 1.5;
        assert!(t.validate().is_err());
    }
}
