use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::{Input, Target};

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    TrainData = 2,
    ValData = 3,
    Shuffle = 4,
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Input,
    pub target: Target,
}

/// Classification of long token sequences where only a few positions carry
/// the label.
///
/// Noise tokens are `0..noise_vocab`; class `c` is token `noise_vocab + c`.
/// The label token fills a strict majority of the informative positions and
/// the rest hold other classes, so the label is the most frequent class
/// token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSignalTask {
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_informative: usize,
    pub noise_vocab: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

/// One generated sequence with its informative positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSample {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub positions: Vec<usize>,
}

impl SparseSignalTask {
    pub fn vocab(&self) -> usize {
        self.noise_vocab + self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.n_informative == 0 {
            return Err(invalid("sequence length and informative count must be at least 1"));
        }
        if self.n_informative > self.seq_len {
            return Err(invalid(format!(
                "n_informative {} exceeds sequence length {}",
                self.n_informative, self.seq_len
            )));
        }
        if self.n_classes < 2 {
            return Err(invalid("n_classes must be at least 2"));
        }
        if self.noise_vocab == 0 && self.n_informative < self.seq_len {
            return Err(invalid("noise_vocab must be at least 1 unless every position is informative"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<SparseSample> {
        self.validate()?;
        let label = rng.gen_range(0..self.n_classes);
        let majority = self.n_informative / 2 + 1;
        let mut classes = vec![label; majority];
        for _ in majority..self.n_informative {
            let other = rng.gen_range(0..self.n_classes - 1);
            classes.push(if other >= label { other + 1 } else { other });
        }
        let mut positions = rand::seq::index::sample(rng, self.seq_len, self.n_informative).into_vec();
        positions.sort_unstable();
        classes.shuffle(rng);
        let mut tokens: Vec<usize> = (0..self.seq_len)
            .map(|_| if self.noise_vocab > 0 { rng.gen_range(0..self.noise_vocab) } else { 0 })
            .collect();
        for (&p, &c) in positions.iter().zip(&classes) {
            tokens[p] = self.noise_vocab + c;
        }
        Ok(SparseSample { tokens, label, positions })
    }

    pub fn generate(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<SparseSample>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// Train and validation sets, each from its own stream of `seed`.
    pub fn splits(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        let to_examples = |samples: Vec<SparseSample>| {
            samples
                .into_iter()
                .map(|s| Example {
                    input: Input::Tokens(s.tokens),
                    target: Target::Class(s.label),
                })
                .collect()
        };
        let train = self.generate(self.n_train, &mut stream(self.seed, Purpose::TrainData))?;
        let val = self.generate(self.n_val, &mut stream(self.seed, Purpose::ValData))?;
        Ok((to_examples(train), to_examples(val)))
    }

    /// Most frequent class token, ties to the lower class.
    pub fn oracle_label(&self, tokens: &[usize]) -> Option<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &t in tokens {
            if t >= self.noise_vocab && t < self.vocab() {
                counts[t - self.noise_vocab] += 1;
            }
        }
        let best = *counts.iter().max()?;
        (best > 0).then(|| counts.iter().position(|c| *c == best).expect("max exists"))
    }
}

/// Next-token prediction on arithmetic progressions modulo `vocab`: each
/// sequence picks a start and a stride, and every token is the previous one
/// plus the stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionTask {
    pub seq_len: usize,
    pub vocab: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl ProgressionTask {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Example> {
        if self.seq_len == 0 || self.vocab < 2 {
            return Err(invalid("progression task needs seq_len >= 1 and vocab >= 2"));
        }
        let start = rng.gen_range(0..self.vocab);
        let stride = rng.gen_range(1..self.vocab);
        let seq: Vec<usize> = (0..=self.seq_len).map(|i| (start + i * stride) % self.vocab).collect();
        Ok(Example {
            input: Input::Tokens(seq[..self.seq_len].to_vec()),
            target: Target::Tokens(seq[1..].to_vec()),
        })
    }

    pub fn splits(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        let mut train_rng = stream(self.seed, Purpose::TrainData);
        let mut val_rng = stream(self.seed, Purpose::ValData);
        let train = (0..self.n_train).map(|_| self.sample(&mut train_rng)).collect::<Result<_>>()?;
        let val = (0..self.n_val).map(|_| self.sample(&mut val_rng)).collect::<Result<_>>()?;
        Ok((train, val))
    }
}
