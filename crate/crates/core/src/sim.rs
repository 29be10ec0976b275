// SPDX-License-Identifier: Apache-2.0

//! Ground-truth labels by bit-parallel logic simulation.
//!
//! Patterns are packed 64 per `u64` word. Exhaustive pattern `p` assigns bit
//! `k` of `p` to primary input `k` (input 0 is the least significant bit).
//! Random patterns come from `ChaCha8Rng::seed_from_u64(seed)`: for each
//! word index in ascending order, one `next_u64()` per input in input
//! order; bit `b` of that word is pattern `64 * word + b`. Bits past the
//! pattern count are discarded, so a longer run extends a shorter one.

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aig::{Aig, NodeId};

/// Largest input count labelled by exhaustive enumeration by default.
pub const DEFAULT_EXACT_INPUT_CAP: usize = 16;
/// Number of sampled patterns used for truth tables of wide circuits.
pub const SAMPLED_TABLE_PATTERNS: usize = 1 << 14;
/// Pattern count of the Monte-Carlo labelling protocol.
pub const MC_VECTORS: usize = 100_000;

const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("pattern matrix has {found} columns, circuit has {expected} inputs")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("{inputs} inputs exceed the exhaustive-simulation cap of {cap}")]
    TooManyInputs { inputs: usize, cap: usize },
    #[error("truth tables have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("pattern count must be at least 1")]
    NoPatterns,
}

fn tail_mask(len: usize) -> u64 {
    match len % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Bit vector of a node's value under each evaluated pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TruthTable {
    words: Vec<u64>,
    len: usize,
}

impl TruthTable {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (p, &b) in bits.iter().enumerate() {
            if b {
                words[p / 64] |= 1 << (p % 64);
            }
        }
        TruthTable {
            words,
            len: bits.len(),
        }
    }

    fn from_words(mut words: Vec<u64>, len: usize) -> Self {
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        TruthTable { words, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, pattern: usize) -> bool {
        (self.words[pattern / 64] >> (pattern % 64)) & 1 == 1
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|p| self.get(p)).collect()
    }
}

/// Input assignments stored column-wise: one packed bit vector per input.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    count: usize,
    columns: Vec<Vec<u64>>,
}

impl PatternSet {
    /// From row-per-pattern bits; every row must have `num_inputs` entries.
    pub fn from_rows(num_inputs: usize, rows: &[Vec<bool>]) -> Result<Self, SimError> {
        let mut columns = vec![vec![0u64; rows.len().div_ceil(64)]; num_inputs];
        for (p, row) in rows.iter().enumerate() {
            if row.len() != num_inputs {
                return Err(SimError::ShapeMismatch {
                    expected: num_inputs,
                    found: row.len(),
                });
            }
            for (i, &b) in row.iter().enumerate() {
                if b {
                    columns[i][p / 64] |= 1 << (p % 64);
                }
            }
        }
        Ok(PatternSet {
            count: rows.len(),
            columns,
        })
    }

    /// All `2^num_inputs` patterns in ascending binary order.
    pub fn exhaustive(num_inputs: usize) -> Self {
        const LOW: [u64; 6] = [
            0xAAAA_AAAA_AAAA_AAAA,
            0xCCCC_CCCC_CCCC_CCCC,
            0xF0F0_F0F0_F0F0_F0F0,
            0xFF00_FF00_FF00_FF00,
            0xFFFF_0000_FFFF_0000,
            0xFFFF_FFFF_0000_0000,
        ];
        let count = 1usize << num_inputs;
        let n_words = count.div_ceil(64);
        let columns = (0..num_inputs)
            .map(|i| {
                let mut col: Vec<u64> = (0..n_words)
                    .map(|w| {
                        if i < 6 {
                            LOW[i]
                        } else if (w >> (i - 6)) & 1 == 1 {
                            u64::MAX
                        } else {
                            0
                        }
                    })
                    .collect();
                if let Some(last) = col.last_mut() {
                    *last &= tail_mask(count);
                }
                col
            })
            .collect();
        PatternSet { count, columns }
    }

    /// `count` uniform random patterns from the documented seeded stream.
    pub fn random(num_inputs: usize, count: usize, seed: u64) -> Self {
        let n_words = count.div_ceil(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns = vec![vec![0u64; n_words]; num_inputs];
        for w in 0..n_words {
            for col in columns.iter_mut() {
                col[w] = rng.next_u64();
            }
        }
        for col in columns.iter_mut() {
            if let Some(last) = col.last_mut() {
                *last &= tail_mask(count);
            }
        }
        PatternSet { count, columns }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn num_inputs(&self) -> usize {
        self.columns.len()
    }
}

/// Simulates every node under `patterns`; returns one table per node.
pub fn simulate(aig: &Aig, patterns: &PatternSet) -> Result<Vec<TruthTable>, SimError> {
    if patterns.num_inputs() != aig.num_inputs() {
        return Err(SimError::ShapeMismatch {
            expected: aig.num_inputs(),
            found: patterns.num_inputs(),
        });
    }
    let n_words = patterns.count.div_ceil(64);
    let mut values: Vec<Vec<u64>> = Vec::with_capacity(aig.num_nodes());
    values.extend(patterns.columns.iter().cloned());
    for node in aig.num_inputs()..aig.num_nodes() {
        let mut acc = vec![u64::MAX; n_words];
        for f in aig.fanins(node) {
            let src = &values[f.source];
            let flip = if f.is_inverted() { u64::MAX } else { 0 };
            for (a, s) in acc.iter_mut().zip(src) {
                *a &= s ^ flip;
            }
        }
        if let Some(last) = acc.last_mut() {
            *last &= tail_mask(patterns.count);
        }
        values.push(acc);
    }
    Ok(values
        .into_iter()
        .map(|w| TruthTable::from_words(w, patterns.count))
        .collect())
}

/// Row-per-pattern node values for row-per-pattern input bits.
pub fn simulate_patterns(aig: &Aig, rows: &[Vec<bool>]) -> Result<Vec<Vec<bool>>, SimError> {
    let patterns = PatternSet::from_rows(aig.num_inputs(), rows)?;
    let tables = simulate(aig, &patterns)?;
    Ok((0..rows.len())
        .map(|p| tables.iter().map(|t| t.get(p)).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelMode {
    Exact,
    Sampled { seed: u64, n: usize },
}

impl LabelMode {
    pub fn pattern_count(&self, num_inputs: usize) -> usize {
        match *self {
            LabelMode::Exact => 1 << num_inputs,
            LabelMode::Sampled { n, .. } => n,
        }
    }
}

/// Per-node signal probabilities and the truth tables they were counted from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub node_probs: Vec<f64>,
    pub tables: Vec<TruthTable>,
    pub mode: LabelMode,
}

impl LabelSet {
    fn from_tables(tables: Vec<TruthTable>, mode: LabelMode) -> Self {
        let node_probs = tables
            .iter()
            .map(|t| t.count_ones() as f64 / t.len() as f64)
            .collect();
        LabelSet {
            node_probs,
            tables,
            mode,
        }
    }

    pub fn pattern_count(&self) -> usize {
        self.tables.first().map_or(0, |t| t.len())
    }
}

pub fn exact_labels(aig: &Aig) -> Result<LabelSet, SimError> {
    exact_labels_capped(aig, DEFAULT_EXACT_INPUT_CAP)
}

pub fn exact_labels_capped(aig: &Aig, cap: usize) -> Result<LabelSet, SimError> {
    if aig.num_inputs() > cap {
        return Err(SimError::TooManyInputs {
            inputs: aig.num_inputs(),
            cap,
        });
    }
    let tables = simulate(aig, &PatternSet::exhaustive(aig.num_inputs()))?;
    Ok(LabelSet::from_tables(tables, LabelMode::Exact))
}

pub fn mc_labels(aig: &Aig, n_vectors: usize, seed: u64) -> Result<LabelSet, SimError> {
    if n_vectors == 0 {
        return Err(SimError::NoPatterns);
    }
    let tables = simulate(aig, &PatternSet::random(aig.num_inputs(), n_vectors, seed))?;
    Ok(LabelSet::from_tables(
        tables,
        LabelMode::Sampled {
            seed,
            n: n_vectors,
        },
    ))
}

/// Exhaustive labels up to `exact_cap` inputs, otherwise a shared sample of
/// [`SAMPLED_TABLE_PATTERNS`] patterns.
pub fn auto_labels(aig: &Aig, exact_cap: usize, seed: u64) -> Result<LabelSet, SimError> {
    if aig.num_inputs() <= exact_cap {
        exact_labels_capped(aig, exact_cap)
    } else {
        mc_labels(aig, SAMPLED_TABLE_PATTERNS, seed)
    }
}

/// Normalized Hamming distance.
pub fn tt_distance(a: &TruthTable, b: &TruthTable) -> Result<f64, SimError> {
    if a.len != b.len {
        return Err(SimError::LengthMismatch(a.len, b.len));
    }
    if a.len == 0 {
        return Ok(0.0);
    }
    let diff: u32 = a
        .words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum();
    Ok(diff as f64 / a.len as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairLabel {
    pub i: NodeId,
    pub j: NodeId,
    pub tt_distance: f64,
}

/// Default pair budget per graph: `min(4N, N(N-1)/2)`.
pub fn default_pair_count(num_nodes: usize) -> usize {
    (4 * num_nodes).min(num_nodes * num_nodes.saturating_sub(1) / 2)
}

/// Maps a rank in `0..n(n-1)/2` to the unordered pair `(i, j)`, `i < j`,
/// enumerating row by row: (0,1), (0,2), .., (0,n-1), (1,2), ..
#[cfg(test)]
fn unrank_pair(n: usize, mut rank: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if rank < row {
            return (i, i + 1 + rank);
        }
        rank -= row;
        i += 1;
    }
}

/// Draws `k` distinct unordered node pairs uniformly without replacement
/// (capped at the number available).
pub fn sample_pairs(labels: &LabelSet, k: usize, seed: u64) -> Result<Vec<PairLabel>, SimError> {
    let n = labels.tables.len();
    let total = n * n.saturating_sub(1) / 2;
    let k = k.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranks = index::sample(&mut rng, total, k).into_vec();
    // Unrank in ascending rank order so the row walk is linear overall.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_unstable_by_key(|&slot| ranks[slot]);
    let mut pairs = vec![(0usize, 0usize); k];
    let (mut row_start, mut i) = (0usize, 0usize);
    for slot in order {
        let r = ranks[slot];
        while r >= row_start + (n - 1 - i) {
            row_start += n - 1 - i;
            i += 1;
        }
        pairs[slot] = (i, i + 1 + (r - row_start));
    }
    pairs
        .into_iter()
        .map(|(i, j)| {
            Ok(PairLabel {
                i,
                j,
                tt_distance: tt_distance(&labels.tables[i], &labels.tables[j])?,
            })
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes to zero mean and unit population std. When the std is
/// below `1e-12` the values are only centered.
pub fn zero_norm(values: &[f64]) -> Result<Vec<f64>, SimError> {
    if values.len() < 2 {
        return Err(SimError::TooFewValues(values.len()));
    }
    let (mean, std) = mean_std(values);
    Ok(if std < STD_FLOOR {
        values.iter().map(|x| x - mean).collect()
    } else {
        values.iter().map(|x| (x - mean) / std).collect()
    })
}
