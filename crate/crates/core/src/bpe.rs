//! Byte-pair merging over token id sequences.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BpeError {
    #[error("target vocabulary {target} is smaller than the base alphabet {base}")]
    TargetTooSmall { target: usize, base: usize },
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("malformed merge file: {0}")]
    Parse(String),
}

/// Merges in creation order; merge `i` creates id `base + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    pub base: u32,
    pub merges: Vec<(u32, u32)>,
}

type Pair = (u32, u32);

fn pair_counts(seq: &[u32]) -> HashMap<Pair, i64> {
    let mut m = HashMap::new();
    for w in seq.windows(2) {
        *m.entry((w[0], w[1])).or_insert(0) += 1;
    }
    m
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
fn merge_pair(seq: &[u32], pair: Pair, new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(new);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Result of fitting: the table and the corpus mean length after each
/// merge (entry 0 is the unmerged corpus).
#[derive(Debug, Clone, PartialEq)]
pub struct BpeFit {
    pub table: MergeTable,
    pub mean_lengths: Vec<f64>,
}

impl BpeFit {
    /// `(vocabulary size, mean length)` rows.
    pub fn curve(&self) -> Vec<(usize, f64)> {
        self.mean_lengths
            .iter()
            .enumerate()
            .map(|(i, &m)| (self.table.base as usize + i, m))
            .collect()
    }
}

pub fn fit_bpe(corpus: &[Vec<u32>], base: u32, target_vocab: usize) -> Result<MergeTable, BpeError> {
    Ok(fit_bpe_curve(corpus, base, target_vocab)?.table)
}

/// Greedy merging of the most frequent adjacent pair (counted within
/// sequences), ties broken by the smallest `(left, right)`.
pub fn fit_bpe_curve(corpus: &[Vec<u32>], base: u32, target_vocab: usize) -> Result<BpeFit, BpeError> {
    if target_vocab < base as usize {
        return Err(BpeError::TargetTooSmall {
            target: target_vocab,
            base: base as usize,
        });
    }
    let mut seqs: Vec<Vec<u32>> = corpus.to_vec();
    let n = seqs.len().max(1) as f64;
    let mut total_len: usize = seqs.iter().map(Vec::len).sum();
    let mut counts: HashMap<Pair, i64> = seqs
        .par_iter()
        .map(|s| pair_counts(s))
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });
    let mut index: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (i, s) in seqs.iter().enumerate() {
        for w in s.windows(2) {
            index.entry((w[0], w[1])).or_default().insert(i);
        }
    }
    let mut merges = Vec::new();
    let mut mean_lengths = vec![total_len as f64 / n];
    while base as usize + merges.len() < target_vocab {
        let best = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let new = base + merges.len() as u32;
        merges.push(pair);
        let mut affected: Vec<usize> = index.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for i in affected {
            let old = &seqs[i];
            let merged = merge_pair(old, pair, new);
            if merged.len() == old.len() {
                continue;
            }
            for (k, v) in pair_counts(old) {
                *counts.get_mut(&k).expect("counted pair") -= v;
            }
            for (k, v) in pair_counts(&merged) {
                *counts.entry(k).or_insert(0) += v;
                index.entry(k).or_default().insert(i);
            }
            total_len -= old.len() - merged.len();
            seqs[i] = merged;
        }
        counts.retain(|_, c| *c > 0);
        mean_lengths.push(total_len as f64 / n);
    }
    Ok(BpeFit {
        table: MergeTable { base, merges },
        mean_lengths,
    })
}

impl MergeTable {
    pub fn vocab_size(&self) -> usize {
        self.base as usize + self.merges.len()
    }

    /// Replays all merges in creation order.
    pub fn apply(&self, seq: &[u32]) -> Result<Vec<u32>, BpeError> {
        if let Some(&bad) = seq.iter().find(|&&id| id >= self.base) {
            return Err(BpeError::UnknownId(bad));
        }
        let rank: HashMap<Pair, u32> = self.merges.iter().enumerate().map(|(i, &p)| (p, i as u32)).collect();
        let mut cur = seq.to_vec();
        // New pairs only involve freshly created ids, whose merges come
        // later, so merging the lowest-ranked pair present each round is the
        // same as replaying the whole table in order.
        loop {
            let Some(r) = cur.windows(2).filter_map(|w| rank.get(&(w[0], w[1]))).min().copied() else {
                break;
            };
            cur = merge_pair(&cur, self.merges[r as usize], self.base + r);
        }
        Ok(cur)
    }

    /// Expands merged ids back to base ids.
    pub fn unapply(&self, seq: &[u32]) -> Result<Vec<u32>, BpeError> {
        let mut out = Vec::with_capacity(seq.len() * 2);
        let mut stack = Vec::new();
        for &id in seq.iter().rev() {
            stack.push(id);
        }
        while let Some(id) = stack.pop() {
            if id < self.base {
                out.push(id);
            } else {
                let (l, r) = *self
                    .merges
                    .get((id - self.base) as usize)
                    .ok_or(BpeError::UnknownId(id))?;
                stack.push(r);
                stack.push(l);
            }
        }
        Ok(out)
    }

    /// One merge per line, `left right new`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (l, r)) in self.merges.iter().enumerate() {
            writeln!(s, "{l} {r} {}", self.base as usize + i).unwrap();
        }
        s
    }

    pub fn from_text(text: &str, base: u32) -> Result<Self, BpeError> {
        let mut merges = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<u32> = line
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| BpeError::Parse(format!("bad id `{x}`"))))
                .collect::<Result<_, _>>()?;
            let [l, r, new] = f[..] else {
                return Err(BpeError::Parse(format!("expected three ids in `{line}`")));
            };
            let expected = base + merges.len() as u32;
            if new != expected || l >= expected || r >= expected {
                return Err(BpeError::Parse(format!("merge `{line}` out of order")));
            }
            merges.push((l, r));
        }
        Ok(MergeTable { base, merges })
    }
}
