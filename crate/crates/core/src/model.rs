//! Next-token models, masked sampling and the generation loop.
//!
//! [`ContextModel`] is an order-N count model over token ids, conditioned on
//! `(class, tilde_m)`, backing off to shorter contexts and finally to the
//! corpus-wide unigram. Any model implementing [`NextTokenModel`] can drive
//! [`generate`]; the automaton mask guarantees the output decodes.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{Alphabet, CodecError, ScanState, SequenceHeader, ThresholdMode, Token, TokenSequence, TokenSet};
use crate::dataset::Image;
use crate::dwt::{inverse_dwt, CoefficientMatrix, DwtError};
use crate::features::{featurize, FeatureConfig, FeatureError, FeatureVector, LLSeedPrior, ThresholdPrior};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus mixes the {0} and {1} alphabets")]
    MixedAlphabets(Alphabet, Alphabet),
    #[error("empty token mask")]
    EmptyMask,
    #[error("invalid sampler: {0}")]
    InvalidSampler(String),
    #[error("generation needs a {0}")]
    MissingPrior(&'static str),
    #[error("model alphabet {model} does not match header alphabet {header}")]
    AlphabetMismatch { model: Alphabet, header: Alphabet },
    #[error("malformed model file: {0}")]
    Parse(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Dwt(#[from] DwtError),
}

/// What a generation is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Conditioning {
    pub class: Option<u8>,
    pub tilde_m: Option<i32>,
}

impl Conditioning {
    pub fn of(header: &SequenceHeader) -> Self {
        Self {
            class: header.class,
            tilde_m: header.tilde_m,
        }
    }
}

pub trait NextTokenModel: Sync {
    fn alphabet(&self) -> Alphabet;

    /// Distribution over the alphabet (indexed by token id) for the token
    /// after `tokens`; `features[i]` describes `tokens[i]` when the model
    /// asks for them.
    fn predict(&self, tokens: &[Token], features: &[FeatureVector], cond: Conditioning) -> Vec<f64>;

    /// Whether [`generate`] should compute feature vectors for the context.
    fn wants_features(&self) -> bool {
        false
    }
}

pub const DEFAULT_ORDER: usize = 12;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Default)]
struct Node {
    counts: Vec<u64>,
    total: u64,
    /// Sorted by symbol.
    children: Vec<(u8, u32)>,
}

/// Count trie over reversed contexts; symbol `alphabet.size()` marks the
/// start of a sequence.
#[derive(Debug, Clone, PartialEq)]
struct Trie {
    nodes: Vec<Node>,
}

impl Trie {
    fn new(a: usize) -> Self {
        Self {
            nodes: vec![Node {
                counts: vec![0; a],
                ..Node::default()
            }],
        }
    }

    fn child(&self, node: u32, sym: u8) -> Option<u32> {
        let ch = &self.nodes[node as usize].children;
        ch.binary_search_by_key(&sym, |&(s, _)| s).ok().map(|i| ch[i].1)
    }

    fn child_or_insert(&mut self, node: u32, sym: u8, a: usize) -> u32 {
        let ch = &self.nodes[node as usize].children;
        match ch.binary_search_by_key(&sym, |&(s, _)| s) {
            Ok(i) => ch[i].1,
            Err(i) => {
                let id = self.nodes.len() as u32;
                self.nodes.push(Node {
                    counts: vec![0; a],
                    ..Node::default()
                });
                self.nodes[node as usize].children.insert(i, (sym, id));
                id
            }
        }
    }

    fn add(&mut self, node: u32, target: usize, n: u64) {
        let nd = &mut self.nodes[node as usize];
        nd.counts[target] += n;
        nd.total += n;
    }

    fn insert_sequence(&mut self, ids: &[u8], order: usize, a: usize) {
        let bos = a as u8;
        for t in 0..ids.len() {
            let target = ids[t] as usize;
            let mut node = 0u32;
            self.add(node, target, 1);
            for k in 1..=order {
                let sym = match t.checked_sub(k) {
                    Some(j) => ids[j],
                    None if t + 1 == k => bos,
                    None => break,
                };
                node = self.child_or_insert(node, sym, a);
                self.add(node, target, 1);
            }
        }
    }

    fn merge(&mut self, other: &Trie, a: usize) {
        let mut stack = vec![(0u32, 0u32)];
        while let Some((mine, theirs)) = stack.pop() {
            let src = &other.nodes[theirs as usize];
            for (i, &c) in src.counts.iter().enumerate() {
                if c > 0 {
                    self.add(mine, i, c);
                }
            }
            for &(sym, child) in &src.children {
                let m = self.child_or_insert(mine, sym, a);
                stack.push((m, child));
            }
        }
    }

    /// Deepest node along the reversed context with at least one count;
    /// `from_start` says whether `ids` begins at the start of the sequence.
    fn deepest(&self, ids: &[u8], from_start: bool, order: usize, bos: u8) -> u32 {
        let mut node = 0u32;
        let mut best = 0u32;
        for k in 1..=order {
            let sym = match ids.len().checked_sub(k) {
                Some(j) => ids[j],
                None if from_start && ids.len() + 1 == k => bos,
                None => break,
            };
            match self.child(node, sym) {
                Some(n) => {
                    node = n;
                    if self.nodes[n as usize].total > 0 {
                        best = n;
                    }
                }
                None => break,
            }
        }
        best
    }

    /// Visits every node with its context (oldest symbol first) and depth.
    fn walk(&self, mut f: impl FnMut(&[u8], &Node)) {
        let mut stack: Vec<(u32, Vec<u8>)> = vec![(0, Vec::new())];
        while let Some((id, rev)) = stack.pop() {
            let node = &self.nodes[id as usize];
            let ctx: Vec<u8> = rev.iter().rev().copied().collect();
            f(&ctx, node);
            for &(sym, child) in node.children.iter().rev() {
                let mut r = rev.clone();
                r.push(sym);
                stack.push((child, r));
            }
        }
    }
}

/// Order-N backoff count model with additive smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    pub order: usize,
    pub lambda: f64,
    alphabet: Alphabet,
    tables: BTreeMap<Conditioning, Trie>,
    unigram: Vec<u64>,
}

fn ids_of(alphabet: Alphabet, tokens: &[Token]) -> Vec<u8> {
    tokens
        .iter()
        .map(|&t| alphabet.id_of(t).expect("token outside alphabet") as u8)
        .collect()
}

impl ContextModel {
    pub fn fit(corpus: &[TokenSequence], order: usize, lambda: f64) -> Result<Self, ModelError> {
        let first = corpus.first().ok_or(ModelError::EmptyCorpus)?;
        let alphabet = first.header.alphabet;
        if let Some(s) = corpus.iter().find(|s| s.header.alphabet != alphabet) {
            return Err(ModelError::MixedAlphabets(alphabet, s.header.alphabet));
        }
        let a = alphabet.size();
        let mut groups: BTreeMap<Conditioning, Vec<&TokenSequence>> = BTreeMap::new();
        for s in corpus {
            groups.entry(Conditioning::of(&s.header)).or_default().push(s);
        }
        let groups: Vec<_> = groups.into_iter().collect();
        let tables: BTreeMap<Conditioning, Trie> = groups
            .into_par_iter()
            .map(|(cond, seqs)| {
                let trie = seqs
                    .par_chunks(64)
                    .map(|chunk| {
                        let mut t = Trie::new(a);
                        for s in chunk {
                            t.insert_sequence(&ids_of(alphabet, &s.tokens), order, a);
                        }
                        t
                    })
                    .reduce_with(|mut x, y| {
                        x.merge(&y, a);
                        x
                    })
                    .unwrap_or_else(|| Trie::new(a));
                (cond, trie)
            })
            .collect();
        let mut unigram = vec![0u64; a];
        for t in tables.values() {
            for (u, c) in unigram.iter_mut().zip(&t.nodes[0].counts) {
                *u += c;
            }
        }
        Ok(Self {
            order,
            lambda,
            alphabet,
            tables,
            unigram,
        })
    }

    pub fn node_count(&self) -> usize {
        self.tables.values().map(|t| t.nodes.len()).sum()
    }

    fn smoothed(&self, counts: &[u64], total: u64) -> Vec<f64> {
        let a = counts.len() as f64;
        if total == 0 && self.lambda == 0.0 {
            return vec![1.0 / a; counts.len()];
        }
        if self.lambda.is_infinite() {
            return vec![1.0 / a; counts.len()];
        }
        let denom = total as f64 + self.lambda * a;
        counts.iter().map(|&c| (c as f64 + self.lambda) / denom).collect()
    }

    pub fn predict_ids(&self, ids: &[u8], cond: Conditioning) -> Vec<f64> {
        let start = ids.len().saturating_sub(self.order);
        self.predict_tail(&ids[start..], start == 0, cond)
    }

    fn predict_tail(&self, ids: &[u8], from_start: bool, cond: Conditioning) -> Vec<f64> {
        if let Some(trie) = self.tables.get(&cond) {
            let node = &trie.nodes[trie.deepest(ids, from_start, self.order, self.alphabet.size() as u8) as usize];
            if node.total > 0 {
                return self.smoothed(&node.counts, node.total);
            }
        }
        let total = self.unigram.iter().sum();
        self.smoothed(&self.unigram, total)
    }

    /// Text form: `order=`, `lambda=`, `alphabet=` headers, then one line per
    /// trie node `class tilde_m k context counts...` (`^` marks sequence
    /// start, `-` an empty context).
    pub fn to_text(&self) -> String {
        let mut s = format!("order={}\nlambda={:?}\nalphabet={}\n", self.order, self.lambda, self.alphabet);
        let bos = self.alphabet.size() as u8;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        for (cond, trie) in &self.tables {
            trie.walk(|ctx, node| {
                let chars: String = if ctx.is_empty() {
                    "-".into()
                } else {
                    ctx.iter()
                        .map(|&c| if c == bos { '^' } else { self.alphabet.token(c as usize).to_char() })
                        .collect()
                };
                let counts: Vec<String> = node.counts.iter().map(|c| c.to_string()).collect();
                writeln!(
                    s,
                    "{} {} {} {} {}",
                    opt(cond.class.map(|c| c.to_string())),
                    opt(cond.tilde_m.map(|c| c.to_string())),
                    ctx.len(),
                    chars,
                    counts.join(" ")
                )
                .unwrap();
            });
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Parse(m);
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String, ModelError> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}=`")))
        };
        let order: usize = header("order")?.parse().map_err(|_| bad("bad order".into()))?;
        let lambda: f64 = header("lambda")?.parse().map_err(|_| bad("bad lambda".into()))?;
        let alphabet: Alphabet = header("alphabet")?.parse()?;
        let a = alphabet.size();
        let mut tables: BTreeMap<Conditioning, Trie> = BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 + a {
                return Err(bad(format!("wrong field count in `{line}`")));
            }
            let opt = |v: &str| -> Result<Option<i64>, ModelError> {
                if v == "none" {
                    Ok(None)
                } else {
                    v.parse().map(Some).map_err(|_| bad(format!("bad value `{v}`")))
                }
            };
            let cond = Conditioning {
                class: opt(f[0])?.map(|v| v as u8),
                tilde_m: opt(f[1])?.map(|v| v as i32),
            };
            let k: usize = f[2].parse().map_err(|_| bad(format!("bad k in `{line}`")))?;
            let ctx: Vec<u8> = if k == 0 {
                Vec::new()
            } else {
                f[3].chars()
                    .map(|c| {
                        if c == '^' {
                            Ok(a as u8)
                        } else {
                            Token::from_char(c)
                                .and_then(|t| alphabet.id_of(t))
                                .map(|i| i as u8)
                                .ok_or_else(|| bad(format!("bad context char `{c}`")))
                        }
                    })
                    .collect::<Result<_, _>>()?
            };
            if ctx.len() != k {
                return Err(bad(format!("context length mismatch in `{line}`")));
            }
            let trie = tables.entry(cond).or_insert_with(|| Trie::new(a));
            let mut node = 0u32;
            for &sym in ctx.iter().rev() {
                node = trie.child_or_insert(node, sym, a);
            }
            for (i, v) in f[4..].iter().enumerate() {
                let c: u64 = v.parse().map_err(|_| bad(format!("bad count `{v}`")))?;
                trie.add(node, i, c);
            }
        }
        let mut unigram = vec![0u64; a];
        for t in tables.values() {
            for (u, c) in unigram.iter_mut().zip(&t.nodes[0].counts) {
                *u += c;
            }
        }
        Ok(Self {
            order,
            lambda,
            alphabet,
            tables,
            unigram,
        })
    }
}

impl NextTokenModel for ContextModel {
    fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    fn predict(&self, tokens: &[Token], _features: &[FeatureVector], cond: Conditioning) -> Vec<f64> {
        let start = tokens.len().saturating_sub(self.order);
        self.predict_tail(&ids_of(self.alphabet, &tokens[start..]), start == 0, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    TopK(usize),
    TopP(f64),
}

impl Sampler {
    pub fn validate(self) -> Result<Self, ModelError> {
        match self {
            Sampler::TopK(0) => Err(ModelError::InvalidSampler("k must be at least 1".into())),
            Sampler::TopP(p) if !(p > 0.0 && p <= 1.0) => {
                Err(ModelError::InvalidSampler(format!("p={p} outside (0, 1]")))
            }
            s => Ok(s),
        }
    }
}

fn draw(weights: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for &(i, w) in weights {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rev().find(|w| w.1 > 0.0).map_or(weights[0].0, |w| w.0)
}

/// Restricts `probs` to `mask`, renormalizes, then applies the sampler.
pub fn sample_next(
    probs: &[f64],
    mask: TokenSet,
    alphabet: Alphabet,
    sampler: Sampler,
    rng: &mut impl Rng,
) -> Result<Token, ModelError> {
    let mut cand: Vec<(usize, f64)> = mask
        .iter()
        .filter_map(|t| alphabet.id_of(t))
        .map(|i| (i, probs[i].max(0.0)))
        .collect();
    if cand.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    cand.sort_by_key(|c| c.0);
    let mass: f64 = cand.iter().map(|c| c.1).sum();
    if mass > 0.0 {
        cand.iter_mut().for_each(|c| c.1 /= mass);
    } else {
        let u = 1.0 / cand.len() as f64;
        cand.iter_mut().for_each(|c| c.1 = u);
    }
    // probability descending, token index ascending
    let mut ranked = cand.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let id = match sampler.validate()? {
        Sampler::Greedy => ranked[0].0,
        Sampler::TopK(k) => draw(&ranked[..k.min(ranked.len())], rng),
        Sampler::TopP(p) => {
            let mut acc = 0.0;
            let mut n = ranked.len();
            for (i, c) in ranked.iter().enumerate() {
                acc += c.1;
                if acc >= p - 1e-12 {
                    n = i + 1;
                    break;
                }
            }
            draw(&ranked[..n], rng)
        }
    };
    Ok(alphabet.token(id))
}

/// Candidate set and renormalized weights of a sampler; exposed for tests
/// and diagnostics.
pub fn candidate_distribution(probs: &[f64], mask: TokenSet, alphabet: Alphabet, sampler: Sampler) -> Vec<(Token, f64)> {
    let mut cand: Vec<(usize, f64)> = mask
        .iter()
        .filter_map(|t| alphabet.id_of(t))
        .map(|i| (i, probs[i].max(0.0)))
        .collect();
    let mass: f64 = cand.iter().map(|c| c.1).sum();
    let n = cand.len() as f64;
    cand.iter_mut().for_each(|c| c.1 = if mass > 0.0 { c.1 / mass } else { 1.0 / n });
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = match sampler {
        Sampler::Greedy => 1,
        Sampler::TopK(k) => k.min(cand.len()),
        Sampler::TopP(p) => {
            let mut acc = 0.0;
            cand.iter()
                .position(|c| {
                    acc += c.1;
                    acc >= p - 1e-12
                })
                .map_or(cand.len(), |i| i + 1)
        }
    };
    cand.truncate(keep);
    let mass: f64 = cand.iter().map(|c| c.1).sum();
    cand.into_iter().map(|(i, w)| (alphabet.token(i), w / mass)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub sequence: TokenSequence,
    pub coefficients: CoefficientMatrix,
    pub image: Image,
    pub ll_seed: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Priors<'a> {
    pub threshold: Option<&'a ThresholdPrior>,
    pub ll_seed: Option<&'a LLSeedPrior>,
}

/// Autoregressive generation under the automaton mask.
///
/// `template` fixes alphabet, wavelet, m, threshold mode, final exponent,
/// class and LL handling; `tilde_m` is drawn from the threshold prior in
/// per-image mode. With an LL prior the four LL coefficients are sampled
/// and their tokens are emitted deterministically; with `exclude_ll` they
/// are written straight into the decoded coefficients instead.
pub fn generate(
    model: &dyn NextTokenModel,
    template: &SequenceHeader,
    priors: Priors<'_>,
    sampler: Sampler,
    rng: &mut impl Rng,
) -> Result<Generated, ModelError> {
    sampler.validate()?;
    if model.alphabet() != template.alphabet {
        return Err(ModelError::AlphabetMismatch {
            model: model.alphabet(),
            header: template.alphabet,
        });
    }
    let mut header = template.clone();
    let feature_config = match header.threshold_mode {
        ThresholdMode::PerImage => {
            let prior = priors.threshold.ok_or(ModelError::MissingPrior("threshold prior"))?;
            if header.tilde_m.is_none() {
                let class = header.class.ok_or(ModelError::MissingPrior("class for the threshold prior"))?;
                header.tilde_m = Some(prior.sample(class, rng)?);
            }
            FeatureConfig::new(prior.support.clone())
        }
        ThresholdMode::Global => {
            header.tilde_m = None;
            FeatureConfig::global()
        }
    };
    let ll_seed = match (priors.ll_seed, header.class) {
        (Some(p), Some(c)) => Some(p.sample(c, rng)?),
        (Some(_), None) => return Err(ModelError::MissingPrior("class for the LL prior")),
        (None, _) => None,
    };

    let mut state = ScanState::new(&header)?;
    let cond = Conditioning::of(&header);
    let mut tokens = Vec::new();
    let mut features = Vec::new();
    while !state.is_done() {
        let p = state.cursor();
        let forced = match ll_seed {
            Some(seed) if state.scan().is_ll_at(p) => {
                state.encoder_choice(|q| if q < 4 { seed[q] } else { 0.0 }, None)
            }
            _ => None,
        };
        let token = match forced {
            Some(t) => t,
            None => {
                let probs = model.predict(&tokens, &features, cond);
                sample_next(&probs, state.valid_next(), header.alphabet, sampler, rng)?
            }
        };
        if model.wants_features() {
            features.push(featurize(token, &state, &header, &feature_config));
        }
        state.advance(token)?;
        tokens.push(token);
    }
    let mut coefficients = state.approximation(header.wavelet);
    if let (Some(seed), true) = (ll_seed, header.exclude_ll) {
        coefficients.set(0, 0, seed[0]);
        coefficients.set(0, 1, seed[1]);
        coefficients.set(1, 0, seed[2]);
        coefficients.set(1, 1, seed[3]);
    }
    let image = inverse_dwt(&coefficients)?;
    Ok(Generated {
        sequence: TokenSequence { header, tokens },
        coefficients,
        image,
        ll_seed,
    })
}

/// Uniform model over the alphabet; useful as a reference and in tests.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel(pub Alphabet);

impl NextTokenModel for UniformModel {
    fn alphabet(&self) -> Alphabet {
        self.0
    }

    fn predict(&self, _tokens: &[Token], _features: &[FeatureVector], _cond: Conditioning) -> Vec<f64> {
        vec![1.0 / self.0.size() as f64; self.0.size()]
    }
}

/// Token-id histogram helper shared by tests and the CLI.
pub fn token_histogram(seqs: &[TokenSequence]) -> HashMap<Token, usize> {
    let mut h = HashMap::new();
    for s in seqs {
        for &t in &s.tokens {
            *h.entry(t).or_insert(0) += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode;
    use crate::dwt::WaveletId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw_seq(tokens: &[Token], alphabet: Alphabet) -> TokenSequence {
        TokenSequence {
            header: SequenceHeader::new(alphabet, WaveletId::Haar, 5, ThresholdMode::Global, -3),
            tokens: tokens.to_vec(),
        }
    }

    fn id(t: Token) -> usize {
        Alphabet::ZeroBlock.id_of(t).unwrap()
    }

    #[test]
    fn count_ratios_order_one() {
        use Token::*;
        let s = raw_seq(&[Insignificant, NowSignificantPos, NextAccuracy1, Insignificant], Alphabet::ZeroBlock);
        let m = ContextModel::fit(&[s.clone()], 1, 0.0).unwrap();
        let cond = Conditioning::of(&s.header);
        // the trailing I has no successor, so only one I-context is counted
        let p = m.predict(&[Insignificant], &[], cond);
        assert_eq!(p[id(NowSignificantPos)], 1.0);
        assert_eq!(p[id(Insignificant)], 0.0);
        let p = m.predict(&[NextAccuracy1], &[], cond);
        assert_eq!(p[id(Insignificant)], 1.0);
        let p = m.predict(&[Insignificant, NowSignificantPos], &[], cond);
        assert_eq!(p[id(NextAccuracy1)], 1.0);
        // sequence start
        let p = m.predict(&[], &[], cond);
        assert_eq!(p[id(Insignificant)], 1.0);
    }

    #[test]
    fn order_zero_is_unigram_and_fit_is_deterministic() {
        use Token::*;
        let s = raw_seq(&[Insignificant, Insignificant, NowSignificantNeg, NextAccuracy0], Alphabet::ZeroBlock);
        let m = ContextModel::fit(&[s.clone()], 0, 0.0).unwrap();
        let p = m.predict(&[NowSignificantNeg], &[], Conditioning::of(&s.header));
        assert_eq!(p[id(Insignificant)], 0.5);
        assert_eq!(p[id(NowSignificantNeg)], 0.25);
        assert_eq!(ContextModel::fit(&[s.clone()], 3, 0.1).unwrap(), ContextModel::fit(&[s], 3, 0.1).unwrap());
    }

    #[test]
    fn backoff_and_smoothing_limits() {
        use Token::*;
        let s = raw_seq(&[Insignificant, Group2x2, Insignificant, Group4x4, Group2x2], Alphabet::ZeroBlock);
        let cond = Conditioning::of(&s.header);
        let m3 = ContextModel::fit(&[s.clone()], 3, 0.1).unwrap();
        let m2 = ContextModel::fit(&[s.clone()], 2, 0.1).unwrap();
        // context ending in an unseen trigram backs off
        let ctx = [Group4x4, Insignificant, Group2x2];
        assert_eq!(m3.predict(&ctx, &[], cond), m2.predict(&ctx, &[], cond));
        let mut inf = m3.clone();
        inf.lambda = f64::INFINITY;
        assert!(inf.predict(&ctx, &[], cond).iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-15));
        let mut big = m3.clone();
        big.lambda = 1e12;
        assert!(big.predict(&ctx, &[], cond).iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-9));
        // unknown conditioning falls back to the unigram
        let other = Conditioning {
            class: Some(9),
            tilde_m: None,
        };
        let p = m3.predict(&ctx, &[], other);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[id(Insignificant)] > p[id(NowSignificantPos)]);
    }

    #[test]
    fn mixed_alphabets_rejected() {
        let a = raw_seq(&[Token::Insignificant], Alphabet::ZeroBlock);
        let b = raw_seq(&[Token::Insignificant], Alphabet::ZeroTree);
        assert!(matches!(ContextModel::fit(&[a, b], 2, 0.1), Err(ModelError::MixedAlphabets(..))));
        assert!(matches!(ContextModel::fit(&[], 2, 0.1), Err(ModelError::EmptyCorpus)));
    }

    #[test]
    fn model_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs: Vec<_> = (0..5)
            .map(|i| {
                let mut c = CoefficientMatrix::zeros(4, 3, WaveletId::Haar);
                for v in c.values.iter_mut() {
                    if rng.random::<f64>() < 0.2 {
                        *v = rng.random::<f64>() * 4.0 - 2.0;
                    }
                }
                let mut h = SequenceHeader::new(Alphabet::ZeroTree, WaveletId::Haar, 4, ThresholdMode::PerImage, -2);
                h.class = Some(i % 2);
                encode(&c, &h).unwrap()
            })
            .collect();
        let m = ContextModel::fit(&seqs, 4, 0.1).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("order=4\nlambda=0.1\nalphabet=zerotree\n"));
        let back = ContextModel::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        let cond = Conditioning::of(&seqs[1].header);
        for cut in [0, 3, 17, 40] {
            assert_eq!(back.predict(&seqs[1].tokens[..cut], &[], cond), m.predict(&seqs[1].tokens[..cut], &[], cond));
        }
    }

    #[test]
    fn memorized_sequences_replayed_greedily() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..10 {
            let mut c = CoefficientMatrix::zeros(4, 3, WaveletId::Haar);
            for v in c.values.iter_mut() {
                if rng.random::<f64>() < 0.25 {
                    *v = rng.random::<f64>() * 6.0 - 3.0;
                }
            }
            let mut h = SequenceHeader::new(Alphabet::ZeroBlock, WaveletId::Haar, 4, ThresholdMode::PerImage, -2);
            h.class = Some(i);
            let seq = encode(&c, &h).unwrap();
            let m = ContextModel::fit(&[seq.clone()], 400, 0.01).unwrap();
            let prior = crate::features::fit_threshold_prior([&seq.header]).unwrap();
            let mut template = seq.header.clone();
            template.tilde_m = None;
            let g = generate(
                &m,
                &template,
                Priors {
                    threshold: Some(&prior),
                    ll_seed: None,
                },
                Sampler::Greedy,
                &mut rng,
            )
            .unwrap();
            assert_eq!(g.sequence, seq);
        }
    }

    #[test]
    fn top_p_and_top_k_candidates() {
        let probs = [0.5, 0.2, 0.15, 0.1, 0.05, 0.0, 0.0];
        let full = TokenSet::of(Alphabet::ZeroBlock.tokens());
        let a = Alphabet::ZeroBlock;
        let expect = vec![(a.token(0), 5.0 / 7.0), (a.token(1), 2.0 / 7.0)];
        for s in [Sampler::TopP(0.6), Sampler::TopK(2)] {
            let got = candidate_distribution(&probs, full, a, s);
            assert_eq!(got.len(), 2);
            for (g, e) in got.iter().zip(&expect) {
                assert_eq!(g.0, e.0);
                assert!((g.1 - e.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_sampling_stays_in_mask() {
        let a = Alphabet::ZeroBlock;
        let probs = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mask = TokenSet::of(&[Token::Group2x2, Token::Insignificant]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in [Sampler::Greedy, Sampler::TopK(1), Sampler::TopK(7), Sampler::TopP(0.3), Sampler::TopP(1.0)] {
            for _ in 0..200 {
                assert!(mask.contains(sample_next(&probs, mask, a, s, &mut rng).unwrap()));
            }
        }
        // zero mass on the mask: greedy picks the lowest index
        assert_eq!(sample_next(&probs, mask, a, Sampler::Greedy, &mut rng).unwrap(), Token::Group2x2);
        assert!(matches!(
            sample_next(&probs, TokenSet::EMPTY, a, Sampler::Greedy, &mut rng),
            Err(ModelError::EmptyMask)
        ));
        assert!(matches!(Sampler::TopP(0.0).validate(), Err(ModelError::InvalidSampler(_))));
        assert!(matches!(Sampler::TopK(0).validate(), Err(ModelError::InvalidSampler(_))));
    }

    #[test]
    fn greedy_ties_lowest_index() {
        let a = Alphabet::ZeroTree;
        let probs = [0.1, 0.3, 0.3, 0.1, 0.1, 0.1];
        let full = TokenSet::of(a.tokens());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_next(&probs, full, a, Sampler::Greedy, &mut rng).unwrap(), a.token(1));
        assert_eq!(sample_next(&probs, full, a, Sampler::TopK(1), &mut rng).unwrap(), a.token(1));
        assert_eq!(sample_next(&probs, full, a, Sampler::TopP(1e-9), &mut rng).unwrap(), a.token(1));
    }

    #[test]
    fn uniform_generation_is_valid_and_reproducible() {
        let h = SequenceHeader::new(Alphabet::ZeroBlock, WaveletId::Cdf97, 4, ThresholdMode::Global, -1);
        let model = UniformModel(Alphabet::ZeroBlock);
        let run = |seed| {
            generate(&model, &h, Priors::default(), Sampler::TopK(3), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        let g = run(3);
        assert_eq!(g, run(3));
        assert_eq!(crate::codec::decode(&g.sequence, None).unwrap(), g.coefficients);
    }

    #[test]
    fn ll_seed_tokens_are_forced() {
        use crate::features::fit_ll_prior;
        let mut c = CoefficientMatrix::zeros(4, 3, WaveletId::Haar);
        c.values[0] = 3.3;
        c.values[1] = -1.1;
        let prior = fit_ll_prior([(&c, 2u8)], 1e-14, 0).unwrap();
        let mut h = SequenceHeader::new(Alphabet::ZeroTree, WaveletId::Haar, 4, ThresholdMode::Global, -3);
        h.class = Some(2);
        let g = generate(
            &UniformModel(Alphabet::ZeroTree),
            &h,
            Priors {
                threshold: None,
                ll_seed: Some(&prior),
            },
            Sampler::TopK(6),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!((g.coefficients.get(0, 0) - 3.3).abs() < 0.125);
        assert!((g.coefficients.get(0, 1) + 1.1).abs() < 0.125);
        assert!(g.coefficients.get(1, 1).abs() < 0.125);

        h.exclude_ll = true;
        let g = generate(
            &UniformModel(Alphabet::ZeroTree),
            &h,
            Priors {
                threshold: None,
                ll_seed: Some(&prior),
            },
            Sampler::Greedy,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!((g.coefficients.get(0, 0) - 3.3).abs() < 1e-6);
    }
}
