//! Per-token feature vectors and the two generation-time priors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::codec::{Alphabet, ScanState, SequenceHeader, ThresholdMode, Token};
use crate::dwt::CoefficientMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("threshold prior needs per-image threshold mode")]
    NotPerImage,
    #[error("sequence without a class label")]
    MissingClass,
    #[error("class {0} has no samples")]
    EmptyClass(u8),
    #[error("unknown class {0}")]
    UnknownClass(u8),
    #[error("covariance for class {0} is not positive definite")]
    NotPositiveDefinite(u8),
    #[error("malformed prior file: {0}")]
    Parse(String),
}

/// `[token one-hot | threshold one-hot | (bp, i1, i2) | class one-hot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub token_onehot: Vec<f64>,
    pub threshold_onehot: Vec<f64>,
    pub position: [f64; 3],
    pub guidance: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.token_onehot.len() + self.threshold_onehot.len() + 3 + self.guidance.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.token_onehot);
        v.extend_from_slice(&self.threshold_onehot);
        v.extend_from_slice(&self.position);
        v.extend_from_slice(&self.guidance);
        v
    }

    /// Token encoded by the one-hot block.
    pub fn token(&self, alphabet: Alphabet) -> Option<Token> {
        self.token_onehot
            .iter()
            .position(|&x| x == 1.0)
            .map(|id| alphabet.token(id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Sorted distinct `tilde_m` values; empty in global mode.
    pub threshold_support: Vec<i32>,
    pub num_classes: usize,
    /// Scale `(bp, i1, i2)` into `(0, 1]`; off by default.
    pub normalize_position: bool,
}

impl FeatureConfig {
    pub fn new(threshold_support: Vec<i32>) -> Self {
        Self {
            threshold_support,
            num_classes: 10,
            normalize_position: false,
        }
    }

    pub fn global() -> Self {
        Self::new(Vec::new())
    }

    pub fn dim(&self, alphabet: Alphabet) -> usize {
        alphabet.size() + self.threshold_support.len() + 3 + self.num_classes
    }
}

/// Features of `token` emitted from `state` (before advancing).
pub fn featurize(token: Token, state: &ScanState, header: &SequenceHeader, config: &FeatureConfig) -> FeatureVector {
    let alphabet = header.alphabet;
    let mut token_onehot = vec![0.0; alphabet.size()];
    token_onehot[alphabet.id_of(token).expect("token outside alphabet")] = 1.0;

    let mut threshold_onehot = vec![0.0; config.threshold_support.len()];
    if header.threshold_mode == ThresholdMode::PerImage {
        if let Some(slot) = header
            .tilde_m
            .and_then(|t| config.threshold_support.iter().position(|&s| s == t))
        {
            threshold_onehot[slot] = 1.0;
        }
    }

    let idx = state.cursor_index();
    let mut position = [state.plane() as f64, idx.i1 as f64, idx.i2 as f64];
    if config.normalize_position {
        let planes = header.plane_count().unwrap_or(1).max(1) as f64;
        let size = (1u64 << header.m) as f64;
        position = [position[0] / planes, position[1] / size, position[2] / size];
    }

    let mut guidance = vec![0.0; config.num_classes];
    if let Some(c) = header.class {
        if (c as usize) < config.num_classes {
            guidance[c as usize] = 1.0;
        }
    }

    FeatureVector {
        token_onehot,
        threshold_onehot,
        position,
        guidance,
    }
}

/// Features for every token of a valid sequence.
pub fn featurize_sequence(
    tokens: &[Token],
    header: &SequenceHeader,
    config: &FeatureConfig,
) -> Result<Vec<FeatureVector>, crate::codec::CodecError> {
    let mut state = ScanState::new(header)?;
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        out.push(featurize(t, &state, header, config));
        state.advance(t)?;
    }
    Ok(out)
}

/// Per-class empirical distribution of `tilde_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPrior {
    pub support: Vec<i32>,
    /// Counts aligned with `support`.
    pub counts: BTreeMap<u8, Vec<u64>>,
}

pub fn fit_threshold_prior<'a>(headers: impl IntoIterator<Item = &'a SequenceHeader>) -> Result<ThresholdPrior, FeatureError> {
    let mut raw: BTreeMap<u8, BTreeMap<i32, u64>> = BTreeMap::new();
    let mut support = std::collections::BTreeSet::new();
    for h in headers {
        if h.threshold_mode != ThresholdMode::PerImage {
            return Err(FeatureError::NotPerImage);
        }
        let t = h.tilde_m.ok_or(FeatureError::NotPerImage)?;
        let c = h.class.ok_or(FeatureError::MissingClass)?;
        *raw.entry(c).or_default().entry(t).or_default() += 1;
        support.insert(t);
    }
    if raw.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let support: Vec<i32> = support.into_iter().collect();
    let counts = raw
        .into_iter()
        .map(|(c, hist)| (c, support.iter().map(|s| hist.get(s).copied().unwrap_or(0)).collect()))
        .collect();
    Ok(ThresholdPrior { support, counts })
}

impl ThresholdPrior {
    /// The number of distinct thresholds corpus-wide.
    pub fn l(&self) -> usize {
        self.support.len()
    }

    pub fn probabilities(&self, class: u8) -> Result<Vec<f64>, FeatureError> {
        let counts = self.counts.get(&class).ok_or(FeatureError::UnknownClass(class))?;
        let total: u64 = counts.iter().sum();
        Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn sample(&self, class: u8, rng: &mut impl Rng) -> Result<i32, FeatureError> {
        let counts = self.counts.get(&class).ok_or(FeatureError::UnknownClass(class))?;
        let total: u64 = counts.iter().sum();
        let mut u = rng.random_range(0..total);
        for (s, &c) in self.support.iter().zip(counts) {
            if u < c {
                return Ok(*s);
            }
            u -= c;
        }
        unreachable!("draw below total count")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (c, counts) in &self.counts {
            for (t, n) in self.support.iter().zip(counts) {
                writeln!(s, "class={c} tilde_m={t} count={n}").unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FeatureError> {
        let mut raw: BTreeMap<u8, BTreeMap<i32, u64>> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let get = |i: usize, key: &str| -> Result<&str, FeatureError> {
                fields
                    .get(i)
                    .and_then(|f| f.strip_prefix(key))
                    .and_then(|f| f.strip_prefix('='))
                    .ok_or_else(|| FeatureError::Parse(format!("expected `{key}=` in `{line}`")))
            };
            let bad = || FeatureError::Parse(format!("bad number in `{line}`"));
            let c: u8 = get(0, "class")?.parse().map_err(|_| bad())?;
            let t: i32 = get(1, "tilde_m")?.parse().map_err(|_| bad())?;
            let n: u64 = get(2, "count")?.parse().map_err(|_| bad())?;
            *raw.entry(c).or_default().entry(t).or_default() += n;
        }
        if raw.is_empty() {
            return Err(FeatureError::EmptyCorpus);
        }
        let support: Vec<i32> = raw
            .values()
            .flat_map(|h| h.iter().filter(|(_, &n)| n > 0).map(|(&t, _)| t))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let counts = raw
            .into_iter()
            .map(|(c, hist)| (c, support.iter().map(|s| hist.get(s).copied().unwrap_or(0)).collect()))
            .collect();
        Ok(ThresholdPrior { support, counts })
    }
}

pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    pub mean: Vector4<f64>,
    /// Sample covariance, without the ridge.
    pub cov: Matrix4<f64>,
    pub count: usize,
}

/// Class-conditional Gaussian over the four LL coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LLSeedPrior {
    pub ridge: f64,
    pub classes: BTreeMap<u8, ClassGaussian>,
}

/// LL quad in scan order: (1,1), (1,2), (2,1), (2,2).
pub fn ll_quad(coeffs: &CoefficientMatrix) -> [f64; 4] {
    [coeffs.get(0, 0), coeffs.get(0, 1), coeffs.get(1, 0), coeffs.get(1, 1)]
}

/// Fits one Gaussian per class in `0..num_classes`; every class needs a sample.
pub fn fit_ll_prior<'a>(
    corpus: impl IntoIterator<Item = (&'a CoefficientMatrix, u8)>,
    ridge: f64,
    num_classes: u8,
) -> Result<LLSeedPrior, FeatureError> {
    let mut groups: BTreeMap<u8, Vec<Vector4<f64>>> = BTreeMap::new();
    for (c, label) in corpus {
        groups.entry(label).or_default().push(Vector4::from(ll_quad(c)));
    }
    if groups.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    if let Some(missing) = (0..num_classes).find(|c| !groups.contains_key(c)) {
        return Err(FeatureError::EmptyClass(missing));
    }
    let classes = groups
        .into_iter()
        .map(|(label, xs)| {
            let n = xs.len();
            let mean = xs.iter().sum::<Vector4<f64>>() / n as f64;
            let mut cov = Matrix4::zeros();
            if n > 1 {
                for x in &xs {
                    let d = x - mean;
                    cov += d * d.transpose();
                }
                cov /= (n - 1) as f64;
            }
            (label, ClassGaussian { mean, cov, count: n })
        })
        .collect();
    Ok(LLSeedPrior { ridge, classes })
}

impl LLSeedPrior {
    /// Draws `mean + L z` with `L L^T = cov + ridge I` and `z` standard normal.
    pub fn sample(&self, class: u8, rng: &mut impl Rng) -> Result<[f64; 4], FeatureError> {
        let g = self.classes.get(&class).ok_or(FeatureError::UnknownClass(class))?;
        let chol = (g.cov + Matrix4::identity() * self.ridge)
            .cholesky()
            .ok_or(FeatureError::NotPositiveDefinite(class))?;
        let z = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let x = g.mean + chol.l() * z;
        Ok([x[0], x[1], x[2], x[3]])
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ridge={:?}\n", self.ridge);
        let join = |it: &mut dyn Iterator<Item = f64>| it.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        for (c, g) in &self.classes {
            writeln!(s, "class={c}").unwrap();
            writeln!(s, "count={}", g.count).unwrap();
            writeln!(s, "mean={}", join(&mut g.mean.iter().copied())).unwrap();
            // row-major
            writeln!(s, "cov={}", join(&mut g.cov.transpose().iter().copied())).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FeatureError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let value = |line: Option<&str>, key: &str| -> Result<String, FeatureError> {
            line.and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| FeatureError::Parse(format!("expected `{key}=`")))
        };
        let floats = |s: &str, n: usize| -> Result<Vec<f64>, FeatureError> {
            let v: Vec<f64> = s
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| FeatureError::Parse(format!("bad number `{x}`"))))
                .collect::<Result<_, _>>()?;
            if v.len() != n {
                return Err(FeatureError::Parse(format!("expected {n} values, found {}", v.len())));
            }
            Ok(v)
        };
        let ridge: f64 = value(lines.next(), "ridge")?
            .parse()
            .map_err(|_| FeatureError::Parse("bad ridge".into()))?;
        let mut classes = BTreeMap::new();
        while let Some(line) = lines.next() {
            let c: u8 = value(Some(line), "class")?
                .parse()
                .map_err(|_| FeatureError::Parse("bad class".into()))?;
            let count: usize = value(lines.next(), "count")?
                .parse()
                .map_err(|_| FeatureError::Parse("bad count".into()))?;
            let mean = Vector4::from_vec(floats(&value(lines.next(), "mean")?, 4)?);
            let cov = Matrix4::from_row_slice(&floats(&value(lines.next(), "cov")?, 16)?);
            classes.insert(c, ClassGaussian { mean, cov, count });
        }
        Ok(LLSeedPrior { ridge, classes })
    }
}
