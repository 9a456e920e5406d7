//! Embedded bit-plane tokenization of wavelet coefficients.
//!
//! A sequence is a header plus a flat list of tokens. Both encoders and the
//! decoder drive the same [`ScanState`] automaton: the encoder picks the
//! token dictated by the true coefficients, the decoder (or a generator)
//! supplies tokens from elsewhere, and [`ScanState::advance`] applies the
//! identical transition in both cases. This keeps the encoder, decoder and
//! the set of admissible next tokens in lock-step.
//!
//! Per bit-plane with threshold `T = 2^t`, every scan position is visited
//! once (unless covered by a group or zero-tree token):
//!
//! * already significant: one refinement token, `|α̃| ∓= T/4`;
//! * newly significant (`|α| >= T`): sign token with `|α̃| = 3T/2`,
//!   immediately followed by its refinement token;
//! * insignificant: `Insignificant`, or a group / zero-tree token at a
//!   position where one is admissible.
//!
//! Refinement compares `|α| <= |α̃|` for `NextAccuracy0`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::dwt::{CoefficientMatrix, WaveletId};
use crate::layout::{CoeffIndex, LayoutError, ScanOrder, UnitKind};

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("invalid token {token} at position {position}; expected one of {expected}")]
    InvalidToken {
        position: usize,
        token: Token,
        expected: TokenSet,
    },
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("all coefficients are zero")]
    AllZero,
    #[error("token `{0}` is not part of the {1} alphabet")]
    ForeignToken(char, Alphabet),
    #[error("malformed token file: {0}")]
    Parse(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Group4x4,
    Group2x2,
    ZeroTree,
    NowSignificantNeg,
    NowSignificantPos,
    Insignificant,
    NextAccuracy0,
    NextAccuracy1,
}

impl Token {
    pub const ALL: [Token; 8] = [
        Token::Group4x4,
        Token::Group2x2,
        Token::ZeroTree,
        Token::NowSignificantNeg,
        Token::NowSignificantPos,
        Token::Insignificant,
        Token::NextAccuracy0,
        Token::NextAccuracy1,
    ];

    pub fn to_char(self) -> char {
        match self {
            Token::Group4x4 => 'Q',
            Token::Group2x2 => 'q',
            Token::ZeroTree => 'Z',
            Token::NowSignificantNeg => 'N',
            Token::NowSignificantPos => 'P',
            Token::Insignificant => 'I',
            Token::NextAccuracy0 => '0',
            Token::NextAccuracy1 => '1',
        }
    }

    pub fn from_char(c: char) -> Option<Token> {
        Token::ALL.into_iter().find(|t| t.to_char() == c)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

/// A set of tokens, stored as a bit mask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TokenSet(u8);

impl TokenSet {
    pub const EMPTY: TokenSet = TokenSet(0);

    pub fn of(tokens: &[Token]) -> Self {
        TokenSet(tokens.iter().fold(0, |m, t| m | t.bit()))
    }

    pub fn contains(self, t: Token) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn insert(&mut self, t: Token) {
        self.0 |= t.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Token> {
        Token::ALL.into_iter().filter(move |t| self.contains(*t))
    }

    pub fn union(self, other: TokenSet) -> TokenSet {
        TokenSet(self.0 | other.0)
    }
}

impl fmt::Debug for TokenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for TokenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(|t| t.to_string()).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

const ACCURACY: TokenSet = TokenSet((1 << Token::NextAccuracy0 as u8) | (1 << Token::NextAccuracy1 as u8));
const SINGLE: TokenSet = TokenSet(
    (1 << Token::Insignificant as u8) | (1 << Token::NowSignificantNeg as u8) | (1 << Token::NowSignificantPos as u8),
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Alphabet {
    ZeroBlock,
    ZeroTree,
}

static ZEROBLOCK_TOKENS: [Token; 7] = [
    Token::Group4x4,
    Token::Group2x2,
    Token::NowSignificantNeg,
    Token::NowSignificantPos,
    Token::Insignificant,
    Token::NextAccuracy0,
    Token::NextAccuracy1,
];

static ZEROTREE_TOKENS: [Token; 6] = [
    Token::ZeroTree,
    Token::NowSignificantNeg,
    Token::NowSignificantPos,
    Token::Insignificant,
    Token::NextAccuracy0,
    Token::NextAccuracy1,
];

impl Alphabet {
    /// Tokens in id order.
    pub fn tokens(self) -> &'static [Token] {
        match self {
            Alphabet::ZeroBlock => &ZEROBLOCK_TOKENS,
            Alphabet::ZeroTree => &ZEROTREE_TOKENS,
        }
    }

    pub fn size(self) -> usize {
        self.tokens().len()
    }

    pub fn id_of(self, t: Token) -> Option<usize> {
        self.tokens().iter().position(|&x| x == t)
    }

    pub fn token(self, id: usize) -> Token {
        self.tokens()[id]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Alphabet::ZeroBlock => "zeroblock",
            Alphabet::ZeroTree => "zerotree",
        }
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Alphabet {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zeroblock" => Ok(Alphabet::ZeroBlock),
            "zerotree" => Ok(Alphabet::ZeroTree),
            other => Err(CodecError::Parse(format!("unknown alphabet `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThresholdMode {
    /// First plane `T = 2^(m-2)` for every image.
    Global,
    /// First plane `T = 2^(tilde_m - 1)` with `tilde_m` stored per image.
    PerImage,
}

impl ThresholdMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdMode::Global => "global",
            ThresholdMode::PerImage => "per_image",
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdMode {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(ThresholdMode::Global),
            "per_image" | "per-image" => Ok(ThresholdMode::PerImage),
            other => Err(CodecError::Parse(format!("unknown threshold mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequenceHeader {
    pub alphabet: Alphabet,
    pub wavelet: WaveletId,
    pub m: u32,
    pub threshold_mode: ThresholdMode,
    /// Per-image mode only; filled in by the encoders when `None`.
    pub tilde_m: Option<i32>,
    pub tfinal_exp: i32,
    pub class: Option<u8>,
    pub exclude_ll: bool,
}

impl SequenceHeader {
    pub fn new(alphabet: Alphabet, wavelet: WaveletId, m: u32, threshold_mode: ThresholdMode, tfinal_exp: i32) -> Self {
        Self {
            alphabet,
            wavelet,
            m,
            threshold_mode,
            tilde_m: None,
            tfinal_exp,
            class: None,
            exclude_ll: false,
        }
    }

    pub fn levels(&self) -> u32 {
        self.m - 1
    }

    /// Exponent of the first bit-plane.
    pub fn initial_exponent(&self) -> Result<i32, CodecError> {
        match self.threshold_mode {
            ThresholdMode::Global => Ok(self.m as i32 - 2),
            ThresholdMode::PerImage => self
                .tilde_m
                .map(|t| t - 1)
                .ok_or_else(|| CodecError::HeaderMismatch("per-image mode without tilde_m".into())),
        }
    }

    /// Number of bit-planes in a complete sequence.
    pub fn plane_count(&self) -> Result<u32, CodecError> {
        let e0 = self.initial_exponent()?;
        Ok((e0 - self.tfinal_exp + 1).max(0) as u32)
    }
}

/// `floor(log2(x))` for finite `x > 0`, exact at powers of two.
pub fn floor_log2(x: f64) -> i32 {
    assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        // subnormal
        let mant = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mant.leading_zeros() as i32)
    } else {
        exp - 1023
    }
}

/// `tilde_m = ceil(log2(max))`, bumped by one at exact powers of two so that
/// the first plane `T = 2^(tilde_m - 1)` satisfies `T <= max < 2T`.
pub fn tilde_m_for(max_abs: f64) -> i32 {
    floor_log2(max_abs) + 1
}

/// Largest |α| over the coefficients the scan visits.
pub fn scanned_max_abs(coeffs: &CoefficientMatrix, exclude_ll: bool) -> f64 {
    let size = coeffs.size();
    let ll = coeffs.ll_size();
    let mut max = 0.0f64;
    for r in 0..size {
        for c in 0..size {
            if exclude_ll && r < ll && c < ll {
                continue;
            }
            max = max.max(coeffs.get(r, c).abs());
        }
    }
    max
}

/// Exponent `t` of the first plane `T = 2^t`.
pub fn initial_exponent(coeffs: &CoefficientMatrix, mode: ThresholdMode, exclude_ll: bool) -> Result<i32, CodecError> {
    match mode {
        ThresholdMode::Global => Ok(coeffs.m as i32 - 2),
        ThresholdMode::PerImage => {
            let max = scanned_max_abs(coeffs, exclude_ll);
            if max == 0.0 {
                Err(CodecError::AllZero)
            } else {
                Ok(tilde_m_for(max) - 1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub header: SequenceHeader,
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token ids in the header's alphabet.
    pub fn ids(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .map(|&t| self.header.alphabet.id_of(t).expect("token outside alphabet") as u32)
            .collect()
    }

    /// Serializes to the `.wtk` text format.
    pub fn to_wtk(&self) -> String {
        let h = &self.header;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".to_string());
        let mut s = String::new();
        s.push_str(&format!("alphabet={}\n", h.alphabet));
        s.push_str(&format!("wavelet={}\n", h.wavelet));
        s.push_str(&format!("m={}\n", h.m));
        s.push_str(&format!("threshold_mode={}\n", h.threshold_mode));
        s.push_str(&format!("tilde_m={}\n", opt(h.tilde_m.map(|v| v.to_string()))));
        s.push_str(&format!("tfinal_exp={}\n", h.tfinal_exp));
        s.push_str(&format!("class={}\n", opt(h.class.map(|v| v.to_string()))));
        s.push_str(&format!("exclude_ll={}\n", h.exclude_ll));
        s.push_str("tokens=");
        s.extend(self.tokens.iter().map(|t| t.to_char()));
        s.push('\n');
        s
    }

    pub fn from_wtk(text: &str) -> Result<Self, CodecError> {
        const KEYS: [&str; 9] = [
            "alphabet",
            "wavelet",
            "m",
            "threshold_mode",
            "tilde_m",
            "tfinal_exp",
            "class",
            "exclude_ll",
            "tokens",
        ];
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != KEYS.len() {
            return Err(CodecError::Parse(format!("expected {} lines, found {}", KEYS.len(), lines.len())));
        }
        let mut values = Vec::with_capacity(KEYS.len());
        for (line, key) in lines.iter().zip(KEYS) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CodecError::Parse(format!("missing `=` in `{line}`")))?;
            if k != key {
                return Err(CodecError::Parse(format!("expected key `{key}`, found `{k}`")));
            }
            values.push(v);
        }
        let bad = |what: &str, v: &str| CodecError::Parse(format!("bad {what} `{v}`"));
        let opt_int = |v: &str| -> Result<Option<i64>, CodecError> {
            if v == "none" {
                Ok(None)
            } else {
                v.parse::<i64>().map(Some).map_err(|_| bad("integer", v))
            }
        };
        let alphabet: Alphabet = values[0].parse()?;
        let header = SequenceHeader {
            alphabet,
            wavelet: values[1].parse().map_err(|_| bad("wavelet", values[1]))?,
            m: values[2].parse().map_err(|_| bad("m", values[2]))?,
            threshold_mode: values[3].parse()?,
            tilde_m: opt_int(values[4])?.map(|v| v as i32),
            tfinal_exp: values[5].parse().map_err(|_| bad("tfinal_exp", values[5]))?,
            class: opt_int(values[6])?
                .map(|v| u8::try_from(v).map_err(|_| bad("class", values[6])))
                .transpose()?,
            exclude_ll: values[7].parse().map_err(|_| bad("exclude_ll", values[7]))?,
        };
        let tokens = values[8]
            .chars()
            .map(|c| match Token::from_char(c) {
                Some(t) if alphabet.id_of(t).is_some() => Ok(t),
                _ => Err(CodecError::ForeignToken(c, alphabet)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TokenSequence { header, tokens })
    }
}

/// Cursor into the bit-plane scan plus everything the decoder knows so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanState {
    scan: Arc<ScanOrder>,
    alphabet: Alphabet,
    exponent: i32,
    final_exponent: i32,
    plane: u32,
    cursor: usize,
    pending_accuracy: bool,
    done: bool,
    emitted: usize,
    significant: Vec<bool>,
    approx: Vec<f64>,
    block_dissolved: Vec<bool>,
    group_dissolved: Vec<bool>,
    skipped: Vec<bool>,
}

/// The scan order used by sequences with this header.
pub fn scan_for(header: &SequenceHeader) -> Result<Arc<ScanOrder>, CodecError> {
    Ok(Arc::new(ScanOrder::new(header.m, header.levels(), !header.exclude_ll)?))
}

impl ScanState {
    pub fn new(header: &SequenceHeader) -> Result<Self, CodecError> {
        Self::with_scan(scan_for(header)?, header)
    }

    /// Starts a fresh scan reusing a prebuilt scan order.
    pub fn with_scan(scan: Arc<ScanOrder>, header: &SequenceHeader) -> Result<Self, CodecError> {
        if scan.geometry.m != header.m || scan.include_ll == header.exclude_ll {
            return Err(CodecError::HeaderMismatch("scan order does not match header".into()));
        }
        let exponent = header.initial_exponent()?;
        let n = scan.len();
        Ok(Self {
            alphabet: header.alphabet,
            exponent,
            final_exponent: header.tfinal_exp,
            plane: 1,
            cursor: 0,
            pending_accuracy: false,
            done: exponent < header.tfinal_exp || n == 0,
            emitted: 0,
            significant: vec![false; n],
            approx: vec![0.0; n],
            block_dissolved: vec![false; scan.units().len()],
            group_dissolved: vec![false; scan.group_count()],
            skipped: vec![false; n],
            scan,
        })
    }

    pub fn scan(&self) -> &ScanOrder {
        &self.scan
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// 1-based bit-plane counter.
    pub fn plane(&self) -> u32 {
        self.plane
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn threshold(&self) -> f64 {
        2f64.powi(self.exponent)
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn cursor_index(&self) -> CoeffIndex {
        self.scan.index(self.cursor.min(self.scan.len() - 1))
    }

    pub fn tokens_consumed(&self) -> usize {
        self.emitted
    }

    pub fn awaiting_accuracy(&self) -> bool {
        self.pending_accuracy
    }

    pub fn is_significant(&self, pos: usize) -> bool {
        self.significant[pos]
    }

    pub fn approx_at(&self, pos: usize) -> f64 {
        self.approx[pos]
    }

    fn intact_block_head(&self) -> bool {
        let u = self.scan.unit_at(self.cursor);
        let unit = self.scan.units()[u];
        unit.kind == UnitKind::Block4x4 && unit.start == self.cursor && !self.block_dissolved[u]
    }

    fn intact_group_head(&self) -> bool {
        self.cursor % 4 == 0 && !self.group_dissolved[self.cursor / 4]
    }

    /// Tokens admissible at the current state; empty once the scan is complete.
    pub fn valid_next(&self) -> TokenSet {
        if self.done {
            return TokenSet::EMPTY;
        }
        if self.pending_accuracy || self.significant[self.cursor] {
            return ACCURACY;
        }
        match self.alphabet {
            Alphabet::ZeroBlock => {
                let mut set = SINGLE;
                if self.intact_group_head() {
                    set.insert(Token::Group2x2);
                    if self.intact_block_head() {
                        set.insert(Token::Group4x4);
                    }
                }
                set
            }
            Alphabet::ZeroTree => {
                let mut set = SINGLE;
                if self.scan.children_at(self.cursor).is_some() {
                    set.insert(Token::ZeroTree);
                }
                set
            }
        }
    }

    /// Applies one token, returning the successor in place.
    pub fn advance(&mut self, token: Token) -> Result<(), CodecError> {
        let expected = self.valid_next();
        if !expected.contains(token) {
            return Err(CodecError::InvalidToken {
                position: self.emitted,
                token,
                expected,
            });
        }
        let t = self.threshold();
        let p = self.cursor;
        self.emitted += 1;
        match token {
            Token::Group4x4 => self.move_to(p + 16),
            Token::Group2x2 => {
                self.dissolve_block_at_head();
                self.move_to(p + 4);
            }
            Token::ZeroTree => {
                self.mark_descendants(p);
                self.move_to(p + 1);
            }
            Token::Insignificant => {
                self.dissolve_groups_at(p);
                self.move_to(p + 1);
            }
            Token::NowSignificantNeg | Token::NowSignificantPos => {
                self.dissolve_groups_at(p);
                self.significant[p] = true;
                let sign = if token == Token::NowSignificantNeg { -1.0 } else { 1.0 };
                self.approx[p] = sign * 1.5 * t;
                self.pending_accuracy = true;
            }
            Token::NextAccuracy0 | Token::NextAccuracy1 => {
                let a = self.approx[p];
                let delta = if token == Token::NextAccuracy0 { -0.25 * t } else { 0.25 * t };
                self.approx[p] = a.signum() * (a.abs() + delta);
                self.pending_accuracy = false;
                self.move_to(p + 1);
            }
        }
        Ok(())
    }

    /// Non-mutating form of [`advance`](Self::advance).
    pub fn advanced(&self, token: Token) -> Result<ScanState, CodecError> {
        let mut next = self.clone();
        next.advance(token)?;
        Ok(next)
    }

    fn dissolve_block_at_head(&mut self) {
        if self.alphabet == Alphabet::ZeroBlock && self.intact_block_head() {
            let u = self.scan.unit_at(self.cursor);
            self.block_dissolved[u] = true;
        }
    }

    fn dissolve_groups_at(&mut self, p: usize) {
        if self.alphabet != Alphabet::ZeroBlock {
            return;
        }
        self.dissolve_block_at_head();
        if p % 4 == 0 {
            self.group_dissolved[p / 4] = true;
        }
    }

    fn mark_descendants(&mut self, p: usize) {
        let mut stack = vec![p];
        while let Some(q) = stack.pop() {
            if let Some(kids) = self.scan.children_at(q) {
                for k in kids {
                    self.skipped[k] = true;
                    stack.push(k);
                }
            }
        }
    }

    fn move_to(&mut self, mut next: usize) {
        let n = self.scan.len();
        while next < n && self.skipped[next] {
            next += 1;
        }
        if next < n {
            self.cursor = next;
            return;
        }
        if self.exponent <= self.final_exponent {
            self.done = true;
            self.cursor = n;
            return;
        }
        self.exponent -= 1;
        self.plane += 1;
        self.cursor = 0;
        self.skipped.iter_mut().for_each(|s| *s = false);
    }

    /// Current approximation as a coefficient matrix; positions outside the
    /// scan (an excluded LL block) are zero.
    pub fn approximation(&self, wavelet: WaveletId) -> CoefficientMatrix {
        let g = self.scan.geometry;
        let mut out = CoefficientMatrix::zeros(g.m, g.levels, wavelet);
        let size = g.size();
        for (p, idx) in self.scan.positions().iter().enumerate() {
            out.values[idx.flat(size)] = self.approx[p];
        }
        out
    }

    /// The token the encoder emits here, given the true coefficient at every
    /// scan position and (zero-tree only) the largest |α| among each
    /// position's descendants.
    pub fn encoder_choice(&self, value_at: impl Fn(usize) -> f64, descendant_max: Option<&[f64]>) -> Option<Token> {
        if self.done {
            return None;
        }
        let p = self.cursor;
        let v = value_at(p);
        if self.pending_accuracy || self.significant[p] {
            return Some(if v.abs() <= self.approx[p].abs() {
                Token::NextAccuracy0
            } else {
                Token::NextAccuracy1
            });
        }
        let t = self.threshold();
        let insignificant = |range: std::ops::Range<usize>| range.into_iter().all(|q| value_at(q).abs() < t);
        match self.alphabet {
            Alphabet::ZeroBlock => {
                if self.intact_block_head() && insignificant(p..p + 16) {
                    return Some(Token::Group4x4);
                }
                if self.intact_group_head() && insignificant(p..p + 4) {
                    return Some(Token::Group2x2);
                }
            }
            Alphabet::ZeroTree => {
                if v.abs() < t && self.scan.children_at(p).is_some() {
                    let dmax = descendant_max.expect("zero-tree encoding needs descendant maxima")[p];
                    if dmax < t {
                        return Some(Token::ZeroTree);
                    }
                }
            }
        }
        Some(if v.abs() < t {
            Token::Insignificant
        } else if v < 0.0 {
            Token::NowSignificantNeg
        } else {
            Token::NowSignificantPos
        })
    }
}

/// Largest |α| over the descendants of every scan position.
pub fn descendant_maxima(scan: &ScanOrder, values_by_pos: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; scan.len()];
    for p in (0..scan.len()).rev() {
        if let Some(kids) = scan.children_at(p) {
            out[p] = kids
                .iter()
                .fold(0.0f64, |a, &k| a.max(values_by_pos[k].abs()).max(out[k]));
        }
    }
    out
}

fn resolve_header(coeffs: &CoefficientMatrix, header: &SequenceHeader, alphabet: Alphabet) -> Result<SequenceHeader, CodecError> {
    if header.alphabet != alphabet {
        return Err(CodecError::HeaderMismatch(format!(
            "header alphabet {} used with the {} encoder",
            header.alphabet, alphabet
        )));
    }
    if coeffs.m != header.m || coeffs.levels != header.levels() || coeffs.wavelet != header.wavelet {
        return Err(CodecError::HeaderMismatch(format!(
            "coefficients (m={}, levels={}, {}) vs header (m={}, levels={}, {})",
            coeffs.m,
            coeffs.levels,
            coeffs.wavelet,
            header.m,
            header.levels(),
            header.wavelet
        )));
    }
    let mut header = header.clone();
    let max = scanned_max_abs(coeffs, header.exclude_ll);
    match header.threshold_mode {
        ThresholdMode::Global => {
            header.tilde_m = None;
            let bound = 2f64.powi(header.m as i32 - 1);
            if max > bound {
                return Err(CodecError::HeaderMismatch(format!(
                    "max |coefficient| {max} exceeds the global bound {bound}"
                )));
            }
        }
        ThresholdMode::PerImage => {
            let needed = if max == 0.0 { header.tfinal_exp } else { tilde_m_for(max) };
            match header.tilde_m {
                None => header.tilde_m = Some(needed),
                Some(t) if t < needed => {
                    return Err(CodecError::HeaderMismatch(format!(
                        "tilde_m={t} too small for max |coefficient| {max}"
                    )))
                }
                Some(_) => {}
            }
        }
    }
    Ok(header)
}

fn encode_with(coeffs: &CoefficientMatrix, header: &SequenceHeader, alphabet: Alphabet) -> Result<TokenSequence, CodecError> {
    let header = resolve_header(coeffs, header, alphabet)?;
    let mut state = ScanState::new(&header)?;
    let size = coeffs.size();
    let values: Vec<f64> = state
        .scan()
        .positions()
        .iter()
        .map(|idx| coeffs.values[idx.flat(size)])
        .collect();
    let dmax = (alphabet == Alphabet::ZeroTree).then(|| descendant_maxima(state.scan(), &values));
    let mut tokens = Vec::new();
    while let Some(tok) = state.encoder_choice(|p| values[p], dmax.as_deref()) {
        state.advance(tok)?;
        tokens.push(tok);
    }
    Ok(TokenSequence { header, tokens })
}

/// Zero-block tokenization (7-token alphabet).
pub fn encode_zeroblock(coeffs: &CoefficientMatrix, header: &SequenceHeader) -> Result<TokenSequence, CodecError> {
    encode_with(coeffs, header, Alphabet::ZeroBlock)
}

/// Zero-tree tokenization (6-token alphabet).
pub fn encode_zerotree(coeffs: &CoefficientMatrix, header: &SequenceHeader) -> Result<TokenSequence, CodecError> {
    encode_with(coeffs, header, Alphabet::ZeroTree)
}

/// Encodes with the encoder matching `header.alphabet`.
pub fn encode(coeffs: &CoefficientMatrix, header: &SequenceHeader) -> Result<TokenSequence, CodecError> {
    encode_with(coeffs, header, header.alphabet)
}

/// Replays the first `stop_at` tokens (all of them when `None`).
pub fn decode_state(seq: &TokenSequence, stop_at: Option<usize>) -> Result<ScanState, CodecError> {
    let mut state = ScanState::new(&seq.header)?;
    let n = stop_at.map_or(seq.len(), |s| s.min(seq.len()));
    for &tok in &seq.tokens[..n] {
        state.advance(tok)?;
    }
    Ok(state)
}

/// Approximate coefficients after consuming `min(stop_at, len)` tokens.
pub fn decode(seq: &TokenSequence, stop_at: Option<usize>) -> Result<CoefficientMatrix, CodecError> {
    Ok(decode_state(seq, stop_at)?.approximation(seq.header.wavelet))
}

/// Approximation at the end of every completed bit-plane, in order.
pub fn decode_planes(seq: &TokenSequence) -> Result<Vec<CoefficientMatrix>, CodecError> {
    let mut state = ScanState::new(&seq.header)?;
    let mut out = Vec::new();
    for &tok in &seq.tokens {
        let plane = state.plane();
        state.advance(tok)?;
        if state.plane() != plane || state.is_done() {
            out.push(state.approximation(seq.header.wavelet));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(alphabet: Alphabet, m: u32, mode: ThresholdMode, tfinal: i32) -> SequenceHeader {
        SequenceHeader::new(alphabet, WaveletId::Haar, m, mode, tfinal)
    }

    fn random_coeffs(m: u32, rng: &mut impl Rng, scale: f64, sparsity: f64) -> CoefficientMatrix {
        let mut c = CoefficientMatrix::zeros(m, m - 1, WaveletId::Haar);
        for v in c.values.iter_mut() {
            if rng.random::<f64>() < sparsity {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * scale;
            }
        }
        c
    }

    #[test]
    fn floor_log2_exact() {
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(4.0), 2);
        assert_eq!(floor_log2(3.999_999), 1);
        assert_eq!(floor_log2(17.45), 4);
        assert_eq!(floor_log2(0.125), -3);
        assert_eq!(floor_log2(0.1), -4);
    }

    #[test]
    fn initial_exponent_cases() {
        let mut c = CoefficientMatrix::zeros(5, 4, WaveletId::Haar);
        c.set(7, 3, -17.45);
        assert_eq!(initial_exponent(&c, ThresholdMode::PerImage, false).unwrap(), 4);
        assert_eq!(tilde_m_for(17.45), 5);
        assert_eq!(initial_exponent(&c, ThresholdMode::Global, false).unwrap(), 3);
        c.set(7, 3, 4.0);
        assert_eq!(tilde_m_for(4.0), 3);
        assert_eq!(initial_exponent(&c, ThresholdMode::PerImage, false).unwrap(), 2);
        let z = CoefficientMatrix::zeros(5, 4, WaveletId::Haar);
        assert_eq!(initial_exponent(&z, ThresholdMode::PerImage, false), Err(CodecError::AllZero));
    }

    #[test]
    fn worked_example_single_coefficient() {
        let mut c = CoefficientMatrix::zeros(5, 4, WaveletId::Haar);
        c.set(0, 2, -17.45); // index (1,3)
        let h = header(Alphabet::ZeroBlock, 5, ThresholdMode::PerImage, 4);
        let seq = encode_zeroblock(&c, &h).unwrap();
        assert_eq!(seq.header.tilde_m, Some(5));
        // find the significance token and the state around it
        let mut st = ScanState::new(&seq.header).unwrap();
        let mut seen = Vec::new();
        for &t in &seq.tokens {
            let before = st.cursor_index();
            st.advance(t).unwrap();
            if before == CoeffIndex::new(1, 3) {
                seen.push((t, st.approx_at(4)));
            }
        }
        assert_eq!(
            seen,
            vec![(Token::NowSignificantNeg, -24.0), (Token::NextAccuracy0, -20.0)]
        );
    }

    #[test]
    fn all_zero_global_counts_groups() {
        let c = CoefficientMatrix::zeros(5, 4, WaveletId::Haar);
        let h = header(Alphabet::ZeroBlock, 5, ThresholdMode::Global, -3);
        let seq = encode_zeroblock(&c, &h).unwrap();
        // oracle: per plane, LL + 3 coarse groups as Group2x2, 3 + 12 + 48 blocks
        let per_plane = 1 + 3 + 3 + 12 + 48;
        assert_eq!(per_plane, 67);
        assert_eq!(seq.len(), 7 * 67);
        assert_eq!(seq.tokens.iter().filter(|&&t| t == Token::Group2x2).count(), 7 * 4);
        let zt = encode_zerotree(&c, &header(Alphabet::ZeroTree, 5, ThresholdMode::Global, -3)).unwrap();
        // LL as four Insignificant, then 12 coarse zero-trees
        assert_eq!(zt.len(), 7 * 16);
    }

    #[test]
    fn all_zero_per_image_is_header_only() {
        let c = CoefficientMatrix::zeros(5, 4, WaveletId::Haar);
        let seq = encode(&c, &header(Alphabet::ZeroTree, 5, ThresholdMode::PerImage, -3)).unwrap();
        assert!(seq.is_empty());
        let d = decode(&seq, None).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zerotree_hand_simulated_8x8() {
        // m=3: LL 2x2, level-2 bands 2x2, level-1 bands 4x4.
        let mut c = CoefficientMatrix::zeros(3, 2, WaveletId::Haar);
        c.set(0, 2, 5.0); // (1,3), HL root
        let h = SequenceHeader::new(Alphabet::ZeroTree, WaveletId::Haar, 3, ThresholdMode::PerImage, 2);
        let seq = encode_zerotree(&c, &h).unwrap();
        // single plane T=4: LL: I I I I; HL roots: P 1 Z Z Z; LH roots Z x4; HH roots Z x4;
        // children of (1,3) = (1,5),(1,6),(2,5),(2,6): leaves -> I x4
        let s: String = seq.tokens.iter().map(|t| t.to_char()).collect();
        assert_eq!(s, "IIIIP0ZZZZZZZZZZZIIII");
        let d = decode(&seq, None).unwrap();
        assert_eq!(d.get(0, 2), 5.0);
        // zero-block equivalent agrees on the approximation
        let zb = encode_zeroblock(&c, &SequenceHeader { alphabet: Alphabet::ZeroBlock, ..h }).unwrap();
        assert_eq!(decode(&zb, None).unwrap(), d);
    }

    #[test]
    fn valid_next_cases() {
        let h = header(Alphabet::ZeroBlock, 5, ThresholdMode::Global, -3);
        let mut st = ScanState::new(&h).unwrap();
        // LL 2x2 head
        assert_eq!(
            st.valid_next(),
            TokenSet::of(&[Token::Group2x2, Token::Insignificant, Token::NowSignificantNeg, Token::NowSignificantPos])
        );
        for _ in 0..4 {
            st.advance(Token::Group2x2).unwrap();
        }
        // first level-3 block head
        assert_eq!(
            st.valid_next(),
            TokenSet::of(&[
                Token::Group4x4,
                Token::Group2x2,
                Token::Insignificant,
                Token::NowSignificantNeg,
                Token::NowSignificantPos
            ])
        );
        st.advance(Token::NowSignificantPos).unwrap();
        assert_eq!(st.valid_next(), TokenSet::of(&[Token::NextAccuracy0, Token::NextAccuracy1]));
        st.advance(Token::NextAccuracy1).unwrap();
        // inside a dissolved 2x2
        assert_eq!(
            st.valid_next(),
            TokenSet::of(&[Token::Insignificant, Token::NowSignificantNeg, Token::NowSignificantPos])
        );
        for _ in 0..3 {
            st.advance(Token::Insignificant).unwrap();
        }
        // next 2x2 head inside the dissolved block
        assert_eq!(
            st.valid_next(),
            TokenSet::of(&[Token::Group2x2, Token::Insignificant, Token::NowSignificantNeg, Token::NowSignificantPos])
        );
        // finish the plane with group tokens
        while st.plane() == 1 {
            let v = st.valid_next();
            let t = if v.contains(Token::Group4x4) { Token::Group4x4 } else { Token::Group2x2 };
            st.advance(t).unwrap();
        }
        // back at the LL group; the coefficient uncovered earlier is at position 16
        while st.cursor() != 16 {
            let v = st.valid_next();
            let t = if v.contains(Token::Group4x4) { Token::Group4x4 } else if v.contains(Token::Group2x2) { Token::Group2x2 } else { Token::Insignificant };
            st.advance(t).unwrap();
        }
        assert_eq!(st.valid_next(), TokenSet::of(&[Token::NextAccuracy0, Token::NextAccuracy1]));
        assert!(st.approx_at(16) > 0.0);
    }

    #[test]
    fn group4x4_jumps_sixteen() {
        let h = header(Alphabet::ZeroBlock, 5, ThresholdMode::Global, -3);
        let mut st = ScanState::new(&h).unwrap();
        for _ in 0..4 {
            st.advance(Token::Group2x2).unwrap();
        }
        assert_eq!(st.cursor(), 16);
        st.advance(Token::Group4x4).unwrap();
        assert_eq!(st.cursor(), 32);
    }

    #[test]
    fn invalid_token_reports_position() {
        let h = header(Alphabet::ZeroBlock, 5, ThresholdMode::Global, -3);
        let seq = TokenSequence {
            header: h.clone(),
            tokens: vec![Token::Insignificant, Token::Group4x4],
        };
        let err = decode(&seq, None).unwrap_err();
        assert_eq!(
            err,
            CodecError::InvalidToken {
                position: 1,
                token: Token::Group4x4,
                expected: SINGLE
            }
        );
    }

    #[test]
    fn advance_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_coeffs(4, &mut rng, 6.0, 0.3);
        let h = header(Alphabet::ZeroBlock, 4, ThresholdMode::PerImage, -2);
        let seq = encode(&c, &h).unwrap();
        let mut st = ScanState::new(&seq.header).unwrap();
        for &t in &seq.tokens {
            let a = st.advanced(t).unwrap();
            let b = st.advanced(t).unwrap();
            assert_eq!(a, b);
            st = a;
        }
        assert!(st.is_done());
        assert_eq!(st.exponent(), -2);
        assert!(st.valid_next().is_empty());
    }

    #[test]
    fn round_trip_and_variant_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..200 {
            let m = 2 + trial % 4;
            let c = random_coeffs(m, &mut rng, 2f64.powi(m as i32 - 1), 0.4);
            let tfinal = -(trial as i32 % 4);
            for mode in [ThresholdMode::Global, ThresholdMode::PerImage] {
                let zb = encode_zeroblock(&c, &header(Alphabet::ZeroBlock, m, mode, tfinal)).unwrap();
                let zt = encode_zerotree(&c, &header(Alphabet::ZeroTree, m, mode, tfinal)).unwrap();
                let db = decode(&zb, None).unwrap();
                let dt = decode(&zt, None).unwrap();
                assert_eq!(db, dt);
                assert!(db.max_abs_diff(&c) < 2f64.powi(tfinal));
            }
        }
    }

    #[test]
    fn significant_interval_after_each_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let c = random_coeffs(4, &mut rng, 8.0, 0.5);
            let h = header(Alphabet::ZeroTree, 4, ThresholdMode::PerImage, -4);
            let seq = encode(&c, &h).unwrap();
            let mut st = ScanState::new(&seq.header).unwrap();
            let size = c.size();
            for &tok in &seq.tokens {
                let (plane, t) = (st.plane(), st.threshold());
                st.advance(tok).unwrap();
                if st.plane() != plane || st.is_done() {
                    for (p, idx) in st.scan().positions().iter().enumerate() {
                        let truth = c.values[idx.flat(size)];
                        if st.is_significant(p) {
                            assert!((truth - st.approx_at(p)).abs() <= t / 2.0);
                            assert_eq!(truth.signum(), st.approx_at(p).signum());
                        } else {
                            assert!(truth.abs() < t);
                            assert_eq!(st.approx_at(p), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn prefix_decodes_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_coeffs(5, &mut rng, 10.0, 0.2);
        let seq = encode(&c, &header(Alphabet::ZeroBlock, 5, ThresholdMode::PerImage, -3)).unwrap();
        let mut prev = f64::INFINITY;
        for planes in decode_planes(&seq).unwrap() {
            let e = planes.l2_diff(&c);
            assert!(e <= prev);
            prev = e;
        }
        for cut in [0, 1, seq.len() / 3, seq.len() / 2] {
            decode(&seq, Some(cut)).unwrap();
        }
    }

    #[test]
    fn header_mismatch() {
        let c = CoefficientMatrix::zeros(5, 4, WaveletId::Haar);
        let h = header(Alphabet::ZeroTree, 5, ThresholdMode::Global, -3);
        assert!(matches!(encode_zeroblock(&c, &h), Err(CodecError::HeaderMismatch(_))));
        let h = header(Alphabet::ZeroBlock, 4, ThresholdMode::Global, -3);
        assert!(matches!(encode_zeroblock(&c, &h), Err(CodecError::HeaderMismatch(_))));
        let mut big = CoefficientMatrix::zeros(5, 4, WaveletId::Haar);
        big.set(0, 0, 20.0);
        let h = header(Alphabet::ZeroBlock, 5, ThresholdMode::Global, -3);
        assert!(matches!(encode(&big, &h), Err(CodecError::HeaderMismatch(_))));
        let mut h = header(Alphabet::ZeroBlock, 5, ThresholdMode::PerImage, -3);
        h.tilde_m = Some(4);
        assert!(matches!(encode(&big, &h), Err(CodecError::HeaderMismatch(_))));
    }

    #[test]
    fn global_bound_value_converges() {
        // |α| = 2^(m-1) exactly sits on the top edge of the first interval
        let mut c = CoefficientMatrix::zeros(5, 4, WaveletId::Haar);
        c.set(0, 0, 16.0);
        let seq = encode(&c, &header(Alphabet::ZeroBlock, 5, ThresholdMode::Global, -3)).unwrap();
        assert!(decode(&seq, None).unwrap().max_abs_diff(&c) < 0.125);
    }

    #[test]
    fn exclude_ll_round_trip_on_details() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_coeffs(5, &mut rng, 10.0, 0.3);
        let mut h = header(Alphabet::ZeroBlock, 5, ThresholdMode::PerImage, -3);
        h.exclude_ll = true;
        let d = decode(&encode(&c, &h).unwrap(), None).unwrap();
        for r in 0..32 {
            for col in 0..32 {
                if r < 2 && col < 2 {
                    assert_eq!(d.get(r, col), 0.0);
                } else {
                    assert!((d.get(r, col) - c.get(r, col)).abs() < 0.125);
                }
            }
        }
    }

    #[test]
    fn wtk_format() {
        let mut c = CoefficientMatrix::zeros(3, 2, WaveletId::Haar);
        c.set(1, 0, -3.0);
        let mut h = header(Alphabet::ZeroBlock, 3, ThresholdMode::PerImage, -1);
        h.class = Some(7);
        let seq = encode(&c, &h).unwrap();
        let text = seq.to_wtk();
        let expected_head = "alphabet=zeroblock\nwavelet=haar\nm=3\nthreshold_mode=per_image\ntilde_m=2\ntfinal_exp=-1\nclass=7\nexclude_ll=false\ntokens=";
        assert!(text.starts_with(expected_head), "{text}");
        assert!(text.ends_with('\n'));
        assert_eq!(TokenSequence::from_wtk(&text).unwrap(), seq);

        let g = TokenSequence {
            header: header(Alphabet::ZeroTree, 3, ThresholdMode::Global, 0),
            tokens: vec![Token::ZeroTree, Token::Insignificant],
        };
        let text = g.to_wtk();
        assert!(text.contains("tilde_m=none\n") && text.contains("class=none\n"));
        assert!(text.ends_with("tokens=ZI\n"));
        assert_eq!(TokenSequence::from_wtk(&text).unwrap(), g);

        let bad = text.replace("tokens=ZI", "tokens=ZQ");
        assert_eq!(TokenSequence::from_wtk(&bad), Err(CodecError::ForeignToken('Q', Alphabet::ZeroTree)));
        assert!(matches!(TokenSequence::from_wtk("alphabet=zeroblock\n"), Err(CodecError::Parse(_))));
    }
}
