//! Separable 2-D multi-level DWT (Haar and CDF 9/7 / bior4.4) in the Mallat layout.
//!
//! Each level filters the rows of the current low-pass block and then its
//! columns. Low-pass outputs land in the first half of every row/column, so
//! after one level the top-left quadrant is LL, the top-right quadrant is the
//! horizontally high-passed band (HL), bottom-left is LH and bottom-right HH.
//! Both analysis filter pairs are normalized to a DC gain of `sqrt(2)`, which
//! gives LL values of at most `2^levels` for pixels in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::Image;

#[derive(Debug, Error, PartialEq)]
pub enum DwtError {
    #[error("{levels} levels requested but the image only supports {max}")]
    TooManyLevels { levels: u32, max: u32 },
    #[error("coefficient layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("unknown wavelet `{0}`")]
    UnknownWavelet(String),
    #[error("malformed coefficient dump: {0}")]
    BadDump(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WaveletId {
    Haar,
    Cdf97,
}

impl WaveletId {
    pub fn as_str(self) -> &'static str {
        match self {
            WaveletId::Haar => "haar",
            WaveletId::Cdf97 => "cdf97",
        }
    }

    pub fn spec(self) -> &'static WaveletSpec {
        match self {
            WaveletId::Haar => &HAAR,
            WaveletId::Cdf97 => &CDF97,
        }
    }
}

impl fmt::Display for WaveletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WaveletId {
    type Err = DwtError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "haar" => Ok(WaveletId::Haar),
            "cdf97" | "bior4.4" => Ok(WaveletId::Cdf97),
            other => Err(DwtError::UnknownWavelet(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    /// Whole-sample symmetric: `x[-k] = x[k]`, `x[N-1+k] = x[N-1-k]`.
    Symmetric,
}

/// A filter whose tap `taps[i]` multiplies the sample at `center + offset + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub offset: isize,
    pub taps: &'static [f64],
}

impl Filter {
    fn span(&self) -> std::ops::Range<isize> {
        self.offset..self.offset + self.taps.len() as isize
    }

    fn tap(&self, k: isize) -> f64 {
        let i = k - self.offset;
        if i < 0 || i >= self.taps.len() as isize {
            0.0
        } else {
            self.taps[i as usize]
        }
    }
}

/// Analysis/synthesis filter bank of a biorthogonal wavelet.
///
/// Analysis low-pass outputs are centered on even samples and high-pass
/// outputs on odd samples; synthesis filters are indexed relative to the
/// sample position of the coefficient they spread.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletSpec {
    pub id: WaveletId,
    pub analysis_lowpass: Filter,
    pub analysis_highpass: Filter,
    pub synthesis_lowpass: Filter,
    pub synthesis_highpass: Filter,
    pub vanishing_moments: u32,
    pub boundary: Boundary,
}

const R2: f64 = std::f64::consts::FRAC_1_SQRT_2;

static HAAR_LO: [f64; 2] = [R2, R2];
static HAAR_HI: [f64; 2] = [R2, -R2];

// bior4.4 taps, low-pass DC gain sqrt(2).
const H0: f64 = 0.852_698_679_008_893_8;
const H1: f64 = 0.377_402_855_612_830_7;
const H2: f64 = -0.110_624_404_418_437_2;
const H3: f64 = -0.023_849_465_019_556_84;
const H4: f64 = 0.037_828_455_507_264_04;
const G0: f64 = 0.788_485_616_405_582_9;
const G1: f64 = -0.418_092_273_221_617_2;
const G2: f64 = -0.040_689_417_609_164_06;
const G3: f64 = 0.064_538_882_628_697_06;

static CDF97_ALO: [f64; 9] = [H4, H3, H2, H1, H0, H1, H2, H3, H4];
static CDF97_AHI: [f64; 7] = [G3, G2, G1, G0, G1, G2, G3];
static CDF97_SLO: [f64; 7] = [-G3, G2, -G1, G0, -G1, G2, -G3];
static CDF97_SHI: [f64; 9] = [H4, -H3, H2, -H1, H0, -H1, H2, -H3, H4];

pub static HAAR: WaveletSpec = WaveletSpec {
    id: WaveletId::Haar,
    analysis_lowpass: Filter {
        offset: 0,
        taps: &HAAR_LO,
    },
    analysis_highpass: Filter {
        offset: -1,
        taps: &HAAR_HI,
    },
    synthesis_lowpass: Filter {
        offset: 0,
        taps: &HAAR_LO,
    },
    synthesis_highpass: Filter {
        offset: -1,
        taps: &HAAR_HI,
    },
    vanishing_moments: 1,
    boundary: Boundary::Periodic,
};

pub static CDF97: WaveletSpec = WaveletSpec {
    id: WaveletId::Cdf97,
    analysis_lowpass: Filter {
        offset: -4,
        taps: &CDF97_ALO,
    },
    analysis_highpass: Filter {
        offset: -3,
        taps: &CDF97_AHI,
    },
    synthesis_lowpass: Filter {
        offset: -3,
        taps: &CDF97_SLO,
    },
    synthesis_highpass: Filter {
        offset: -4,
        taps: &CDF97_SHI,
    },
    vanishing_moments: 4,
    boundary: Boundary::Symmetric,
};

fn extend(i: isize, n: usize, boundary: Boundary) -> usize {
    let n = n as isize;
    match boundary {
        Boundary::Periodic => i.rem_euclid(n) as usize,
        Boundary::Symmetric => {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i.rem_euclid(period);
            (if r < n { r } else { period - r }) as usize
        }
    }
}

impl WaveletSpec {
    /// One analysis step on `x` (even length); writes `[low | high]` into `out`.
    pub fn analyze_1d(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let half = n / 2;
        for k in 0..half {
            let even = 2 * k as isize;
            let mut lo = 0.0;
            for (i, &t) in self.analysis_lowpass.taps.iter().enumerate() {
                lo += t * x[extend(even + self.analysis_lowpass.offset + i as isize, n, self.boundary)];
            }
            let odd = even + 1;
            let mut hi = 0.0;
            for (i, &t) in self.analysis_highpass.taps.iter().enumerate() {
                hi += t * x[extend(odd + self.analysis_highpass.offset + i as isize, n, self.boundary)];
            }
            out[k] = lo;
            out[half + k] = hi;
        }
    }

    /// Inverse of [`analyze_1d`](Self::analyze_1d): `coeffs` holds `[low | high]`.
    pub fn synthesize_1d(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = coeffs.len();
        let half = n / 2;
        // interleaved view: y[2k] = low[k], y[2k+1] = high[k]
        let y = |i: usize| {
            if i % 2 == 0 {
                coeffs[i / 2]
            } else {
                coeffs[half + i / 2]
            }
        };
        let lo = &self.synthesis_lowpass;
        let hi = &self.synthesis_highpass;
        let reach = lo.span().start.min(hi.span().start).abs().max(lo.span().end.max(hi.span().end));
        for (j, o) in out.iter_mut().enumerate() {
            let j = j as isize;
            let mut acc = 0.0;
            // coefficient at sample i contributes filter[j - i]
            for i in (j - reach)..=(j + reach) {
                let k = j - i;
                let f = if i.rem_euclid(2) == 0 { lo.tap(k) } else { hi.tap(k) };
                if f != 0.0 {
                    acc += f * y(extend(i, n, self.boundary));
                }
            }
            *o = acc;
        }
    }
}

/// `M x M` wavelet coefficients in Mallat layout, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    pub m: u32,
    pub levels: u32,
    pub wavelet: WaveletId,
    pub values: Vec<f64>,
}

impl CoefficientMatrix {
    pub fn zeros(m: u32, levels: u32, wavelet: WaveletId) -> Self {
        Self {
            m,
            levels,
            wavelet,
            values: vec![0.0; 1usize << (2 * m)],
        }
    }

    pub fn size(&self) -> usize {
        1 << self.m
    }

    /// Side length of the scaling (LL) block.
    pub fn ll_size(&self) -> usize {
        1 << (self.m - self.levels)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let size = self.size();
        self.values[row * size + col] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &CoefficientMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }

    pub fn l2_diff(&self, other: &CoefficientMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Text dump: `m=<m> levels=<l> wavelet=<id>` then one value per line.
    pub fn to_dump(&self) -> String {
        let mut s = format!("m={} levels={} wavelet={}\n", self.m, self.levels, self.wavelet);
        for v in &self.values {
            s.push_str(&format!("{v:?}\n"));
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Self, DwtError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DwtError::BadDump("empty".into()))?;
        let (mut m, mut levels, mut wavelet) = (None, None, None);
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| DwtError::BadDump(format!("bad header field `{field}`")))?;
            let bad = |_| DwtError::BadDump(format!("bad value in `{field}`"));
            match k {
                "m" => m = Some(v.parse::<u32>().map_err(bad)?),
                "levels" => levels = Some(v.parse::<u32>().map_err(bad)?),
                "wavelet" => wavelet = Some(v.parse::<WaveletId>()?),
                _ => return Err(DwtError::BadDump(format!("unknown key `{k}`"))),
            }
        }
        let (Some(m), Some(levels), Some(wavelet)) = (m, levels, wavelet) else {
            return Err(DwtError::BadDump("incomplete header".into()));
        };
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| DwtError::BadDump(format!("bad value `{l}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != 1usize << (2 * m) {
            return Err(DwtError::LayoutMismatch(format!(
                "{} values for m={m}",
                values.len()
            )));
        }
        Ok(Self {
            m,
            levels,
            wavelet,
            values,
        })
    }
}

/// Forward transform of a dyadic image with `levels` decomposition levels.
pub fn forward_dwt(img: &Image, wavelet: WaveletId, levels: u32) -> Result<CoefficientMatrix, DwtError> {
    forward_dwt_raw(img.m, &img.pixels, wavelet, levels)
}

pub fn forward_dwt_raw(
    m: u32,
    pixels: &[f64],
    wavelet: WaveletId,
    levels: u32,
) -> Result<CoefficientMatrix, DwtError> {
    if levels > m {
        return Err(DwtError::TooManyLevels { levels, max: m });
    }
    let size = 1usize << m;
    if pixels.len() != size * size {
        return Err(DwtError::LayoutMismatch(format!(
            "{} pixels for m={m}",
            pixels.len()
        )));
    }
    let spec = wavelet.spec();
    let mut v = pixels.to_vec();
    let mut line = vec![0.0; size];
    let mut out = vec![0.0; size];
    let mut n = size;
    for _ in 0..levels {
        for r in 0..n {
            spec.analyze_1d(&v[r * size..r * size + n], &mut out[..n]);
            v[r * size..r * size + n].copy_from_slice(&out[..n]);
        }
        for c in 0..n {
            for r in 0..n {
                line[r] = v[r * size + c];
            }
            spec.analyze_1d(&line[..n], &mut out[..n]);
            for r in 0..n {
                v[r * size + c] = out[r];
            }
        }
        n /= 2;
    }
    Ok(CoefficientMatrix {
        m,
        levels,
        wavelet,
        values: v,
    })
}

/// Inverse transform; the result may leave `[0, 1]`.
pub fn inverse_dwt(coeffs: &CoefficientMatrix) -> Result<Image, DwtError> {
    let size = coeffs.size();
    if coeffs.levels > coeffs.m {
        return Err(DwtError::TooManyLevels {
            levels: coeffs.levels,
            max: coeffs.m,
        });
    }
    if coeffs.values.len() != size * size {
        return Err(DwtError::LayoutMismatch(format!(
            "{} values for m={}",
            coeffs.values.len(),
            coeffs.m
        )));
    }
    let spec = coeffs.wavelet.spec();
    let mut v = coeffs.values.clone();
    let mut line = vec![0.0; size];
    let mut out = vec![0.0; size];
    for level in (0..coeffs.levels).rev() {
        let n = size >> level;
        for c in 0..n {
            for r in 0..n {
                line[r] = v[r * size + c];
            }
            spec.synthesize_1d(&line[..n], &mut out[..n]);
            for r in 0..n {
                v[r * size + c] = out[r];
            }
        }
        for r in 0..n {
            spec.synthesize_1d(&v[r * size..r * size + n], &mut out[..n]);
            v[r * size..r * size + n].copy_from_slice(&out[..n]);
        }
    }
    Ok(Image {
        m: coeffs.m,
        pixels: v,
        label: None,
    })
}
