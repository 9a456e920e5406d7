use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavelang::bpe::fit_bpe;
use wavelang::codec::{decode, encode, descendant_maxima, Alphabet, ScanState, SequenceHeader, ThresholdMode, TokenSet, Token};
use wavelang::dataset::{crop_center, pad_to_dyadic, RawImage};
use wavelang::dwt::{forward_dwt, inverse_dwt, CoefficientMatrix, WaveletId};
use wavelang::features::{featurize_sequence, FeatureConfig};
use wavelang::layout::{CoeffIndex, Geometry, ScanOrder};
use wavelang::model::{sample_next, Sampler};

fn coeffs_strategy() -> impl Strategy<Value = CoefficientMatrix> {
    (2u32..=5).prop_flat_map(|m| {
        let n = 1usize << (2 * m);
        let bound = 2f64.powi(m as i32 - 1);
        prop::collection::vec(
            prop_oneof![3 => Just(0.0), 2 => -bound..bound],
            n,
        )
        .prop_map(move |values| CoefficientMatrix {
            m,
            levels: m - 1,
            wavelet: WaveletId::Haar,
            values,
        })
    })
}

fn header(a: Alphabet, m: u32, mode: ThresholdMode, tfinal: i32, exclude_ll: bool) -> SequenceHeader {
    let mut h = SequenceHeader::new(a, WaveletId::Haar, m, mode, tfinal);
    h.exclude_ll = exclude_ll;
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn codec_round_trip_agreement_and_soundness(
        c in coeffs_strategy(),
        tfinal in -4i32..=1,
        global in any::<bool>(),
        exclude_ll in any::<bool>(),
    ) {
        let mode = if global { ThresholdMode::Global } else { ThresholdMode::PerImage };
        let mut decoded = Vec::new();
        for a in [Alphabet::ZeroBlock, Alphabet::ZeroTree] {
            let seq = encode(&c, &header(a, c.m, mode, tfinal, exclude_ll)).unwrap();
            // every emitted token is admissible at its state
            let mut st = ScanState::new(&seq.header).unwrap();
            for &t in &seq.tokens {
                prop_assert!(st.valid_next().contains(t));
                st.advance(t).unwrap();
            }
            prop_assert!(st.is_done());
            let d = decode(&seq, None).unwrap();
            let ll = c.ll_size();
            for r in 0..c.size() {
                for col in 0..c.size() {
                    let skip = exclude_ll && r < ll && col < ll;
                    if !skip {
                        prop_assert!((d.get(r, col) - c.get(r, col)).abs() < 2f64.powi(tfinal));
                    }
                }
            }
            decoded.push(d);
        }
        prop_assert_eq!(&decoded[0], &decoded[1]);
    }

    #[test]
    fn prefixes_always_decode(c in coeffs_strategy(), frac in 0.0f64..1.0) {
        let seq = encode(&c, &header(Alphabet::ZeroTree, c.m, ThresholdMode::PerImage, -2, false)).unwrap();
        let cut = (frac * seq.len() as f64) as usize;
        prop_assert!(decode(&seq, Some(cut)).is_ok());
    }

    #[test]
    fn descendant_maxima_match_brute_force(c in coeffs_strategy()) {
        let scan = ScanOrder::new(c.m, c.m - 1, true).unwrap();
        let size = c.size();
        let vals: Vec<f64> = scan.positions().iter().map(|i| c.values[i.flat(size)]).collect();
        let dm = descendant_maxima(&scan, &vals);
        let g = scan.geometry;
        for (p, idx) in scan.positions().iter().enumerate() {
            let brute = g
                .descendants(*idx)
                .map(|ds| ds.iter().map(|d| c.values[d.flat(size)].abs()).fold(0.0, f64::max))
                .unwrap_or(0.0);
            prop_assert_eq!(dm[p], brute);
        }
    }

    #[test]
    fn dwt_perfect_reconstruction(m in 1u32..=5, seed in any::<u64>(), cdf in any::<bool>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1usize << (2 * m);
        let pixels: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let img = wavelang::dataset::Image::new(m, pixels, None);
        let w = if cdf { WaveletId::Cdf97 } else { WaveletId::Haar };
        let levels = m.saturating_sub(1).max(1);
        let c = forward_dwt(&img, w, levels).unwrap();
        prop_assert!(c.max_abs() <= 2f64.powi(levels as i32) + 1e-9 || cdf);
        let back = inverse_dwt(&c).unwrap();
        let err = back.pixels.iter().zip(&img.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9);
    }

    #[test]
    fn padding_preserves_content(pixels in prop::collection::vec(0u8..=255, 784), m in 5u32..=6) {
        let raw = RawImage { rows: 28, cols: 28, pixels: pixels.iter().map(|&b| b as f64 / 255.0).collect(), label: Some(1) };
        let padded = pad_to_dyadic(&raw, m).unwrap();
        let mut a: Vec<u64> = raw.pixels.iter().filter(|&&p| p != 0.0).map(|p| p.to_bits()).collect();
        let mut b: Vec<u64> = padded.pixels.iter().filter(|&&p| p != 0.0).map(|p| p.to_bits()).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert_eq!(crop_center(&padded, 28, 28), raw);
    }

    #[test]
    fn parent_child_inverse(m in 2u32..=6, r in 0usize..64, c in 0usize..64) {
        let g = Geometry::new(m, m - 1).unwrap();
        let size = g.size();
        let idx = CoeffIndex::from_zero_based(r % size, c % size);
        if let Ok(kids) = g.children(idx) {
            for k in kids {
                prop_assert_eq!(g.parent(k), Some(idx));
            }
        }
        if let Some(p) = g.parent(idx) {
            prop_assert!(g.children(p).unwrap().contains(&idx));
        }
    }

    #[test]
    fn sampling_respects_mask(
        probs in prop::collection::vec(0.0f64..1.0, 7),
        mask_bits in 1u8..128,
        mode in 0u8..3,
        k in 1usize..8,
        p in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let a = Alphabet::ZeroBlock;
        let tokens: Vec<Token> = a.tokens().iter().enumerate().filter(|(i, _)| mask_bits & (1 << i) != 0).map(|(_, &t)| t).collect();
        let mask = TokenSet::of(&tokens);
        let sampler = match mode { 0 => Sampler::Greedy, 1 => Sampler::TopK(k), _ => Sampler::TopP(p) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            prop_assert!(mask.contains(sample_next(&probs, mask, a, sampler, &mut rng).unwrap()));
        }
    }

    #[test]
    fn feature_dimension_constant(c in coeffs_strategy()) {
        let seq = encode(&c, &header(Alphabet::ZeroBlock, c.m, ThresholdMode::PerImage, -1, false)).unwrap();
        let cfg = FeatureConfig::new(vec![-3, -2, -1, 0, 1, 2, 3, 4]);
        let dims: Vec<usize> = featurize_sequence(&seq.tokens, &seq.header, &cfg).unwrap().iter().map(|f| f.dim()).collect();
        prop_assert!(dims.iter().all(|&d| d == cfg.dim(Alphabet::ZeroBlock)));
    }

    #[test]
    fn bpe_fit_is_deterministic(corpus in prop::collection::vec(prop::collection::vec(0u32..6, 0..30), 1..6)) {
        prop_assert_eq!(fit_bpe(&corpus, 6, 20).unwrap(), fit_bpe(&corpus, 6, 20).unwrap());
    }
}
