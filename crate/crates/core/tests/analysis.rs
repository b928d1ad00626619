//! Analytic models against brute-force oracles, and the packed format
//! against a hand-written decoder.

mod common;

use common::*;
use nmslope::analysis::{
    flop_model, inference_memory_ratio, listed_training_bits, theorem1_check, theorem1_error_curve,
    training_memory_bits, BitBudget, MaskFamily,
};
use nmslope::nm::{format, lemma1_analytic, lemma1_monte_carlo, random_mask};
use nmslope::rng::rng_from_seed;
use nmslope::{DenseMatrix, NmCompressed};

/// Expected fraction of entries removed by column-wise pruning when each of
/// the `m` entries of a column group survives row pruning independently
/// with probability `n/m`, by enumerating all `2^m` survivor sets.
fn imposed_sparsity_by_enumeration(n: usize, m: usize) -> f64 {
    let s = n as f64 / m as f64;
    (0u64..1 << m)
        .map(|set| {
            let k = set.count_ones() as usize;
            let p = s.powi(k as i32) * (1.0 - s).powi((m - k) as i32);
            p * k.saturating_sub(n) as f64 / m as f64
        })
        .sum()
}

#[test]
fn lemma_matches_enumeration() {
    for &(n, m) in &[(1, 2), (2, 4), (2, 8), (4, 8), (1, 4), (3, 4), (4, 16)] {
        let got = lemma1_analytic(pattern(n, m));
        let want = imposed_sparsity_by_enumeration(n, m);
        assert!((got - want).abs() < 1e-14, "{n}:{m}: {got} vs {want}");
    }
    assert_eq!(lemma1_analytic(pattern(1, 2)), 0.125);
    assert_eq!(lemma1_analytic(pattern(2, 4)), 0.09375);
}

#[test]
fn lemma_monte_carlo_agrees() {
    for &(n, m) in &[(1, 2), (2, 4), (2, 8), (4, 8)] {
        let p = pattern(n, m);
        let mc = lemma1_monte_carlo(p, 128, 40, 7).unwrap();
        assert!(mc.z_score(lemma1_analytic(p)) < 4.0, "{n}:{m}: {mc:?}");
    }
}

#[test]
fn masked_estimator_is_unbiased_and_converges() {
    let mut rng = rng_from_seed(4);
    let w = DenseMatrix::<f64>::random_normal(16, 16, 1.0, &mut rng);
    let dy = DenseMatrix::<f64>::random_normal(8, 16, 1.0, &mut rng);
    let r = theorem1_check(&w, &dy, pattern(2, 4), 4000, 1).unwrap();
    for s in [&r.bernoulli, &r.structured] {
        assert!(s.max_z < 5.0, "{s:?}");
    }
    let curve = theorem1_error_curve(&w, &dy, pattern(2, 4), MaskFamily::Bernoulli, &[40, 400, 4000], 2).unwrap();
    assert!((-0.7..=-0.3).contains(&curve.slope), "{}", curve.slope);
}

#[test]
fn footprint_numbers() {
    let b = BitBudget::default();
    // per group of 4: 2 x (2 x 16 + 3) + 4 x 8 + 2 x 16 + 2 x 64 over 4 x 96
    let per_value = training_memory_bits(&b, pattern(2, 4));
    assert_eq!(per_value.sparse_total, 70.0 + 32.0 + 32.0 + 128.0);
    assert_eq!(per_value.dense_total, 384.0);
    assert_eq!(listed_training_bits(&b, pattern(2, 4)).sparse_total, 38.0 + 32.0 + 32.0 + 128.0);
    assert_eq!(inference_memory_ratio(pattern(2, 4), 512, 512, 0, 16).unwrap(), 35.0 / 64.0);
    assert_eq!(flop_model(8, 64, 64, pattern(2, 4), 0).unwrap().ratio, 0.5);
    assert_eq!(flop_model(8, 64, 64, pattern(2, 8), 0).unwrap().ratio, 0.25);
}

/// Reads an `NMC1` stream field by field from the documented layout.
fn decode_by_hand(bytes: &[u8]) -> (usize, usize, usize, usize, Vec<u64>, Vec<f32>) {
    assert_eq!(&bytes[..4], b"NMC1");
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (rows, cols, n, m) = (u32_at(4), u32_at(8), bytes[12] as usize, bytes[13] as usize);
    assert_eq!(bytes[14], 1);
    assert_eq!(bytes[15], 0);
    let mut combos = 1u64;
    for i in 0..n {
        combos = combos * (m - i) as u64 / (i + 1) as u64;
    }
    let bits = (64 - (combos - 1).leading_zeros()) as usize * usize::from(combos > 1);
    let groups = cols / m;
    let row_bytes = (groups * bits).div_ceil(8);
    let mut codes = Vec::new();
    for r in 0..rows {
        let row = &bytes[16 + r * row_bytes..16 + (r + 1) * row_bytes];
        for g in 0..groups {
            let mut code = 0u64;
            for b in 0..bits {
                let bit = g * bits + b;
                code |= u64::from((row[bit / 8] >> (bit % 8)) & 1) << b;
            }
            codes.push(code);
        }
    }
    let values = bytes[16 + rows * row_bytes..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    (rows, cols, n, m, codes, values)
}

#[test]
fn packed_format_matches_layout() {
    for (seed, &(n, m)) in PATTERNS.iter().enumerate() {
        let mut rng = rng_from_seed(seed as u64);
        let d = DenseMatrix::<f32>::random_normal(5, 3 * m, 1.0, &mut rng);
        let w = NmCompressed::compress(&d, &random_mask(5, 3 * m, pattern(n, m), seed as u64).unwrap()).unwrap();
        let bytes = format::encode(&w).unwrap();
        let (rows, cols, bn, bm, codes, values) = decode_by_hand(&bytes);
        assert_eq!((rows, cols, bn, bm), (5, 3 * m, n, m));
        assert_eq!(codes, w.codes());
        assert_eq!(values, w.values());
        assert_eq!(format::decode::<f32>(&bytes).unwrap(), w);
    }
}
