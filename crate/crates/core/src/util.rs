//! Small shared helpers: fingerprints, checksums, canonical sums.

use alloc::string::String;
use alloc::vec::Vec;

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Hex string of a 64-bit hash, used as config/checkpoint fingerprints.
pub fn hex64(h: u64) -> String {
    let mut s = String::with_capacity(16);
    for i in (0..16).rev() {
        let nibble = ((h >> (i * 4)) & 0xf) as u8;
        s.push(char::from_digit(nibble as u32, 16).unwrap());
    }
    s
}

/// Checksum over a float slice, stable across runs on one platform.
pub fn f64_checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Sum in ascending value order.
///
/// Gives one canonical result for any permutation of `values`, which backs
/// the bitwise permutation-invariance contracts of backdoor averaging and
/// report aggregation. Ties are fine: equal values add identically either way.
pub fn canonical_sum(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("NaN in canonical_sum"));
    let mut acc = 0.0;
    for v in values.iter() {
        acc += v;
    }
    acc
}

/// Mean via [`canonical_sum`].
pub fn canonical_mean(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    canonical_sum(values) / n
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}
