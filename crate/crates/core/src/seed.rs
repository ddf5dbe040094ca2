//! Deterministic seed derivation.

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream index.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derives a seed from a parent and several indices, applied left to right.
pub fn derive_all(seed: u64, streams: &[u64]) -> u64 {
    streams.iter().fold(seed, |s, &i| derive(s, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_streams() {
        let a: Vec<u64> = (0..1000).map(|i| derive(42, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), a.len());
        assert_ne!(derive(1, 0), derive(2, 0));
        assert_ne!(derive_all(1, &[2, 3]), derive_all(1, &[3, 2]));
    }
}
