//! Binary watermark keys and their routing paths.
//!
//! An `M`-bit key is split into `L` consecutive chunks of `log2(P)` bits
//! (most-significant bit first) and each chunk is read as the index of the
//! adapter to activate in the corresponding routed block. Indices are
//! 0-based; keys whose length does not equal `L * log2(P)` are rejected,
//! never padded.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("key has {got} bits but the routing layout needs {expected} (L={l} blocks x log2(P={p}))")]
    LengthMismatch { expected: usize, got: usize, l: usize, p: usize },
    #[error("adapter count P={0} is not a power of two")]
    PathsNotPowerOfTwo(usize),
    #[error("bit value {0} is not 0 or 1")]
    InvalidBit(u8),
    #[error("routing index {index} out of range for P={p}")]
    IndexOutOfRange { index: usize, p: usize },
    #[error("malformed key string {0:?}, expected \"M:hex\"")]
    MalformedKeyString(String),
    #[error("key string encodes a value outside {bits} bits")]
    HexOverflow { bits: usize },
    #[error("key must have at least one bit")]
    Empty,
}

/// An M-bit binary watermark key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WatermarkKey {
    bits: Vec<u8>,
}

impl WatermarkKey {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self, KeyError> {
        if bits.is_empty() {
            return Err(KeyError::Empty);
        }
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(KeyError::InvalidBit(bad));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Key length M.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of positions where the two keys differ.
    pub fn hamming_distance(&self, other: &WatermarkKey) -> Result<usize, KeyError> {
        if self.len() != other.len() {
            return Err(KeyError::LengthMismatch {
                expected: self.len(),
                got: other.len(),
                l: 0,
                p: 0,
            });
        }
        Ok(self
            .bits
            .iter()
            .zip(other.bits.iter())
            .filter(|(a, b)| a != b)
            .count())
    }

    /// Serializes as "M:hex" with the bit string read MSB-first as a
    /// big-endian integer, zero-padded to ceil(M/4) lowercase hex digits.
    pub fn to_hex_string(&self) -> String {
        let digits = self.len().div_ceil(4);
        let mut nibbles = vec![0u8; digits];
        // Pad the front so the last bit lands in the lowest nibble bit.
        let pad = digits * 4 - self.len();
        for (i, &b) in self.bits.iter().enumerate() {
            let pos = pad + i;
            nibbles[pos / 4] |= b << (3 - pos % 4);
        }
        let hex: String = nibbles
            .iter()
            .map(|n| char::from_digit(u32::from(*n), 16).unwrap())
            .collect();
        format!("{}:{}", self.len(), hex)
    }

    /// Parses the "M:hex" form produced by [`to_hex_string`](Self::to_hex_string).
    pub fn from_hex_string(s: &str) -> Result<Self, KeyError> {
        let (m_str, hex) = s
            .split_once(':')
            .ok_or_else(|| KeyError::MalformedKeyString(s.to_string()))?;
        let m: usize = m_str
            .parse()
            .map_err(|_| KeyError::MalformedKeyString(s.to_string()))?;
        if m == 0 {
            return Err(KeyError::Empty);
        }
        let digits = m.div_ceil(4);
        if hex.len() != digits {
            return Err(KeyError::MalformedKeyString(s.to_string()));
        }
        let pad = digits * 4 - m;
        let mut bits = Vec::with_capacity(m);
        for (i, c) in hex.chars().enumerate() {
            let n = c
                .to_digit(16)
                .ok_or_else(|| KeyError::MalformedKeyString(s.to_string()))?
                as u8;
            for j in 0..4 {
                let pos = i * 4 + j;
                let bit = (n >> (3 - j)) & 1;
                if pos < pad {
                    if bit != 0 {
                        return Err(KeyError::HexOverflow { bits: m });
                    }
                } else {
                    bits.push(bit);
                }
            }
        }
        Self::from_bits(bits)
    }
}

/// The per-block adapter selection derived from a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingPath {
    indices: Vec<usize>,
    paths_per_block: usize,
}

impl RoutingPath {
    pub fn new(indices: Vec<usize>, paths_per_block: usize) -> Result<Self, KeyError> {
        if !paths_per_block.is_power_of_two() || paths_per_block < 2 {
            return Err(KeyError::PathsNotPowerOfTwo(paths_per_block));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= paths_per_block) {
            return Err(KeyError::IndexOutOfRange { index: bad, p: paths_per_block });
        }
        Ok(Self { indices, paths_per_block })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Number of routed blocks L.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Adapters per block P.
    pub fn paths_per_block(&self) -> usize {
        self.paths_per_block
    }
}

/// Bits carried by each routed block for `paths` adapters.
pub fn bits_per_block(paths: usize) -> Result<usize, KeyError> {
    if !paths.is_power_of_two() || paths < 2 {
        return Err(KeyError::PathsNotPowerOfTwo(paths));
    }
    Ok(paths.trailing_zeros() as usize)
}

/// Splits the key into L chunks of log2(P) bits, MSB first, and converts
/// each chunk to its 0-based adapter index.
pub fn encode_routing(key: &WatermarkKey, blocks: usize, paths: usize) -> Result<RoutingPath, KeyError> {
    let chunk = bits_per_block(paths)?;
    let expected = blocks * chunk;
    if key.len() != expected {
        return Err(KeyError::LengthMismatch {
            expected,
            got: key.len(),
            l: blocks,
            p: paths,
        });
    }
    let indices = key
        .bits()
        .chunks(chunk)
        .map(|c| c.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b)))
        .collect();
    RoutingPath::new(indices, paths)
}

/// Inverse of [`encode_routing`]: expands each index back to its
/// log2(P)-bit chunk, MSB first.
pub fn decode_key(path: &RoutingPath) -> Result<WatermarkKey, KeyError> {
    let chunk = bits_per_block(path.paths_per_block())?;
    let mut bits = Vec::with_capacity(path.len() * chunk);
    for &idx in path.indices() {
        for j in (0..chunk).rev() {
            bits.push(((idx >> j) & 1) as u8);
        }
    }
    WatermarkKey::from_bits(bits)
}

/// Samples an M-bit key with i.i.d. uniform bits, deterministic per seed.
pub fn sample_key(bits: usize, seed: u64) -> WatermarkKey {
    assert!(bits >= 1, "key must have at least one bit");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = (0..bits).map(|_| u8::from(rng.gen::<bool>())).collect();
    WatermarkKey { bits }
}

/// Samples a key from an already-running RNG (used by the trainer).
pub fn sample_key_with<R: Rng>(bits: usize, rng: &mut R) -> WatermarkKey {
    assert!(bits >= 1, "key must have at least one bit");
    let bits = (0..bits).map(|_| u8::from(rng.gen::<bool>())).collect();
    WatermarkKey { bits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_key_routes_to_zero_indices() {
        let key = WatermarkKey::from_bits(vec![0, 0, 0, 0]).unwrap();
        let path = encode_routing(&key, 2, 4).unwrap();
        assert_eq!(path.indices(), &[0, 0]);
    }

    #[test]
    fn chunks_convert_msb_first() {
        let key = WatermarkKey::from_bits(vec![1, 1, 0, 1]).unwrap();
        let path = encode_routing(&key, 2, 4).unwrap();
        assert_eq!(path.indices(), &[3, 1]);
        assert_eq!(decode_key(&path).unwrap(), key);
    }

    #[test]
    fn paper_default_dimensions() {
        let key = sample_key(28, 7);
        let path = encode_routing(&key, 14, 4).unwrap();
        assert_eq!(path.len(), 14);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let key = sample_key(10, 3);
        let err = encode_routing(&key, 4, 4).unwrap_err();
        assert!(matches!(err, KeyError::LengthMismatch { expected: 8, got: 10, .. }));
    }

    #[test]
    fn non_power_of_two_paths_rejected() {
        let key = sample_key(6, 3);
        assert_eq!(encode_routing(&key, 2, 3).unwrap_err(), KeyError::PathsNotPowerOfTwo(3));
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_key(4, 99), sample_key(4, 99));
        assert_ne!(sample_key(64, 1), sample_key(64, 2));
        let k = sample_key(1, 5);
        assert!(k.bits()[0] <= 1);
    }

    #[test]
    fn per_position_means_are_near_half() {
        let m = 28;
        let n = 10_000;
        let mut counts = vec![0u32; m];
        for seed in 0..n {
            for (c, &b) in counts.iter_mut().zip(sample_key(m, seed).bits()) {
                *c += u32::from(b);
            }
        }
        for &c in &counts {
            let mean = f64::from(c) / f64::from(n as u32);
            assert!((0.45..=0.55).contains(&mean), "position mean {mean} outside [0.45, 0.55]");
        }
    }

    #[test]
    fn uniform_keys_induce_uniform_indices() {
        // Chi-square over routing indices, 4 categories, significance 0.01.
        let n = 10_000usize;
        let mut counts = [0usize; 4];
        for seed in 0..n as u64 {
            let key = sample_key(16, seed ^ 0xabcd_1234);
            let path = encode_routing(&key, 8, 4).unwrap();
            for &i in path.indices() {
                counts[i] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 3 degrees of freedom, upper 1% point.
        assert!(chi2 < 11.345, "chi-square {chi2} exceeds the 1% critical value");
    }

    #[test]
    fn hex_roundtrip_and_format() {
        let key = WatermarkKey::from_bits(vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(key.to_hex_string(), "8:0f");
        assert_eq!(WatermarkKey::from_hex_string("8:0f").unwrap(), key);

        // Non-multiple-of-4 lengths pad at the front.
        let key = WatermarkKey::from_bits(vec![1, 0, 1, 1, 0, 1]).unwrap();
        let s = key.to_hex_string();
        assert_eq!(s, "6:2d");
        assert_eq!(WatermarkKey::from_hex_string(&s).unwrap(), key);

        assert!(WatermarkKey::from_hex_string("6:ff").is_err());
        assert!(WatermarkKey::from_hex_string("junk").is_err());
        assert!(WatermarkKey::from_hex_string("8:0").is_err());
    }

    #[test]
    fn flipping_one_bit_changes_exactly_its_chunk_index() {
        for p in [2usize, 4, 8] {
            let chunk = bits_per_block(p).unwrap();
            let l = 6;
            let key = sample_key(l * chunk, 17);
            let base = encode_routing(&key, l, p).unwrap();
            for j in 0..key.len() {
                let mut bits = key.bits().to_vec();
                bits[j] ^= 1;
                let flipped = encode_routing(&WatermarkKey::from_bits(bits).unwrap(), l, p).unwrap();
                let changed: Vec<usize> = (0..l)
                    .filter(|&i| base.indices()[i] != flipped.indices()[i])
                    .collect();
                assert_eq!(changed, vec![j / chunk]);
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact(l in 1usize..=16, p_pow in 1u32..=3, seed in any::<u64>()) {
            let p = 1usize << p_pow;
            let chunk = bits_per_block(p).unwrap();
            let key = sample_key(l * chunk, seed);
            let path = encode_routing(&key, l, p).unwrap();
            prop_assert_eq!(decode_key(&path).unwrap(), key);
        }

        #[test]
        fn hex_roundtrip(m in 1usize..=64, seed in any::<u64>()) {
            let key = sample_key(m, seed);
            let s = key.to_hex_string();
            prop_assert_eq!(WatermarkKey::from_hex_string(&s).unwrap(), key);
        }
    }
}
