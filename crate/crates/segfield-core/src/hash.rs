//! Small deterministic hashing helpers used for checksums, cache keys and
//! per-name RNG seeding. Not cryptographic.

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag; used so each consumer
/// (init, ray sampling, jitter) gets an independent deterministic stream.
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut state = seed ^ fnv1a64(tag.as_bytes());
    splitmix64(&mut state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_known_vector() {
        // FNV-1a 64 of empty input is the offset basis.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn mixed_seeds_differ_by_tag() {
        assert_ne!(mix_seed(7, "init"), mix_seed(7, "rays"));
        assert_eq!(mix_seed(7, "init"), mix_seed(7, "init"));
    }
}
