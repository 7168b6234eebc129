//! Seed derivation for disjoint deterministic random streams.

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and up to three stream labels.
pub fn derive(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    mix64(mix64(mix64(mix64(seed) ^ a) ^ b) ^ c)
}
