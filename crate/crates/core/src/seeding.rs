//! Derivation of independent RNG stream seeds.

/// One round of the splitmix64 finaliser.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the RNG stream for one (item, sub-stream) pair under `base`.
///
/// The components are hashed before combining so distinct pairs never
/// collide the way a bare XOR of small indices would.
pub fn stream_seed(base: u64, item: u64, sub: u64) -> u64 {
    splitmix(base ^ splitmix(item ^ splitmix(sub.wrapping_add(0x5EED))))
}
