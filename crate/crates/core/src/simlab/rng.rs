//! FNV-1a and splitmix64: the only sources of "randomness" in the simulated lab.

pub const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
pub const FNV_PRIME: u64 = 1_099_511_628_211;

pub fn fnv1a64(data: &[u8]) -> u64 {
    data.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercase 16-hex-digit form of [`fnv1a64`].
pub fn fnv1a64_hex(data: &[u8]) -> String {
    format!("{:016x}", fnv1a64(data))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PrngState(pub u64);

impl PrngState {
    pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn next_u64(&mut self) -> u64 {
        let (next, out) = splitmix64_next(*self);
        *self = next;
        out
    }
}

pub fn splitmix64_next(s: PrngState) -> (PrngState, u64) {
    let state = s.0.wrapping_add(PrngState::GAMMA);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (PrngState(state), z ^ (z >> 31))
}
