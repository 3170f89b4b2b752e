//! Single-byte corruption of a stored chain file.

use std::path::Path;

use rand::rngs::StdRng;
use rand::Rng;

/// Flips one byte of `original` to a different value, writes the result to
/// `path`, and returns the seq of the line that was hit.
pub fn tamper_once(path: &Path, original: &[u8], rng: &mut StdRng) -> u64 {
    let pos = rng.random_range(0..original.len());
    let mut bytes = original.to_vec();
    let old = bytes[pos];
    let mut new = rng.random::<u8>();
    while new == old {
        new = rng.random::<u8>();
    }
    bytes[pos] = new;
    std::fs::write(path, &bytes).unwrap();
    original[..pos].iter().filter(|&&b| b == b'\n').count() as u64
}
