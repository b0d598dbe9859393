//! Inputs shared by the benchmarks.

use partsep::{Mixture, Note};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A chorale-sized random mixture: `n` notes over four parts, each part in
/// its own register with some overlap.
pub fn random_mixture(n: usize, seed: u64) -> Mixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tagged: Vec<(Note, usize)> = (0..n)
        .map(|i| {
            let part = i % 4;
            let note = Note {
                time: (i / 4) as u32 * 12 + rng.random_range(0..6),
                pitch: 72 - 8 * part as u8 + rng.random_range(0..9),
                duration: [6, 12, 24][rng.random_range(0..3)],
            };
            (note, part)
        })
        .collect();
    tagged.sort();
    let (notes, labels) = tagged.into_iter().unzip();
    Mixture::new(notes, labels, 4).expect("sorted random notes")
}
