//! Explicit, seed-derived random streams. Nothing in the crate uses an
//! ambient generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Element, Tensor};

pub type StreamRng = ChaCha8Rng;

/// Mixes a tag into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tag from a short label, so call sites read `derive_seed(seed, tag("shuffle"))`.
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3))
}

/// Independent stream `index` of the generator seeded by `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn normal<F: Element, R: Rng + ?Sized>(rng: &mut R) -> F {
    F::of(rng.sample::<f64, _>(StandardNormal))
}

pub fn fill_normal<F: Element, R: Rng + ?Sized>(out: &mut [F], rng: &mut R) {
    for v in out {
        *v = normal(rng);
    }
}

pub fn normal_tensor<F: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let mut t = Tensor::zeros(shape);
    fill_normal(t.data_mut(), rng);
    t
}
