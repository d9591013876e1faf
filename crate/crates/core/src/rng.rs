//! Counter-keyed random streams.
//!
//! Every random tensor is drawn from its own ChaCha8 stream selected by
//! `(seed, replicate)` for the key and a tensor id for the stream number, so
//! sampling order and thread count never change the values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Well-known tensor-id domains. Network tensors use small ids; other
/// consumers offset into their own range.
pub mod domain {
    pub const NETWORK: u64 = 0;
    pub const INPUT: u64 = 1 << 40;
    pub const ATTACK: u64 = 2 << 40;
    pub const SHUFFLE: u64 = 3 << 40;
    pub const MISC: u64 = 4 << 40;
}

pub fn stream(seed: u64, replicate: u64, tensor: u64) -> ChaCha8Rng {
    let a = splitmix64(seed);
    let b = splitmix64(a ^ splitmix64(replicate.wrapping_add(0x5851_f42d_4c95_7f2d)));
    let c = splitmix64(b);
    let d = splitmix64(c);
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_mut(8).zip([a, b, c, d]) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(tensor);
    rng
}

pub fn fill_normal(rng: &mut ChaCha8Rng, std: f64, out: &mut [f64]) {
    if std == 0.0 {
        out.fill(0.0);
        return;
    }
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = std * z;
    }
}

pub fn normal_vec(seed: u64, replicate: u64, tensor: u64, std: f64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, replicate, tensor);
    let mut v = vec![0.0; n];
    fill_normal(&mut rng, std, &mut v);
    v
}
