use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Stream identifiers for the independent consumers of randomness.
pub mod streams {
    pub const TASK_SWITCH: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const TOKEN_DROP: u64 = 3;
    pub const FRAME_SELECT: u64 = 4;
    pub const VIEW_DROP: u64 = 5;
    pub const DATA: u64 = 6;
    pub const INIT: u64 = 7;
    pub const BASIS: u64 = 8;
    pub const PERTURBATION: u64 = 9;
    pub const SAMPLER: u64 = 10;
    pub const MEASURE: u64 = 11;
}

/// Deterministic random stream addressed by `(seed, stream_id)`.
///
/// Backed by ChaCha12, a counter-based generator: the same address yields the
/// same sequence on every platform and distinct stream ids give independent
/// sequences. Each [`uniform`](Self::uniform) draw consumes exactly two
/// 32-bit words.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Child stream for sub-item `index`, independent of how many draws the
    /// parent has made.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream::new(mix(self.seed, index), self.stream_id)
    }
}

/// SplitMix64-style combination of two words.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
