//! Counter-based deterministic random streams.
//!
//! Every source of randomness in this crate is a `RandomStream`: a
//! (seed, stream id, counter) triple hashed through a SplitMix64-style
//! finalizer. The same triple produces the same value on every platform,
//! so workers, the coordinator, and data generation can each own a
//! stream without sharing mutable state. Not cryptographically secure.

/// Stream domains. Each subsystem derives its streams from one of these
/// so that no two subsystems ever consume the same underlying sequence.
pub mod domains {
    pub const COORDINATOR: u64 = 0x01;
    pub const JITTER: u64 = 0x02;
    pub const TASK_DATA: u64 = 0x03;
    pub const MODEL_INIT: u64 = 0x04;
    pub const BATCH_DATA: u64 = 0x05;
}

/// SplitMix64 finalizer: a bijective avalanche mix on 64 bits.
#[inline]
pub(crate) fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A deterministic random stream addressed by (seed, stream_id, counter).
///
/// Identical (seed, stream_id) pairs yield identical sequences; distinct
/// stream ids yield statistically independent sequences. Each draw
/// advances `counter` by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id, counter: 0 }
    }

    /// Stream for entity `index` inside a domain (e.g. the jitter stream
    /// of one token). Bijective in `index` within a domain.
    pub fn for_stream(seed: u64, domain: u64, index: u64) -> Self {
        Self::new(seed, mix64(domain).wrapping_add(index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Next raw 64-bit value; advances the counter by one.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let h = mix64(
            self.seed
                .wrapping_add(mix64(self.stream_id.wrapping_add(mix64(self.counter)))),
        );
        self.counter += 1;
        h
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 high bits -> the full f64 mantissa range.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform_f32(&mut self) -> f32 {
        self.uniform() as f32
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform_range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform_f32()
    }

    /// Standard normal via Box-Muller; consumes two uniforms.
    pub fn normal_f32(&mut self) -> f32 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }
}
