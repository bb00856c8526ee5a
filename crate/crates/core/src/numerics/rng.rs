use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded ChaCha stream. Children created with [`FlowRng::split`] live on
/// distinct stream ids derived from the parent's, so they never overlap and
/// do not advance the parent.
#[derive(Clone, Debug)]
pub struct FlowRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl FlowRng {
    pub fn new(seed: u64) -> Self {
        Self::on_stream(seed, 0)
    }

    fn on_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Independent child stream identified by `id`.
    pub fn split(&self, id: u64) -> Self {
        Self::on_stream(self.seed, mix(self.stream, id))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position in the keystream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Rebuilds a generator at a recorded position.
    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut r = Self::on_stream(seed, stream);
        r.inner.set_word_pos(word_pos);
        r
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }
}

impl RngCore for FlowRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = FlowRng::new(7);
        let mut b = FlowRng::new(7);
        for _ in 0..10 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn split_streams_differ_and_leave_parent_untouched() {
        let parent = FlowRng::new(3);
        let mut c0 = parent.split(0);
        let mut c1 = parent.split(1);
        assert_ne!(c0.next_u64(), c1.next_u64());
        assert_eq!(parent.word_pos(), 0);
    }

    #[test]
    fn restore_resumes_position() {
        let mut a = FlowRng::new(11).split(5);
        for _ in 0..17 {
            a.uniform();
        }
        let mut b = FlowRng::restore(a.seed(), a.stream(), a.word_pos());
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
