//! Seeded random streams.
//!
//! Generator: ChaCha20 (`rand_chacha`), keyed by `seed_from_u64(seed)`.
//! Substreams use the ChaCha stream id, so substream `i` and substream `j`
//! never share keystream blocks for `i != j`. Gaussian draws use the ziggurat
//! sampler from `rand_distr::StandardNormal`; chi-square draws use
//! `rand_distr::Gamma`. Sequences are reproducible within one build.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub const GENERATOR: &str = "ChaCha20/seed_from_u64 + ziggurat normal";

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Independent stream for trajectory `index`, derived from the base seed.
    ///
    /// Index 0 is reserved for the base stream itself.
    pub fn substream(&self, index: u64) -> Self {
        Self::with_stream(self.seed, index.wrapping_add(1))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = StandardNormal.sample(&mut self.rng);
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Draw from chi-square with `dof` degrees of freedom, as Gamma(dof/2, 2).
    pub fn chi_square(&mut self, dof: f64) -> f64 {
        if dof <= 0.0 {
            return 0.0;
        }
        // shape > 0 and scale = 2 are always valid here
        let gamma = Gamma::new(0.5 * dof, 2.0).expect("valid gamma parameters");
        gamma.sample(&mut self.rng)
    }

    pub(crate) fn sampler_gamma(dof: f64) -> Option<Gamma<f64>> {
        if dof <= 0.0 {
            None
        } else {
            Gamma::new(0.5 * dof, 2.0).ok()
        }
    }

    pub(crate) fn sample<D: Distribution<f64>>(&mut self, dist: &D) -> f64 {
        dist.sample(&mut self.rng)
    }
}
