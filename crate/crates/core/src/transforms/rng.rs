use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tag mixed into every random stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// DI draw of the global (full image) branch.
    GlobalDi,
    /// DI draw of the local (cropped) branch.
    LocalDi,
    /// Random crop of the local branch.
    Loc,
    Targets,
    EvalSubset,
    Shuffle,
    Init,
    Synthetic,
    Other(u32),
}

impl Branch {
    fn code(self) -> u64 {
        match self {
            Branch::GlobalDi => 1,
            Branch::LocalDi => 2,
            Branch::Loc => 3,
            Branch::Targets => 16,
            Branch::EvalSubset => 17,
            Branch::Shuffle => 18,
            Branch::Init => 19,
            Branch::Synthetic => 20,
            Branch::Other(v) => (1 << 32) | v as u64,
        }
    }
}

/// Identity of one random stream: equal keys replay identical draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub image: u64,
    pub iteration: u64,
    pub branch: Branch,
}

impl StreamKey {
    pub fn new(seed: u64, image: u64, iteration: u64, branch: Branch) -> Self {
        Self {
            seed,
            image,
            iteration,
            branch,
        }
    }

    pub fn with_branch(self, branch: Branch) -> Self {
        Self { branch, ..self }
    }
}

/// Deterministic random stream derived from a [`StreamKey`].
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(key: StreamKey) -> Self {
        let mut material = [0u8; 32];
        for (chunk, word) in material.chunks_exact_mut(8).zip([
            key.seed,
            key.image,
            key.iteration,
            key.branch.code(),
        ]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(material),
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
