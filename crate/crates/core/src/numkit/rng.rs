use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::Matrix;
use crate::{Error, Result};

/// What a random stream is used for. Each purpose gets its own key space so
/// adding draws to one consumer never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    ModelInit,
    TrainData,
    TestData,
    Partition,
    Incongruity,
    LocalTrain,
    Selection,
    ModalityDrop,
    Test,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::ModelInit => 1,
            Purpose::TrainData => 2,
            Purpose::TestData => 3,
            Purpose::Partition => 4,
            Purpose::Incongruity => 5,
            Purpose::LocalTrain => 6,
            Purpose::Selection => 7,
            Purpose::ModalityDrop => 8,
            Purpose::Test => 99,
        }
    }
}

/// Stream identifier derived from `(purpose, client, round)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId(pub u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamId {
    pub fn new(purpose: Purpose, client: u64, round: u64) -> Self {
        let h = splitmix64(purpose.code());
        let h = splitmix64(h ^ client);
        StreamId(splitmix64(h ^ round.rotate_left(32)))
    }
}

/// Seeded ChaCha20 stream keyed by `(seed, stream id)`.
///
/// ChaCha's output is defined bit-for-bit, so the same key yields the same
/// sequence on every platform. Instances are single-owner.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: StreamId,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream.0);
        RngStream { seed, stream, rng }
    }

    pub fn keyed(seed: u64, purpose: Purpose, client: u64, round: u64) -> Self {
        RngStream::new(seed, StreamId::new(purpose, client, round))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> StreamId {
        self.stream
    }

    /// `rows × cols` matrix of i.i.d. normal draws.
    pub fn gaussian(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Matrix> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::param(format!(
                "gaussian needs finite mean and std >= 0, got mean={mean}, std={std}"
            )));
        }
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                mean + std * z
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Uniform `size`-subset of `universe` without replacement, returned in
    /// ascending order.
    pub fn subset(&mut self, universe: &[usize], size: usize) -> Result<Vec<usize>> {
        if size > universe.len() {
            return Err(Error::param(format!(
                "subset size {size} exceeds universe of {}",
                universe.len()
            )));
        }
        let picks = rand::seq::index::sample(&mut self.rng, universe.len(), size);
        let mut out: Vec<usize> = picks.into_iter().map(|k| universe[k]).collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Draw from Gamma(shape, 1).
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let dist = Gamma::new(shape, 1.0).map_err(|e| Error::param(format!("gamma shape {shape}: {e}")))?;
        Ok(dist.sample(&mut self.rng))
    }

    /// Dirichlet draw with a symmetric concentration over `k` outcomes.
    pub fn dirichlet(&mut self, alpha: f64, k: usize) -> Result<Vec<f64>> {
        if !(alpha > 0.0) {
            return Err(Error::param(format!("dirichlet alpha must be > 0, got {alpha}")));
        }
        let draws = (0..k).map(|_| self.gamma(alpha)).collect::<Result<Vec<_>>>()?;
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            // every gamma draw underflowed (tiny alpha); fall back to a one-hot draw
            let hot = self.rng.random_range(0..k);
            return Ok((0..k).map(|j| if j == hot { 1.0 } else { 0.0 }).collect());
        }
        Ok(draws.into_iter().map(|g| g / total).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_constant() {
        let mut rng = RngStream::keyed(1, Purpose::Test, 0, 0);
        let m = rng.gaussian(3, 4, 2.5, 0.0).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn negative_std_rejected() {
        let mut rng = RngStream::keyed(1, Purpose::Test, 0, 0);
        assert!(matches!(rng.gaussian(1, 1, 0.0, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn same_key_same_sequence() {
        let a = RngStream::keyed(42, Purpose::Test, 3, 5)
            .gaussian(4, 4, 0.0, 1.0)
            .unwrap();
        let b = RngStream::keyed(42, Purpose::Test, 3, 5)
            .gaussian(4, 4, 0.0, 1.0)
            .unwrap();
        let c = RngStream::keyed(42, Purpose::Test, 3, 6)
            .gaussian(4, 4, 0.0, 1.0)
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::keyed(9, Purpose::Test, 0, 0);
        let m = rng.gaussian(1, 100_000, 0.0, 1.0).unwrap();
        let n = m.len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn subset_edges() {
        let mut rng = RngStream::keyed(1, Purpose::Test, 0, 0);
        let u = vec![4, 8, 15, 16];
        assert_eq!(rng.subset(&u, 4).unwrap(), u);
        assert!(rng.subset(&u, 0).unwrap().is_empty());
        assert!(rng.subset(&u, 5).is_err());
    }

    #[test]
    fn subset_is_uniform() {
        let mut rng = RngStream::keyed(5, Purpose::Test, 0, 0);
        let mut freq = [0usize; 4];
        for _ in 0..10_000 {
            freq[rng.subset(&[0, 1, 2, 3], 1).unwrap()[0]] += 1;
        }
        for f in freq {
            assert!((2350..=2650).contains(&f), "{freq:?}");
        }
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut rng = RngStream::keyed(5, Purpose::Test, 0, 0);
        for alpha in [0.05, 1.0, 1e6] {
            let p = rng.dirichlet(alpha, 7).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
