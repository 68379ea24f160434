use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Normal distribution truncated to `mean +- 2 std` by rejection.
#[derive(Clone, Copy, Debug)]
pub struct TruncatedNormal {
    pub std: f64,
}

impl TruncatedNormal {
    pub fn new(std: f64) -> Self {
        Self { std }
    }
}

impl Distribution<f64> for TruncatedNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                return z * self.std;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn samples_stay_within_two_sigma() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let d = TruncatedNormal::new(0.02);
        let xs: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        assert!(xs.iter().all(|x| x.abs() <= 0.04));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 1e-3);
    }
}
