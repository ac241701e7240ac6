//! Reproducible random streams.
//!
//! Every independent unit of work (replica, path, draw) gets its own ChaCha
//! stream keyed by `(master seed, stream index)`, so results do not depend on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(master_seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Mean and standard error (`sample std / sqrt(M)`) of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Estimate {
        let m = samples.len();
        if m == 0 {
            return Estimate {
                mean: f64::NAN,
                se: f64::NAN,
                count: 0,
            };
        }
        let mean = samples.iter().sum::<f64>() / m as f64;
        let se = if m > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, se, count: m }
    }

    /// `|mean - target| <= sigmas * se + slack`
    pub fn agrees_with(&self, target: f64, sigmas: f64, slack: f64) -> bool {
        (self.mean - target).abs() <= sigmas * self.se + slack
    }
}
