//! Synthetic logits with a tunable accuracy and confidence level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::LogitsDataset;
use crate::error::{Error, Result};

/// Parameters of the Gaussian generator
/// `logits = g * (signal * onehot(y) + noise * z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Mean logit margin of the true class.
    pub signal: f64,
    /// Scale of the per-class Gaussian noise.
    pub noise: f64,
    /// Multiplier `g` on the final logits; above 1 the model is overconfident.
    pub overconfidence: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        for (name, v) in [
            ("signal", self.signal),
            ("noise", self.noise),
            ("overconfidence", self.overconfidence),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// I.i.d. rows from one seeded stream: the label first, then `K` noise draws.
pub fn generate(spec: &SynthSpec) -> Result<LogitsDataset> {
    spec.validate()?;
    let k = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = Vec::with_capacity(spec.n);
    let mut logits = Vec::with_capacity(spec.n * k);
    for _ in 0..spec.n {
        let y = rng.random_range(0..k);
        labels.push(y as u32);
        for j in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            let hot = if j == y { spec.signal } else { 0.0 };
            logits.push(spec.overconfidence * (hot + spec.noise * z));
        }
    }
    LogitsDataset::new(k, logits, labels)
}

/// Two datasets, the second drawn with `signal - shift`. The second stream
/// uses a seed derived from `spec.seed`, so the pair is deterministic.
pub fn generate_paired_shifted(spec: &SynthSpec, shift: f64) -> Result<(LogitsDataset, LogitsDataset)> {
    if !(shift.is_finite() && shift >= 0.0) {
        return Err(Error::Config(format!("shift must be non-negative, got {shift}")));
    }
    if shift >= spec.signal {
        return Err(Error::Config(format!(
            "shift {shift} must be below the signal {}",
            spec.signal
        )));
    }
    let first = generate(spec)?;
    let shifted = SynthSpec {
        signal: spec.signal - shift,
        seed: spec.seed ^ 0x9E37_79B9_7F4A_7C15,
        ..spec.clone()
    };
    Ok((first, generate(&shifted)?))
}
